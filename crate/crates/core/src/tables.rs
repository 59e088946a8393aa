//! Published reference tables, shipped as CSV.
//!
//! Compression tables: per split point the original and compressed feature
//! shapes, the byte counts of the 8-bit baseline and of the spike payload,
//! the compression ratio and the accuracy drop. Energy tables: per split
//! point the prefix GFLOPs, firing rate, and the printed energies and
//! ratios under the 45nm and ROLLS profiles.
//!
//! Printed numbers keep their number of decimals so comparisons can
//! account for display rounding.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::{Error, FeatureShape, Result};

const RESNET50_COMPRESSION: &str = include_str!("../data/tables/resnet50_compression.csv");
const MOBILENETV1_COMPRESSION: &str = include_str!("../data/tables/mobilenetv1_compression.csv");
const RESNET50_ENERGY: &str = include_str!("../data/tables/resnet50_energy.csv");
const MOBILENETV1_ENERGY: &str = include_str!("../data/tables/mobilenetv1_energy.csv");

/// A decimal number as printed, with its number of fractional digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Printed {
    pub value: f64,
    pub decimals: u32,
}

impl Printed {
    /// Half a unit in the last printed place.
    pub fn half_ulp(&self) -> f64 {
        0.5 * 10f64.powi(-(self.decimals as i32))
    }

    /// Whether `x` could have printed as this value.
    pub fn rounds_to(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.half_ulp() * (1.0 + 1e-9)
    }
}

impl FromStr for Printed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let value = s
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad number `{s}`: {e}")))?;
        let decimals = s.split_once('.').map_or(0, |(_, frac)| frac.len() as u32);
        Ok(Self { value, decimals })
    }
}

impl fmt::Display for Printed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.*}", self.decimals as usize, self.value)
    }
}

impl<'de> Deserialize<'de> for Printed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for Printed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

pub(crate) fn de_shape<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<FeatureShape, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

pub(crate) fn ser_shape<S: serde::Serializer>(v: &FeatureShape, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub split_point: usize,
    pub timesteps: usize,
    #[serde(deserialize_with = "de_shape", serialize_with = "ser_shape")]
    pub original: FeatureShape,
    #[serde(deserialize_with = "de_shape", serialize_with = "ser_shape")]
    pub compressed: FeatureShape,
    pub bottlenet_bytes: usize,
    pub spike_bytes: usize,
    pub compression_ratio: u64,
    /// Top-1 accuracy drop in percentage points.
    pub accuracy_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub split_point: usize,
    pub gflops: Printed,
    pub bottlenet_mj: Printed,
    pub spike_45nm_mj: Printed,
    pub ratio_45nm: Printed,
    pub firing_rate: Printed,
    pub gsyops: Printed,
    pub spike_rolls_mj: Printed,
    pub ratio_rolls: Printed,
}

/// Timesteps behind every published energy row.
pub const ENERGY_TABLE_TIMESTEPS: usize = 2;

fn read_rows<T: for<'de> Deserialize<'de>>(reader: impl Read) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("table"));
    }
    Ok(rows)
}

pub fn read_compression_csv(reader: impl Read) -> Result<Vec<CompressionRow>> {
    read_rows(reader)
}

pub fn read_energy_csv(reader: impl Read) -> Result<Vec<EnergyRow>> {
    read_rows(reader)
}

/// Published compression rows for a built-in architecture.
pub fn compression_table(arch: &str) -> Result<Vec<CompressionRow>> {
    match arch {
        "resnet50" => read_compression_csv(RESNET50_COMPRESSION.as_bytes()),
        "mobilenetv1" => read_compression_csv(MOBILENETV1_COMPRESSION.as_bytes()),
        _ => Err(Error::UnknownArch(format!("{arch} (no published table)"))),
    }
}

/// Published energy rows for a built-in architecture.
pub fn energy_table(arch: &str) -> Result<Vec<EnergyRow>> {
    match arch {
        "resnet50" => read_energy_csv(RESNET50_ENERGY.as_bytes()),
        "mobilenetv1" => read_energy_csv(MOBILENETV1_ENERGY.as_bytes()),
        _ => Err(Error::UnknownArch(format!("{arch} (no published table)"))),
    }
}

/// Raw CSV text of the published energy table (usable as a firing-rate file).
pub fn energy_table_csv(arch: &str) -> Result<&'static str> {
    match arch {
        "resnet50" => Ok(RESNET50_ENERGY),
        "mobilenetv1" => Ok(MOBILENETV1_ENERGY),
        _ => Err(Error::UnknownArch(format!("{arch} (no published table)"))),
    }
}

/// Raw CSV text of the published compression table.
pub fn compression_table_csv(arch: &str) -> Result<&'static str> {
    match arch {
        "resnet50" => Ok(RESNET50_COMPRESSION),
        "mobilenetv1" => Ok(MOBILENETV1_COMPRESSION),
        _ => Err(Error::UnknownArch(format!("{arch} (no published table)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts() {
        assert_eq!(compression_table("resnet50").unwrap().len(), 16);
        assert_eq!(compression_table("mobilenetv1").unwrap().len(), 13);
        assert_eq!(energy_table("resnet50").unwrap().len(), 16);
        assert_eq!(energy_table("mobilenetv1").unwrap().len(), 13);
        assert!(compression_table("toy").is_err());
    }

    #[test]
    fn printed_keeps_decimals() {
        let p: Printed = "0.030".parse().unwrap();
        assert_eq!(p.decimals, 3);
        assert_eq!(p.to_string(), "0.030");
        assert!(p.rounds_to(0.0304));
        assert!(!p.rounds_to(0.0306));
        assert_eq!("12".parse::<Printed>().unwrap().decimals, 0);
    }

    #[test]
    fn split_points_are_consecutive() {
        for arch in ["resnet50", "mobilenetv1"] {
            for (i, r) in compression_table(arch).unwrap().iter().enumerate() {
                assert_eq!(r.split_point, i + 1);
            }
            for (i, r) in energy_table(arch).unwrap().iter().enumerate() {
                assert_eq!(r.split_point, i + 1);
            }
        }
    }
}
