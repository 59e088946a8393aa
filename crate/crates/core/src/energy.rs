//! Firing rates, synaptic-operation counts and compute-energy estimates.
//!
//! The non-spiking baseline costs one MAC per FLOP; the spiking network
//! costs one accumulate per synaptic operation, `SyOPs = fr * T * FLOPs`.

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{prefix_flops, ArchitectureSpec};
use crate::network::{LayerRecord, SpikingNetwork};
use crate::spike::SpikeTensor;
use crate::tables::Printed;
use crate::{Error, Real, Result, Tensor};

const PROFILES: &str = include_str!("../data/profiles.toml");

/// Per-operation energies in joules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    /// Absent on accumulate-only hardware.
    #[serde(default)]
    pub e_mac: Option<f64>,
    pub e_ac: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64| e.is_finite() && e > 0.0;
        if !ok(self.e_ac) || !self.e_mac.map_or(true, ok) {
            return Err(Error::Config(format!("profile `{}`: energies must be > 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    pub baseline: String,
    #[serde(rename = "profile")]
    pub profiles: Vec<HardwareProfile>,
}

impl ProfileSet {
    pub fn builtin() -> Self {
        Self::from_toml(PROFILES).expect("shipped profiles parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let set: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if set.profiles.is_empty() {
            return Err(Error::Empty("profiles"));
        }
        for p in &set.profiles {
            p.validate()?;
        }
        if set.get(&set.baseline)?.e_mac.is_none() {
            return Err(Error::Config(format!("baseline profile `{}` has no e_mac", set.baseline)));
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Case-insensitive lookup.
    pub fn get(&self, name: &str) -> Result<&HardwareProfile> {
        self.profiles
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownProfile(name.to_string()))
    }

    /// MAC energy pricing the baseline.
    pub fn baseline_e_mac(&self) -> f64 {
        self.get(&self.baseline)
            .ok()
            .and_then(|p| p.e_mac)
            .expect("validated at construction")
    }

    pub fn names(&self) -> Vec<&str> {
        self.profiles.iter().map(|p| p.name.as_str()).collect()
    }
}

/// Average over layers of each layer's mean spike probability.
pub fn measure_firing_rate(records: &[SpikeTensor]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("spike records"));
    }
    Ok(records.iter().map(SpikeTensor::mean).sum::<f64>() / records.len() as f64)
}

/// Firing rate of the LIF populations in the stem and blocks `1..=split`.
pub fn firing_rate_before_split(records: &[LayerRecord], split: usize) -> Result<f64> {
    let spikes: Vec<SpikeTensor> = records
        .iter()
        .filter(|r| r.block <= split)
        .map(|r| r.spikes.clone())
        .collect();
    measure_firing_rate(&spikes)
}

/// Runs `images` through `net` and measures the firing rate before every
/// split point; entry `k - 1` belongs to split `k`.
pub fn measure_network_firing_rates<F: Real>(net: &SpikingNetwork<F>, images: &Tensor<F>) -> Result<Vec<f64>> {
    let (_, records) = net.forward_recorded(images, true)?;
    (1..=net.arch.num_splits())
        .map(|s| firing_rate_before_split(&records, s))
        .collect()
}

pub fn syops(fr: f64, timesteps: usize, flops: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fr) {
        return Err(Error::OutOfRange(format!("firing rate {fr} outside [0, 1]")));
    }
    if timesteps == 0 {
        return Err(Error::OutOfRange("timesteps must be >= 1".into()));
    }
    if !(flops >= 0.0 && flops.is_finite()) {
        return Err(Error::OutOfRange(format!("FLOPs {flops} must be finite and >= 0")));
    }
    Ok(fr * timesteps as f64 * flops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GflopsSource {
    /// Taken from a published table.
    Table,
    /// Counted from the architecture specification.
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrSource {
    Measured,
    Supplied,
}

impl fmt::Display for GflopsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table => "table",
            Self::Computed => "computed",
        })
    }
}

impl fmt::Display for FrSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Measured => "measured",
            Self::Supplied => "supplied",
        })
    }
}

/// Edge compute energy at one split point under one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub split_point: usize,
    pub profile: String,
    pub gflops: f64,
    pub gflops_source: GflopsSource,
    pub firing_rate: f64,
    pub fr_source: FrSource,
    pub timesteps: usize,
    pub gsyops: f64,
    pub e_baseline_mj: f64,
    pub e_spike_mj: f64,
    /// `e_baseline / e_spike`; infinite when the spiking side fires nothing.
    pub ratio: f64,
}

/// Firing-rate source plus the GFLOPs to price at one split point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyInputs {
    pub split_point: usize,
    pub gflops: f64,
    pub gflops_source: GflopsSource,
    pub firing_rate: f64,
    pub fr_source: FrSource,
    pub timesteps: usize,
}

/// One report per requested profile.
pub fn energy_from_inputs(inputs: &EnergyInputs, profiles: &ProfileSet, names: &[&str]) -> Result<Vec<EnergyReport>> {
    let gsyops = syops(inputs.firing_rate, inputs.timesteps, inputs.gflops)?;
    // GFLOPs * 1e9 ops * J/op * 1e3 mJ/J
    let e_baseline_mj = inputs.gflops * profiles.baseline_e_mac() * 1e12;
    names
        .iter()
        .map(|name| {
            let p = profiles.get(name)?;
            let e_spike_mj = gsyops * p.e_ac * 1e12;
            let ratio = if e_spike_mj > 0.0 {
                e_baseline_mj / e_spike_mj
            } else {
                f64::INFINITY
            };
            Ok(EnergyReport {
                split_point: inputs.split_point,
                profile: p.name.clone(),
                gflops: inputs.gflops,
                gflops_source: inputs.gflops_source,
                firing_rate: inputs.firing_rate,
                fr_source: inputs.fr_source,
                timesteps: inputs.timesteps,
                gsyops,
                e_baseline_mj,
                e_spike_mj,
                ratio,
            })
        })
        .collect()
}

/// Reports for `split` of `arch` with GFLOPs counted from the specification.
pub fn energy_report(
    arch: &ArchitectureSpec,
    split: usize,
    fr: f64,
    fr_source: FrSource,
    timesteps: usize,
    profiles: &ProfileSet,
    names: &[&str],
) -> Result<Vec<EnergyReport>> {
    let inputs = EnergyInputs {
        split_point: split,
        gflops: prefix_flops(arch, split)? as f64 / 1e9,
        gflops_source: GflopsSource::Computed,
        firing_rate: fr,
        fr_source,
        timesteps,
    };
    energy_from_inputs(&inputs, profiles, names)
}

/// One row of a firing-rate file. A `gflops` column, when present,
/// overrides the counted prefix FLOPs.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FrRow {
    pub split_point: usize,
    pub firing_rate: f64,
    #[serde(default)]
    pub gflops: Option<Printed>,
}

/// Reads a CSV with at least `split_point,firing_rate` columns; extra
/// columns are ignored, so the published energy tables load as-is.
pub fn read_fr_csv(reader: impl Read) -> Result<Vec<FrRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<FrRow>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("firing-rate file"));
    }
    for r in &rows {
        if !(0.0..=1.0).contains(&r.firing_rate) {
            return Err(Error::OutOfRange(format!(
                "split {}: firing rate {} outside [0, 1]",
                r.split_point, r.firing_rate
            )));
        }
    }
    Ok(rows)
}
