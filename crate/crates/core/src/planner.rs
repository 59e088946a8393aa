//! Split-point and bottleneck selection under an accuracy-drop budget.
//!
//! Per split point, the feasible candidate (drop within budget) with the
//! highest compression ratio wins; ties go to lower edge energy, then fewer
//! spike payload bytes. Points with no feasible candidate are reported as
//! such rather than failing the whole plan.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tables::{de_shape, ser_shape, CompressionRow};
use crate::{Error, FeatureShape, Result};

/// Budget used when none is given, in percentage points.
pub const DEFAULT_MAX_DROP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub split_point: usize,
    pub timesteps: usize,
    #[serde(deserialize_with = "de_shape", serialize_with = "ser_shape")]
    pub original: FeatureShape,
    #[serde(deserialize_with = "de_shape", serialize_with = "ser_shape")]
    pub compressed: FeatureShape,
    pub spike_bytes: usize,
    pub compression_ratio: u64,
    /// Percentage points.
    pub accuracy_drop: f64,
    /// Edge compute energy in mJ, when known.
    #[serde(default)]
    pub edge_energy_mj: Option<f64>,
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.accuracy_drop >= 0.0 && self.accuracy_drop.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "split {}: accuracy drop {} must be >= 0",
                self.split_point, self.accuracy_drop
            )));
        }
        if self.compression_ratio < 1 {
            return Err(Error::OutOfRange(format!("split {}: compression ratio must be >= 1", self.split_point)));
        }
        if self.edge_energy_mj.is_some_and(|e| !(e >= 0.0)) {
            return Err(Error::OutOfRange(format!("split {}: negative edge energy", self.split_point)));
        }
        Ok(())
    }

    pub fn from_row(row: &CompressionRow) -> Self {
        Self {
            split_point: row.split_point,
            timesteps: row.timesteps,
            original: row.original,
            compressed: row.compressed,
            spike_bytes: row.spike_bytes,
            compression_ratio: row.compression_ratio,
            accuracy_drop: row.accuracy_drop,
            edge_energy_mj: None,
        }
    }

    fn energy(&self) -> f64 {
        self.edge_energy_mj.unwrap_or(f64::INFINITY)
    }

    /// Total order over everything identifying a candidate, so that selection
    /// never depends on input order.
    fn identity_cmp(&self, other: &Self) -> Ordering {
        self.split_point
            .cmp(&other.split_point)
            .then(self.compressed.cmp(&other.compressed))
            .then(self.timesteps.cmp(&other.timesteps))
            .then(self.original.cmp(&other.original))
            .then(self.accuracy_drop.total_cmp(&other.accuracy_drop))
    }
}

/// `Less` means `a` is preferred at a split point.
fn point_preference(a: &CandidateConfig, b: &CandidateConfig) -> Ordering {
    b.compression_ratio
        .cmp(&a.compression_ratio)
        .then(a.energy().total_cmp(&b.energy()))
        .then(a.spike_bytes.cmp(&b.spike_bytes))
        .then_with(|| a.identity_cmp(b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum PointSelection {
    Chosen(CandidateConfig),
    Infeasible {
        split_point: usize,
        candidates: usize,
        /// Smallest drop seen at this point.
        best_drop: f64,
    },
}

impl PointSelection {
    pub fn split_point(&self) -> usize {
        match self {
            Self::Chosen(c) => c.split_point,
            Self::Infeasible { split_point, .. } => *split_point,
        }
    }

    pub fn chosen(&self) -> Option<&CandidateConfig> {
        match self {
            Self::Chosen(c) => Some(c),
            Self::Infeasible { .. } => None,
        }
    }
}

/// Picks one candidate among those sharing a split point.
pub fn select_per_point(candidates: &[CandidateConfig], max_drop: f64) -> Result<PointSelection> {
    let first = candidates.first().ok_or(Error::Empty("candidate list"))?;
    if candidates.iter().any(|c| c.split_point != first.split_point) {
        return Err(Error::Config("candidates span several split points".into()));
    }
    for c in candidates {
        c.validate()?;
    }
    let best = candidates
        .iter()
        .filter(|c| c.accuracy_drop <= max_drop)
        .min_by(|a, b| point_preference(a, b));
    Ok(match best {
        Some(c) => PointSelection::Chosen(c.clone()),
        None => PointSelection::Infeasible {
            split_point: first.split_point,
            candidates: candidates.len(),
            best_drop: candidates.iter().map(|c| c.accuracy_drop).fold(f64::INFINITY, f64::min),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaxRatio,
    MinEnergy,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "max_ratio" => Ok(Self::MaxRatio),
            "min_energy" => Ok(Self::MinEnergy),
            _ => Err(Error::Config(format!("unknown objective `{s}` (max_ratio | min_energy)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaxRatio => "max_ratio",
            Self::MinEnergy => "min_energy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitPlan {
    pub objective: Objective,
    pub max_drop: f64,
    /// Ordered by split point.
    pub points: Vec<PointSelection>,
    pub best: Option<CandidateConfig>,
    pub diagnostics: Vec<String>,
}

impl SplitPlan {
    pub fn is_feasible(&self) -> bool {
        self.best.is_some()
    }
}

fn global_preference(objective: Objective, a: &CandidateConfig, b: &CandidateConfig) -> Ordering {
    match objective {
        Objective::MaxRatio => point_preference(a, b),
        Objective::MinEnergy => a
            .energy()
            .total_cmp(&b.energy())
            .then(b.compression_ratio.cmp(&a.compression_ratio))
            .then(a.spike_bytes.cmp(&b.spike_bytes))
            .then_with(|| a.identity_cmp(b)),
    }
}

/// Per-point selections plus the global pick.
pub fn plan_network(candidates: &[CandidateConfig], max_drop: f64, objective: Objective) -> Result<SplitPlan> {
    if !(max_drop >= 0.0) {
        return Err(Error::OutOfRange(format!("max drop {max_drop} must be >= 0")));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut groups: BTreeMap<usize, Vec<CandidateConfig>> = BTreeMap::new();
    for c in candidates {
        groups.entry(c.split_point).or_default().push(c.clone());
    }
    let points = groups
        .values()
        .map(|g| select_per_point(g, max_drop))
        .collect::<Result<Vec<_>>>()?;
    let mut diagnostics: Vec<String> = points
        .iter()
        .filter_map(|p| match p {
            PointSelection::Infeasible {
                split_point, best_drop, ..
            } => Some(format!(
                "split {split_point}: infeasible, best drop {best_drop:.2}% exceeds {max_drop:.2}%"
            )),
            PointSelection::Chosen(_) => None,
        })
        .collect();
    let chosen: Vec<&CandidateConfig> = points.iter().filter_map(PointSelection::chosen).collect();
    if objective == Objective::MinEnergy {
        for c in chosen.iter().filter(|c| c.edge_energy_mj.is_none()) {
            diagnostics.push(format!("split {}: no edge energy, ranked last", c.split_point));
        }
    }
    let best = chosen
        .into_iter()
        .min_by(|a, b| global_preference(objective, a, b))
        .cloned();
    if best.is_none() {
        diagnostics.push("no split point satisfies the accuracy budget".into());
    }
    Ok(SplitPlan {
        objective,
        max_drop,
        points,
        best,
        diagnostics,
    })
}

/// Reads candidates from CSV. Columns follow the compression tables
/// (`split_point,timesteps,original,compressed,...,spike_bytes,
/// compression_ratio,accuracy_drop`); `edge_energy_mj` is optional and
/// other columns are ignored.
pub fn read_candidates_csv(reader: impl Read) -> Result<Vec<CandidateConfig>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<CandidateConfig>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("candidate file"));
    }
    for r in &rows {
        r.validate()?;
    }
    Ok(rows)
}
