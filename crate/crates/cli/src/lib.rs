//! Command-line front end: table reports, planning, split inference over
//! TCP and toy training.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage, 3 infeasible plan,
//! 4 protocol error.

pub mod args;
mod table;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spikesplit_core::arch::{build_arch, ArchitectureSpec};
use spikesplit_core::bottleneck::{make_bottleneck, TransmissionReport};
use spikesplit_core::energy::{
    energy_from_inputs, measure_network_firing_rates, read_fr_csv, EnergyInputs, EnergyReport, FrSource,
    GflopsSource, ProfileSet,
};
use spikesplit_core::network::SpikingNetwork;
use spikesplit_core::planner::{plan_network, read_candidates_csv, CandidateConfig, PointSelection, SplitPlan};
use spikesplit_core::tables::{compression_table, energy_table};
use spikesplit_core::{arch::prefix_flops, FeatureShape, Shape5, Tensor};
use spikesplit_trainer::{accuracy_drop, train_two_step, Checkpoint, ToyTaskSpec, TrainError};
use spikesplit_wire::{edge_infer, resolve_endpoint, serve, Connection, SessionStats, WireError};

use args::{
    Cli, Command, CompressArgs, EnergyArgs, Format, InferArgs, NetworkArgs, PlanArgs, ServeArgs, TrainToyArgs,
};
use table::{num, write_table};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Infeasible(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Core(#[from] spikesplit_core::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spikesplit_core::Error as E;
        match self {
            Self::Usage(_)
            | Self::Core(E::UnknownArch(_) | E::UnknownProfile(_) | E::SplitOutOfRange { .. } | E::Bottleneck { .. }) => 2,
            Self::Train(TrainError::ArchMismatch { .. }) => 2,
            Self::Infeasible(_) => 3,
            Self::Wire(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let format = cli.format;
    match cli.command {
        Command::CompressReport(a) => cmd_compress_report(&a, format, out),
        Command::EnergyReport(a) => cmd_energy_report(&a, format, out),
        Command::Plan(a) => cmd_plan(&a, format, out),
        Command::Serve(a) => cmd_serve(&a, out),
        Command::Infer(a) => cmd_infer(&a, out),
        Command::TrainToy(a) => cmd_train_toy(&a, out),
    }
}

/// A built-in architecture name or a path to an architecture file.
pub fn resolve_arch(name: &str) -> Result<ArchitectureSpec> {
    match build_arch(name) {
        Ok(a) => Ok(a),
        Err(e) if Path::new(name).is_file() => {
            drop(e);
            Ok(ArchitectureSpec::load(name)?)
        }
        Err(e) => Err(e.into()),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

/// Writes `render(format)` to `out` and, when `path` is set, the CSV
/// rendering to that file.
fn emit(
    out: &mut dyn Write,
    format: Format,
    path: Option<&Path>,
    render: impl Fn(Format, &mut dyn Write) -> Result<()>,
) -> Result<()> {
    render(format, out)?;
    if let Some(p) = path {
        let mut f = io::BufWriter::new(File::create(p)?);
        render(Format::Csv, &mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn write_csv<T: Serialize>(out: &mut dyn Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform `[0, 1)` images, `(1, batch, C, H, W)`.
pub fn random_images(shape: FeatureShape, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new(1, batch, shape.c, shape.h, shape.w);
    let data = (0..s.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(s, data).expect("length matches shape")
}

// ---------------------------------------------------------------- compress

#[derive(Debug, Deserialize)]
struct ConfigRow {
    split_point: usize,
    #[serde(default)]
    original: Option<String>,
    compressed: String,
}

/// `(split, compressed)` pairs from a CSV file, or the published ones.
fn compression_configs(arch: &ArchitectureSpec, path: Option<&Path>) -> Result<Vec<(usize, FeatureShape)>> {
    let Some(path) = path else {
        return Ok(compression_table(&arch.name)?
            .into_iter()
            .map(|r| (r.split_point, r.compressed))
            .collect());
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let mut configs = Vec::new();
    for row in rdr.deserialize::<ConfigRow>() {
        let row = row?;
        let compressed: FeatureShape = row.compressed.parse()?;
        if let Some(orig) = row.original {
            let orig: FeatureShape = orig.parse()?;
            let actual = arch.split_shape(row.split_point)?;
            if orig != actual {
                return Err(CliError::Usage(format!(
                    "split {}: file says {orig}, {} produces {actual}",
                    row.split_point, arch.name
                )));
            }
        }
        configs.push((row.split_point, compressed));
    }
    Ok(configs)
}

pub fn compress_report(
    arch: &ArchitectureSpec,
    configs: &[(usize, FeatureShape)],
    timesteps: usize,
) -> Result<Vec<TransmissionReport>> {
    configs
        .iter()
        .map(|&(split, compressed)| {
            let cfg = make_bottleneck(arch.split_shape(split)?, compressed, timesteps)?;
            Ok(TransmissionReport::new(split, &cfg))
        })
        .collect()
}

fn cmd_compress_report(a: &CompressArgs, format: Format, out: &mut dyn Write) -> Result<()> {
    let arch = resolve_arch(&a.arch)?;
    let rows = compress_report(&arch, &compression_configs(&arch, a.candidates.as_deref())?, a.timesteps)?;
    emit(out, format, a.out.as_deref(), |f, w| match f {
        Format::Csv => write_csv(w, &rows),
        Format::Text => {
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.split_point.to_string(),
                        r.original.clone(),
                        r.compressed.clone(),
                        r.baseline_payload_bytes.to_string(),
                        r.spike_payload_bytes.to_string(),
                        r.compression_ratio.to_string(),
                    ]
                })
                .collect();
            writeln!(w, "{} compression, T={}", arch.name, a.timesteps)?;
            write_table(w, &["split", "original", "compressed", "baseline_B", "spike_B", "ratio"], &body)?;
            Ok(())
        }
    })
}

// ------------------------------------------------------------------ energy

/// Where firing rates (and possibly GFLOPs) come from.
#[derive(Debug, Clone)]
pub enum FrInput<'a> {
    /// Published GFLOPs and firing rates of the architecture.
    Table,
    File(&'a Path),
    Measure { seed: u64, images: usize },
}

/// Firing rate of every split point of a random network calibrated and
/// evaluated on seeded random images.
pub fn measure_firing_rates(arch: &ArchitectureSpec, timesteps: usize, seed: u64, images: usize) -> Result<Vec<f64>> {
    let mut net = SpikingNetwork::<f32>::init(arch, timesteps, seed)?;
    net.calibrate(&random_images(arch.input_shape, images.max(1), seed ^ 0xca11))?;
    Ok(measure_network_firing_rates(&net, &random_images(arch.input_shape, images.max(1), seed ^ 0xe7a1))?)
}

pub fn energy_rows(
    arch: &ArchitectureSpec,
    input: FrInput<'_>,
    profiles: &ProfileSet,
    names: &[&str],
    timesteps: usize,
) -> Result<Vec<EnergyReport>> {
    let computed = |split: usize| -> Result<f64> { Ok(prefix_flops(arch, split)? as f64 / 1e9) };
    let inputs: Vec<EnergyInputs> = match input {
        FrInput::Table => energy_table(&arch.name)?
            .into_iter()
            .map(|r| EnergyInputs {
                split_point: r.split_point,
                gflops: r.gflops.value,
                gflops_source: GflopsSource::Table,
                firing_rate: r.firing_rate.value,
                fr_source: FrSource::Supplied,
                timesteps,
            })
            .collect(),
        FrInput::File(path) => read_fr_csv(open(path)?)?
            .into_iter()
            .map(|r| {
                let (gflops, gflops_source) = match r.gflops {
                    Some(g) => (g.value, GflopsSource::Table),
                    None => (computed(r.split_point)?, GflopsSource::Computed),
                };
                Ok(EnergyInputs {
                    split_point: r.split_point,
                    gflops,
                    gflops_source,
                    firing_rate: r.firing_rate,
                    fr_source: FrSource::Supplied,
                    timesteps,
                })
            })
            .collect::<Result<_>>()?,
        FrInput::Measure { seed, images } => measure_firing_rates(arch, timesteps, seed, images)?
            .into_iter()
            .enumerate()
            .map(|(i, fr)| {
                Ok(EnergyInputs {
                    split_point: i + 1,
                    gflops: computed(i + 1)?,
                    gflops_source: GflopsSource::Computed,
                    firing_rate: fr,
                    fr_source: FrSource::Measured,
                    timesteps,
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    for i in &inputs {
        arch.check_split(i.split_point)?;
        rows.extend(energy_from_inputs(i, profiles, names)?);
    }
    Ok(rows)
}

fn load_profiles(path: Option<&Path>) -> Result<ProfileSet> {
    Ok(match path {
        Some(p) => ProfileSet::load(p)?,
        None => ProfileSet::builtin(),
    })
}

fn cmd_energy_report(a: &EnergyArgs, format: Format, out: &mut dyn Write) -> Result<()> {
    let arch = resolve_arch(&a.arch)?;
    let profiles = load_profiles(a.profiles_file.as_deref())?;
    let names: Vec<&str> = if a.profile.is_empty() {
        profiles.names()
    } else {
        a.profile.iter().map(String::as_str).collect()
    };
    let input = match (&a.fr_file, a.measure) {
        (Some(p), _) => FrInput::File(p),
        (None, true) => FrInput::Measure {
            seed: a.seed,
            images: a.images,
        },
        (None, false) => FrInput::Table,
    };
    let rows = energy_rows(&arch, input, &profiles, &names, a.timesteps)?;
    emit(out, format, a.out.as_deref(), |f, w| match f {
        Format::Csv => write_csv(w, &rows),
        Format::Text => {
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.split_point.to_string(),
                        r.profile.clone(),
                        format!("{} ({})", num(r.gflops, 3), r.gflops_source),
                        format!("{} ({})", num(r.firing_rate, 4), r.fr_source),
                        num(r.gsyops, 4),
                        num(r.e_baseline_mj, 4),
                        num(r.e_spike_mj, 5),
                        num(r.ratio, 2),
                    ]
                })
                .collect();
            writeln!(w, "{} edge energy, T={}", arch.name, a.timesteps)?;
            write_table(
                w,
                &["split", "profile", "GFLOPs", "firing_rate", "GSyOPs", "baseline_mJ", "spike_mJ", "ratio"],
                &body,
            )?;
            Ok(())
        }
    })
}

// -------------------------------------------------------------------- plan

/// Published configurations with their edge energy under `profile`, from
/// the published GFLOPs and firing rates.
pub fn published_candidates(arch: &ArchitectureSpec, profiles: &ProfileSet, profile: &str) -> Result<Vec<CandidateConfig>> {
    let energy = energy_rows(arch, FrInput::Table, profiles, &[profile], spikesplit_core::tables::ENERGY_TABLE_TIMESTEPS)?;
    Ok(compression_table(&arch.name)?
        .iter()
        .map(|row| {
            let mut c = CandidateConfig::from_row(row);
            c.edge_energy_mj = energy.iter().find(|e| e.split_point == row.split_point).map(|e| e.e_spike_mj);
            c
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub split_point: usize,
    /// `chosen` or `infeasible`.
    pub status: String,
    pub compressed: Option<String>,
    pub compression_ratio: Option<u64>,
    /// The chosen candidate's drop, or the smallest drop seen when infeasible.
    pub accuracy_drop: f64,
    pub spike_bytes: Option<usize>,
    pub edge_energy_mj: Option<f64>,
    pub best: bool,
}

pub fn plan_rows(plan: &SplitPlan) -> Vec<PlanRow> {
    plan.points
        .iter()
        .map(|p| match p {
            PointSelection::Chosen(c) => PlanRow {
                split_point: c.split_point,
                status: "chosen".into(),
                compressed: Some(c.compressed.to_string()),
                compression_ratio: Some(c.compression_ratio),
                accuracy_drop: c.accuracy_drop,
                spike_bytes: Some(c.spike_bytes),
                edge_energy_mj: c.edge_energy_mj,
                best: plan.best.as_ref() == Some(c),
            },
            PointSelection::Infeasible {
                split_point, best_drop, ..
            } => PlanRow {
                split_point: *split_point,
                status: "infeasible".into(),
                compressed: None,
                compression_ratio: None,
                accuracy_drop: *best_drop,
                spike_bytes: None,
                edge_energy_mj: None,
                best: false,
            },
        })
        .collect()
}

pub fn plan_for(a: &PlanArgs) -> Result<SplitPlan> {
    let arch = resolve_arch(&a.arch)?;
    let candidates = match &a.candidates {
        Some(p) => read_candidates_csv(open(p)?)?,
        None => {
            let profiles = ProfileSet::builtin();
            let profile = a.profile.clone().unwrap_or_else(|| profiles.baseline.clone());
            published_candidates(&arch, &profiles, &profile)?
        }
    };
    for c in &candidates {
        arch.check_split(c.split_point)?;
    }
    if !(a.max_drop >= 0.0) {
        return Err(CliError::Usage(format!("--max-drop {} must be >= 0", a.max_drop)));
    }
    Ok(plan_network(&candidates, a.max_drop, a.objective)?)
}

fn cmd_plan(a: &PlanArgs, format: Format, out: &mut dyn Write) -> Result<()> {
    let plan = plan_for(a)?;
    let rows = plan_rows(&plan);
    emit(out, format, a.out.as_deref(), |f, w| match f {
        Format::Csv => write_csv(w, &rows),
        Format::Text => {
            let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.split_point.to_string(),
                        r.status.clone(),
                        opt(r.compressed.clone()),
                        opt(r.compression_ratio.map(|v| v.to_string())),
                        num(r.accuracy_drop, 2),
                        opt(r.spike_bytes.map(|v| v.to_string())),
                        opt(r.edge_energy_mj.map(|v| num(v, 4))),
                        if r.best { "*".into() } else { String::new() },
                    ]
                })
                .collect();
            writeln!(w, "{} plan, objective {}, max drop {}%", a.arch, plan.objective, plan.max_drop)?;
            write_table(
                w,
                &["split", "status", "compressed", "ratio", "drop%", "spike_B", "edge_mJ", "best"],
                &body,
            )?;
            if let Some(b) = &plan.best {
                writeln!(
                    w,
                    "best: split {} compressed {} ratio {} drop {}%",
                    b.split_point, b.compressed, b.compression_ratio, b.accuracy_drop
                )?;
            }
            for d in &plan.diagnostics {
                writeln!(w, "note: {d}")?;
            }
            Ok(())
        }
    })?;
    if !plan.is_feasible() {
        return Err(CliError::Infeasible(format!(
            "no split point meets a {}% accuracy budget",
            plan.max_drop
        )));
    }
    Ok(())
}

// ---------------------------------------------------------- serve / infer

/// The network both halves agree on: a checkpoint, or random weights with
/// tdBN statistics calibrated on seeded random images.
pub fn build_network(a: &NetworkArgs) -> Result<SpikingNetwork<f32>> {
    let arch = resolve_arch(&a.arch)?;
    if let Some(path) = &a.checkpoint {
        let net = Checkpoint::load(path)?.to_network::<f32>(&arch)?;
        if let Some(shape) = a.compressed {
            let found = net.bottleneck.as_ref().map(|(s, b)| (*s, b.config.out_shape));
            if found != Some((a.split.unwrap_or(0), shape)) {
                return Err(CliError::Usage(format!(
                    "checkpoint bottleneck {found:?} differs from --split/--compressed"
                )));
            }
        }
        return Ok(net);
    }
    let mut net = SpikingNetwork::<f32>::init(&arch, a.timesteps, a.seed)?;
    if let (Some(split), Some(shape)) = (a.split, a.compressed) {
        net.insert_bottleneck(split, shape, a.seed.wrapping_add(1))?;
    }
    net.calibrate(&random_images(arch.input_shape, 2, a.seed ^ 0xca11))?;
    Ok(net)
}

fn cmd_serve(a: &ServeArgs, out: &mut dyn Write) -> Result<()> {
    let net = build_network(&a.net)?;
    let endpoint = resolve_endpoint(a.endpoint.as_deref());
    let handle = serve(Arc::new(net), &endpoint)?;
    writeln!(out, "listening on {}", handle.local_addr())?;
    out.flush()?;
    handle.wait();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub local: Vec<f32>,
    pub remote: Vec<f32>,
    pub stats: SessionStats,
}

impl InferOutcome {
    pub fn bit_exact(&self) -> bool {
        self.local.len() == self.remote.len() && self.local.iter().zip(&self.remote).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Local monolithic logits against edge/server logits, image by image.
pub fn infer(net: &SpikingNetwork<f32>, split: usize, images: &Tensor<f32>, conn: &mut Connection) -> Result<InferOutcome> {
    let s = images.shape();
    let (mut local, mut remote) = (Vec::new(), Vec::new());
    for b in 0..s.b {
        let one = Tensor::from_vec(Shape5::new(1, 1, s.c, s.h, s.w), images.frame(0, b).to_vec())?;
        local.extend(net.forward(&one)?);
        remote.extend(edge_infer(&one, net, split, conn)?);
    }
    Ok(InferOutcome {
        local,
        remote,
        stats: conn.stats,
    })
}

fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let split = a
        .net
        .split
        .ok_or_else(|| CliError::Usage("infer needs --split".into()))?;
    let net = build_network(&a.net)?;
    net.arch.check_split(split)?;
    let images = random_images(net.arch.input_shape, a.batch.max(1), a.image_seed);
    let net = Arc::new(net);
    let (outcome, server) = if a.loopback {
        let server = serve(Arc::clone(&net), "127.0.0.1:0")?;
        let mut conn = Connection::connect(server.local_addr())?;
        (infer(&net, split, &images, &mut conn)?, Some(server))
    } else {
        let mut conn = Connection::connect(resolve_endpoint(a.endpoint.as_deref()))?;
        (infer(&net, split, &images, &mut conn)?, None)
    };
    if let Some(s) = server {
        s.shutdown();
    }
    let classes = net.arch.classes;
    for (b, (l, r)) in outcome.local.chunks(classes).zip(outcome.remote.chunks(classes)).enumerate() {
        writeln!(out, "image {b} local  {l:?}")?;
        writeln!(out, "image {b} remote {r:?}")?;
    }
    let st = outcome.stats;
    writeln!(
        out,
        "frames {} payload_bytes {} header_bytes {} round_trips {}",
        st.frames_sent, st.payload_bytes_total, st.header_overhead_bytes, st.round_trips
    )?;
    if !outcome.bit_exact() {
        return Err(CliError::Mismatch("split inference differs from local inference".into()));
    }
    writeln!(out, "split inference matches local inference bit-exactly")?;
    Ok(())
}

// --------------------------------------------------------------- train-toy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn cmd_train_toy(a: &TrainToyArgs, out: &mut dyn Write) -> Result<()> {
    let arch = build_arch("toy")?;
    let task = ToyTaskSpec {
        data_seed: a.data_seed,
        init_seed: a.seed,
        timesteps: a.timesteps,
        epochs: a.epochs,
        finetune_epochs: a.finetune_epochs,
        ..ToyTaskSpec::default()
    };
    let compressed = match a.compressed {
        Some(s) => s,
        None => arch.split_shape(a.split)?,
    };
    let data = task.dataset();
    let base = SpikingNetwork::<f32>::init(&arch, task.timesteps, task.init_seed)?;
    let report = train_two_step(base, a.split, compressed, &task, &data)?;

    std::fs::create_dir_all(&a.out)?;
    report.step1_checkpoint.save(a.out.join("step1.ckpt"))?;
    report.checkpoint.save(a.out.join("model.ckpt"))?;
    let metrics: Vec<MetricsRow> = report
        .step1
        .iter()
        .chain(&report.step2)
        .map(|m| MetricsRow {
            step: m.step,
            epoch: m.epoch,
            lr: m.lr,
            loss: m.loss,
            train_accuracy: m.train_accuracy,
        })
        .collect();
    write_csv(&mut File::create(a.out.join("metrics.csv"))?, &metrics)?;

    let ratio = spikesplit_core::bottleneck::compression_ratio(arch.split_shape(a.split)?, compressed);
    writeln!(out, "step 1: {:.2}% after {} epochs", report.step1_accuracy, task.epochs)?;
    writeln!(
        out,
        "step 2: {:.2}% with bottleneck {} at split {} (ratio {ratio}), drop {:.2} points",
        report.final_accuracy,
        compressed,
        a.split,
        accuracy_drop(report.step1_accuracy, report.final_accuracy)
    )?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}
