use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use spikesplit_cli::PlanRow;
use spikesplit_core::bottleneck::TransmissionReport;
use spikesplit_core::energy::EnergyReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spikesplit"));
    c.env_remove("SPIKESPLIT_ENDPOINT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct KillOnDrop(std::process::Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Vec<T> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn compress_report_csv_parses_and_scales_with_timesteps() {
    let t2 = run(&["compress-report", "--arch", "mobilenetv1", "--format", "csv"]);
    let t8 = run(&["compress-report", "--arch", "mobilenetv1", "--timesteps", "8", "--format", "csv"]);
    assert!(t2.status.success() && t8.status.success());
    let (a, b): (Vec<TransmissionReport>, Vec<TransmissionReport>) = (parse(&stdout(&t2)), parse(&stdout(&t8)));
    assert_eq!(a.len(), 13);
    let last = a.last().unwrap();
    assert_eq!((last.baseline_payload_bytes, last.spike_payload_bytes, last.compression_ratio), (288, 72, 174));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(y.spike_payload_bytes, 4 * x.spike_payload_bytes);
        assert_eq!(y.compression_ratio, x.compression_ratio);
        assert_eq!(y.baseline_payload_bytes, x.baseline_payload_bytes);
    }
}

#[test]
fn compress_report_text_lists_every_split() {
    let o = run(&["compress-report", "--arch", "resnet50"]);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2 + 16);
    assert!(text.lines().last().unwrap().split_whitespace().eq(["16", "2048x4x4", "8x4x4", "128", "32", "256"]));
}

#[test]
fn unknown_architecture_and_flags_are_usage_errors() {
    let o = run(&["compress-report", "--arch", "vgg16"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vgg16"));
    assert_eq!(run(&["plan", "--arch", "resnet50", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["infer", "--arch", "toy", "--loopback"]).status.code(), Some(2));
}

#[test]
fn energy_report_from_published_rates() {
    let o = run(&["energy-report", "--arch", "mobilenetv1", "--profile", "rolls", "--format", "csv"]);
    assert!(o.status.success());
    let rows: Vec<EnergyReport> = parse(&stdout(&o));
    assert_eq!(rows.len(), 13);
    assert!((rows[0].ratio - 131.88).abs() / 131.88 < 0.02, "{}", rows[0].ratio);
    assert!((rows[12].ratio - 102.37).abs() / 102.37 < 0.02, "{}", rows[12].ratio);
}

#[test]
fn energy_report_with_fr_file() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = dir.path().join("zeros.csv");
    std::fs::write(&zeros, "split_point,firing_rate\n1,0\n2,0.0\n").unwrap();
    let o = run(&["energy-report", "--arch", "resnet50", "--fr-file", zeros.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<EnergyReport> = parse(&stdout(&o));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.e_spike_mj == 0.0 && r.ratio.is_infinite()));
    assert!(rows.iter().all(|r| r.gflops_source == spikesplit_core::energy::GflopsSource::Computed));

    let text = run(&["energy-report", "--arch", "resnet50", "--fr-file", zeros.to_str().unwrap()]);
    assert!(stdout(&text).contains("inf"));

    let missing = dir.path().join("missing.csv");
    let o = run(&["energy-report", "--arch", "resnet50", "--fr-file", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(3));
}

#[test]
fn reports_are_deterministic() {
    let args = ["energy-report", "--arch", "toy", "--measure", "--seed", "3", "--format", "csv"];
    let (a, b) = (run(&args), run(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let rows: Vec<EnergyReport> = parse(&stdout(&a));
    assert!(rows.iter().all(|r| r.fr_source == spikesplit_core::energy::FrSource::Measured));
    let plan = ["plan", "--arch", "mobilenetv1"];
    assert_eq!(run(&plan).stdout, run(&plan).stdout);
}

#[test]
fn plan_exit_codes_follow_the_budget() {
    let strict = run(&["plan", "--arch", "resnet50", "--max-drop", "0.05"]);
    assert_eq!(strict.status.code(), Some(3));

    // Split 3 loses 0.09 points, the only published row under 0.1.
    let o = run(&["plan", "--arch", "resnet50", "--max-drop", "0.1", "--format", "csv"]);
    assert!(o.status.success());
    let rows: Vec<PlanRow> = parse(&stdout(&o));
    let chosen: Vec<usize> = rows.iter().filter(|r| r.status == "chosen").map(|r| r.split_point).collect();
    assert_eq!(chosen, [3]);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "split_point,nonsense\n1,2\n").unwrap();
    let o = run(&["plan", "--arch", "resnet50", "--candidates", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(3));
}

#[test]
fn plan_objectives_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.csv");
    let o = run(&["plan", "--arch", "resnet50", "--objective", "min_energy", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("best: split 1 "));
    let rows: Vec<PlanRow> = parse(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 16);
    assert_eq!(rows.iter().filter(|r| r.best).map(|r| r.split_point).collect::<Vec<_>>(), [1]);

    let o = run(&["plan", "--arch", "resnet50"]);
    assert!(stdout(&o).contains("best: split 16 compressed 8x4x4 ratio 256"));
}

#[test]
fn plan_from_candidate_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cands.csv");
    std::fs::write(
        &path,
        "split_point,timesteps,original,compressed,spike_bytes,compression_ratio,accuracy_drop\n\
         16,2,2048x4x4,8x4x4,32,256,0.16\n\
         16,2,2048x4x4,16x4x4,64,128,0.9\n\
         14,2,2048x4x4,4x4x4,16,512,2.5\n",
    )
    .unwrap();
    let o = run(&["plan", "--arch", "resnet50", "--candidates", path.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success());
    let rows: Vec<PlanRow> = parse(&stdout(&o));
    assert_eq!(rows[0].status, "infeasible");
    assert_eq!(rows[1].compressed.as_deref(), Some("8x4x4"));
    assert!(rows[1].best);
}

#[test]
fn serve_and_infer_over_tcp() {
    let mut server = KillOnDrop(bin()
        .args(["serve", "--arch", "toy", "--seed", "5", "--split", "1", "--compressed", "4x2x2"])
        .env("SPIKESPLIT_ENDPOINT", "127.0.0.1:0")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap());
    let mut line = String::new();
    BufReader::new(server.0.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let o = bin()
        .args(["infer", "--arch", "toy", "--seed", "5", "--split", "1", "--compressed", "4x2x2", "--batch", "3"])
        .env("SPIKESPLIT_ENDPOINT", &addr)
        .output()
        .unwrap();
    let text = stdout(&o);
    assert!(o.status.success(), "{text}{}", String::from_utf8_lossy(&o.stderr));
    assert!(text.contains("bit-exactly"));
    assert!(text.contains("frames 3 payload_bytes 12 header_bytes 69 round_trips 3"), "{text}");

    // A different seed yields a different network and different logits.
    let o = run(&["infer", "--arch", "toy", "--seed", "6", "--split", "1", "--compressed", "4x2x2", "--endpoint", &addr]);
    assert_eq!(o.status.code(), Some(1));
    drop(server);

    let o = run(&["infer", "--arch", "toy", "--split", "1", "--endpoint", &addr]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_toy_then_infer_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train-toy", "--epochs", "6", "--finetune-epochs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ratio 1"));
    for f in ["model.ckpt", "step1.ckpt", "metrics.csv"] {
        assert!(Path::new(&out.join(f)).is_file(), "{f}");
    }
    let metrics: Vec<spikesplit_cli::MetricsRow> = parse(&std::fs::read_to_string(out.join("metrics.csv")).unwrap());
    assert_eq!(metrics.len(), 8);
    assert_eq!(metrics.iter().filter(|m| m.step == 2).count(), 2);

    let ckpt = out.join("model.ckpt");
    let o = run(&["infer", "--arch", "toy", "--checkpoint", ckpt.to_str().unwrap(), "--split", "2", "--loopback"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["infer", "--arch", "mobilenetv1", "--checkpoint", ckpt.to_str().unwrap(), "--split", "2", "--loopback"]);
    assert_eq!(o.status.code(), Some(2));
}
