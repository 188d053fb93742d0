//! Runs the `condense` binary on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condense::costmodel::mac_factors;
use condense::dataio::{load_checkpoint, read_report, save_checkpoint, Checkpoint, ModelRecord, Report};
use condense::netgraph::build_unet;

const SMALL: &str = r#"
seed = 3

[model]
base_channels = 4
depth = 2
cap = 16
input_size = 16
disc_base_channels = 4
disc_cap = 16

[data]
train_pairs = 8
heldout_pairs = 4

[train]
epochs = 1
batch_size = 2
checkpoint_every = 1

[distill]
epochs = 1
batch_size = 2
"#;

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    workdir: PathBuf,
}

impl Run {
    fn new() -> Self {
        Self::with_config(SMALL)
    }

    fn with_config(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, text).unwrap();
        let workdir = dir.path().join("work");
        Self { _dir: dir, config, workdir }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_condense"))
            .arg("--config")
            .arg(&self.config)
            .arg("--workdir")
            .arg(&self.workdir)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.workdir.join("checkpoints").join(name)
    }

    fn report(&self, name: &str) -> Report {
        read_report(self.workdir.join("reports").join(name)).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn column<'r>(r: &'r Report, name: &str) -> Vec<&'r str> {
    let i = r.column(name).unwrap();
    r.rows.iter().map(|row| row[i].as_str()).collect()
}

fn machine_line(out: &Output) -> String {
    stderr(out).lines().find(|l| l.starts_with("error kind=")).unwrap().to_string()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_condense")).arg("--config").arg(&missing).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 2);
    assert!(err.lines().all(|l| l.contains(missing.to_str().unwrap())));
    assert!(machine_line(&out).starts_with("error kind=io command=train message=\""));
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let run = Run::with_config("[train]\nepochz = 1\n");
    let out = run.run(&["train"]);
    assert!(!out.status.success());
    assert!(machine_line(&out).starts_with("error kind=config"));
    assert!(stderr(&out).contains(run.config.to_str().unwrap()));

    let run = Run::new();
    let out = run.run(&["train", "--penal-strategy", "quadratic"]);
    assert!(machine_line(&out).starts_with("error kind=config command=train"));
    assert!(!run.checkpoint("condensed.ckpt").exists());
}

#[test]
fn train_writes_a_loadable_checkpoint_with_penal_metadata() {
    let run = Run::new();
    run.ok(&["train", "--penal-strategy", "linear", "--regime", "high"]);
    let ckpt = load_checkpoint(run.checkpoint("condensed.ckpt")).unwrap();
    let m = &ckpt.metadata;
    assert_eq!(m["penal.strategy"], "linear");
    assert_eq!(m["penal.regime"], "high");
    assert_eq!(m["penal.enabled"], "true");
    assert_eq!(m["seed"], "3");
    assert!(m["alpha"].parse::<f64>().unwrap() > 0.0);
    let g = &ckpt.require("generator").unwrap().graph;
    assert_eq!(
        g.count_macs(16).unwrap().total_macs,
        build_unet(4, 2, 16, 16).unwrap().count_macs(16).unwrap().total_macs
    );
    assert!(ckpt.require("discriminator").is_ok());
    assert_eq!(run.report("train_log.csv").rows.len(), 4);
    assert_eq!(run.report("cost_vector.csv").rows.len(), g.prunable_layer_ids().len());

    let plain = Run::new();
    plain.ok(&["train", "--no-penal", "--penal-strategy", "exponential"]);
    let m = load_checkpoint(plain.checkpoint("condensed.ckpt")).unwrap().metadata;
    assert_eq!((m["penal.enabled"].as_str(), m["alpha"].as_str()), ("false", "0"));
    assert_eq!(m["penal.strategy"], "exponential");
}

#[test]
fn profile_sources() {
    let run = Run::new();
    run.ok(&["train"]);
    run.ok(&["profile", "--source", "uniform"]);
    assert!(column(&run.report("profile_uniform.csv"), "factor").iter().all(|f| *f == "1"));

    run.ok(&["profile", "--source", "mac"]);
    let g = load_checkpoint(run.checkpoint("condensed.ckpt")).unwrap().require("generator").unwrap().graph.clone();
    let expected = mac_factors(&g, 16).unwrap();
    let report = run.report("profile_mac.csv");
    let got: Vec<f64> = column(&report, "factor").iter().map(|f| f.parse().unwrap()).collect();
    assert_eq!(got, expected.factors);
    let ids: Vec<usize> = column(&report, "layer_id").iter().map(|f| f.parse().unwrap()).collect();
    assert_eq!(ids, expected.layer_ids);

    let out = run.run(&["profile", "--source", "latency", "--repeats", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(machine_line(&out).starts_with("error kind=config command=profile"));
    assert!(!run.workdir.join("reports/profile_latency.csv").exists());

    run.ok(&["profile", "--source", "latency", "--repeats", "3"]);
    let report = run.report("profile_latency.csv");
    assert!(column(&report, "median_ms").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
}

#[test]
fn prune_without_hinges_copies_the_model() {
    let run = Run::new();
    run.ok(&["train", "--no-penal"]);
    run.ok(&["prune"]);
    let teacher = load_checkpoint(run.checkpoint("condensed.ckpt")).unwrap();
    let pruned = load_checkpoint(run.checkpoint("pruned.ckpt")).unwrap();
    assert_eq!(pruned.require("generator").unwrap().graph, teacher.require("generator").unwrap().graph);
    assert!(column(&run.report("hinges.csv"), "drop_ratio").iter().all(|r| r.is_empty()));
    let summary = run.report("prune_summary.csv");
    assert!(summary.rows.iter().all(|r| r[1] == r[2]));
}

#[test]
fn manual_keep_overrides_detection() {
    let run = Run::new();
    run.ok(&["train"]);
    run.ok(&["prune", "--manual-keep", "layer1=3", "--manual-keep", "layer0=2"]);
    let hinges = run.report("hinges.csv");
    let layers = column(&hinges, "layer_id");
    let keep = column(&hinges, "keep_count");
    let method = column(&hinges, "method");
    for (layer, count) in [("0", "2"), ("1", "3")] {
        let i = layers.iter().position(|l| *l == layer).unwrap();
        assert_eq!((keep[i], method[i]), (count, "manual"));
    }
    let g = load_checkpoint(run.checkpoint("pruned.ckpt")).unwrap().require("generator").unwrap().graph.clone();
    assert_eq!((g.layer(0).unwrap().out_ch, g.layer(1).unwrap().out_ch), (2, 3));
    let summary = run.report("prune_summary.csv");
    for row in &summary.rows {
        assert!(row[2].parse::<u64>().unwrap() < row[1].parse::<u64>().unwrap(), "{row:?}");
    }

    let out = run.run(&["prune", "--manual-keep", "3=2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run.run(&["prune", "--manual-keep", "layer3=2"]);
    assert!(machine_line(&out).starts_with("error kind=plan command=prune"));
}

#[test]
fn identity_distillation_starts_at_the_teacher() {
    let run = Run::new();
    run.ok(&["train"]);
    run.ok(&["distill", "--student", run.checkpoint("condensed.ckpt").to_str().unwrap()]);
    let log = run.report("distill_log.csv");
    assert_eq!(column(&log, "teacher_l1")[0], "0");
    let student = load_checkpoint(run.checkpoint("student.ckpt")).unwrap();
    assert!(student.metadata["heldout_l1.student"].parse::<f64>().unwrap().is_finite());
}

#[test]
fn distill_rejects_mismatched_topology() {
    let run = Run::new();
    run.ok(&["train"]);
    let other = run.workdir.join("deeper.ckpt");
    let g = build_unet(4, 3, 16, 16).unwrap();
    let ckpt = Checkpoint {
        models: vec![ModelRecord { name: "generator".into(), graph: g, optimizer: None }],
        metadata: Default::default(),
    };
    save_checkpoint(&other, &ckpt).unwrap();
    let out = run.run(&["distill", "--student", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(machine_line(&out).starts_with("error kind=config command=distill"));
    assert!(!run.checkpoint("student.ckpt").exists());
    assert!(!run.workdir.join("reports/distill_log.csv").exists());
}

#[test]
fn report_on_empty_workdir_is_header_only() {
    let run = Run::new();
    run.ok(&["report"]);
    let path = run.workdir.join("reports/bundle.csv");
    assert_eq!(fs::read_to_string(&path).unwrap(), "artifact,item,metric,value\n");
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["checkpoints", "reports"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            let bytes = fs::read(&p).unwrap();
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out
}

#[test]
fn pipeline_is_reproducible_and_reports_prune_totals() {
    let a = Run::new();
    a.ok(&["pipeline", "--seed", "5"]);
    let bundle = a.report("bundle.csv");
    let find = |artifact: &str, item: &str, metric: &str| {
        bundle.rows.iter().find(|r| r[0] == artifact && r[1] == item && r[2] == metric).map(|r| r[3].clone())
    };
    let before = find("prune_summary.csv", "macs", "before").unwrap();
    assert!(find("prune_summary.csv", "macs", "after").is_some());
    assert_eq!(find("condensed.ckpt", "generator", "macs").unwrap(), before);
    for ckpt in ["condensed.ckpt", "pruned.ckpt", "student.ckpt"] {
        for metric in ["macs", "params", "near_zero_fraction", "heldout_l1"] {
            assert!(find(ckpt, "generator", metric).is_some(), "{ckpt} {metric}");
        }
    }
    assert!(find("hinges.csv", "layer0", "keep_count").is_some());
    assert!(find("curves.csv", "layer0:rank1", "gamma").is_some());
    assert!(find("profile_mac.csv", "layer0", "factor").is_some());
    let seed = load_checkpoint(a.checkpoint("student.ckpt")).unwrap().metadata["seed"].clone();
    assert_eq!(seed, "5");

    let first = fs::read_to_string(a.workdir.join("reports/bundle.csv")).unwrap();
    a.ok(&["report", "--seed", "5"]);
    assert_eq!(fs::read_to_string(a.workdir.join("reports/bundle.csv")).unwrap(), first);

    let b = Run::new();
    b.ok(&["pipeline", "--seed", "5"]);
    let (fa, fb) = (files(&a.workdir), files(&b.workdir));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs between identical runs", name.display());
    }
}
