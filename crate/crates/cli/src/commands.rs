//! Command bodies. Each reads its inputs from the workdir and writes its
//! artifacts back there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use condense::costmodel::{
    cost_report, latency_factors, mac_factors, uniform_factors, CostVector, DeviceProfile, WallClock,
};
use condense::dataio::{
    gen_synthetic_pairs, heldout_seed, load_checkpoint, read_report, save_checkpoint, write_report, Checkpoint,
    ModelRecord, PairedSample, Report,
};
use condense::distill::{distill_log_report, stage2_finetune};
use condense::hingeprune::{apply_pruning, build_pruning_plan, curve_report, detect_all, hinge_report};
use condense::netgraph::{build_patchgan_with, NetworkGraph};
use condense::optim::AdamState;
use condense::penalize::FactorSource;
use condense::trainer::{heldout_l1, init_pair, near_zero_fraction, stage1_train_with, train_log_report};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONDENSED: &str = "condensed.ckpt";
pub const PRUNED: &str = "pruned.ckpt";
pub const STUDENT: &str = "student.ckpt";
pub const BUNDLE_HEADER: [&str; 4] = ["artifact", "item", "metric", "value"];

const GENERATOR: &str = "generator";
const DISCRIMINATOR: &str = "discriminator";
const NEAR_ZERO_THRESHOLD: f64 = 0.01;

struct Workdir<'a> {
    config: &'a RunConfig,
}

impl<'a> Workdir<'a> {
    fn new(config: &'a RunConfig) -> CliResult<Self> {
        for dir in [config.checkpoint_dir(), config.report_dir()] {
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        Ok(Self { config })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.config.checkpoint_dir().join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.config.report_dir().join(name)
    }

    fn write(&self, name: &str, report: &Report) -> CliResult<()> {
        let path = self.report(name);
        write_report(&path, report).map_err(|e| CliError::at(&path, e))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn save(&self, path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
        save_checkpoint(path, ckpt).map_err(|e| CliError::at(path, e))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn metadata(&self, command: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("command".to_string(), command.to_string()),
            ("config_digest".to_string(), self.config.digest()),
            ("seed".to_string(), self.config.seed.to_string()),
        ])
    }

    fn train_data(&self) -> Vec<PairedSample> {
        let c = self.config;
        gen_synthetic_pairs(c.seed, c.data.train_pairs, c.model.input_size)
    }

    fn heldout_data(&self) -> Vec<PairedSample> {
        let c = self.config;
        gen_synthetic_pairs(heldout_seed(c.seed), c.data.heldout_pairs, c.model.input_size)
    }

    /// Freshly initialized generator and discriminator for the configured architecture.
    fn fresh_pair(&self) -> CliResult<(NetworkGraph, NetworkGraph)> {
        let m = &self.config.model;
        let mut g = self.config.unet().build()?;
        let mut d = build_patchgan_with(2 * g.input_channels(), m.disc_base_channels, m.disc_cap)?;
        init_pair(&mut g, &mut d, self.config.seed);
        Ok((g, d))
    }

    fn profile_latency(&self, g: &NetworkGraph) -> CliResult<(CostVector, DeviceProfile)> {
        let cfg = self.config.profile_config();
        Ok(latency_factors(g, self.config.model.input_size, &cfg, &mut WallClock::default())?)
    }
}

fn load(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Artifact { path: path.to_path_buf(), message: "checkpoint not found".into() });
    }
    load_checkpoint(path).map_err(|e| CliError::at(path, e))
}

fn model(ckpt: &Checkpoint, path: &Path, name: &str) -> CliResult<NetworkGraph> {
    Ok(ckpt.require(name).map_err(|e| CliError::at(path, e))?.graph.clone())
}

fn record(name: &str, graph: NetworkGraph, optimizer: Option<AdamState>) -> ModelRecord {
    ModelRecord { name: name.into(), graph, optimizer }
}

pub fn train(config: &RunConfig) -> CliResult<()> {
    let wd = Workdir::new(config)?;
    let train_cfg = config.train_config()?;
    let (g, d) = wd.fresh_pair()?;
    let penal = train_cfg.penal.clone();
    let (factors, profile) = match &penal {
        Some(p) if p.layer_factor_source == FactorSource::Latency => {
            let (f, prof) = wd.profile_latency(&g)?;
            (Some(f), Some(prof))
        }
        _ => (None, None),
    };
    let path = wd.checkpoint(CONDENSED);
    let mut meta = wd.metadata("train");
    meta.insert("penal.enabled".into(), config.train.penalize.to_string());
    meta.insert("penal.strategy".into(), config.penal.strategy.clone());
    meta.insert("penal.regime".into(), config.penal.regime.clone());
    meta.insert("penal.factor_source".into(), config.penal.factor_source.clone());
    let snapshot = |epoch: usize, alpha: f64, models: Vec<ModelRecord>| {
        let mut metadata = meta.clone();
        metadata.insert("alpha".into(), alpha.to_string());
        metadata.insert("epochs_completed".into(), epoch.to_string());
        Checkpoint { models, metadata }
    };
    let mut save_error = None;
    let data = wd.train_data();
    let out = stage1_train_with(g, d, &data, &train_cfg, factors, &mut |s| {
        if s.epoch % config.train.checkpoint_every != 0 || s.epoch == config.train.epochs {
            return Ok(());
        }
        let ckpt = snapshot(
            s.epoch,
            s.alpha,
            vec![
                record(GENERATOR, s.generator.clone(), Some(s.g_opt.clone())),
                record(DISCRIMINATOR, s.discriminator.clone(), Some(s.d_opt.clone())),
            ],
        );
        save_checkpoint(&path, &ckpt).map_err(|e| {
            save_error = Some(CliError::at(&path, e));
            condense::Error::Config("periodic checkpoint could not be written".into())
        })
    });
    let out = match (out, save_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    let ckpt = snapshot(
        config.train.epochs,
        out.alpha,
        vec![
            record(GENERATOR, out.generator, Some(out.g_opt)),
            record(DISCRIMINATOR, out.discriminator, Some(out.d_opt)),
        ],
    );
    wd.save(&path, &ckpt)?;
    wd.write("train_log.csv", &train_log_report(&out.log))?;
    if let Some(f) = &out.factors {
        wd.write("cost_vector.csv", &cost_report(f, profile.as_ref()))?;
    }
    Ok(())
}

pub fn profile(config: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let wd = Workdir::new(config)?;
    let default = wd.checkpoint(CONDENSED);
    let g = match checkpoint {
        Some(p) => model(&load(p)?, p, GENERATOR)?,
        None if default.is_file() => model(&load(&default)?, &default, GENERATOR)?,
        None => wd.fresh_pair()?.0,
    };
    let source = config.profile_source()?;
    let (costs, prof) = match source {
        FactorSource::Mac => (mac_factors(&g, config.model.input_size)?, None),
        FactorSource::Uniform => (uniform_factors(&g), None),
        FactorSource::Latency => {
            let (c, p) = wd.profile_latency(&g)?;
            (c, Some(p))
        }
    };
    wd.write(&format!("profile_{source}.csv"), &cost_report(&costs, prof.as_ref()))
}

pub fn prune(config: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let wd = Workdir::new(config)?;
    let path = checkpoint.map_or_else(|| wd.checkpoint(CONDENSED), Path::to_path_buf);
    let ckpt = load(&path)?;
    let teacher = model(&ckpt, &path, GENERATOR)?;
    let manual = config.manual_keep()?;
    let (curves, hinges) = detect_all(&teacher, config.hinge.min_drop_ratio, config.hinge.floor, &manual)?;
    let plan = build_pruning_plan(&teacher, &hinges)?;
    let student = apply_pruning(&teacher, &plan)?;
    let size = config.model.input_size;
    let (before, after) = (teacher.count_macs(size)?, student.count_macs(size)?);

    let mut models = vec![record(GENERATOR, student, None)];
    if let Some(d) = ckpt.model(DISCRIMINATOR) {
        models.push(record(DISCRIMINATOR, d.graph.clone(), None));
    }
    let mut metadata = wd.metadata("prune");
    metadata.insert("pruned_layers".into(), hinges.iter().filter(|h| h.prunes()).count().to_string());
    wd.save(&wd.checkpoint(PRUNED), &Checkpoint { models, metadata })?;

    wd.write("curves.csv", &curve_report(&curves, &hinges)?)?;
    wd.write("hinges.csv", &hinge_report(&curves, &hinges))?;
    let mut summary = Report::new(&["metric", "before", "after"]);
    summary.push(vec!["macs".into(), before.total_macs.to_string(), after.total_macs.to_string()]);
    summary.push(vec!["params".into(), before.total_params.to_string(), after.total_params.to_string()]);
    wd.write("prune_summary.csv", &summary)?;
    let reduction = 1.0 - after.total_macs as f64 / before.total_macs as f64;
    println!("MACs {} -> {} ({:.1}% fewer)", before.total_macs, after.total_macs, 100.0 * reduction);
    Ok(())
}

pub fn distill(config: &RunConfig, student: Option<&Path>, teacher: Option<&Path>) -> CliResult<()> {
    let wd = Workdir::new(config)?;
    let s_path = student.map_or_else(|| wd.checkpoint(PRUNED), Path::to_path_buf);
    let t_path = teacher.map_or_else(|| wd.checkpoint(CONDENSED), Path::to_path_buf);
    let (s_ckpt, t_ckpt) = (load(&s_path)?, load(&t_path)?);
    let s = model(&s_ckpt, &s_path, GENERATOR)?;
    let t = model(&t_ckpt, &t_path, GENERATOR)?;
    let d = match s_ckpt.model(DISCRIMINATOR) {
        Some(r) => r.graph.clone(),
        None => model(&t_ckpt, &t_path, DISCRIMINATOR)?,
    };
    let out = stage2_finetune(s, &t, d, &wd.train_data(), &config.distill_config())?;
    let held = wd.heldout_data();
    let (teacher_l1, student_l1) = (heldout_l1(&t, &held)?, heldout_l1(&out.student, &held)?);
    let mut metadata = wd.metadata("distill");
    metadata.insert("heldout_l1.teacher".into(), teacher_l1.to_string());
    metadata.insert("heldout_l1.student".into(), student_l1.to_string());
    let models =
        vec![record(GENERATOR, out.student, Some(out.student_opt)), record(DISCRIMINATOR, out.discriminator, None)];
    wd.save(&wd.checkpoint(STUDENT), &Checkpoint { models, metadata })?;
    wd.write("distill_log.csv", &distill_log_report(&out.log))?;
    println!("held-out l1: teacher {teacher_l1:.6}, student {student_l1:.6}");
    Ok(())
}

fn push(bundle: &mut Report, artifact: &str, item: impl Into<String>, metric: &str, value: impl ToString) {
    bundle.push(vec![artifact.into(), item.into(), metric.into(), value.to_string()]);
}

fn read(path: &Path) -> CliResult<Report> {
    read_report(path).map_err(|e| CliError::at(path, e))
}

fn cell<'r>(report: &'r Report, path: &Path, row: &'r [String], name: &str) -> CliResult<&'r str> {
    let i = report
        .column(name)
        .ok_or_else(|| CliError::Artifact { path: path.to_path_buf(), message: format!("missing column '{name}'") })?;
    Ok(&row[i])
}

/// Adds every non-empty cell of the named columns, keyed by `layer<id>`.
fn per_layer(bundle: &mut Report, path: &Path, name: &str, metrics: &[&str]) -> CliResult<()> {
    let r = read(path)?;
    for row in &r.rows {
        let item = format!("layer{}", cell(&r, path, row, "layer_id")?);
        for m in metrics {
            let v = cell(&r, path, row, m)?;
            if !v.is_empty() {
                push(bundle, name, item.clone(), m, v);
            }
        }
    }
    Ok(())
}

/// Adds the named columns of the last row.
fn final_row(bundle: &mut Report, path: &Path, name: &str, metrics: &[&str]) -> CliResult<()> {
    let r = read(path)?;
    if let Some(row) = r.rows.last() {
        for m in metrics {
            push(bundle, name, "final", m, cell(&r, path, row, m)?);
        }
    }
    Ok(())
}

pub fn report(config: &RunConfig) -> CliResult<()> {
    let wd = Workdir::new(config)?;
    let mut bundle = Report::new(&BUNDLE_HEADER);
    let held = wd.heldout_data();
    for name in [CONDENSED, PRUNED, STUDENT] {
        let path = wd.checkpoint(name);
        if !path.is_file() {
            continue;
        }
        let g = model(&load(&path)?, &path, GENERATOR)?;
        let counts = g.count_macs(config.model.input_size)?;
        push(&mut bundle, name, GENERATOR, "macs", counts.total_macs);
        push(&mut bundle, name, GENERATOR, "params", counts.total_params);
        push(&mut bundle, name, GENERATOR, "near_zero_fraction", near_zero_fraction(&g, NEAR_ZERO_THRESHOLD));
        push(&mut bundle, name, GENERATOR, "heldout_l1", heldout_l1(&g, &held)?);
    }

    let summary = wd.report("prune_summary.csv");
    if summary.is_file() {
        let r = read(&summary)?;
        for row in &r.rows {
            let item = cell(&r, &summary, row, "metric")?;
            push(&mut bundle, "prune_summary.csv", item, "before", cell(&r, &summary, row, "before")?);
            push(&mut bundle, "prune_summary.csv", item, "after", cell(&r, &summary, row, "after")?);
        }
    }

    let mut cost_files: Vec<String> = vec!["cost_vector.csv".into()];
    let dir = config.report_dir();
    let mut profiles: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("profile_") && n.ends_with(".csv"))
        .collect();
    profiles.sort();
    cost_files.extend(profiles);
    for name in &cost_files {
        let path = wd.report(name);
        if path.is_file() {
            per_layer(&mut bundle, &path, name, &["raw_cost", "factor", "median_ms"])?;
        }
    }

    let hinges = wd.report("hinges.csv");
    if hinges.is_file() {
        per_layer(&mut bundle, &hinges, "hinges.csv", &["out_ch", "keep_count", "method", "drop_ratio"])?;
    }
    let curves = wd.report("curves.csv");
    if curves.is_file() {
        let r = read(&curves)?;
        for row in &r.rows {
            let item = format!("layer{}:rank{}", cell(&r, &curves, row, "layer_id")?, cell(&r, &curves, row, "rank")?);
            push(&mut bundle, "curves.csv", item, "gamma", cell(&r, &curves, row, "gamma")?);
        }
    }
    let train_log = wd.report("train_log.csv");
    if train_log.is_file() {
        let metrics = ["gan_g", "gan_d", "l1", "penal", "total_g", "near_zero_fraction", "alpha"];
        final_row(&mut bundle, &train_log, "train_log.csv", &metrics)?;
    }
    let distill_log = wd.report("distill_log.csv");
    if distill_log.is_file() {
        let metrics = ["gan_g", "gan_d", "l1", "teacher_l1", "total"];
        final_row(&mut bundle, &distill_log, "distill_log.csv", &metrics)?;
    }
    wd.write("bundle.csv", &bundle)
}

pub fn pipeline(config: &RunConfig) -> CliResult<()> {
    train(config)?;
    profile(config, None)?;
    prune(config, None)?;
    distill(config, None, None)?;
    report(config)
}
