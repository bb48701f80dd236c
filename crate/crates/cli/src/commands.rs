//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use mfrbp_core::data::{
    build_split_datasets, read_trajectories, split_train_test, synthesize_scenes, Dataset, SceneWindow, SegmentConfig,
    Split, TrackSet,
};
use mfrbp_core::eval::{emit_artifacts, plot_run, reference_compare, run_experiment, sha256_hex, Experiment, Manifest, RmseTable, RunRecord};
use mfrbp_core::nn::Checkpoint;
use mfrbp_core::policy::train::train_policies_with;
use mfrbp_core::policy::PolicyModels;
use mfrbp_core::recursion::{make_l1_mfrbp, make_l1_rbp, make_planning_aware, run_mfrbp};
use mfrbp_core::{AgentId, TrajectoryGaussian};

use crate::config::{RunConfig, SchemeName};

/// Recursion strategy for `predict`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    L1rbp,
    L1mfrbp,
    Planning,
}

/// A single scene for `predict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub window: SceneWindow,
    #[serde(default)]
    pub ego: Option<AgentId>,
}

pub const META_SCHEME: &str = "scheme";
pub const META_SEED: &str = "seed";
pub const META_CONFIG: &str = "run_config";
pub const META_LOSS_CURVE: &str = "loss_curve";
pub const META_DATASET: &str = "dataset_sha256";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// `D` may be a dataset file or a directory holding `name`.
fn dataset_path(data: &Path, name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(name)
    } else {
        data.to_path_buf()
    }
}

fn write_datasets(out: &Path, train: &Dataset, test: &Dataset, split: &Split) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    train.save(&out.join("train.json"))?;
    test.save(&out.join("test.json"))?;
    write(&out.join("split.json"), to_json(split)?)?;
    Ok(())
}

fn summary(train: &Dataset, test: &Dataset, split: &Split) -> String {
    let n = |m: &BTreeMap<String, std::collections::BTreeSet<AgentId>>| m.values().map(|s| s.len()).sum::<usize>();
    format!(
        "train: {} segments from {} vehicles; test: {} segments from {} vehicles",
        train.len(),
        n(&split.train),
        test.len(),
        n(&split.test)
    )
}

pub fn synth(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.synth.seed = seed;
    let traffic = synthesize_scenes(&cfg.synth)?;
    let sets = [traffic.tracks];
    let split = split_train_test(&sets, seed);
    let (train, test) = build_split_datasets(&sets, &split, SegmentConfig::at_rate(cfg.synth.sample_rate))?;
    write_datasets(out, &train, &test, &split)?;
    write(&out.join("synth_config.toml"), toml::to_string(&cfg.synth)?)?;

    let scenes = out.join("scenes");
    let mut seen = std::collections::BTreeSet::new();
    for seg in &test.segments {
        if seen.len() == cfg.eval.plot_count.max(1) {
            break;
        }
        if seen.insert(seg.window) {
            let file = SceneFile { window: test.windows[seg.window].clone(), ego: Some(seg.target) };
            write(&scenes.join(format!("scene_{:03}.json", seg.window)), to_json(&file)?)?;
        }
    }
    println!("{}", summary(&train, &test, &split));
    Ok(())
}

pub fn ingest(files: &[PathBuf], seed: u64, downsample: u64, out: &Path) -> Result<()> {
    ensure!(downsample >= 1, "--downsample must be at least 1");
    let mut sets: Vec<TrackSet> = Vec::new();
    for f in files {
        let subset = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if sets.iter().any(|s| s.subset == subset) {
            bail!("two input files share the name {subset:?}");
        }
        let parsed = read_trajectories(f)?;
        let tracks = parsed.iter().map(|t| t.longest_run()).collect::<mfrbp_core::Result<Vec<_>>>()?;
        let set = TrackSet::new(subset, 10.0, tracks)?;
        sets.push(if downsample > 1 { set.downsampled(downsample)? } else { set });
    }
    let split = split_train_test(&sets, seed);
    let rate = 10.0 / downsample as f64;
    let (train, test) = build_split_datasets(&sets, &split, SegmentConfig::at_rate(rate))?;
    write_datasets(out, &train, &test, &split)?;
    println!("{}", summary(&train, &test, &split));
    Ok(())
}

pub fn train(data: &Path, config: Option<&Path>, seed: u64, scheme: Option<SchemeName>, ckpt_out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = scheme {
        cfg.scheme = s;
    }
    let path = dataset_path(data, "train.json");
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let dataset = Dataset::from_json(std::str::from_utf8(&bytes)?)?;
    ensure!(
        dataset.sample_rate == cfg.model.sample_rate,
        "dataset is sampled at {} Hz but the model config expects {} Hz; set [model] sample_rate and the step counts",
        dataset.sample_rate,
        cfg.model.sample_rate
    );
    let trained = train_policies_with(&dataset, &cfg.model, &cfg.train, cfg.training_scheme(), seed, |e, l| {
        eprintln!("epoch {e}: loss {l:.4}");
    })?;
    let mut meta = BTreeMap::new();
    meta.insert(META_SCHEME.to_string(), cfg.scheme.name().to_string());
    meta.insert(META_SEED.to_string(), seed.to_string());
    meta.insert(META_CONFIG.to_string(), cfg.canonical()?);
    meta.insert(META_LOSS_CURVE.to_string(), serde_json::to_string(&trained.loss_curve)?);
    meta.insert(META_DATASET.to_string(), sha256_hex(&bytes));
    let ckpt = trained.models.to_checkpoint(meta)?;
    if let Some(parent) = ckpt_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ckpt.save(ckpt_out)?;
    let curve = &trained.loss_curve;
    println!("loss {:.4} -> {:.4} over {} epochs", curve[0], curve[curve.len() - 1], curve.len() - 1);
    Ok(())
}

struct Loaded {
    bytes: Vec<u8>,
    ckpt: Checkpoint,
    models: Arc<PolicyModels>,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = Checkpoint::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let models = Arc::new(PolicyModels::from_checkpoint(&ckpt)?);
    Ok(Loaded { bytes, ckpt, models })
}

/// An explicit config wins, then the one recorded at training time.
fn resolve_config(config: Option<&Path>, ckpt: &Checkpoint) -> Result<RunConfig> {
    if config.is_some() {
        return RunConfig::load(config);
    }
    match ckpt.metadata.get(META_CONFIG) {
        Some(text) => Ok(toml::from_str(text).context("parsing the checkpoint's run config")?),
        None => Ok(RunConfig::default()),
    }
}

#[derive(Serialize)]
struct PredictionOut<'a> {
    strategy: Strategy,
    ego: Option<AgentId>,
    levels: BTreeMap<AgentId, usize>,
    predictions: BTreeMap<AgentId, &'a [TrajectoryGaussian]>,
}

pub fn predict(
    ckpt: &Path,
    scene: &Path,
    strategy: Strategy,
    ego: Option<u64>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    let cfg = resolve_config(config, &loaded.ckpt)?;
    let text = std::fs::read_to_string(scene).with_context(|| format!("reading {}", scene.display()))?;
    let file: SceneFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", scene.display()))?;
    let w = &file.window;
    let ego = ego.map(AgentId).or(file.ego);
    let horizon = loaded.models.config.horizon_steps;
    let need_ego = || ego.context("this strategy needs an ego: pass --ego or set it in the scene file");
    let (visible, assignment) = match strategy {
        Strategy::L1rbp => (w.history.clone(), make_l1_rbp(&w.history, &loaded.models)?),
        Strategy::L1mfrbp => make_l1_mfrbp(&w.history, &cfg.sensor.for_ego(need_ego()?), &loaded.models)?,
        Strategy::Planning => {
            let e = need_ego()?;
            let plan = w.future(e, horizon).context("the ego needs a full future to plan with")?;
            make_planning_aware(&w.history, &cfg.sensor.for_ego(e), plan, &loaded.models)?
        }
    };
    let (pred, trace) = run_mfrbp(&visible, &assignment)?;

    let json = PredictionOut {
        strategy,
        ego: if strategy == Strategy::L1rbp { None } else { ego },
        levels: assignment.levels(),
        predictions: trace.agents().map(|a| (a, trace.levels(a))).collect(),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("prediction.json"), to_json(&json)?)?;

    let mut tsv = String::from("agent\tlevel\tstep\tx\ty\tvar_x\tcov_xy\tvar_y\n");
    for (id, p) in &pred {
        let level = assignment.level(*id).unwrap_or(0);
        for (k, (m, c)) in p.means().iter().zip(p.covariances()).enumerate() {
            let _ = writeln!(tsv, "{id}\t{level}\t{}\t{}\t{}\t{}\t{}\t{}", k + 1, m[0], m[1], c.xx, c.xy, c.yy);
        }
    }
    write(&out.join("prediction.tsv"), tsv)?;

    let targets = match (strategy, ego) {
        (Strategy::L1rbp, _) | (_, None) => visible.agent_ids().filter(|a| w.has_full_future(*a, horizon)).collect(),
        (_, Some(e)) => visible.agent_ids().filter(|a| *a != e && w.has_full_future(*a, horizon)).collect(),
    };
    let run = RunRecord { window: 0, ego: json.ego, targets, trace: trace.clone() };
    write(&out.join("prediction.svg"), plot_run(&run, w, horizon, &cfg.eval)?)?;
    println!("predicted {} agents, max level {}", pred.len(), assignment.max_level());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    experiment: u8,
    data: &Path,
    ckpt: &Path,
    seed: u64,
    passes: Option<usize>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let experiment = Experiment::from_id(experiment)?;
    let loaded = load_checkpoint(ckpt)?;
    let mut cfg = resolve_config(config, &loaded.ckpt)?;
    if let Some(p) = passes {
        ensure!(p >= 1, "--passes must be at least 1");
        cfg.eval.passes = p;
    }
    let expected = match experiment {
        Experiment::L1Rbp => SchemeName::L1rbp,
        Experiment::L1Mfrbp => SchemeName::L1mfrbp,
        Experiment::Planning => SchemeName::Planning,
    };
    if let Some(s) = loaded.ckpt.metadata.get(META_SCHEME) {
        if s != expected.name() {
            eprintln!("warning: checkpoint was trained with scheme {s}, experiment {} expects {}", experiment.id(), expected.name());
        }
    }
    let path = dataset_path(data, "test.json");
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let dataset = Dataset::from_json(std::str::from_utf8(&bytes)?)?;
    let result = run_experiment(experiment, &dataset, &loaded.models, &cfg.sensor, &cfg.eval, seed)?;
    let manifest = Manifest::new(&result, cfg.eval.passes, cfg.canonical()?.as_bytes(), &loaded.bytes, &bytes);
    let curve: Option<Vec<f64>> = match loaded.ckpt.metadata.get(META_LOSS_CURVE) {
        Some(text) => Some(serde_json::from_str(text).context("parsing the checkpoint's loss curve")?),
        None => None,
    };
    emit_artifacts(&result, &dataset, &cfg.eval, &manifest, curve.as_deref(), out)?;
    println!("{} ({} scored predictions)", experiment.name(), result.segments.len());
    print!("{}", result.table.to_tsv());
    Ok(())
}

pub fn report(results: &Path, reference: &str) -> Result<()> {
    let (dir, path) = if results.is_dir() {
        (results.to_path_buf(), results.join("rmse.tsv"))
    } else {
        (results.parent().map(Path::to_path_buf).unwrap_or_default(), results.to_path_buf())
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let table = RmseTable::from_tsv(&text)?;
    let report = reference_compare(&table, reference)?.to_string();
    print!("{report}");
    write(&dir.join(format!("report_{reference}.txt")), report)?;
    Ok(())
}
