//! Command-line surface. Every command reads and writes plain files and is
//! deterministic given its flags.
//!
//! Exit codes: 0 on success, 2 for invalid input (flags, config, data
//! files, unwritable paths), 1 for failures during computation. Errors go to
//! stderr as a single `error: ...` line.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{load_manifest, load_studies, make_folds, synth_generate, write_dataset, FoldPlan, Sample};
use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, train_log_csv, DerivedNet, Genotype, RetrainConfig, TrainOutcome};
use crate::metrics::{
    aggregate_cv, cv_metrics_csv, evaluate, metrics_csv, roc_csv, scores_csv, EvalReport, ScoredCase, DEFAULT_THRESHOLD,
};
use crate::params::mix_seed;
use crate::search::{run_search, search_log_csv, SearchConfig, SearchOutcome, SupernetObjective};
use crate::search_space::AlphaTable;
use crate::supernet::{ModalityMode, Supernet, SupernetConfig};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "MMNAS_OUT";

// -------------------------------------------------------------- config

fn default_classes() -> usize {
    2
}

fn default_k() -> usize {
    6
}

/// Network shape; modality and seed live at the top level of [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dims: [usize; 3],
    pub stem_channels: usize,
    pub num_nodes: usize,
    pub num_reduction_cells: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// Directory holding `manifest.ndjson`; used when `--manifest` is absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Output directory; used when `--out` is absent.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub supernet: NetConfig,
    #[serde(default = "default_mode")]
    pub modality_mode: ModalityMode,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub paths: RunPaths,
}

fn default_mode() -> ModalityMode {
    ModalityMode::PetCt
}

impl RunConfig {
    pub fn supernet_config(&self, mode: ModalityMode) -> SupernetConfig {
        let n = &self.supernet;
        SupernetConfig {
            input_dims: n.input_dims,
            stem_channels: n.stem_channels,
            num_nodes: n.num_nodes,
            num_reduction_cells: n.num_reduction_cells,
            num_classes: n.num_classes,
            modality_mode: mode,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet_config(self.modality_mode).validate()?;
        if self.supernet.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes = {}: evaluation is binary",
                self.supernet.num_classes
            )));
        }
        self.search.validate()?;
        self.retrain.validate()?;
        if self.k < 2 {
            return Err(Error::Config(format!("k = {}: cross-validation needs at least 2 folds", self.k)));
        }
        if let Some(d) = &self.paths.data_dir {
            if !d.is_dir() {
                return Err(Error::Config(format!("data_dir {} is not a directory", d.display())));
            }
        }
        Ok(())
    }

    /// Parses and validates; relative paths are taken from the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    fn manifest(&self, flag: Option<&Path>) -> Result<PathBuf> {
        match (flag, &self.paths.data_dir) {
            (Some(m), _) => Ok(m.to_path_buf()),
            (None, Some(d)) => Ok(d.join("manifest.ndjson")),
            (None, None) => Err(Error::Config("no --manifest given and the config sets no data_dir".into())),
        }
    }

    fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        match flag {
            Some(p) => Ok(p.to_path_buf()),
            None => self.paths.out_dir.clone().map_or_else(env_out, Ok),
        }
    }
}

fn env_out() -> Result<PathBuf> {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("no --out given and {OUT_ENV} is not set")))
}

/// Independent seeds for one search-and-retrain pipeline. Stream 0 serves
/// whole-dataset commands; fold `f` of a cross-validation uses `f + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub supernet_init: u64,
    pub search: u64,
    pub derived_init: u64,
    pub retrain: u64,
}

impl StageSeeds {
    pub fn new(run_seed: u64, stream: u64) -> Self {
        let base = mix_seed(run_seed, stream);
        Self {
            supernet_init: mix_seed(base, 1),
            search: mix_seed(base, 2),
            derived_init: mix_seed(base, 3),
            retrain: mix_seed(base, 4),
        }
    }

    pub fn for_fold(run_seed: u64, fold: usize) -> Self {
        Self::new(run_seed, fold as u64 + 1)
    }
}

// ------------------------------------------------------------ pipeline

/// Best α from a search, the outcome log and the genotype derived from it.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub outcome: SearchOutcome,
    pub alpha: AlphaTable,
    pub genotype: Genotype,
}

/// Builds a supernet, searches on `data` and derives the genotype from the
/// best snapshot. `on_epoch` also sees the live α after every epoch.
pub fn search_and_derive(
    net_cfg: &SupernetConfig,
    search: &SearchConfig,
    data: &[Sample],
    seeds: StageSeeds,
    on_epoch: impl FnMut(&crate::search::EpochLog, &crate::params::ParamStore) -> Result<()>,
) -> Result<SearchResult> {
    let (net, mut theta, mut alpha) = Supernet::build(net_cfg, seeds.supernet_init)?;
    let model = SupernetObjective { net: &net };
    let outcome = run_search(&model, &mut theta, alpha.store_mut(), data, search, seeds.search, on_epoch)?;
    let best = AlphaTable::from_store(outcome.best.alpha.clone(), net_cfg.num_nodes)?;
    let genotype = derive_genotype(&best, seeds.search);
    Ok(SearchResult {
        outcome,
        alpha: best,
        genotype,
    })
}

/// Writes `alpha.mmp`, `search_log.csv`, `genotype.json` and `genotype.dot`.
pub fn write_search_artifacts(dir: &Path, r: &SearchResult) -> Result<()> {
    create_dir(dir)?;
    r.alpha.save(dir.join("alpha.mmp"))?;
    write_file(&dir.join("search_log.csv"), &search_log_csv(&r.outcome.log))?;
    r.genotype.save_json(dir.join("genotype.json"))?;
    write_file(&dir.join("genotype.dot"), &r.genotype.to_dot())
}

pub struct Retrained {
    pub net: DerivedNet,
    pub outcome: TrainOutcome,
}

pub fn retrain(
    genotype: &Genotype,
    net_cfg: &SupernetConfig,
    cfg: &RetrainConfig,
    train: &[Sample],
    seeds: StageSeeds,
) -> Result<Retrained> {
    let (net, theta) = DerivedNet::build(genotype, net_cfg, seeds.derived_init)?;
    let outcome = crate::genotype::train_derived(&net, theta, train, cfg, seeds.retrain)?;
    Ok(Retrained { net, outcome })
}

pub fn score(net: &DerivedNet, theta: &crate::params::ParamStore, samples: &[Sample]) -> Result<Vec<ScoredCase>> {
    let probs = net.predict(theta, samples)?;
    samples
        .iter()
        .zip(probs)
        .map(|(s, p)| ScoredCase::new(s.id.clone(), s.label, p.clamp(0.0, 1.0)))
        .collect()
}

/// Loads and normalizes every study of a manifest, checking it matches the
/// configured input size.
pub fn load_samples(manifest: &Path, dims: Option<[usize; 3]>) -> Result<Vec<Sample>> {
    let refs = load_manifest(manifest)?;
    if let Some(want) = dims {
        if let Some(r) = refs.iter().find(|r| r.dims != want) {
            return Err(Error::Data(format!(
                "study `{}` has dims {:?}, the configuration expects {want:?}",
                r.id, r.dims
            )));
        }
    }
    Ok(load_studies(&refs)?.iter().map(Sample::from_study).collect())
}

fn select<'a>(samples: &'a [Sample], ids: &[&str]) -> Result<Vec<Sample>> {
    let by_id: BTreeMap<&str, &'a Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::Data(format!("study `{id}` is not in the manifest")))
        })
        .collect()
}

fn str_ids(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// -------------------------------------------------------------- flags

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three comma-separated sizes, got `{s}`"))
}

fn parse_mode(s: &str) -> std::result::Result<ModalityMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "mmnas", version, about = "Multi-modality architecture search for paired PET/CT volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset whose label is the XOR of two blobs.
    GenData(GenDataArgs),
    /// Search on a whole manifest and derive a genotype.
    Search(SearchArgs),
    /// Retrain a genotype on a train split and evaluate on the test split.
    TrainEval(TrainEvalArgs),
    /// Stratified k-fold cross-validation of the full pipeline.
    Cv(CvArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_parser = parse_dims, default_value = "16,16,16")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long)]
    pub seed: u64,
    /// Defaults to $MMNAS_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's modality_mode.
    #[arg(long, value_parser = parse_mode)]
    pub modality: Option<ModalityMode>,
}

#[derive(Debug, Args)]
pub struct TrainEvalArgs {
    #[arg(long)]
    pub genotype: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSON file `{"train": [ids], "test": [ids]}`.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub modality: Option<ModalityMode>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides the config's k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated modality modes; defaults to the config's.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Vec<ModalityMode>,
    /// Worker threads for independent folds.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Search once per mode on the first fold's training split and reuse
    /// the genotype for every fold.
    #[arg(long)]
    pub shared_genotype: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ------------------------------------------------------------ commands

/// Writes the dataset and returns the manifest path.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    let out = match &args.out {
        Some(p) => p.clone(),
        None => env_out()?,
    };
    let set = synth_generate(args.n, args.dims, args.noise, args.seed)?;
    write_dataset(out, &set)
}

/// Searches on every study in the manifest. Returns the genotype path.
pub fn cmd_search(args: &SearchArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load(&args.config)?;
    let mode = args.modality.unwrap_or(cfg.modality_mode);
    let net_cfg = cfg.supernet_config(mode);
    let out = cfg.out_dir(args.out.as_deref())?;
    let samples = load_samples(&cfg.manifest(args.manifest.as_deref())?, Some(net_cfg.input_dims))?;

    let ckpt = out.join("checkpoints");
    create_dir(&ckpt)?;
    let every = cfg.search.snapshot_every;
    let result = search_and_derive(&net_cfg, &cfg.search, &samples, StageSeeds::new(cfg.seed, 0), |row, alpha| {
        if every > 0 && row.epoch % every == 0 {
            alpha.save(ckpt.join(format!("alpha_epoch_{:04}.mmp", row.epoch)))?;
        }
        Ok(())
    })?;
    write_search_artifacts(&out, &result)?;
    Ok(out.join("genotype.json"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Split = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut train = BTreeSet::new();
        for id in &self.train {
            if !train.insert(id.as_str()) {
                return Err(Error::Config(format!("split lists `{id}` twice in train")));
            }
        }
        let mut test = BTreeSet::new();
        for id in &self.test {
            if train.contains(id.as_str()) {
                return Err(Error::Config(format!("study `{id}` is in both train and test")));
            }
            if !test.insert(id.as_str()) {
                return Err(Error::Config(format!("split lists `{id}` twice in test")));
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("split needs non-empty train and test lists".into()));
        }
        Ok(())
    }
}

/// Train and test reports of a retrained genotype.
#[derive(Debug, Clone)]
pub struct TrainEvalReport {
    pub train: EvalReport,
    pub test: EvalReport,
}

pub fn cmd_train_eval(args: &TrainEvalArgs) -> Result<TrainEvalReport> {
    let cfg = RunConfig::load(&args.config)?;
    let genotype = Genotype::load_json(&args.genotype)?;
    let split = Split::load(&args.split)?;
    let mode = args.modality.unwrap_or(cfg.modality_mode);
    let net_cfg = cfg.supernet_config(mode);
    if genotype.num_nodes() != net_cfg.num_nodes {
        return Err(Error::Genotype(format!(
            "{} has {} nodes per cell, the configuration has {}",
            args.genotype.display(),
            genotype.num_nodes(),
            net_cfg.num_nodes
        )));
    }
    let out = cfg.out_dir(args.out.as_deref())?;
    let samples = load_samples(&cfg.manifest(args.manifest.as_deref())?, Some(net_cfg.input_dims))?;
    let train = select(&samples, &str_ids(&split.train))?;
    let test = select(&samples, &str_ids(&split.test))?;

    let r = retrain(&genotype, &net_cfg, &cfg.retrain, &train, StageSeeds::new(cfg.seed, 0))?;
    let train_scores = score(&r.net, &r.outcome.params, &train)?;
    let test_scores = score(&r.net, &r.outcome.params, &test)?;
    let report = TrainEvalReport {
        train: evaluate(&train_scores, DEFAULT_THRESHOLD)?,
        test: evaluate(&test_scores, DEFAULT_THRESHOLD)?,
    };

    create_dir(&out)?;
    r.outcome.params.save(out.join("model.mmp"))?;
    write_file(&out.join("train_log.csv"), &train_log_csv(&r.outcome.log))?;
    write_file(&out.join("scores.csv"), &scores_csv(&test_scores))?;
    write_file(
        &out.join("metrics.csv"),
        &metrics_csv([("train", &report.train), ("test", &report.test)]),
    )?;
    write_file(&out.join("roc.csv"), &roc_csv(&report.test.roc))?;
    Ok(report)
}

/// Pooled result of one modality mode.
#[derive(Debug, Clone)]
pub struct ModeSummary {
    pub mode: ModalityMode,
    pub report: EvalReport,
    pub genotypes: Vec<Genotype>,
}

#[derive(Debug, Clone)]
pub struct CvSummary {
    pub out: PathBuf,
    pub plan: FoldPlan,
    pub modes: Vec<ModeSummary>,
}

struct FoldOutput {
    genotype: Genotype,
    scores: Vec<ScoredCase>,
}

const DONE_MARKER: &str = "done";

fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn is_done(dir: &Path, fp: &str) -> bool {
    fs::read_to_string(dir.join(DONE_MARKER)).is_ok_and(|s| s.trim() == fp)
}

fn read_scores(path: &Path) -> Result<Vec<ScoredCase>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Data(format!("{}:{line}: malformed score row", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let [id, label, score] = f.as_slice() else {
                return Err(bad(i + 1));
            };
            let label = label.parse().map_err(|_| bad(i + 1))?;
            let score = score.parse().map_err(|_| bad(i + 1))?;
            ScoredCase::new(*id, label, score)
        })
        .collect()
}

struct CvContext<'a> {
    cfg: &'a RunConfig,
    config_json: String,
    seed: u64,
    samples: &'a [Sample],
    plan: &'a FoldPlan,
    out: &'a Path,
}

impl CvContext<'_> {
    /// Search once on fold 0's training split (or reuse a finished one).
    fn shared_search(&self, mode: ModalityMode) -> Result<Genotype> {
        let dir = self.out.join(mode.name()).join("shared");
        let train_ids = self.plan.train_ids(0);
        let fp = fingerprint(&[&self.config_json, mode.name(), "shared", &train_ids.join(",")]);
        if is_done(&dir, &fp) {
            return Genotype::load_json(dir.join("genotype.json"));
        }
        let train = select(self.samples, &train_ids)?;
        let r = search_and_derive(
            &self.cfg.supernet_config(mode),
            &self.cfg.search,
            &train,
            StageSeeds::for_fold(self.seed, 0),
            |_, _| Ok(()),
        )?;
        write_search_artifacts(&dir, &r)?;
        write_file(&dir.join(DONE_MARKER), &fp)?;
        Ok(r.genotype)
    }

    fn run_fold(&self, mode: ModalityMode, fold: usize, shared: Option<&Genotype>) -> Result<FoldOutput> {
        let dir = self.out.join(mode.name()).join(format!("fold_{fold}"));
        let train_ids = self.plan.train_ids(fold);
        let test_ids = self.plan.test_ids(fold);
        let shared_json = shared.map(Genotype::to_json).unwrap_or_default();
        let fp = fingerprint(&[
            &self.config_json,
            mode.name(),
            &fold.to_string(),
            &train_ids.join(","),
            &test_ids.join(","),
            &shared_json,
        ]);
        if is_done(&dir, &fp) {
            return Ok(FoldOutput {
                genotype: Genotype::load_json(dir.join("genotype.json"))?,
                scores: read_scores(&dir.join("scores.csv"))?,
            });
        }
        let _ = fs::remove_file(dir.join(DONE_MARKER));
        create_dir(&dir)?;
        let net_cfg = self.cfg.supernet_config(mode);
        let seeds = StageSeeds::for_fold(self.seed, fold);
        let train = select(self.samples, &train_ids)?;
        let test = select(self.samples, &test_ids)?;

        let genotype = match shared {
            Some(g) => {
                g.save_json(dir.join("genotype.json"))?;
                g.clone()
            }
            None => {
                let r = search_and_derive(&net_cfg, &self.cfg.search, &train, seeds, |_, _| Ok(()))?;
                write_search_artifacts(&dir, &r)?;
                r.genotype
            }
        };
        let r = retrain(&genotype, &net_cfg, &self.cfg.retrain, &train, seeds)?;
        let scores = score(&r.net, &r.outcome.params, &test)?;
        r.outcome.params.save(dir.join("model.mmp"))?;
        write_file(&dir.join("train_log.csv"), &train_log_csv(&r.outcome.log))?;
        write_file(&dir.join("scores.csv"), &scores_csv(&scores))?;
        write_file(&dir.join(DONE_MARKER), &fp)?;
        Ok(FoldOutput { genotype, scores })
    }
}

/// Runs every `(mode, fold)` pipeline, then pools each mode's held-out
/// scores. Finished folds whose inputs are unchanged are reused.
pub fn cmd_cv(args: &CvArgs) -> Result<CvSummary> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let mut modes: Vec<ModalityMode> = Vec::new();
    for &m in if args.modes.is_empty() { std::slice::from_ref(&cfg.modality_mode) } else { &args.modes } {
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    let out = cfg.out_dir(args.out.as_deref())?;
    let samples = load_samples(&cfg.manifest(args.manifest.as_deref())?, Some(cfg.supernet.input_dims))?;
    let items: Vec<(String, u8)> = samples.iter().map(|s| (s.id.clone(), s.label as u8)).collect();
    let plan = make_folds(&items, cfg.k, cfg.seed)?;

    create_dir(&out)?;
    write_file(&out.join("folds.json"), &(serde_json::to_string_pretty(&plan)? + "\n"))?;
    let mut echo = cfg.clone();
    echo.paths = RunPaths::default();
    let config_json = serde_json::to_string_pretty(&echo)?;
    write_file(&out.join("config.json"), &(config_json.clone() + "\n"))?;

    let ctx = CvContext {
        cfg: &cfg,
        config_json,
        seed: cfg.seed,
        samples: &samples,
        plan: &plan,
        out: &out,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", args.jobs)))?;

    let shared: Vec<Option<Genotype>> = if args.shared_genotype {
        pool.install(|| modes.par_iter().map(|&m| ctx.shared_search(m).map(Some)).collect::<Result<_>>())?
    } else {
        vec![None; modes.len()]
    };
    let tasks: Vec<(usize, usize)> = (0..modes.len()).flat_map(|m| (0..cfg.k).map(move |f| (m, f))).collect();
    let outputs: Vec<FoldOutput> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(m, f)| ctx.run_fold(modes[m], f, shared[m].as_ref()))
            .collect::<Result<_>>()
    })?;

    let mut summaries = Vec::new();
    let mut outputs = outputs.into_iter();
    for &mode in &modes {
        let folds: Vec<FoldOutput> = outputs.by_ref().take(cfg.k).collect();
        let per_fold: Vec<Vec<ScoredCase>> = folds.iter().map(|f| f.scores.clone()).collect();
        let report = aggregate_cv(&per_fold, DEFAULT_THRESHOLD)?;
        let dir = out.join(mode.name());
        write_file(&dir.join("metrics.csv"), &cv_metrics_csv(&report))?;
        write_file(&dir.join("roc.csv"), &roc_csv(&report.pooled.roc))?;
        write_file(&dir.join("scores.csv"), &scores_csv(&per_fold.concat()))?;
        summaries.push(ModeSummary {
            mode,
            report: report.pooled,
            genotypes: folds.into_iter().map(|f| f.genotype).collect(),
        });
    }
    write_file(
        &out.join("summary.csv"),
        &metrics_csv(summaries.iter().map(|s| (s.mode.name(), &s.report))),
    )?;
    Ok(CvSummary {
        out,
        plan,
        modes: summaries,
    })
}

// ---------------------------------------------------------------- entry

fn describe(r: &EvalReport) -> String {
    let m = &r.metrics;
    format!(
        "n={} acc={:.3} sen={:.3} spe={:.3} pre={:.3} f1={:.3} auc={:.3}",
        r.counts.total(),
        m.acc,
        m.sen,
        m.spe,
        m.pre,
        m.f1,
        r.auc
    )
}

/// Runs a parsed command and returns its stdout lines.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    Ok(match &cli.command {
        Command::GenData(a) => vec![cmd_gen_data(a)?.display().to_string()],
        Command::Search(a) => vec![cmd_search(a)?.display().to_string()],
        Command::TrainEval(a) => {
            let r = cmd_train_eval(a)?;
            vec![format!("train {}", describe(&r.train)), format!("test {}", describe(&r.test))]
        }
        Command::Cv(a) => {
            let s = cmd_cv(a)?;
            let mut lines: Vec<String> = s.modes.iter().map(|m| format!("{} {}", m.mode, describe(&m.report))).collect();
            lines.push(s.out.join("summary.csv").display().to_string());
            lines
        }
    })
}

/// Parses `args` (program name first), runs the command, prints its output
/// and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json() -> serde_json::Value {
        serde_json::json!({
            "supernet": {"input_dims": [8, 8, 8], "stem_channels": 2, "num_nodes": 2, "num_reduction_cells": 2},
            "search": {"epochs": 1},
            "retrain": {"epochs": 1},
            "k": 3,
            "seed": 5
        })
    }

    fn write_config(dir: &Path, v: &serde_json::Value) -> PathBuf {
        let p = dir.join("run.json");
        fs::write(&p, v.to_string()).unwrap();
        p
    }

    #[test]
    fn config_requires_seed_and_known_keys() {
        let dir = tempfile::tempdir().unwrap();
        let ok = RunConfig::load(write_config(dir.path(), &config_json())).unwrap();
        assert_eq!(ok.k, 3);
        assert_eq!(ok.modality_mode, ModalityMode::PetCt);
        assert_eq!(ok.search.theta_lr, SearchConfig::default().theta_lr);

        let mut v = config_json();
        v.as_object_mut().unwrap().remove("seed");
        let err = RunConfig::load(write_config(dir.path(), &v)).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");

        let mut v = config_json();
        v["supernet"]["stem_chanels"] = 2.into();
        assert!(RunConfig::load(write_config(dir.path(), &v)).is_err());

        let mut v = config_json();
        v["supernet"]["stem_channels"] = 3.into();
        assert!(matches!(RunConfig::load(write_config(dir.path(), &v)), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("data")).unwrap();
        let mut v = config_json();
        v["paths"] = serde_json::json!({"data_dir": "data", "out_dir": "results"});
        let cfg = RunConfig::load(write_config(dir.path(), &v)).unwrap();
        assert_eq!(cfg.manifest(None).unwrap(), dir.path().join("data/manifest.ndjson"));
        assert_eq!(cfg.out_dir(None).unwrap(), dir.path().join("results"));
        assert_eq!(cfg.out_dir(Some(Path::new("x"))).unwrap(), Path::new("x"));

        v["paths"]["data_dir"] = "missing".into();
        assert!(RunConfig::load(write_config(dir.path(), &v)).is_err());
    }

    #[test]
    fn split_validation() {
        let s = |train: &[&str], test: &[&str]| Split {
            train: train.iter().map(|x| x.to_string()).collect(),
            test: test.iter().map(|x| x.to_string()).collect(),
        };
        assert!(s(&["a", "b"], &["c"]).validate().is_ok());
        assert!(s(&["a", "b"], &["b"]).validate().unwrap_err().to_string().contains("both"));
        assert!(s(&["a", "a"], &["c"]).validate().is_err());
        assert!(s(&["a"], &[]).validate().is_err());
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let a = StageSeeds::new(1, 0);
        let set: BTreeSet<u64> = [a.supernet_init, a.search, a.derived_init, a.retrain].into();
        assert_eq!(set.len(), 4);
        assert_ne!(StageSeeds::for_fold(1, 0), StageSeeds::for_fold(1, 1));
        assert_eq!(StageSeeds::for_fold(1, 2), StageSeeds::for_fold(1, 2));
    }

    #[test]
    fn flag_parsing() {
        assert_eq!(parse_dims("16,8, 4").unwrap(), [16, 8, 4]);
        assert!(parse_dims("16,8").is_err());
        let cli = Cli::try_parse_from([
            "mmnas", "cv", "--config", "c.json", "--modes", "pet_ct,ct_only", "--jobs", "2", "--shared-genotype",
        ])
        .unwrap();
        let Command::Cv(a) = cli.command else { panic!() };
        assert_eq!(a.modes, [ModalityMode::PetCt, ModalityMode::CtOnly]);
        assert!(a.shared_genotype && a.jobs == 2 && a.k.is_none());
        assert!(Cli::try_parse_from(["mmnas", "cv", "--config", "c", "--modes", "mri"]).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["mmnas", "gen-data", "--n", "7", "--seed", "1", "--out", "/nonexistent/x"]), 2);
        assert_eq!(main_with_args(["mmnas", "frobnicate"]), 2);
        assert_eq!(main_with_args(["mmnas", "--help"]), 0);
    }

    #[test]
    fn scores_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![
            ScoredCase::new("a", 1, 0.1 + 0.2).unwrap(),
            ScoredCase::new("b", 0, 1.0 / 3.0).unwrap(),
        ];
        let p = dir.path().join("s.csv");
        fs::write(&p, scores_csv(&cases)).unwrap();
        assert_eq!(read_scores(&p).unwrap(), cases);
    }
}
