//! Experiment configs and the run orchestration behind the CLI.
//!
//! A config is a TOML file:
//!
//! ```toml
//! seeds = [1, 2, 3]
//! out = "runs/demo"
//!
//! [data]
//! source = "synthetic"        # synthetic | tsv | encoded
//! # path = "train.tsv.gz"     # tsv file or encoded dataset directory
//! # schema = "schema.txt"     # tsv only
//! split_seed = 0
//!
//! [data.synthetic]
//! samples = 20000
//!
//! [model]
//! kind = "normdnn"
//! hidden = [64, 64, 64]
//!
//! [train]
//! max_epochs = 5
//!
//! [grid]
//! emb_norm = ["none", "voln"]
//! mlp_norm = ["none", "voln"]
//! ```
//!
//! Every run directory holds `config.toml` (the resolved config of that
//! run), `dataset.hash`, `model.nrmd`, `history.csv`, `stats.csv`,
//! `summary.json` and `summary.hash`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, ingest_tsv, parse_schema_file, Dataset, IngestOptions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::network::{save_checkpoint, Model, ModelConfig};
use crate::norm::NormKind;
use crate::probe::{export_stats, StatsRecord};
use crate::train::{bce_loss, fit, history_csv, predict, auc, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Tsv,
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    pub split_seed: u64,
    pub ingest: IngestOptions,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            schema: None,
            split_seed: 0,
            ingest: IngestOptions::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Axes of a normalization grid. `emb_norm` applies to both field kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub emb_norm: Vec<NormKind>,
    pub mlp_norm: Vec<NormKind>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { emb_norm: vec![NormKind::None], mlp_norm: vec![NormKind::None] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid: None,
        }
    }
}

const NORM_KEYS: [(&str, &str); 3] = [("model", "numerical_norm"), ("model", "categorical_norm"), ("model", "mlp_norm")];
const GRID_KEYS: [&str; 2] = ["emb_norm", "mlp_norm"];

fn check_norm_name(key: &str, value: &toml::Value) -> Result<()> {
    let name = value.as_str().ok_or_else(|| Error::config(key, "expected a normalization name"))?;
    name.parse::<NormKind>().map(|_| ()).map_err(|_| {
        Error::config(key, format!("unknown normalization `{name}` (allowed: {})", NormKind::allowed_names()))
    })
}

impl ExperimentConfig {
    /// Parses TOML text; paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<ExperimentConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        for (section, key) in NORM_KEYS {
            if let Some(v) = table.get(section).and_then(|s| s.get(key)) {
                check_norm_name(&format!("{section}.{key}"), v)?;
            }
        }
        for key in GRID_KEYS {
            if let Some(v) = table.get("grid").and_then(|s| s.get(key)) {
                let items = v.as_array().ok_or_else(|| Error::config(format!("grid.{key}"), "expected a list of normalization names"))?;
                for item in items {
                    check_norm_name(&format!("grid.{key}"), item)?;
                }
            }
        }
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| locate_key(text, s.start)).unwrap_or_else(|| "config".into());
            Error::config(key, e.message().to_string())
        })?;
        for p in [&mut cfg.data.path, &mut cfg.data.schema].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.model.uses_batch_norm() && self.train.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2 when BatchNorm is used"));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate()?,
            DataSource::Tsv | DataSource::Encoded => {
                let path = self.data.path.as_ref().ok_or_else(|| Error::config("data.path", "required for this source"))?;
                if !path.exists() {
                    return Err(Error::config("data.path", format!("{} does not exist", path.display())));
                }
                if self.data.source == DataSource::Tsv {
                    let schema = self.data.schema.as_ref().ok_or_else(|| Error::config("data.schema", "required for tsv data"))?;
                    if !schema.exists() {
                        return Err(Error::config("data.schema", format!("{} does not exist", schema.display())));
                    }
                }
            }
        }
        if let Some(grid) = &self.grid {
            if grid.emb_norm.is_empty() || grid.mlp_norm.is_empty() {
                return Err(Error::config("grid", "axes must be non-empty"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => Ok(generate_synthetic(&self.data.synthetic)?.split(self.data.split_seed)?.0),
            DataSource::Encoded => Dataset::load(self.data.path.as_ref().expect("validated")),
            DataSource::Tsv => {
                let fields = parse_schema_file(self.data.schema.as_ref().expect("validated"))?;
                let opts = IngestOptions { seed: self.data.split_seed, ..self.data.ingest };
                Ok(ingest_tsv(self.data.path.as_ref().expect("validated"), &fields, &opts)?.dataset)
            }
        }
    }
}

/// Best-effort dotted key for the TOML position `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let section = before
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|r| r.split(']').next()).map(str::to_string));
    let line = before.rsplit('\n').next().unwrap_or("");
    let key = line.split('=').next().map(str::trim).filter(|k| !k.is_empty() && line.contains('='));
    match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k}"),
        (Some(s), None) => s,
        (None, Some(k)) => k.to_string(),
        (None, None) => "config".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub seed: u64,
    pub numerical_norm: String,
    pub categorical_norm: String,
    pub mlp_norm: String,
    pub dataset_hash: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    pub test_auc: f64,
    pub test_logloss: f64,
    pub history_sha256: String,
    pub dropped_batches: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Eval-mode statistics of `model` over `data`, one record per chunk.
pub fn probe_dataset(model: &Model, data: &Batch, sites: &[String], chunk: usize) -> Result<Vec<StatsRecord>> {
    let mut m = model.clone();
    m.attach_probe(sites)?;
    let idx: Vec<usize> = (0..data.rows()).collect();
    for c in idx.chunks(chunk.max(1)) {
        m.forward(&data.select(c), false)?;
    }
    Ok(m.detach_probe().map(|mut p| p.take_records()).unwrap_or_default())
}

/// Trains one model and writes its run directory.
pub fn run_single(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut resolved = cfg.clone();
    resolved.seeds = vec![seed];
    resolved.out = dir.to_path_buf();
    resolved.model = cfg.model.resolved();
    resolved.train.seed = seed;
    resolved.grid = None;
    write(&dir.join("config.toml"), resolved.to_toml()?)?;
    let dataset_hash = dataset.hash();
    write(&dir.join("dataset.hash"), format!("{dataset_hash}\n"))?;

    let model = Model::build(&resolved.model, &dataset.schema, seed)?;
    let result = fit(model, &dataset.train, &dataset.valid, &resolved.train)?;
    let history = history_csv(&result.history);
    write(&dir.join("history.csv"), &history)?;
    save_checkpoint(&result.model, &dir.join("model.nrmd"))?;

    let chunk = resolved.train.batch_size.max(1000);
    let probs = predict(&result.model, &dataset.test, chunk)?;
    let test_auc = auc(&probs, dataset.test.labels())?;
    let (test_logloss, _) = bce_loss(&probs, dataset.test.labels())?;
    let sites = result.model.probe_sites();
    export_stats(&probe_dataset(&result.model, &dataset.test, &sites, chunk)?, &dir.join("stats.csv"))?;

    let m = &resolved.model;
    let summary = RunSummary {
        model: m.kind.name().into(),
        seed,
        numerical_norm: m.numerical_norm.name().into(),
        categorical_norm: m.categorical_norm.name().into(),
        mlp_norm: m.mlp_norm.name().into(),
        dataset_hash,
        epochs: result.history.len(),
        best_epoch: result.best_epoch,
        best_valid_auc: result.best_valid_auc,
        test_auc,
        test_logloss,
        history_sha256: sha256_hex(history.as_bytes()),
        dropped_batches: result.dropped_batches,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    write(&dir.join("summary.json"), &json)?;
    write(&dir.join("summary.hash"), format!("{}\n", sha256_hex(json.as_bytes())))?;
    Ok(summary)
}

fn read_summary(dir: &Path) -> Option<RunSummary> {
    let text = fs::read_to_string(dir.join("summary.json")).ok()?;
    let hash = fs::read_to_string(dir.join("summary.hash")).ok()?;
    (hash.trim() == sha256_hex(text.as_bytes())).then(|| serde_json::from_str(&text).ok()).flatten()
}

/// Runs every seed of `cfg` into `out/seed-<s>`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<(PathBuf, RunSummary)>> {
    let dataset = cfg.load_dataset()?;
    cfg.seeds
        .iter()
        .map(|&s| {
            let dir = cfg.out.join(format!("seed-{s}"));
            run_single(cfg, &dataset, s, &dir).map(|sum| (dir, sum))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub emb_norm: NormKind,
    pub mlp_norm: NormKind,
    pub aucs: Vec<f64>,
}

impl GridRow {
    pub fn mean(&self) -> f64 {
        self.aucs.iter().sum::<f64>() / self.aucs.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.aucs.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.aucs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub runs: usize,
    /// Cells reused from an earlier, interrupted invocation.
    pub resumed: usize,
}

/// One run per (emb_norm, mlp_norm, seed) under `out/emb-<e>_mlp-<m>/seed-<s>`.
/// Cells whose summary already exists are read back instead of retrained.
pub fn cmd_grid(cfg: &ExperimentConfig, parallel: usize) -> Result<GridReport> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let dataset = cfg.load_dataset()?;
    let mut jobs = Vec::new();
    for &e in &grid.emb_norm {
        for &m in &grid.mlp_norm {
            for &s in &cfg.seeds {
                jobs.push((e, m, s));
            }
        }
    }
    let run = |&(e, m, s): &(NormKind, NormKind, u64)| -> Result<(f64, bool)> {
        let dir = cfg.out.join(format!("emb-{}_mlp-{}", e.name(), m.name())).join(format!("seed-{s}"));
        if let Some(done) = read_summary(&dir) {
            return Ok((done.test_auc, true));
        }
        let mut cell = cfg.clone();
        cell.model.numerical_norm = e;
        cell.model.categorical_norm = e;
        cell.model.mlp_norm = m;
        run_single(&cell, &dataset, s, &dir).map(|sum| (sum.test_auc, false))
    };
    let results: Vec<(f64, bool)> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::config("--parallel", e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut rows: Vec<GridRow> = Vec::new();
    for ((e, m, _), (a, _)) in jobs.iter().zip(&results) {
        match rows.iter_mut().find(|r| r.emb_norm == *e && r.mlp_norm == *m) {
            Some(r) => r.aucs.push(*a),
            None => rows.push(GridRow { emb_norm: *e, mlp_norm: *m, aucs: vec![*a] }),
        }
    }
    Ok(GridReport { rows, runs: jobs.len(), resumed: results.iter().filter(|r| r.1).count() })
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("emb_norm,mlp_norm,seeds,mean_auc,std_auc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.emb_norm, r.mlp_norm, r.aucs.len(), r.mean(), r.std()));
    }
    out
}

pub fn grid_table(rows: &[GridRow]) -> String {
    let mut out = format!("{:<9} {:<9} {:>5}  {}\n", "emb_norm", "mlp_norm", "seeds", "test AUC");
    for r in rows {
        out.push_str(&format!("{:<9} {:<9} {:>5}  {:.4} ± {:.4}\n", r.emb_norm.name(), r.mlp_norm.name(), r.aucs.len(), r.mean(), r.std()));
    }
    out
}
