use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use normline::data::{generate_synthetic, ingest_tsv, parse_schema_file, write_raw_synthetic, Dataset, IngestOptions, SyntheticSpec};
use normline::experiment::{cmd_grid, cmd_train, grid_csv, grid_table, probe_dataset, ExperimentConfig};
use normline::features::Batch;
use normline::network::load_checkpoint;
use normline::probe::{compare_table, export_stats, summary_table};
use normline::train::{auc, bce_loss, predict};
use normline::{Error, Result};

#[derive(Parser)]
#[command(name = "normline", version, about = "Train and inspect normalized CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write self-describing run directories.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (embedding norm, MLP norm, seed) cell of the config's grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Record activation statistics of a checkpoint on a dataset split.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encoded dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Comma-separated probe sites; all sites when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Second checkpoint to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value = "stats.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
    },
    /// Generate a synthetic long-tail dataset.
    Synth {
        /// Experiment config whose [data.synthetic] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a raw TSV into a dataset directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = normline::data::DEFAULT_MIN_COUNT)]
        min_count: usize,
        #[arg(long)]
        log_transform: bool,
        /// Seed of the 8:1:1 split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report AUC and log loss of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn pick(ds: &Dataset, split: SplitName) -> &Batch {
    match split {
        SplitName::Train => &ds.train,
        SplitName::Valid => &ds.valid,
        SplitName::Test => &ds.test,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { context: format!("writing {}", path.display()), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            for (dir, s) in cmd_train(&cfg)? {
                println!(
                    "{}\tseed={}\tepochs={}\tvalid_auc={:.6}\ttest_auc={:.6}\ttest_logloss={:.6}",
                    dir.display(),
                    s.seed,
                    s.epochs,
                    s.best_valid_auc,
                    s.test_auc,
                    s.test_logloss
                );
                if s.dropped_batches > 0 {
                    eprintln!("train: dropped {} single-row batches (BatchNorm needs two rows)", s.dropped_batches);
                }
            }
        }
        Command::Grid { config, seed, out, parallel, format } => {
            let cfg = load_config(&config, seed, out)?;
            let report = cmd_grid(&cfg, parallel)?;
            if report.resumed > 0 {
                eprintln!("grid: resumed {} of {} runs from earlier output", report.resumed, report.runs);
            }
            let text = match format {
                Format::Csv => grid_csv(&report.rows),
                Format::Table => grid_table(&report.rows),
            };
            write(&cfg.out.join("grid.csv"), &grid_csv(&report.rows))?;
            print!("{text}");
        }
        Command::Probe { checkpoint, data, split, layers, compare, out, batch_size } => {
            let ds = Dataset::load(&data)?;
            let batch = pick(&ds, split);
            let model = load_checkpoint(&checkpoint)?;
            let sites = if layers.is_empty() { model.probe_sites() } else { layers };
            let records = probe_dataset(&model, batch, &sites, batch_size)?;
            export_stats(&records, &out)?;
            match compare {
                Some(other) => {
                    let other = load_checkpoint(&other)?;
                    let theirs = probe_dataset(&other, batch, &sites, batch_size)?;
                    print!("{}", compare_table(&records, &theirs));
                }
                None => print!("{}", summary_table(&records)),
            }
        }
        Command::Synth { config, seed, samples, out } => {
            let mut spec = match config {
                Some(c) => ExperimentConfig::load(&c)?.data.synthetic,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = samples {
                spec.samples = n;
            }
            let data = generate_synthetic(&spec)?;
            let (ds, _) = data.split(spec.seed)?;
            ds.save(&out)?;
            write_raw_synthetic(&data, &out.join("raw.tsv"), &out.join("schema.txt"))?;
            let oracle: String = data.oracle_scores.iter().map(|s| format!("{s}\n")).collect();
            write(&out.join("oracle.tsv"), &oracle)?;
            let ceiling = auc(&data.oracle_scores, data.data.labels())?;
            println!("{}\trows={}\toracle_auc={ceiling:.6}\thash={}", out.display(), ds.len(), ds.hash());
        }
        Command::Ingest { input, schema, out, min_count, log_transform, seed } => {
            let fields = parse_schema_file(&schema)?;
            let ingested = ingest_tsv(&input, &fields, &IngestOptions { min_count, log_transform, seed })?;
            ingested.dataset.save(&out)?;
            ingested.vocabulary.write(&out.join("vocab.tsv"))?;
            if ingested.missing_numerical > 0 {
                eprintln!("data: {} missing numerical values read as 0", ingested.missing_numerical);
            }
            if ingested.missing_categorical > 0 {
                eprintln!("data: {} missing categorical values mapped to OOV", ingested.missing_categorical);
            }
            println!("{}\trows={}\thash={}", out.display(), ingested.dataset.len(), ingested.dataset.hash());
        }
        Command::Eval { checkpoint, data, split } => {
            let ds = Dataset::load(&data)?;
            let batch = pick(&ds, split);
            let model = load_checkpoint(&checkpoint)?;
            let probs = predict(&model, batch, 1000)?;
            let (loss, _) = bce_loss(&probs, batch.labels())?;
            println!("auc={:.6}\tlogloss={loss:.6}\trows={}", auc(&probs, batch.labels())?, batch.rows());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("NORMLINE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
