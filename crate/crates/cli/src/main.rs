use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use geocross::bands::BandCombination;
use geocross::bench::{run_protocol, table_from_records, write_reports, ModelSpec, ReportFormat, ResultStore, RunStatus};
use geocross::data::{generate_synthetic, Dataset, Split, SyntheticConfig, TaskKind};
use geocross::finetune::{examples, finetune, linear_probe_mixture, FinetuneConfig, FinetuneMode, TaskSpec};
use geocross::metrics::MetricRegistry;
use geocross::pretrain::{load_corpora, PretrainConfig, Pretrainer};
use geocross::vit::BackboneRegistry;

#[derive(Parser)]
#[command(name = "geocross", version, about = "Cross-band pretraining and evaluation for satellite imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-sensor dataset and its manifest.
    GenSynthetic {
        #[arg(long, default_value = "classification")]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// JSON synthetic config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Self-distillation pretraining from a JSON config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a backbone checkpoint on one band combination.
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "RGB")]
        train_combo: String,
        #[arg(long, default_value = "full")]
        mode: String,
        /// JSON fine-tuning config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen features of a mixture of combinations.
    Probe {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "RGB,S2,S1,NS1S2")]
        combos: String,
        /// Combinations scored on the test split; defaults to `--combos`.
        #[arg(long)]
        eval_combos: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the seven-cell protocol and append records to a store.
    Evaluate {
        /// `name=checkpoint` pairs, comma separated (a bare path uses its file stem).
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<PathBuf>,
        /// Number of seeds, run as 0..N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Ranking tables and plot data from a store.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "csv,text,radar")]
        format: Vec<String>,
        /// Restrict to one fine-tuning mode.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn finetune_config(path: Option<&Path>) -> Result<FinetuneConfig> {
    Ok(match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => FinetuneConfig::default(),
    })
}

fn combos(list: &str) -> Result<Vec<BandCombination>> {
    Ok(list
        .split(',')
        .map(|s| BandCombination::by_name(s.trim()))
        .collect::<geocross::Result<_>>()?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let registry = BackboneRegistry::default();
    match cli.command {
        Command::GenSynthetic {
            task,
            out,
            config,
            seed,
            rho,
            size,
            classes,
            train,
            val,
            test,
        } => {
            let task = TaskKind::parse(&task)?;
            let mut cfg: SyntheticConfig = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => SyntheticConfig::default(),
            };
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = rho {
                cfg.rho = v;
            }
            if let Some(v) = size {
                cfg.size = v;
            }
            if let Some(v) = classes {
                cfg.num_classes = v;
            }
            if let Some(v) = train {
                cfg.train = v;
            }
            if let Some(v) = val {
                cfg.val = v;
            }
            if let Some(v) = test {
                cfg.test = v;
            }
            let manifest = generate_synthetic(&cfg, task, &out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain { config, out } => {
            let cfg = PretrainConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let corpora = load_corpora(&cfg.mix, base)?;
            let mut p = Pretrainer::new(cfg, &registry)?;
            let logs = p.run(&corpora, Some(&out))?;
            if let Some(last) = logs.last() {
                println!("step {} total loss {:.4}", last.step, last.total);
            }
            println!("{}", out.join("backbone.gxbb").display());
        }
        Command::Finetune {
            backbone,
            task,
            train_combo,
            mode,
            config,
            lr,
            seed,
            out,
        } => {
            let mut cfg = finetune_config(config.as_deref())?;
            cfg.mode = FinetuneMode::parse(&mode)?;
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let model = registry.load(&backbone)?;
            let data = Dataset::load(&task)?;
            let combo = BandCombination::by_name(&train_combo)?;
            let metrics = MetricRegistry::default();
            let spec = TaskSpec {
                task: data.task(),
                num_classes: data.num_classes(),
                metric: metrics.get(&data.metric_name())?,
            };
            let train = examples(data.split(Split::Train), &combo, &combo)?;
            let val = examples(data.split(Split::Val), &combo, &combo)?;
            let outcome = finetune(model.as_ref(), &train, &val, &spec, &cfg)?;
            fs::create_dir_all(&out)?;
            let mut log = fs::File::create(out.join("train_log.jsonl"))?;
            for e in &outcome.history {
                writeln!(log, "{}", serde_json::to_string(e)?)?;
            }
            outcome.model.save(&out.join("best.gxbm"))?;
            println!(
                "best epoch {} val {} {}",
                outcome.best_epoch,
                data.metric_name(),
                outcome.best_val.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Probe {
            backbone,
            task,
            combos: list,
            eval_combos,
            config,
            seed,
        } => {
            let mut cfg = finetune_config(config.as_deref())?;
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let model = registry.load(&backbone)?;
            let data = Dataset::load(&task)?;
            let train = combos(&list)?;
            let eval = combos(eval_combos.as_deref().unwrap_or(&list))?;
            let out = linear_probe_mixture(model.as_ref(), &data, &train, &eval, &cfg)?;
            println!("trained on {} vectors", out.train_vectors);
            for (c, v) in &out.scores {
                println!("{c}\t{v:.4}");
            }
        }
        Command::Evaluate {
            models,
            datasets,
            seeds,
            mode,
            jobs,
            store,
            config,
        } => {
            if models.is_empty() || datasets.is_empty() {
                bail!("--models and --datasets are required");
            }
            let cfg = finetune_config(config.as_deref())?;
            let specs = models
                .iter()
                .map(|m| {
                    let (name, path) = match m.split_once('=') {
                        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                        None => {
                            let p = PathBuf::from(m);
                            let n = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                            (n, p)
                        }
                    };
                    Ok(ModelSpec {
                        name,
                        backbone: registry.load(&path).with_context(|| format!("loading {}", path.display()))?,
                        finetune: cfg.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let data = datasets
                .iter()
                .map(|p| Dataset::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let store = ResultStore::open(&store)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let records = run_protocol(&specs, &data, &seeds, FinetuneMode::parse(&mode)?, &store, jobs)?;
            let errors: Vec<_> = records.iter().filter(|r| r.status == RunStatus::Error).collect();
            println!("{} records, {} errors", records.len(), errors.len());
            for r in &errors {
                eprintln!("{} {} {} seed {}: {}", r.model, r.dataset, r.cell, r.seed, r.error.as_deref().unwrap_or(""));
            }
            if !errors.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report {
            store,
            format,
            mode,
            out,
        } => {
            let records = ResultStore::open(&store)?.records()?;
            let mode = mode.as_deref().map(FinetuneMode::parse).transpose()?;
            let table = table_from_records(&records, mode)?;
            let formats = format
                .iter()
                .map(|f| ReportFormat::parse(f))
                .collect::<geocross::Result<Vec<_>>>()?;
            for p in write_reports(&table, &formats, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
