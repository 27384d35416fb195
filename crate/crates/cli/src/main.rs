use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use qp_core::ablation::{ablation_suite, gate_weights_name, AblationTable, Suite, BASELINE, FULL, PRETRAIN};
use qp_core::checkpoint;
use qp_core::eval::evaluate_videos;
use qp_core::pipeline::{DetectionRecord, RunOptions};
use qp_core::propagation::PropagationVariant;
use qp_core::synthdata::{generate_dataset, load_dataset, write_dataset, Dataset, Split};
use qp_core::training::{train_stage1, train_stage2_gate};
use qp_core::{Config, Error, QueryPropModel, Result};

#[derive(Parser)]
#[command(name = "qp", version, about = "Query propagation video detection on synthetic videos")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Leave wall-clock timings out of reports so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Temporal memory on, every propagation variant trained.
    Full,
    /// Memory off, non-key head variant d only.
    Baseline,
    /// Like `baseline`, for `training.pretrain_steps`; a warm start for the other two.
    Pretrain,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Default,
    /// Reduced dimensions for a single CPU core.
    Desk,
    /// Minimal dimensions for smoke tests.
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test videos.
    GenData,
    /// Stage 1: train backbone and detection heads.
    Train {
        #[arg(long, value_enum, default_value = "full")]
        kind: Kind,
        /// Dataset directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initialize matching parameters from these weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Stage 2: train the propagation gate on frozen detector weights.
    TrainGate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 weights (default `<out>/full.safetensors`).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Overrides `gate.beta`.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Evaluate weights on the test videos with the configured scheduler.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Run an ablation suite over the weights found in `--weights-dir`.
    Ablate {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding baseline/full/gate_b*.safetensors (default `<out>`).
        #[arg(long)]
        weights_dir: Option<PathBuf>,
    },
    /// Print a config as TOML: the loaded one, or a built-in preset.
    PrintConfig {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Render SVG plots from ablation reports.
    Plot {
        /// Report files (default: every `<out>/ablation_*.json`).
        reports: Vec<PathBuf>,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn data_dir(cli: &Cli, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| cli.out.join("data"))
}

fn load(cli: &Cli, data: &Option<PathBuf>) -> Result<Dataset> {
    let dir = data_dir(cli, data);
    info!("loading dataset from {}", dir.display());
    load_dataset(&dir)
}

fn run(cli: &Cli, cfg: Config) -> Result<ExitCode> {
    if let Command::PrintConfig { preset } = &cli.command {
        let mut c = match preset {
            None => cfg,
            Some(Preset::Default) => Config::default(),
            Some(Preset::Desk) => Config::desk(),
            Some(Preset::Tiny) => Config::tiny(),
        };
        if let Some(s) = cli.seed {
            c.seed = s;
        }
        print!("{}", c.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match &cli.command {
        Command::PrintConfig { .. } => unreachable!("handled above"),
        Command::GenData => {
            let ds = generate_dataset(&cfg.data, cfg.seed)?;
            let dir = cli.out.join("data");
            write_dataset(&ds, &dir)?;
            println!("wrote {} videos to {}", ds.videos.len(), dir.display());
        }
        Command::Train { kind, data, init } => {
            let ds = load(cli, data)?;
            let mut cfg = cfg;
            let name = match kind {
                Kind::Full => {
                    cfg.memory.enabled = true;
                    cfg.training.variants = PropagationVariant::ALL.to_vec();
                    FULL
                }
                Kind::Baseline | Kind::Pretrain => {
                    cfg.memory.enabled = false;
                    cfg.training.variants = vec![PropagationVariant::D];
                    if let Kind::Pretrain = kind {
                        cfg.training.steps = cfg.training.pretrain_steps;
                        PRETRAIN
                    } else {
                        BASELINE
                    }
                }
            };
            let mut model = QueryPropModel::new(&cfg);
            if let Some(p) = init {
                let n = model.init_from(&checkpoint::load(p)?);
                info!("initialized {n} tensors from {}", p.display());
            }
            let train = ds.split(Split::Train);
            info!("training {name} on {} videos for {} steps", train.len(), cfg.training.steps);
            let report = train_stage1(&mut model, &train, cfg.seed)?;
            report.write_csv(&cli.out.join(format!("{name}_train.csv")))?;
            let path = cli.out.join(format!("{name}.safetensors"));
            checkpoint::save(&model, &path)?;
            let n = report.steps.len();
            println!(
                "{name}: loss {:.4} -> {:.4}; weights {}",
                report.mean_loss(0, 50),
                report.mean_loss(n.saturating_sub(50), n),
                path.display()
            );
        }
        Command::TrainGate { data, weights, beta } => {
            let ds = load(cli, data)?;
            let path = weights.clone().unwrap_or_else(|| cli.out.join(format!("{FULL}.safetensors")));
            let mut model = checkpoint::load(&path)?;
            model.config.gate = cfg.gate.clone();
            model.config.propagation = cfg.propagation.clone();
            if let Some(b) = beta {
                model.config.gate.beta = *b;
            }
            model.config.validate()?;
            let train = ds.split(Split::Train);
            let report = train_stage2_gate(&mut model, &train, cfg.seed)?;
            let name = gate_weights_name(model.config.gate.beta);
            write_json(&cli.out.join(format!("{name}_train.json")), &report)?;
            let out = cli.out.join(format!("{name}.safetensors"));
            checkpoint::save(&model, &out)?;
            let (a, b) = report.initial_and_final();
            println!("{name}: bce {a:.4} -> {b:.4}, positives {:.3}; weights {}", report.positive_rate, out.display());
        }
        Command::Eval { data, weights } => {
            let ds = load(cli, data)?;
            let path = weights.clone().unwrap_or_else(|| cli.out.join(format!("{FULL}.safetensors")));
            let model = checkpoint::load(&path)?;
            let mut opts = RunOptions::from_config(&cfg);
            opts.timing = !cli.deterministic;
            let test = ds.test();
            let (report, runs) = evaluate_videos(&model, &opts, &test, &cfg.eval, &cfg.digest())?;
            write_json(&cli.out.join("eval_report.json"), &report)?;
            let det_path = cli.out.join("detections.jsonl");
            let mut f = std::io::BufWriter::new(fs::File::create(&det_path).map_err(|e| Error::io(&det_path, e))?);
            for (v, r) in test.iter().zip(&runs) {
                for (d, t) in r.detections.iter().zip(&r.traces) {
                    let line = serde_json::to_string(&DetectionRecord::new(&v.id, d, t)).expect("records serialize");
                    writeln!(f, "{line}").map_err(|e| Error::io(&det_path, e))?;
                }
            }
            println!(
                "mAP@0.5 {:.4}  stages/frame {:.3}  key interval {:.2}",
                report.map_at_50, report.mean_head_stages_per_frame, report.mean_key_interval
            );
        }
        Command::Ablate { suite, data, weights_dir } => {
            let ds = load(cli, data)?;
            let dir = weights_dir.clone().unwrap_or_else(|| cli.out.clone());
            let mut models = BTreeMap::new();
            for name in [BASELINE.to_string(), FULL.to_string(), gate_weights_name(1.25), gate_weights_name(1.5)] {
                let p = dir.join(format!("{name}.safetensors"));
                if p.exists() {
                    models.insert(name, checkpoint::load(&p)?);
                }
            }
            let table = ablation_suite(&ds.test(), &models, *suite, &cfg, !cli.deterministic)?;
            write_json(&cli.out.join(format!("ablation_{suite}.json")), &table)?;
            print!("{}", table.render());
            if table.is_partial() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Plot { reports } => {
            let paths: Vec<PathBuf> = if reports.is_empty() {
                Suite::ALL.iter().map(|s| cli.out.join(format!("ablation_{s}.json"))).filter(|p| p.exists()).collect()
            } else {
                reports.clone()
            };
            let mut tables = Vec::new();
            for p in &paths {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let t: AblationTable = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                tables.push(t);
            }
            for f in qp_core::plot::emit_plots(&tables, &cli.out.join("plots"))? {
                println!("{}", f.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    };
    let result = cfg.and_then(|mut cfg| {
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        run(&cli, cfg)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
