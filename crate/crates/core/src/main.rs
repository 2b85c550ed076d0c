use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tyrion::config::{ObjectiveChoice, RunConfig};
use tyrion::data::caffe;
use tyrion::metrics::comparison_table;
use tyrion::model::{param_count, ModelConfig};
use tyrion::{run, Error, Result};

/// Exit code when evaluation found images without a predicted front.
const EXIT_NO_FRONT: u8 = 5;

#[derive(Parser)]
#[command(name = "tyrion", version, about = "Calving-front delineation: synth, pretrain, finetune, infer, eval, bench")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (`paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the 64 px desk-scale model instead of the configured one.
    #[arg(long, global = true)]
    toy: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Self-supervised pretraining (setups 3 and 4).
    Pretrain(TrainArgs),
    /// Fine-tune the zones head.
    Finetune(TrainArgs),
    /// Run the ensemble over a dataset of scenes.
    Infer(InferArgs),
    /// MDE report of predicted fronts against labels.
    Eval(EvalArgs),
    /// Throughput of a single member against the full ensemble.
    Bench(BenchArgs),
    /// Convert a CaFFe-formatted directory into the dataset layout.
    IngestCaffe(IngestArgs),
    /// Print the resolved configuration and model size.
    Summary,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    glaciers: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    resolution: Option<f64>,
    #[arg(long)]
    no_labels: bool,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    setup: Option<u8>,
    /// none, optsimmim or opttranslator.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Pretraining only: scenes per glacier held out for validation.
    #[arg(long)]
    val_per_glacier: Option<usize>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Member checkpoint; repeat for an ensemble.
    #[arg(long = "member")]
    members: Vec<PathBuf>,
    #[arg(long)]
    tta: bool,
    #[arg(long)]
    overlap: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Dataset root holding the scenes.
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory; defaults to `<out>/infer`.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[command(flatten)]
    ensemble: EnsembleArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Inference output directory.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset root with front labels.
    #[arg(long)]
    gt: PathBuf,
    /// Second inference output; tests whether its MDEs exceed those of --pred.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Number of comparisons for the Bonferroni correction.
    #[arg(long, default_value_t = 1)]
    tests: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long = "member")]
    members: Vec<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// CaFFe root containing sar_images/, zones/ and fronts/.
    #[arg(long)]
    src: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    dst: PathBuf,
    /// Use the whole image as bounding box when none is known.
    #[arg(long)]
    full_bbox: bool,
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if cli.toy {
        cfg.model = ModelConfig::toy();
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs, pretrain: bool) -> Result<()> {
    if let Some(s) = a.setup {
        cfg.setup = s;
    }
    if let Some(o) = &a.objective {
        cfg.objective = ObjectiveChoice::parse(o)?;
    }
    if let Some(d) = &a.data {
        if pretrain {
            cfg.paths.pretrain_data = Some(d.clone());
        } else {
            cfg.paths.finetune_data = Some(d.clone());
        }
    }
    if let Some(p) = &a.init_weights {
        cfg.paths.init_weights = Some(p.clone());
    }
    if let Some(p) = &a.pretrained {
        cfg.paths.pretrained = Some(p.clone());
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = a.$field {
                if pretrain {
                    cfg.pretrain.$field = v;
                } else {
                    cfg.finetune.$field = v;
                }
            }
        };
    }
    set!(epochs);
    set!(batch_size);
    if a.steps.is_some() {
        if pretrain {
            cfg.pretrain.steps = a.steps;
        } else {
            cfg.finetune.steps = a.steps;
        }
    }
    if let Some(v) = a.val_per_glacier {
        cfg.pretrain.val_per_glacier = v;
    }
    if let Some(lr) = a.lr {
        if pretrain {
            cfg.pretrain.optim.lr = lr;
        } else {
            cfg.finetune.optim.lr = lr;
        }
    }
    Ok(())
}

fn apply_members(cfg: &mut RunConfig, members: &[PathBuf]) {
    if !members.is_empty() {
        cfg.ensemble.members = members.to_vec();
    }
}

fn print_outcome(stage: &str, dir: &Path, o: &tyrion::pretrain::TrainOutcome) {
    println!("{stage}: {} steps, best epoch {}, checkpoint {}", o.steps, o.best_epoch, dir.join("best.ckpt").display());
}

fn execute(cli: Cli) -> Result<u8> {
    let mut cfg = base_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match &cli.cmd {
        Cmd::Synth(a) => {
            if let Some(v) = a.glaciers {
                cfg.synth.glaciers = v;
            }
            if let Some(v) = a.scenes {
                cfg.synth.scenes_per_glacier = v;
            }
            if let Some(v) = a.size {
                cfg.synth.size = v;
            }
            if let Some(v) = a.resolution {
                cfg.synth.resolution = v;
            }
            if a.no_labels {
                cfg.synth.labels = false;
            }
            let dir = a.dir.clone().unwrap_or_else(|| cfg.paths.out.join("data"));
            let s = run::synth(&cfg, &dir)?;
            println!("dataset {}", dir.display());
            println!("  glaciers:       {}", s.glaciers);
            println!("  scenes:         {}", s.scenes);
            println!("  optical:        {}", s.optical);
            println!("  zone labels:    {}", s.zone_labels);
            println!("  front labels:   {}", s.front_labels);
            println!("  layout: <glacier>/{{sar,zones,fronts}}/<date>_<sensor>.png(+.meta), <glacier>/optical/");
        }
        Cmd::Pretrain(a) => {
            apply_train(&mut cfg, a, true)?;
            let o = run::pretrain(&cfg)?;
            print_outcome("pretrain", &cfg.paths.out.join("pretrain"), &o);
        }
        Cmd::Finetune(a) => {
            apply_train(&mut cfg, a, false)?;
            let o = run::finetune(&cfg)?;
            print_outcome("finetune", &cfg.paths.out.join("finetune"), &o);
        }
        Cmd::Infer(a) => {
            apply_members(&mut cfg, &a.ensemble.members);
            cfg.ensemble.tta |= a.ensemble.tta;
            cfg.ensemble.overlap |= a.ensemble.overlap;
            let dir = a.dir.clone().unwrap_or_else(|| cfg.paths.out.join("infer"));
            let s = run::infer(&cfg, &a.scenes, &dir)?;
            println!(
                "infer: {} scenes, {} members, tta={} overlap={}, {} without front, manifest {}",
                s.scenes,
                run::member_paths(&cfg).len(),
                cfg.ensemble.tta,
                cfg.ensemble.overlap,
                s.no_front,
                dir.join("manifest.txt").display()
            );
        }
        Cmd::Eval(a) => {
            let report = run::evaluate(&a.pred, &a.gt)?;
            print!("{}", report.to_table());
            print!("{}", report.to_records());
            if let Some(b) = &a.baseline {
                let base = run::evaluate(b, &a.gt)?;
                let row = run::compare_reports(&b.display().to_string(), &base, &a.pred.display().to_string(), &report, a.alpha, a.tests)?;
                print!("{}", comparison_table(std::slice::from_ref(&row)));
                println!(
                    "u={} p={} exact={} alpha={} d={} significant={}",
                    row.test.u,
                    row.test.p,
                    row.test.exact,
                    row.alpha,
                    row.d,
                    row.test.p < row.alpha
                );
            }
            if report.no_front > 0 {
                eprintln!("{} image(s) without a predicted front", report.no_front);
                return Ok(EXIT_NO_FRONT);
            }
        }
        Cmd::Bench(a) => {
            apply_members(&mut cfg, &a.members);
            let (single, full) = run::bench(&cfg, &a.scenes)?;
            println!("{}", single.to_record());
            println!("{}", full.to_record());
            if single.images_per_min() < full.images_per_min() {
                return Err(Error::Validation("single member slower than the full ensemble".into()));
            }
        }
        Cmd::IngestCaffe(a) => {
            let s = caffe::ingest(&a.src, &a.split, &a.dst, a.full_bbox)?;
            println!("ingested {} scenes of {} glaciers into {}", s.scenes, s.glaciers, a.dst.display());
        }
        Cmd::Summary => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            println!("# parameters: {}", param_count(&cfg.model));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
