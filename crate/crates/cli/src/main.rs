use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use segdistill::data::{
    ingest_slices, partition_by_sites, split_dataset, synthesize_dataset, Manifest, SitePairing, SiteProfile, SliceSet,
    SplitRatios, MANIFEST_FILE,
};
use segdistill::eval::{emit_report, evaluate, export_overlays, Baselines, EvalResult, Role};
use segdistill::experiment::{dry_run, placeholder_manifest, published_protocol_checks, ExperimentConfig};
use segdistill::models::{
    build_reference_student, build_reference_teacher, load_checkpoint, save_checkpoint, ReferenceNet, SegmentationModel,
};
use segdistill::train::{distill_mono, distill_multi, train_teacher, RunHistory};

const CHECKPOINT_FILE: &str = "best.ckpt";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(
    name = "segdistill",
    version,
    about = "Mono- and multi-teacher distillation for 2D segmentation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for training, splitting and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which the run directory `<config name>` is created.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-site phantom dataset into `<run>/data`.
    SynthData,
    /// Build a manifest from a dataset directory.
    Ingest {
        /// Dataset root; defaults to `data.root`.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Split a manifest into train/val/test manifests.
    Split {
        /// Defaults to `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Fractions `train,val,test`, e.g. `0.8,0.05,0.15`.
        #[arg(long, value_parser = parse_ratios)]
        ratios: Option<SplitRatios>,
        /// Split individual slices instead of patients.
        #[arg(long)]
        by_slice: bool,
    },
    /// Partition a manifest into site-pair shards.
    Partition {
        /// Defaults to `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Site pairs, e.g. `1-2,3-4,5-6`; defaults to `data.site_pairs`.
        #[arg(long, value_parser = parse_pairs)]
        pairs: Option<SitePairing>,
    },
    /// Train a network on the segmentation loss alone.
    TrainTeacher {
        #[command(flatten)]
        data: TrainData,
        /// Architecture to train; `student` gives the no-distillation baseline.
        #[arg(long, value_enum, default_value_t = Arch::Teacher)]
        arch: Arch,
    },
    /// Distill a student from one teacher checkpoint.
    DistillMono {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Distill a student from several teacher checkpoints.
    DistillMulti {
        /// Teacher checkpoint; repeat once per teacher.
        #[arg(long = "teacher")]
        teachers: Vec<PathBuf>,
        #[arg(long, required_unless_present = "dry_run")]
        train: Option<PathBuf>,
        #[arg(long, required_unless_present = "dry_run")]
        val: Option<PathBuf>,
        /// Check the protocol wiring against the published setup without
        /// training.
        #[arg(long)]
        dry_run: bool,
        /// Full-dataset manifest for the dry run; defaults to `data.manifest`,
        /// then to a records-only placeholder of the published dataset.
        #[arg(long, requires = "dry_run")]
        manifest: Option<PathBuf>,
    },
    /// Dice evaluation of a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = RoleArg::Student)]
        role: RoleArg,
        /// Name in reports; defaults to the checkpoint's model name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Combine evaluation results into report.csv and report.txt.
    Report {
        /// Result file written by `evaluate`; repeatable.
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        /// Baseline dice in percent, `model=80.03`; repeatable.
        #[arg(long = "baseline", value_parser = parse_baseline)]
        baselines: Vec<(String, f64)>,
    },
    /// Write ground-truth/prediction contour overlays.
    Overlays {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Args)]
struct TrainData {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
    Distilled,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
            RoleArg::Distilled => Role::Distilled,
        }
    }
}

enum Failure {
    /// Bad configuration or arguments: exit 2.
    Usage(String),
    /// The stage itself failed: exit 1.
    Runtime(String),
}

impl From<segdistill::Error> for Failure {
    fn from(e: segdistill::Error) -> Self {
        match e {
            segdistill::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [train, val, test] = parts[..] else {
        return Err(format!("expected three comma-separated fractions, got {}", parts.len()));
    };
    let r = SplitRatios { train, val, test };
    r.validate().map_err(|e| e.to_string())?;
    Ok(r)
}

fn parse_pairs(s: &str) -> Result<SitePairing, String> {
    let pairs = s
        .split(',')
        .map(|p| {
            let (a, b) = p.split_once('-').ok_or_else(|| format!("pair {p:?} is not a-b"))?;
            let site = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
            Ok((site(a)?, site(b)?))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let pairing = SitePairing { pairs };
    pairing.validate().map_err(|e| e.to_string())?;
    Ok(pairing)
}

fn parse_baseline(s: &str) -> Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or_else(|| format!("{s:?} is not model=value"))?;
    let v = v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"))?;
    Ok((name.to_string(), v))
}

fn resolve_config(g: &Global) -> Outcome<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &g.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.data.split_seed = seed;
        cfg.data.synth.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn manifest_arg(given: Option<PathBuf>, cfg: &ExperimentConfig, flag: &str) -> Outcome<Manifest> {
    let path = given
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| Failure::Usage(format!("no manifest: pass {flag} or set data.manifest")))?;
    Ok(Manifest::load(path)?)
}

fn load_set(path: &Path, cfg: &ExperimentConfig) -> Outcome<SliceSet> {
    let m = Manifest::load(path)?;
    Ok(SliceSet::load(&m.records, cfg.data.input_hw, cfg.data.normalization)?)
}

fn load_frozen(path: &Path) -> Outcome<ReferenceNet> {
    let mut net = load_checkpoint(path)?;
    net.set_trainable(false);
    Ok(net)
}

fn new_student(cfg: &ExperimentConfig) -> Outcome<ReferenceNet> {
    let mut net = build_reference_student(&cfg.student)?;
    net.set_name(&cfg.name);
    Ok(net)
}

fn finish_training(run: &Path, cfg: &ExperimentConfig, net: &ReferenceNet, history: &RunHistory) -> Outcome<()> {
    create_dir(run)?;
    save_checkpoint(net, run.join(CHECKPOINT_FILE))?;
    history.write(run)?;
    cfg.save(run.join(CONFIG_FILE))?;
    let best = history.best().map_or(f64::NAN, |e| e.val_dice);
    println!(
        "{}: best epoch {} (val dice {best:.4}), checkpoint {}",
        net.name(),
        history.best_epoch,
        run.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn execute(command: Command, cfg: ExperimentConfig, run: PathBuf) -> Outcome<()> {
    match command {
        Command::SynthData => {
            let dir = run.join("data");
            let profiles = SiteProfile::defaults(cfg.data.synth_sites);
            let m = synthesize_dataset(&cfg.data.synth, &profiles, &dir)?;
            println!(
                "{} slices from {} sites -> {}",
                m.len(),
                profiles.len(),
                dir.join(MANIFEST_FILE).display()
            );
        }
        Command::Ingest { root } => {
            let root = root
                .or_else(|| cfg.data.root.clone())
                .ok_or_else(|| Failure::Usage("no dataset root: pass --root or set data.root".into()))?;
            let m = ingest_slices(&root)?;
            let out = run.join(MANIFEST_FILE);
            m.save(&out)?;
            println!("{} slices -> {}", m.len(), out.display());
        }
        Command::Split {
            manifest,
            ratios,
            by_slice,
        } => {
            let m = manifest_arg(manifest, &cfg, "--manifest")?;
            let ratios = ratios.unwrap_or(cfg.data.split);
            let by_patient = cfg.data.by_patient && !by_slice;
            let (train, val, test) = split_dataset(&m, ratios, cfg.data.split_seed, by_patient)?;
            let dir = run.join("splits");
            for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
                part.save(dir.join(format!("{name}.json")))?;
            }
            println!(
                "train {} / val {} / test {} slices -> {}",
                train.len(),
                val.len(),
                test.len(),
                dir.display()
            );
        }
        Command::Partition { manifest, pairs } => {
            let m = manifest_arg(manifest, &cfg, "--manifest")?;
            let pairing = pairs.unwrap_or_else(|| cfg.data.site_pairs.clone());
            let part = partition_by_sites(&m, &pairing)?;
            let dir = run.join("shards");
            for (&(a, b), shard) in pairing.pairs.iter().zip(&part.shards) {
                let path = dir.join(format!("sites_{a}_{b}.json"));
                shard.save(&path)?;
                println!("sites ({a},{b}): {} slices -> {}", shard.len(), path.display());
            }
            if !part.excluded_sites.is_empty() {
                println!("excluded sites: {:?}", part.excluded_sites);
            }
        }
        Command::TrainTeacher { data, arch } => {
            let train = load_set(&data.train, &cfg)?;
            let val = load_set(&data.val, &cfg)?;
            let mut net = match arch {
                Arch::Teacher => build_reference_teacher(&cfg.teacher)?,
                Arch::Student => build_reference_student(&cfg.student)?,
            };
            net.set_name(&cfg.name);
            let history = train_teacher(&mut net, &train, &val, &cfg.train)?;
            finish_training(&run, &cfg, &net, &history)?;
        }
        Command::DistillMono { data, teacher } => {
            let teacher = load_frozen(&teacher)?;
            let train = load_set(&data.train, &cfg)?;
            let val = load_set(&data.val, &cfg)?;
            let mut student = new_student(&cfg)?;
            let history = distill_mono(&mut student, &teacher, &train, &val, &cfg.train)?;
            finish_training(&run, &cfg, &student, &history)?;
        }
        Command::DistillMulti {
            teachers,
            train,
            val,
            dry_run: true,
            manifest,
        } => {
            let _ = (teachers, train, val);
            let m = match manifest.or_else(|| cfg.data.manifest.clone()) {
                Some(p) => Manifest::load(p)?,
                None => placeholder_manifest(),
            };
            let report = dry_run(&cfg, &m)?;
            let checks = published_protocol_checks(&report);
            create_dir(&run)?;
            let json = serde_json::to_string_pretty(&serde_json::json!({ "report": report, "checks": checks }))
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            write_text(&run.join("dry_run.json"), &(json + "\n"))?;
            for s in &report.shards {
                println!(
                    "shard sites {:?}: {} slices, {} patients",
                    s.sites, s.slices, s.patients
                );
            }
            println!(
                "split {:?} of {} slices, input {:?}, {} epochs x {} steps",
                report.split_sizes, report.total_slices, report.input_shape, report.epochs, report.steps_per_epoch
            );
            for m in [&report.teacher, &report.student] {
                println!(
                    "{}: {} params, {} FLOPs at {:?}",
                    m.name, m.params, m.flops, report.input_shape
                );
            }
            let mut failed = 0;
            for c in &checks {
                if c.ok {
                    println!("ok    {}: {}", c.name, c.actual);
                } else {
                    failed += 1;
                    println!("FAIL  {}: expected {}, got {}", c.name, c.expected, c.actual);
                }
            }
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} protocol check(s) failed")));
            }
        }
        Command::DistillMulti {
            teachers,
            train,
            val,
            dry_run: false,
            ..
        } => {
            if teachers.is_empty() {
                return Err(Failure::Usage("distill-multi needs at least one --teacher".into()));
            }
            let nets = teachers.iter().map(|p| load_frozen(p)).collect::<Outcome<Vec<_>>>()?;
            let refs: Vec<&dyn SegmentationModel> = nets.iter().map(|n| n as &dyn SegmentationModel).collect();
            let train = load_set(&train.expect("required by clap"), &cfg)?;
            let val = load_set(&val.expect("required by clap"), &cfg)?;
            let mut student = new_student(&cfg)?;
            let history = distill_multi(&mut student, &refs, &train, &val, &cfg.train)?;
            finish_training(&run, &cfg, &student, &history)?;
        }
        Command::Evaluate {
            checkpoint,
            test,
            role,
            name,
        } => {
            let mut net = load_checkpoint(&checkpoint)?;
            if let Some(name) = name {
                net.set_name(name);
            }
            let set = load_set(&test, &cfg)?;
            let result = evaluate(&net, &set, role.into())?;
            let dir = run.join("eval");
            create_dir(&dir)?;
            let path = dir.join(format!("{}.json", result.model_name));
            let json = serde_json::to_string_pretty(&result).map_err(|e| Failure::Runtime(e.to_string()))?;
            write_text(&path, &(json + "\n"))?;
            println!(
                "{} ({}): dice {:.2}% ± {:.4} over {} slices, {} params, {} FLOPs -> {}",
                result.model_name,
                result.role.as_str(),
                result.mean_dice * 100.0,
                result.std_dice,
                result.n_samples,
                result.params,
                result.flops,
                path.display()
            );
        }
        Command::Report { evals, baselines } => {
            let results = evals
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<EvalResult>(&text)
                        .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
                })
                .collect::<Outcome<Vec<_>>>()?;
            let baselines: Baselines = baselines.into_iter().collect();
            let (csv, txt) = emit_report(&results, &baselines, &run)?;
            print!(
                "{}",
                fs::read_to_string(&txt).map_err(|e| Failure::Runtime(e.to_string()))?
            );
            println!("-> {} , {}", csv.display(), txt.display());
        }
        Command::Overlays { checkpoint, test } => {
            let net = load_checkpoint(&checkpoint)?;
            let set = load_set(&test, &cfg)?;
            let dir = run.join("overlays");
            let files = export_overlays(&net, &set, &dir)?;
            println!("{} overlays -> {}", files.len(), dir.display());
        }
    }
    Ok(())
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::SynthData => "synth-data",
        Command::Ingest { .. } => "ingest",
        Command::Split { .. } => "split",
        Command::Partition { .. } => "partition",
        Command::TrainTeacher { .. } => "train-teacher",
        Command::DistillMono { .. } => "distill-mono",
        Command::DistillMulti { .. } => "distill-multi",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
        Command::Overlays { .. } => "overlays",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    let stage = stage_name(&cli.command);
    let outcome = resolve_config(&cli.global).and_then(|cfg| {
        let run = cli.global.out_dir.join(&cfg.name);
        info!("{stage}: run directory {}", run.display());
        execute(cli.command, cfg, run)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error in {stage}: {msg}");
            ExitCode::from(1)
        }
    }
}
