//! `dcn`: train, evaluate, generate synthetic data and run diagnostics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dcn_core::checkpoint::Checkpoint;
use dcn_core::config::RunConfig;
use dcn_core::data::{
    load_dataset, load_split, synth_generate, DatasetManifest, LabeledImages, Split, SynthSpec,
};
use dcn_core::episodic::{branch_variances, evaluate, export_activation_maps, extract_features};
use dcn_core::model::DcnModel;
use dcn_core::trainer::run_training;
use dcn_core::Error;

#[derive(Parser)]
#[command(
    name = "dcn",
    version,
    about = "Dual contrastive few-shot scene classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Base,
    Val,
    Novel,
    /// val + novel
    Heldout,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Base => vec![Split::Base],
            SplitArg::Val => vec![Split::Val],
            SplitArg::Novel => vec![Split::Novel],
            SplitArg::Heldout => vec![Split::Val, Split::Novel],
            SplitArg::All => Split::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportMode {
    Variance,
    Maps,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on the base split and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss log; defaults to `<out>.metrics.tsv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Episodic evaluation of a frozen checkpoint; prints
    /// `mean ci95 T C K Q`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "novel")]
        split: SplitArg,
    },
    /// Write a synthetic texture dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        /// `N` or `HxW`.
        #[arg(long, default_value = "32")]
        size: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Embedding-variance report or activation-map export.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ReportMode,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "novel")]
        split: SplitArg,
        /// Only export maps for the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Diverged(_)) {
            3
        } else {
            2
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    if !cfg.deterministic {
        warn!("deterministic = false has no effect; every code path is order-deterministic");
    }
    Ok(cfg)
}

fn load_data(root: &Path) -> Result<DatasetManifest, Failure> {
    if !root.exists() {
        return Err(usage(format!(
            "data root {} does not exist",
            root.display()
        )));
    }
    Ok(load_dataset(root)?)
}

fn train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    metrics: Option<PathBuf>,
    print_config: bool,
) -> Result<(), Failure> {
    let cfg = load_config(config.as_deref())?;
    if print_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let root = data.ok_or_else(|| usage("train needs --data"))?;
    let out = out.ok_or_else(|| usage("train needs --out"))?;
    let manifest = load_data(&root)?;
    let base = load_split(&manifest, &[Split::Base])?;
    if base.num_classes() < 2 {
        return Err(usage(format!(
            "base split has {} classes; training needs at least 2",
            base.num_classes()
        )));
    }
    let image_shape = cfg.encoder.image_shape();
    if manifest.image_shape != image_shape {
        return Err(usage(format!(
            "dataset images are {:?} but the config expects {image_shape:?}",
            manifest.image_shape
        )));
    }
    let model_cfg = cfg.model_config(base.num_classes());
    let mut model =
        DcnModel::<f32>::init(&model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    info!(
        "training on {} images from {} base classes, {} parameters",
        base.len(),
        base.num_classes(),
        dcn_core::nn::Module::num_parameters(&model)
    );
    let metrics_path = metrics.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".metrics.tsv");
        PathBuf::from(p)
    });
    let file = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    run_training(&mut model, &base, &cfg.train, Some(&mut log))?;
    log.flush().map_err(|e| io_err(&metrics_path, e))?;
    Checkpoint::new(cfg, model).save(&out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn load_eval_split(
    ck: &Checkpoint,
    root: &Path,
    split: SplitArg,
) -> Result<LabeledImages, Failure> {
    let manifest = load_data(root)?;
    let expected = ck.model.config.encoder.image_shape();
    if manifest.image_shape != expected {
        return Err(usage(format!(
            "dataset images are {:?} but the checkpoint expects {expected:?}",
            manifest.image_shape
        )));
    }
    Ok(load_split(&manifest, &split.splits())?)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: PathBuf,
    data: PathBuf,
    way: Option<usize>,
    shot: Option<usize>,
    query: Option<usize>,
    tasks: Option<usize>,
    seed: Option<u64>,
    split: SplitArg,
) -> Result<(), Failure> {
    let ck = Checkpoint::load(&checkpoint)?;
    let pool = load_eval_split(&ck, &data, split)?;
    let e = &ck.config.eval;
    let report = evaluate(
        &ck.model,
        &pool,
        way.unwrap_or(e.way),
        shot.unwrap_or(e.shot),
        query.unwrap_or(e.query),
        tasks.unwrap_or(e.tasks),
        seed.unwrap_or(e.seed),
    )?;
    println!("{}", report.line());
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("--size must be N or HxW, got `{s}`"));
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn synth(
    out: PathBuf,
    classes: usize,
    per_class: usize,
    size: String,
    seed: u64,
) -> Result<(), Failure> {
    let (height, width) = parse_size(&size)?;
    let spec = SynthSpec {
        classes,
        per_class,
        height,
        width,
        seed,
    };
    let m = synth_generate(&out, &spec)?;
    info!(
        "wrote {} classes ({} base / {} val / {} novel) to {}",
        m.classes.len(),
        m.count(Split::Base),
        m.count(Split::Val),
        m.count(Split::Novel),
        out.display()
    );
    Ok(())
}

fn report(
    checkpoint: PathBuf,
    data: PathBuf,
    mode: ReportMode,
    out_dir: PathBuf,
    split: SplitArg,
    limit: Option<usize>,
) -> Result<(), Failure> {
    let ck = Checkpoint::load(&checkpoint)?;
    let pool = load_eval_split(&ck, &data, split)?;
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    match mode {
        ReportMode::Variance => {
            let features = extract_features(&ck.model, &pool.images)?;
            let (ctx, det) = branch_variances(&features, &pool.labels)?;
            for (name, r) in [("context", ctx), ("detail", det)] {
                let path = out_dir.join(format!("variance_{name}.tsv"));
                fs::write(&path, format!("{}\n", r.line())).map_err(|e| io_err(&path, e))?;
                println!("{name}\t{}", r.line());
            }
        }
        ReportMode::Maps => {
            let manifest = load_dataset(&data)?;
            let names: Vec<String> = manifest
                .classes
                .iter()
                .filter(|c| split.splits().contains(&c.split))
                .flat_map(|c| {
                    c.files.iter().map(move |f| {
                        let stem = f
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        format!("{}_{stem}", c.name)
                    })
                })
                .collect();
            let take = limit.unwrap_or(names.len());
            let items: Vec<(String, _)> = names.into_iter().zip(pool.images).take(take).collect();
            let files = export_activation_maps(&ck.model, &items, &out_dir)?;
            println!("{}", files.len());
        }
    }
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("DCN_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(0) => {}
        Ok(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                warn!("could not size the thread pool: {e}");
            }
        }
        Err(_) => warn!("ignoring DCN_THREADS={v}: not a number"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    configure_threads();
    let result = match cli.command {
        Command::Train {
            config,
            data,
            out,
            metrics,
            print_config,
        } => train(config, data, out, metrics, print_config),
        Command::Eval {
            checkpoint,
            data,
            way,
            shot,
            query,
            tasks,
            seed,
            split,
        } => eval(checkpoint, data, way, shot, query, tasks, seed, split),
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => synth(out, classes, per_class, size, seed),
        Command::Report {
            checkpoint,
            data,
            mode,
            out_dir,
            split,
            limit,
        } => report(checkpoint, data, mode, out_dir, split, limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
