//! Command-line front end for the `salcar` library.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use salcar::checkpoint::Checkpoint;
use salcar::dataset::{
    load_records, ratio_counts, read_manifest, select, split_by_reference, ImageRecord, Polarity,
    Split, SplitPlan,
};
use salcar::metrics::{emit_patch_maps, evaluate};
use salcar::network::{count_parameters, forward_image, init_params, NetworkConfig};
use salcar::priors::{self, load_color, load_prior, save_gray8, save_prior, JndModelParams};
use salcar::trainer::{fit, FitOptions, TrainConfig};
use salcar::{Error, Exec};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const SEED_ENV: &str = "JSCR_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "salcar",
    version,
    about = "Full-reference image quality assessment with HVS priors"
)]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Maximum worker threads (1 runs everything sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute saliency, JND-probability and SID maps for an image pair.
    Priors {
        reference: PathBuf,
        /// Distorted image; defaults to the reference itself.
        distorted: Option<PathBuf>,
        /// Output base name; defaults to the reference file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Assign references to train/val/test and write `split.csv`.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// `train/val/test` as exact reference counts or proportions.
        #[arg(long, default_value = "0.6/0.2/0.2")]
        ratios: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and the training log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Config file, or a preset name (`default`, `small`).
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Split plan from `split`; without one every image trains.
        #[arg(long)]
        split_plan: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config override, `key=value`; may repeat.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the predicted quality score of one image pair.
    Predict {
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Correlate predictions with ground truth on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `train`, `val`, `test` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        split_plan: Option<PathBuf>,
        #[arg(long, default_value = "mos")]
        polarity: String,
        /// Map predictions through a fitted 4-parameter logistic before PLCC.
        #[arg(long)]
        logistic_fit: bool,
    },
    /// Write patch quality and weight maps of one image pair.
    Maps {
        #[command(flatten)]
        pair: PairArgs,
        /// Output base name; defaults to the distorted file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Print the number of trainable parameters of a configuration.
    Params {
        /// Config file, or a preset name (`default`, `small`).
        #[arg(long, default_value = "default")]
        config: String,
    },
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "dst")]
    distorted: PathBuf,
    /// Precomputed saliency map; computed when absent.
    #[arg(long)]
    sal: Option<PathBuf>,
    /// Precomputed JND-probability map; computed when absent.
    #[arg(long)]
    jnd: Option<PathBuf>,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    salcar::exec::init_threads(cli.threads);
    let exec = Exec::with_threads(cli.threads);
    match dispatch(&cli, exec) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if e.is_io() {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

fn dispatch(cli: &Cli, exec: Exec) -> salcar::Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Priors {
            reference,
            distorted,
            name,
        } => {
            let stem = name.clone().unwrap_or_else(|| file_stem(reference));
            cmd_priors(
                out,
                reference,
                distorted.as_deref().unwrap_or(reference),
                &stem,
            )
        }
        Command::Split {
            manifest,
            ratios,
            seed,
        } => {
            let entries = read_manifest(manifest)?;
            let ids: Vec<String> = entries.iter().map(|e| e.reference_id()).collect();
            let mut distinct = ids.clone();
            distinct.sort();
            distinct.dedup();
            let counts = ratio_counts(ratios, distinct.len())?;
            let plan = split_by_reference(&ids, counts, resolve_seed(*seed)?.unwrap_or(0))?;
            ensure_dir(out)?;
            let path = out.join("split.csv");
            plan.save(&path)?;
            println!(
                "train {} / val {} / test {} references -> {}",
                counts[0],
                counts[1],
                counts[2],
                path.display()
            );
            Ok(())
        }
        Command::Train {
            manifest,
            config,
            seed,
            split_plan,
            resume,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            for kv in overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
                if !cfg.apply(k.trim(), v.trim())? {
                    return Err(Error::Config(format!("unknown config key `{}`", k.trim())));
                }
            }
            if let Some(s) = resolve_seed(*seed)? {
                cfg.seed = s;
            }
            cfg.validate()?;
            let entries = read_manifest(manifest)?;
            let records = load_records(&entries, cfg.polarity, &JndModelParams::default(), exec)?;
            let plan = match split_plan {
                Some(p) => SplitPlan::load(p)?,
                None => SplitPlan::all_train(records.iter().map(|r| r.reference_id.as_str())),
            };
            let train = select(&records, &plan, Split::Train);
            let val = select(&records, &plan, Split::Val);
            ensure_dir(out)?;
            let report = fit(
                &cfg,
                &train,
                &val,
                &FitOptions {
                    out_dir: out.clone(),
                    resume: resume.clone(),
                    exec,
                    progress: true,
                },
            )?;
            println!(
                "epochs {} steps {} best validation MAE {:.6} -> {}",
                report.epochs,
                report.steps,
                report.best_val,
                report.best_checkpoint.display()
            );
            Ok(())
        }
        Command::Predict { pair } => {
            let ck = Checkpoint::load(&pair.ckpt)?;
            let record = load_pair(pair)?;
            let quads = record.source.tile(ck.config.patch_size)?;
            let fwd = forward_image(&ck.config, &ck.params, &quads, exec)?;
            println!("{}", fwd.score);
            Ok(())
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            split_plan,
            polarity,
            logistic_fit,
        } => {
            let ck = Checkpoint::load(ckpt)?;
            let polarity: Polarity = polarity.parse()?;
            let entries = read_manifest(manifest)?;
            let records = load_records(&entries, polarity, &JndModelParams::default(), exec)?;
            let chosen: Vec<&ImageRecord> = if split == "all" {
                records.iter().collect()
            } else {
                let which: Split = split.parse()?;
                let path = split_plan.clone().unwrap_or_else(|| out.join("split.csv"));
                select(&records, &SplitPlan::load(&path)?, which)
            };
            let (report, _) = evaluate(&ck.config, &ck.params, &chosen, *logistic_fit, exec)?;
            print!("{}", report.to_text());
            ensure_dir(out)?;
            let path = out.join("eval.txt");
            fs::write(&path, report.to_kv()).map_err(|e| io_err(&path, e))?;
            Ok(())
        }
        Command::Maps { pair, name } => {
            let ck = Checkpoint::load(&pair.ckpt)?;
            let record = load_pair(pair)?;
            let quads = record.source.tile(ck.config.patch_size)?;
            let fwd = forward_image(&ck.config, &ck.params, &quads, exec)?;
            let maps = emit_patch_maps(&fwd, record.source.height(), record.source.width())?;
            let stem = name.clone().unwrap_or_else(|| file_stem(&pair.distorted));
            ensure_dir(out)?;
            let q = out.join(format!("{stem}.q.png"));
            let w = out.join(format!("{stem}.w.png"));
            save_gray8(maps.width, maps.height, maps.quality, &q)?;
            save_gray8(maps.width, maps.height, maps.weight, &w)?;
            println!("{}\n{}", q.display(), w.display());
            Ok(())
        }
        Command::Params { config } => {
            let cfg = load_config(Some(config))?;
            println!("{}", count_parameters(&init_params(&cfg.network, 0)?));
            Ok(())
        }
    }
}

fn cmd_priors(out: &Path, reference: &Path, distorted: &Path, stem: &str) -> salcar::Result<()> {
    let r = load_color(reference)?;
    let d = load_color(distorted)?;
    let pair = priors::compute_priors(&r, &d, &JndModelParams::default())?;
    let sid = priors::compute_sid_map(&r.luma(), &d.luma())?;
    ensure_dir(out)?;
    for (suffix, map) in [("sal", &pair.saliency), ("jnd", &pair.jnd), ("sid", &sid)] {
        let path = out.join(format!("{stem}.{suffix}.png"));
        save_prior(map, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn load_pair(pair: &PairArgs) -> salcar::Result<ImageRecord> {
    let r = load_color(&pair.reference)?;
    let d = load_color(&pair.distorted)?;
    let sal = pair.sal.as_deref().map(load_prior).transpose()?;
    let jnd = pair.jnd.as_deref().map(load_prior).transpose()?;
    let id = file_stem(&pair.distorted);
    ImageRecord::from_images(
        &id,
        &id,
        "",
        0.0,
        &r,
        &d,
        sal,
        jnd,
        &JndModelParams::default(),
    )
}

/// A preset name or the path of a `key = value` config file.
fn load_config(arg: Option<&str>) -> salcar::Result<TrainConfig> {
    match arg {
        None => Ok(TrainConfig::default()),
        Some(name @ ("default" | "small")) => Ok(TrainConfig {
            network: NetworkConfig::preset(name)?,
            ..TrainConfig::default()
        }),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e))?;
            TrainConfig::from_text(&text)
        }
    }
}

/// The flag wins over `JSCR_SEED`; neither means "use the config".
fn resolve_seed(flag: Option<u64>) -> salcar::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn ensure_dir(dir: &Path) -> salcar::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
