//! `hsi3d` command line: synthetic data, training, spotting and scoring.
//!
//! Exit status is 0 on success, 1 for usage errors, 2 for bad data or
//! configuration and 3 when training or inference produces non-finite
//! values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsi3d::checkpoint::Container;
use hsi3d::config::RunConfig;
use hsi3d::dataset::Dataset;
use hsi3d::decoder::{ensemble, slide_video, WindowModel};
use hsi3d::head::parse_levels;
use hsi3d::metric::evaluate;
use hsi3d::model::HsModel;
use hsi3d::sampler::{read_intervals, write_intervals};
use hsi3d::synth::generate;
use hsi3d::trainer::{spot_dataset, write_log, Trainer};
use hsi3d::SignInterval;

#[derive(Parser)]
#[command(name = "hsi3d", version, about = "Temporal sign spotting with a hierarchical 3D CNN head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (.toml or .json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Comma-separated levels to average (x4,x8,x16,x32,x) or `all`.
    #[arg(long)]
    levels: Option<String>,
    /// Frames between consecutive windows.
    #[arg(long)]
    stride: Option<usize>,
    /// Shortest interval to report, in frames.
    #[arg(long = "min-len")]
    min_len: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Also split off the last K videos into `<out>/test` (the rest go
        /// to `<out>/train`).
        #[arg(long = "test-videos", default_value_t = 0)]
        test_videos: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset scored after the last epoch (and every
        /// `train.val_every` epochs).
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Probability of drawing a window at a random position.
        #[arg(long)]
        rsp: Option<f64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory for the checkpoint, log and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predicted intervals for every video of a dataset.
    Spot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        model: PathBuf,
        /// Further checkpoints averaged with `--model`.
        #[arg(long)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Prediction CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset's annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory or annotation CSV holding the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Report path; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-frame class probabilities of one video.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        /// Comma-separated class indices to keep; all by default.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(hsi3d::Error),
}

impl From<hsi3d::Error> for Failure {
    fn from(e: hsi3d::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig, Failure> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides: Vec<&String> = common.set.iter().chain(extra).collect();
    base.with_overrides(&overrides).map_err(|e| Failure::Usage(e.to_string()))
}

fn apply_decode(cfg: &mut RunConfig, d: &DecodeArgs) -> Outcome {
    if let Some(l) = &d.levels {
        cfg.decode.levels = parse_levels(l).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = d.stride {
        cfg.decode.stride = s;
    }
    if let Some(m) = d.min_len {
        cfg.decode.min_len = m;
    }
    cfg.decode.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.json"), cfg.to_json()?)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Loads `--model` and every `--ensemble` checkpoint; they must agree on
/// window, frame size and vocabulary.
fn load_models(first: &Path, rest: &[PathBuf]) -> Result<Vec<HsModel<f32>>, Failure> {
    let models: Vec<HsModel<f32>> = std::iter::once(first)
        .chain(rest.iter().map(PathBuf::as_path))
        .map(HsModel::load)
        .collect::<hsi3d::Result<_>>()?;
    if let Some(m) = models.iter().find(|m| m.cfg != models[0].cfg) {
        return Err(Failure::Run(hsi3d::Error::Config(format!(
            "ensemble members disagree: {:?} vs {:?}",
            models[0].cfg, m.cfg
        ))));
    }
    Ok(models)
}

fn load_data(dir: &Path, model: &HsModel<f32>) -> Result<Dataset, Failure> {
    let p = model.cfg.pyramid;
    Ok(Dataset::load(dir, Some((p.input_h, p.input_w)))?)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate {
            common,
            seed,
            test_videos,
            out,
        } => {
            let extra: Vec<String> = seed.map(|s| format!("synth.seed={s}")).into_iter().collect();
            let cfg = resolve(&common, &extra)?;
            cfg.synth.validate()?;
            if test_videos >= cfg.synth.num_videos {
                return Err(Failure::Usage(format!(
                    "--test-videos {test_videos} leaves no training videos out of {}",
                    cfg.synth.num_videos
                )));
            }
            let set = generate(&cfg.synth)?;
            if test_videos == 0 {
                set.dataset.save(&out)?;
            } else {
                let n = set.dataset.len();
                let split = n - test_videos;
                set.dataset.subset(&(0..split).collect::<Vec<_>>()).save(out.join("train"))?;
                set.dataset.subset(&(split..n).collect::<Vec<_>>()).save(out.join("test"))?;
            }
            let distractors: Vec<&SignInterval> = set.distractors.iter().flatten().collect();
            std::fs::write(out.join("distractors.json"), serde_json::to_string_pretty(&distractors).map_err(hsi3d::Error::from)?)?;
            write_resolved(&cfg, &out)?;
            log::info!("wrote {} videos to {}", set.dataset.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            val,
            seed,
            rsp,
            resume,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            if let Some(r) = rsp {
                extra.push(format!("train.rsp={r}"));
            }
            let mut cfg = resolve(&common, &extra)?;
            let p = cfg.model.pyramid;
            let train = Dataset::load(&data, Some((p.input_h, p.input_w)))?;
            let mut trainer = match &resume {
                Some(path) => {
                    let mut t = Trainer::resume(&Container::load(path)?, &train)?;
                    if common.set.iter().any(|s| s.starts_with("train.epochs=")) {
                        t.cfg.epochs = cfg.train.epochs;
                    }
                    cfg.model = t.model.cfg;
                    cfg.train = t.cfg.clone();
                    t
                }
                None => {
                    cfg.model.pyramid.validate()?;
                    cfg.train.validate()?;
                    Trainer::new(cfg.model, cfg.train.clone(), &train)?
                }
            };
            cfg.metric.validate()?;
            write_resolved(&cfg, &out)?;
            let val_data = val.as_deref().map(|v| Dataset::load(v, Some((p.input_h, p.input_w)))).transpose()?;
            let ckpt = out.join("model.ckpt");
            let logs = trainer.train(
                &train,
                val_data.as_ref().map(|v| (v, &cfg.decode, &cfg.metric)),
                |log, t| {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}{}",
                        log.epoch,
                        log.train_loss,
                        log.val_f1.map(|f| format!("  val F1 {f:.3}")).unwrap_or_default()
                    );
                    t.save(&ckpt)
                },
            )?;
            let log_path = out.join("train_log.csv");
            if resume.is_some() && log_path.is_file() {
                // continue the earlier log without repeating its header
                let mut rows = Vec::new();
                write_log(&logs, &mut rows)?;
                let body = rows.splitn(2, |&b| b == b'\n').nth(1).unwrap_or_default();
                std::fs::OpenOptions::new().append(true).open(&log_path)?.write_all(body)?;
            } else {
                write_log(&logs, BufWriter::new(File::create(&log_path)?))?;
            }
            if logs.is_empty() {
                trainer.save(&ckpt)?;
            }
            Ok(())
        }
        Command::Spot {
            common,
            decode,
            model,
            ensemble: others,
            data,
            out,
        } => {
            let mut cfg = resolve(&common, &[])?;
            apply_decode(&mut cfg, &decode)?;
            let models = load_models(&model, &others)?;
            cfg.model = models[0].cfg;
            write_resolved(&cfg, &parent_dir(&out))?;
            let data = load_data(&data, &models[0])?;
            let refs: Vec<&dyn WindowModel> = models.iter().map(|m| m as &dyn WindowModel).collect();
            let preds = spot_dataset(&refs, &data, &cfg.decode)?;
            write_intervals(&preds, &out)?;
            log::info!("{} intervals over {} videos", preds.len(), data.len());
            Ok(())
        }
        Command::Eval { common, pred, gt, out } => {
            let cfg = resolve(&common, &[])?;
            cfg.metric.validate()?;
            let preds = read_intervals(&pred)?;
            let gts: Vec<SignInterval> = if gt.is_dir() {
                hsi3d::sampler::load_annotations(gt.join(hsi3d::dataset::ANNOTATIONS))?
                    .into_iter()
                    .flat_map(|t| t.intervals)
                    .collect()
            } else {
                read_intervals(&gt)?
            };
            let report = evaluate(&preds, &gts, &cfg.metric);
            let json = serde_json::to_string_pretty(&report).map_err(hsi3d::Error::from)?;
            println!("{json}");
            let dir = match &out {
                Some(path) => {
                    std::fs::write(path, &json)?;
                    parent_dir(path)
                }
                None => parent_dir(&pred),
            };
            write_resolved(&cfg, &dir)
        }
        Command::Trace {
            common,
            decode,
            model,
            ensemble: others,
            data,
            video,
            classes,
            out,
        } => {
            let mut cfg = resolve(&common, &[])?;
            apply_decode(&mut cfg, &decode)?;
            let models = load_models(&model, &others)?;
            cfg.model = models[0].cfg;
            let keep: Vec<usize> = match &classes {
                Some(list) => list
                    .split(',')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| Failure::Usage(format!("--classes {list:?}: {e}")))?,
                None => (0..cfg.model.outputs()).collect(),
            };
            if let Some(&bad) = keep.iter().find(|&&c| c >= cfg.model.outputs()) {
                return Err(Failure::Usage(format!("class {bad} outside [0, {})", cfg.model.outputs())));
            }
            write_resolved(&cfg, &parent_dir(&out))?;
            let p = cfg.model.pyramid;
            let frames = hsi3d::dataset::load_video(&data.join(hsi3d::dataset::VIDEOS), &video, Some((p.input_h, p.input_w)))?;
            let traces = models
                .iter()
                .map(|m| slide_video(&frames, m, &cfg.decode.levels, cfg.decode.stride, cfg.decode.batch))
                .collect::<hsi3d::Result<Vec<_>>>()?;
            let probs = ensemble(&traces)?;
            let mut w = BufWriter::new(File::create(&out)?);
            probs.write_csv_columns(&mut w, &keep)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
