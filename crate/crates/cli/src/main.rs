use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use guidedseg_core::episodes::{generate_shapes_world, load_dataset, save_dataset, Points, ShapesConfig, TaskMode};
use guidedseg_core::model::{Fusion, Head, Locality, ModelParams};
use guidedseg_core::train::{
    benchmark_timing, eval_fewshot, timing_episode, train_fgbg, train_guided, EvalConfig, Progress, TaskClasses, TrainConfig,
};
use guidedseg_core::{Error, GuidanceConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "guidedseg", version, about = "Few-shot segmentation with guided networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a shapes-world dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Still images.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        video_sequences: Option<usize>,
    },
    /// Train a model episodically and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: TaskMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value_t = FusionArg::Late)]
        fusion: FusionArg,
        /// `unguided` trains the foreground-background baseline.
        #[arg(long, value_enum, default_value_t = HeadArg::Fusion)]
        head: HeadArg,
        #[arg(long, value_enum, default_value_t = LocalityArg::Global)]
        locality: LocalityArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        shots: Option<usize>,
        /// Per-episode budgets drawn uniformly, e.g. `1,2,5,10,dense`.
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<Points>>,
        /// Share of interactive episodes trained with spatial guidance.
        #[arg(long)]
        local_fraction: Option<f64>,
        /// Episodes between running-loss lines on stderr.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Mean positive IU over a grid of support shots and point budgets.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: TaskMode,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        shots: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,dense")]
        points: Vec<Points>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task classes; held-out for semantic mode, all otherwise.
        #[arg(long, value_enum)]
        classes: Option<ClassesArg>,
        #[arg(long, default_value_t = 0)]
        min_query_classes: usize,
        /// Overrides the checkpoint's locality.
        #[arg(long, value_enum)]
        locality: Option<LocalityArg>,
        /// Extra models scored on the same episodes, as `name=checkpoint`.
        #[arg(long = "baseline", value_parser = parse_baseline)]
        baselines: Vec<(String, PathBuf)>,
    },
    /// Full forward against guidance update plus head-only inference.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Late,
    Early,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Fusion,
    Regress,
    Proto,
    Unguided,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LocalityArg {
    Global,
    Identity,
}

impl From<LocalityArg> for Locality {
    fn from(l: LocalityArg) -> Self {
        match l {
            LocalityArg::Global => Locality::GlobalPool,
            LocalityArg::Identity => Locality::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassesArg {
    Heldout,
    Train,
    All,
}

fn parse_baseline(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=checkpoint, got {s:?}")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Unsupported(_) | Error::Contract(_) | Error::InvalidShape(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::DatasetTooSmall(_) | Error::InvalidLabel { .. } | Error::NoPositiveRegion => 3,
        _ => 1,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn synth(out: &Path, seed: u64, images: Option<usize>, sequences: Option<usize>) -> Result<(), Error> {
    let defaults = ShapesConfig::default();
    let cfg = ShapesConfig {
        still_images: images.unwrap_or(defaults.still_images),
        sequences: sequences.unwrap_or(defaults.sequences),
        ..defaults
    };
    let dataset = generate_shapes_world(&cfg, seed)?;
    save_dataset(&dataset, out)?;
    println!(
        "wrote {} samples ({} stills, {} sequences) to {}",
        dataset.len(),
        cfg.still_images,
        cfg.sequences,
        out.display()
    );
    Ok(())
}

fn report_progress(p: &Progress<'_, f32>) {
    eprintln!("episode {:>6}  loss {:.4}", p.episode, p.running_loss);
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { out, seed, images, video_sequences } => synth(&out, seed, images, video_sequences),
        Command::Train { data, mode, out, episodes, fusion, head, locality, seed, lr, shots, points, local_fraction, log_every } => {
            let dataset = load_dataset(&data)?;
            let head = match head {
                HeadArg::Fusion => Head::FeatureFusion,
                HeadArg::Regress => Head::ParamRegression,
                HeadArg::Proto => Head::Prototype,
                HeadArg::Unguided => Head::Unguided,
            };
            let fusion = match fusion {
                FusionArg::Late => Fusion::Late,
                FusionArg::Early => Fusion::Early,
            };
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                mode,
                seed,
                episodes: episodes.unwrap_or(defaults.episodes),
                lr: lr.unwrap_or(defaults.lr),
                shots: shots.unwrap_or(defaults.shots),
                points: points.unwrap_or(defaults.points.clone()),
                local_fraction: local_fraction.unwrap_or(defaults.local_fraction),
                log_every,
                model: GuidanceConfig::default().with_head(head).with_fusion(fusion).with_locality(locality.into()),
                ..defaults
            };
            let outcome = if head == Head::Unguided {
                train_fgbg::<f32>(&dataset, &cfg, report_progress)?
            } else {
                train_guided::<f32>(&dataset, &cfg, report_progress)?
            };
            outcome.params.save(&out)?;
            let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
            println!(
                "trained {} episodes; final mean loss {:.4}; wrote {}",
                outcome.losses.len(),
                tail.iter().sum::<f64>() / tail.len() as f64,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            shots,
            points,
            report,
            episodes,
            seed,
            classes,
            min_query_classes,
            locality,
            baselines,
        } => {
            let params = ModelParams::<f32>::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let loaded = baselines
                .iter()
                .map(|(name, path)| ModelParams::<f32>::load(path).map(|p| (name.as_str(), p)))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<(&str, &ModelParams<f32>)> = loaded.iter().map(|(n, p)| (*n, p)).collect();
            let classes = match classes {
                Some(ClassesArg::Heldout) => TaskClasses::Heldout,
                Some(ClassesArg::Train) => TaskClasses::Train,
                Some(ClassesArg::All) => TaskClasses::All,
                None if mode == TaskMode::Semantic => TaskClasses::Heldout,
                None => TaskClasses::All,
            };
            let cfg = EvalConfig {
                mode,
                shots,
                points,
                episodes,
                seed,
                classes,
                min_query_classes,
                locality: locality.map(Into::into),
            };
            let result = eval_fewshot(&params, &refs, &dataset, &cfg)?;
            for c in &result.cells {
                let base: Vec<String> = result
                    .baselines
                    .iter()
                    .map(|(name, cells)| {
                        let b = cells.iter().find(|b| b.shots == c.shots && b.points == c.points).expect("same grid");
                        format!("{name} {:.3}", b.mean_iu)
                    })
                    .collect();
                println!("S={} P={:<5} mean IU {:.3} ± {:.3}  {}", c.shots, c.points, c.mean_iu, c.std_iu, base.join("  "));
            }
            write_json(&report, &result)
        }
        Command::Bench { ckpt, data, report, reps, seed } => {
            let params = ModelParams::<f32>::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let episode = timing_episode(&dataset, seed)?;
            let timing = benchmark_timing(&params, &dataset, &episode, reps)?;
            println!(
                "full forward {:.3} ms, guidance update {:.3} ms, ratio {:.2}",
                timing.full_forward_ms, timing.update_ms, timing.ratio
            );
            let out = serde_json::json!({
                "model": params.config,
                "timing": timing,
                "hardware": hardware_notes(),
            });
            write_json(&report, &out)
        }
    }
}

fn hardware_notes() -> serde_json::Value {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split_once(':')).map(|(_, v)| v.trim().to_string()));
    serde_json::json!({
        "cpu": cpu,
        "threads_available": std::thread::available_parallelism().map_or(1, |n| n.get()),
        "threads_used": 1,
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "scalar": "f32",
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
