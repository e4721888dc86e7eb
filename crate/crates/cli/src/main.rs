use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use motionmask::io::{count_frames, read_depth_dir, read_sequence, write_gray_png, write_sequence};
use motionmask::losses::LossWeights;
use motionmask::metrics::{depth_metrics, MetricsConfig, MetricsReport};
use motionmask::pipeline::{run_pipeline, sequence_from_bundles, sweep_theta, PipelineConfig, PipelineReport};
use motionmask::segment::OverlapMetric;
use motionmask::synth::{random_scene, render_sequence, RandomSceneParams, SceneSpec};
use motionmask::{BinaryMask, Raster};

#[derive(Parser)]
#[command(name = "motionmask", version, about = "Dynamic-object-aware reconstruction losses and depth metrics")]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a sequence directory.
    Run {
        /// Directory with intrinsics.txt and image_/depth_/mask_NNNNNN files.
        input: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Ground-truth depth directory (depth_NNNNNN.pfm) for metrics.
        #[arg(long)]
        gt_depth_dir: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for grayscale depth and classification images.
        #[arg(long)]
        viz_dir: Option<PathBuf>,
    },
    /// Render a synthetic sequence from a scene or random-scene config.
    Synth {
        /// JSON file holding a SceneSpec or RandomSceneParams.
        config: PathBuf,
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed for random-scene configs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Depth metrics of predicted against ground-truth depth maps.
    Eval {
        /// Directory of predicted depth_NNNNNN.pfm files.
        pred_dir: PathBuf,
        #[arg(long)]
        gt_depth_dir: PathBuf,
        #[arg(long)]
        no_median_scale: bool,
        #[arg(long, default_value_t = 1e-3)]
        min_depth: f64,
        #[arg(long, default_value_t = 80.0)]
        max_depth: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean losses over a grid of θ values.
    Sweep {
        /// Sequence directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Comma-separated θ grid.
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.85,0.9,0.95,1.0")]
        thetas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0.9)]
    theta: f64,
    #[arg(long, default_value = "dice")]
    metric: OverlapMetric,
    #[arg(long, default_value_t = 2)]
    stride: usize,
    #[arg(long, default_value_t = 0.0075)]
    min_frac: f64,
    #[arg(long, default_value_t = 20)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.85)]
    alpha: f64,
    /// Loss weights pe,g,s,h.
    #[arg(long, value_delimiter = ',', default_value = "2,1,0.1,0.02")]
    weights: Vec<f64>,
    #[arg(long)]
    both_directions: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Height prior for the height loss, in scene units.
    #[arg(long, default_value_t = 1.5)]
    height_prior: f64,
}

impl PipelineArgs {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let [photometric, geometric, smoothness, height] = self.weights[..] else {
            bail!("--weights expects four values pe,g,s,h");
        };
        let cfg = PipelineConfig {
            theta: self.theta,
            metric: self.metric,
            temporal_stride: self.stride,
            min_object_frac: self.min_frac,
            max_objects: self.max_objects,
            weights: LossWeights {
                photometric,
                geometric,
                smoothness,
                height,
                alpha: self.alpha,
            },
            both_directions: self.both_directions,
            seed: self.seed,
            height_prior: self.height_prior,
            ..PipelineConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SynthConfig {
    Scene(Box<SceneSpec>),
    Random(RandomSceneParams),
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn write_viz(dir: &Path, seq: &motionmask::io::Sequence, report: &PipelineReport) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, f) in seq.frames.iter().enumerate() {
        let valid: Vec<f32> = f.depth.data().iter().copied().filter(|d| d.is_finite() && *d > 0.0).collect();
        let lo = valid.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = valid.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (lo, hi) = if lo < hi { (lo, hi) } else { (0.0, 1.0) };
        let p = dir.join(format!("depth_{i:06}.png"));
        fs::write(&p, write_gray_png(&f.depth, lo, hi)?).with_context(|| format!("writing {}", p.display()))?;
    }
    for pair in &report.pairs {
        let d = &pair.forward;
        let masks = &seq.frames[d.source].masks;
        let (w, h) = masks.dims();
        let mut img = Raster::filled(w, h, 1, 0.0);
        for inst in masks.instances() {
            let value = if d.classification.is_dynamic(inst.id) {
                1.0
            } else if d.classification.removed_small_ids.contains(&inst.id) {
                0.25
            } else {
                0.5
            };
            for idx in inst.mask.indices() {
                img.data_mut()[idx] = value;
            }
        }
        let p = dir.join(format!("classes_{:06}_{:06}.png", d.source, d.target));
        fs::write(&p, write_gray_png(&img, 0.0, 1.0)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            input,
            pipeline,
            gt_depth_dir,
            out,
            viz_dir,
        } => {
            let cfg = pipeline.config()?;
            let seq = read_sequence(&input)?;
            let gt = gt_depth_dir
                .as_deref()
                .map(|d| read_depth_dir(d, seq.frames.len()))
                .transpose()?;
            let report = run_pipeline(&seq, gt.as_deref(), &cfg)?;
            if let Some(dir) = viz_dir {
                write_viz(&dir, &seq, &report)?;
            }
            emit(out.as_deref(), &report.to_json()?)
        }
        Command::Synth { config, out, seed } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let parsed: SynthConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let spec = match parsed {
                SynthConfig::Scene(s) => *s,
                SynthConfig::Random(p) => random_scene(&p, seed)?,
            };
            let bundles = render_sequence(&spec)?;
            let seq = sequence_from_bundles(spec.intrinsics, &bundles)?;
            write_sequence(&out, &seq)?;
            let spec_path = out.join("scene.json");
            fs::write(&spec_path, to_json(&spec)?).with_context(|| format!("writing {}", spec_path.display()))?;
            log::info!("wrote {} frames to {}", bundles.len(), out.display());
            Ok(())
        }
        Command::Eval {
            pred_dir,
            gt_depth_dir,
            no_median_scale,
            min_depth,
            max_depth,
            out,
        } => {
            let cfg = MetricsConfig {
                median_scale: !no_median_scale,
                min_depth,
                max_depth,
            };
            let n = (0..)
                .take_while(|&i| motionmask::io::depth_path(&pred_dir, i).is_file())
                .count();
            if n == 0 {
                bail!("no depth maps found in {}", pred_dir.display());
            }
            let pred = read_depth_dir(&pred_dir, n)?;
            let gt = read_depth_dir(&gt_depth_dir, n)?;
            let frames = pred
                .iter()
                .zip(&gt)
                .map(|(p, g)| {
                    let (w, h) = g.dims();
                    let valid = BinaryMask::from_fn(w, h, |x, y| motionmask::raster::is_valid_depth(g.get(x, y, 0)));
                    depth_metrics(p, g, &valid, &cfg)
                })
                .collect::<motionmask::Result<Vec<_>>>()?;
            let mean = MetricsReport::mean(&frames).expect("at least one frame");
            emit(out.as_deref(), &to_json(&serde_json::json!({ "frames": frames, "mean": mean }))?)
        }
        Command::Sweep {
            inputs,
            pipeline,
            thetas,
            out,
        } => {
            let cfg = pipeline.config()?;
            let seqs = inputs
                .iter()
                .map(|d| {
                    if count_frames(d) == 0 {
                        bail!("no frames found in {}", d.display());
                    }
                    Ok(read_sequence(d)?)
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let report = sweep_theta(&seqs, &thetas, &cfg)?;
            emit(out.as_deref(), &to_json(&report)?)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<motionmask::Error>())
        .any(|e| matches!(e.root(), motionmask::Error::NonFinite(_)));
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(e.into()),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
