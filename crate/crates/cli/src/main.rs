use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vpgs::backplate::{composite, render_backplate, Backplate};
use vpgs::camera::{Camera, CameraSpline};
use vpgs::dataset::{Dataset, Split};
use vpgs::image::RgbImage;
use vpgs::metrics::write_csv;
use vpgs::mip::{MipPyramid, DEFAULT_LEVELS};
use vpgs::raster::{render, RenderOptions};
use vpgs::scene::{SceneSidecar, SplatScene};
use vpgs::service::{serve, SessionAssets};
use vpgs::synth::{generate_dataset, Stage, SynthConfig};
use vpgs::train::{evaluate, train, LossReport, OutputDir, TrainConfig, TrainObserver};

#[derive(Parser)]
#[command(name = "vpgs", version, about = "Relightable Gaussian splatting for LED-wall stages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic desk stage into a dataset directory.
    Synth {
        /// TOML file with generator settings; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a relightable scene to a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every N iterations (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Render frames and AOVs from a checkpoint.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Camera id from the scene sidecar or dataset, or a JSON/TOML camera spline file.
        #[arg(long)]
        camera: String,
        /// Background texture image, or `none` for the unlit render.
        #[arg(long)]
        background: String,
        /// Extra outputs: unlit, alpha, depth, lambda, residual.
        #[arg(long, value_delimiter = ',')]
        aovs: Vec<RenderAov>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset providing cameras and the backplate when the sidecar lacks them.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Multiplier on the lighting intensity.
        #[arg(long, default_value_t = 1.0)]
        exposure: f64,
        /// Keep the foreground unpremultiplied over black instead of compositing the plate.
        #[arg(long)]
        no_plate: bool,
    },
    /// Write per-frame metrics for a checkpoint as CSV.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the interactive render service.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RenderAov {
    Unlit,
    Alpha,
    Depth,
    Lambda,
    Residual,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Depth is stored in millimeters, lambda in units of 1/10000.
const DEPTH_SCALE: f64 = 1000.0;
const LAMBDA_SCALE: f64 = 10000.0;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<vpgs::Error>(), Some(vpgs::Error::Numeric(_))));
    if numeric {
        3
    } else {
        2
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Train { data, config, out, progress } => train_cmd(&data, config.as_deref(), &out, progress),
        Command::Render {
            scene,
            camera,
            background,
            aovs,
            out,
            data,
            exposure,
            no_plate,
        } => render_cmd(&RenderArgs {
            scene,
            camera,
            background,
            aovs,
            out,
            data,
            exposure,
            no_plate,
        }),
        Command::Eval { scene, data, split, out } => eval_cmd(&scene, &data, split, out.as_deref()),
        Command::Serve { scene, data, port, bind } => {
            let assets = SessionAssets::open(&scene, data.as_deref())?;
            let listener = TcpListener::bind((bind.as_str(), port)).with_context(|| format!("binding {bind}:{port}"))?;
            eprintln!("serving {} on ws://{}", scene.display(), listener.local_addr()?);
            serve(listener, assets)?;
            Ok(())
        }
    }
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let m = generate_dataset(&Stage::desk(), &cfg, out)?;
    eprintln!(
        "wrote {} frames ({} cameras, {} backgrounds) to {}",
        m.frames.len(),
        m.cameras.len(),
        m.backgrounds.len(),
        out.display()
    );
    Ok(())
}

struct Progress {
    every: usize,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, r: &LossReport) {
        if self.every > 0 && r.iteration % self.every == 0 {
            eprintln!(
                "{:>8} {:>6}  loss {:.5}  rgb {:.5}  canon {:.5}  mask {:.5}  M {}",
                r.phase, r.iteration, r.total, r.l_rgb, r.l_canon, r.l_mask, r.primitives
            );
        }
        if let Some(p) = r.eval_psnr {
            eprintln!("{:>8} {:>6}  held-out psnr {p:.3} dB", r.phase, r.iteration);
        }
    }
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path, progress: usize) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let ds = Dataset::load(data)?;
    let outcome = train(&ds, &cfg, Some(&OutputDir { dir: out.to_path_buf() }), &mut Progress { every: progress })?;
    if let Some(p) = outcome.checkpoint {
        eprintln!("checkpoint {} ({} primitives)", p.display(), outcome.scene.len());
    }
    Ok(())
}

struct RenderArgs {
    scene: PathBuf,
    camera: String,
    background: String,
    aovs: Vec<RenderAov>,
    out: PathBuf,
    data: Option<PathBuf>,
    exposure: f64,
    no_plate: bool,
}

/// Cameras and backplate from the sidecar, falling back to the dataset.
fn scene_context(scene: &Path, data: Option<&Path>) -> Result<(Vec<Camera>, Option<Backplate>, usize)> {
    let side = SceneSidecar::load(scene)?.unwrap_or_default();
    let mut cameras: Vec<Camera> = side.cameras.iter().map(Camera::try_from).collect::<vpgs::Result<_>>()?;
    let mut plate = side.backplate;
    if let Some(d) = data {
        let ds = Dataset::load(d)?;
        if cameras.is_empty() {
            cameras = ds.cameras;
        }
        plate = plate.or(ds.manifest.wall);
    }
    Ok((cameras, plate, side.mip_levels.unwrap_or(DEFAULT_LEVELS)))
}

fn load_spline(path: &Path) -> Result<CameraSpline> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spline = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(spline)
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    if !(a.exposure.is_finite() && a.exposure >= 0.0) {
        bail!(vpgs::Error::InvalidParameter(format!("exposure {} must be nonnegative", a.exposure)));
    }
    let scene = SplatScene::load(&a.scene)?;
    let (cameras, plate, mip_levels) = scene_context(&a.scene, a.data.as_deref())?;
    let base = cameras
        .first()
        .ok_or_else(|| vpgs::Error::Dataset("no cameras in the sidecar; pass --data".into()))?;
    let path: Vec<Camera> = match a.camera.parse::<usize>() {
        Ok(j) => vec![cameras
            .get(j)
            .cloned()
            .ok_or_else(|| vpgs::Error::InvalidParameter(format!("camera {j} does not exist")))?],
        Err(_) => load_spline(Path::new(&a.camera))?
            .poses()?
            .iter()
            .map(|p| base.with_pose(p))
            .collect::<vpgs::Result<_>>()?,
    };
    let texture = match a.background.as_str() {
        "none" => None,
        p => Some(RgbImage::load(Path::new(p))?),
    };
    let pyramid = texture.as_ref().map(|t| MipPyramid::build_capped(t, mip_levels)).transpose()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let opts = RenderOptions {
        lambda_scale: a.exposure,
        ..Default::default()
    };
    for (i, cam) in path.iter().enumerate() {
        let fg = render(&scene, cam, pyramid.as_ref(), &opts)?;
        let color = match (&texture, &plate, a.no_plate) {
            (Some(t), Some(p), false) => composite(&fg, &render_backplate(p, cam, t)?.color)?,
            _ => fg.color.clone(),
        };
        let file = |name: &str| a.out.join(format!("{name}_{i:04}.png"));
        color.save_png(&file("color"))?;
        for aov in &a.aovs {
            match aov {
                RenderAov::Unlit => fg.canonical.save_png(&file("unlit"))?,
                RenderAov::Residual => fg.residual_map.save_png(&file("residual"))?,
                RenderAov::Alpha => fg.alpha.save_png8(&file("alpha"))?,
                RenderAov::Depth => fg.depth.save_png16(&file("depth"), DEPTH_SCALE)?,
                RenderAov::Lambda => fg.lambda_map.save_png16(&file("lambda"), LAMBDA_SCALE)?,
            }
        }
    }
    eprintln!("rendered {} frame(s) to {}", path.len(), a.out.display());
    Ok(())
}

fn eval_cmd(scene_path: &Path, data: &Path, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let scene = SplatScene::load(scene_path)?;
    let mip_levels = SceneSidecar::load(scene_path)?.and_then(|s| s.mip_levels).unwrap_or(DEFAULT_LEVELS);
    let ds = Dataset::load(data)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let name = scene_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let rows = evaluate(&scene, &ds, &ds.views(split), &ds.background_ids(split), mip_levels, &name)?;
    match out {
        Some(p) => vpgs::metrics::save_csv(p, &rows)?,
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}
