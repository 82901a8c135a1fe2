use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, Vector3};
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdk_core::augment::{GroupWeights, PairBuilder, StyleRegistry};
use cdk_core::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use cdk_core::config::RunConfig;
use cdk_core::dataset::{build_samples, Dataset};
use cdk_core::features::{encode_frames, load_features, save_features, FeatureGrid, ToyEncoder};
use cdk_core::model::ControlledModel;
use cdk_core::pca::{self, FeatureMatrix};
use cdk_core::rollout::{Generator, RolloutPlan};
use cdk_core::tensor_io::{self, RawTensor};
use cdk_core::train::{fit, TrainState};
use cdk_core::video::{load_png, VaeStub, VideoTensor};
use cdk_core::voxel::{
    cameras_from_json, load_cloud, render_voxel_views, stack_views, voxelize, DEFAULT_VOXEL_SIZE,
};
use cdk_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cdk",
    version,
    about = "Dense feature control for toy video diffusion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra config overrides, `key=value`; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct Sampling {
    /// Residual scale.
    #[arg(long)]
    scale: Option<f64>,
    /// Classifier-free guidance scale; 1 disables guidance.
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    drop_first_frame: bool,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    style_keyword: Option<String>,
    /// Trained checkpoint; without one a freshly initialised model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Optional first-frame PNG.
    #[arg(long)]
    first_frame: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the control branch and adapter on a clip dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps (schedule length).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON-lines metrics file; stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        pairs_per_clip: usize,
    },
    /// Sample one block from a feature tensor.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        features: PathBuf,
        /// Output directory for PNG frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a long video block by block from `block_000.cdkt`, `block_001.cdkt`, ...
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        blocks: PathBuf,
        #[arg(long)]
        num_blocks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize a feature point cloud and render it into camera views.
    RenderFeatures {
        #[arg(long)]
        cloud: PathBuf,
        /// `N × D` point features.
        #[arg(long)]
        point_features: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
        voxel_size: f64,
        /// Output grid as `HxW` (feature cells).
        #[arg(long, default_value = "4x6")]
        grid: String,
        /// Output `(T, D, h, w)` feature tensor; masks go next to it as `<stem>.mask.cdkt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a projection basis and report style disentanglement as JSON.
    PcaAnalyze {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        styled: PathBuf,
        #[arg(long, value_enum, default_value_t = BasisArg::StyleInvariant)]
        basis: BasisArg,
        /// Output dimensionality.
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        k_style: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode PNG frames (or every clip of a dataset) into feature tensors.
    EncodeFeatures {
        #[command(flatten)]
        common: Common,
        /// Directory of `%06d.png` frames.
        #[arg(long, conflicts_with = "data")]
        frames: Option<PathBuf>,
        #[arg(long, requires = "frames")]
        num_frames: Option<usize>,
        #[arg(long, requires = "frames")]
        out: Option<PathBuf>,
        /// Writes `features.cdkt` into each clip of this dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Standard,
    StyleInvariant,
    Bottom,
    Random,
    TailDrop,
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut text = match &c.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::contract(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        text.push_str(&format!("\n{} = {}", k.trim(), v.trim()));
    }
    RunConfig::parse_str(&text)
}

fn apply_sampling(cfg: &mut RunConfig, c: &Common, s: &Sampling) {
    let i = &mut cfg.infer;
    if let Some(v) = c.seed {
        i.seed = v;
    }
    if let Some(v) = s.scale {
        i.scale = v;
    }
    if let Some(v) = s.cfg {
        i.guidance = v;
    }
    if let Some(v) = s.steps {
        i.steps = v;
    }
    if s.drop_first_frame {
        i.drop_first_frame = true;
    }
    if let Some(v) = &s.prompt {
        i.prompt = v.clone();
    }
    if let Some(v) = &s.style_keyword {
        i.style_keyword = v.clone();
    }
}

fn model_for(cfg: &RunConfig, s: &Sampling, device: &Device) -> Result<ControlledModel> {
    match &s.checkpoint {
        Some(p) => load_model(p, device),
        None => ControlledModel::init(cfg.model.clone(), cfg.train.seed, DType::F32, device),
    }
}

fn first_frame(s: &Sampling) -> Result<Option<Array3<f32>>> {
    s.first_frame.as_deref().map(load_png).transpose()
}

fn cmd_train(
    common: &Common,
    data: &Path,
    out: &Path,
    steps: Option<usize>,
    resume: Option<&Path>,
    metrics: Option<&Path>,
    pairs_per_clip: usize,
) -> Result<()> {
    let mut cfg = run_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    cfg.validate()?;
    let device = Device::Cpu;
    let mut state = match resume {
        Some(p) => {
            let (state, saved) = load_checkpoint(p, &device)?;
            crate_ensure(
                saved.seed == cfg.train.seed,
                "resume seed differs from the checkpoint",
            )?;
            state
        }
        None => TrainState::new(
            ControlledModel::init(cfg.model.clone(), cfg.train.seed, DType::F32, &device)?,
            &cfg.train,
        ),
    };
    let model_cfg = state.model.config().clone();
    let ds = Dataset::open(data)?;
    let encoder = ToyEncoder::new(cfg.pipeline.encoder, cfg.pipeline.encoder_seed)?;
    let vae = VaeStub::new(model_cfg.backbone.latent_channels, cfg.pipeline.vae_seed)?;
    let styles = StyleRegistry::default();
    let builder = PairBuilder {
        encoder: &encoder,
        vae: &vae,
        styles: &styles,
        ranges: Default::default(),
        device: device.clone(),
    };
    let weights = GroupWeights {
        neural_style: 0.0,
        ..Default::default()
    };
    let samples = build_samples(
        &ds,
        &builder,
        &weights,
        model_cfg.backbone.text_dim,
        pairs_per_clip,
        cfg.train.seed,
        DType::F32,
    )?;
    let remaining = cfg.train.total_steps.saturating_sub(state.step);
    let mut sink: Box<dyn Write> = match metrics {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    fit(
        &mut state,
        &samples,
        &cfg.train,
        remaining,
        Some(&mut *sink),
    )?;
    sink.flush()?;
    save_checkpoint(&state, &cfg.train, out)?;
    Ok(())
}

fn crate_ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::contract(msg))
    }
}

fn write_frames(video: &VideoTensor, out: &Path) -> Result<()> {
    video.save_pngs(out)?;
    let back = VideoTensor::load_pngs(out, video.frames())?;
    crate_ensure(
        back.data() == video.data(),
        "written frames do not round-trip",
    )
}

fn cmd_infer(common: &Common, s: &Sampling, features: &Path, out: &Path) -> Result<()> {
    let mut cfg = run_config(common)?;
    apply_sampling(&mut cfg, common, s);
    cfg.validate()?;
    let device = Device::Cpu;
    let model = model_for(&cfg, s, &device)?;
    let grid = load_features(features, cfg.pipeline.encoder.patch)?;
    if grid.frames() != cfg.pipeline.frames {
        return Err(Error::contract(format!(
            "feature tensor has {} frames, block length is {}",
            grid.frames(),
            cfg.pipeline.frames
        )));
    }
    let vae = VaeStub::new(
        model.config().backbone.latent_channels,
        cfg.pipeline.vae_seed,
    )?;
    let generator = Generator {
        model: &model,
        vae: &vae,
        device,
    };
    let ff = first_frame(s)?;
    let video = generator.infer(&grid, ff.as_ref(), None, &cfg.infer, cfg.infer.seed)?;
    write_frames(&video, out)
}

fn cmd_rollout(
    common: &Common,
    s: &Sampling,
    blocks: &Path,
    num_blocks: usize,
    out: &Path,
) -> Result<()> {
    let mut cfg = run_config(common)?;
    apply_sampling(&mut cfg, common, s);
    cfg.validate()?;
    let plan = RolloutPlan::new(cfg.pipeline.frames, num_blocks)?;
    let mut grids = Vec::with_capacity(num_blocks);
    for k in 0..num_blocks {
        let p = blocks.join(format!("block_{k:03}.cdkt"));
        if !p.exists() {
            return Err(Error::contract(format!(
                "missing feature block {k}: {}",
                p.display()
            )));
        }
        grids.push(load_features(&p, cfg.pipeline.encoder.patch)?);
    }
    let device = Device::Cpu;
    let model = model_for(&cfg, s, &device)?;
    let vae = VaeStub::new(
        model.config().backbone.latent_channels,
        cfg.pipeline.vae_seed,
    )?;
    let generator = Generator {
        model: &model,
        vae: &vae,
        device,
    };
    let ff = first_frame(s)?;
    let result = generator.rollout(&grids, ff.as_ref(), &plan, &cfg.infer)?;
    write_frames(&result.video, out)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::contract(format!("--grid expects HxW, got `{s}`")))?;
    let p = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::contract(format!("bad grid size `{s}`")))
    };
    Ok((p(h)?, p(w)?))
}

fn cmd_render(
    cloud: &Path,
    point_features: &Path,
    cameras: &Path,
    voxel_size: f64,
    grid: &str,
    out: &Path,
) -> Result<()> {
    let cloud = load_cloud(cloud, point_features)?;
    let cams = cameras_from_json(&fs::read_to_string(cameras)?)?;
    let voxels = voxelize(&cloud, voxel_size, Vector3::zeros())?;
    let views = render_voxel_views(&voxels, &cams, parse_grid(grid)?)?;
    let (features, _, masks) = stack_views(&views)?;
    save_features(&features, out)?;
    let (h, w) = masks[0].dim();
    let mut m = ndarray::Array3::<f32>::zeros((masks.len(), h, w));
    for (t, mask) in masks.iter().enumerate() {
        m.index_axis_mut(Axis(0), t).assign(mask);
    }
    let mask_path = out.with_extension("mask.cdkt");
    tensor_io::save(&mask_path, &RawTensor::from_array(&m.into_dyn()))?;
    println!(
        "{}",
        serde_json::json!({"voxels": voxels.len(), "views": views.len(), "coverage": views.iter().map(|v| v.coverage()).collect::<Vec<_>>()})
    );
    Ok(())
}

fn feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let raw = tensor_io::load(path)?;
    match raw.shape.len() {
        2 => {
            let (n, d) = (raw.shape[0], raw.shape[1]);
            FeatureMatrix::new(DMatrix::from_fn(n, d, |r, c| raw.data[r * d + c] as f64))
        }
        4 => FeatureMatrix::from_grid(&FeatureGrid::new(
            raw.into_array()
                .into_dimensionality()
                .expect("rank checked"),
            1,
            cdk_core::features::FeatureSource::File,
        )?),
        _ => Err(Error::contract(format!(
            "{}: expected N × D or T × D × h × w features, got {:?}",
            path.display(),
            raw.shape
        ))),
    }
}

fn cmd_pca(
    real: &Path,
    styled: &Path,
    basis: BasisArg,
    k: usize,
    k_style: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let real = feature_matrix(real)?;
    let styled = feature_matrix(styled)?;
    let (b, name) = match basis {
        BasisArg::Standard => (pca::standard_pca(&real, k)?, "standard"),
        BasisArg::StyleInvariant => (
            pca::style_invariant_basis(&real, &styled, k_style, k)?.0,
            "style-invariant",
        ),
        BasisArg::Bottom => (pca::bottom_eigen_basis(&real, k)?, "bottom"),
        BasisArg::Random => (
            pca::random_orthogonal_basis(&real, k, &mut ChaCha8Rng::seed_from_u64(seed))?,
            "random",
        ),
        BasisArg::TailDrop => (pca::tail_drop_basis(&real, k)?, "tail-drop"),
    };
    let report = pca::disentanglement_report(&real, &styled, &b)?;
    let json = serde_json::json!({
        "basis": name,
        "k": b.k(),
        "k_style": matches!(basis, BasisArg::StyleInvariant).then_some(k_style),
        "cosine_similarity": report.cosine_similarity,
        "explained_variance_pct": report.explained_variance_pct,
        "excluded_rows": report.excluded_rows,
        "orthonormality_error": b.orthonormality_error(),
    });
    let text = serde_json::to_string_pretty(&json)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_encode(
    common: &Common,
    frames: Option<&Path>,
    num_frames: Option<usize>,
    out: Option<&Path>,
    data: Option<&Path>,
) -> Result<()> {
    let cfg = run_config(common)?;
    let encoder = ToyEncoder::new(cfg.pipeline.encoder, cfg.pipeline.encoder_seed)?;
    match (frames, data) {
        (Some(dir), None) => {
            let n = num_frames.unwrap_or(cfg.pipeline.frames);
            let out = out.ok_or_else(|| Error::contract("--frames needs --out"))?;
            save_features(
                &encode_frames(&VideoTensor::load_pngs(dir, n)?, &encoder)?,
                out,
            )
        }
        (None, Some(root)) => {
            let ds = Dataset::open(root)?;
            for clip in ds.clips() {
                save_features(
                    &encode_frames(&ds.load_video(clip)?, &encoder)?,
                    &ds.features_path(clip),
                )?;
            }
            Ok(())
        }
        _ => Err(Error::contract("pass exactly one of --frames or --data")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            common,
            data,
            out,
            steps,
            resume,
            metrics,
            pairs_per_clip,
        } => cmd_train(
            &common,
            &data,
            &out,
            steps,
            resume.as_deref(),
            metrics.as_deref(),
            pairs_per_clip,
        ),
        Cmd::Infer {
            common,
            sampling,
            features,
            out,
        } => cmd_infer(&common, &sampling, &features, &out),
        Cmd::Rollout {
            common,
            sampling,
            blocks,
            num_blocks,
            out,
        } => cmd_rollout(&common, &sampling, &blocks, num_blocks, &out),
        Cmd::RenderFeatures {
            cloud,
            point_features,
            cameras,
            voxel_size,
            grid,
            out,
        } => cmd_render(&cloud, &point_features, &cameras, voxel_size, &grid, &out),
        Cmd::PcaAnalyze {
            real,
            styled,
            basis,
            k,
            k_style,
            seed,
            out,
        } => cmd_pca(&real, &styled, basis, k, k_style, seed, out.as_deref()),
        Cmd::EncodeFeatures {
            common,
            frames,
            num_frames,
            out,
            data,
        } => cmd_encode(
            &common,
            frames.as_deref(),
            num_frames,
            out.as_deref(),
            data.as_deref(),
        ),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CDK_THREADS") {
        let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            Error::contract(format!("CDK_THREADS must be a positive integer, got `{v}`"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
