mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use staticsplat::align::{initialize_state, optimize_alignment, AlignConfig, AlignState};
use staticsplat::eval::{masked_psnr, masked_ssim, split_frames, trajectory_metrics};
use staticsplat::geometry::{DepthMap, Intrinsics, Pose};
use staticsplat::io::{self, MetricsRow};
use staticsplat::masks::{aggregate_all, mask_iou, staticness_from_mask, FrameMask, StaticnessMap};
use staticsplat::splat::{read_cloud, render, write_cloud, RenderMode};
use staticsplat::synth::{generate, CameraPath, SceneSpec};
use staticsplat::trainer::{
    frame_confidences, init_cloud, refine_test_poses, train, FrameDataset, LearningRates, LossForm, TrainConfig,
};
use staticsplat::{Error, Grid};

use config::{ConfigError, RunConfig};

const THREADS_ENV: &str = "STATICSPLAT_THREADS";

#[derive(Parser)]
#[command(name = "staticsplat", version, about = "Static background reconstruction from dynamic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Plain,
    Staticness,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with full ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Copy externally produced frames and pair predictions into manifest form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frame-pair strides of the supplied predictions.
        #[arg(long, value_delimiter = ',')]
        strides: Option<Vec<usize>>,
    },
    /// Recover poses, depths and focal from pair predictions.
    Align {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        w_smooth: Option<f64>,
        #[arg(long)]
        w_flow: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Initialize and optimize the Gaussian cloud.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `masked` or `literal`.
        #[arg(long)]
        loss_form: Option<String>,
        #[arg(long)]
        lr_staticness: Option<f64>,
        #[arg(long)]
        confidence_percentile: Option<f64>,
    },
    /// Render a checkpoint at its trajectory.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Render every frame instead of the held-out ones.
        #[arg(long)]
        all: bool,
    },
    /// Masked PSNR/SSIM, mask IoU and trajectory error of a checkpoint.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sequence: Option<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidInput(_) | Error::Infeasible(_) | Error::ShapeMismatch { .. }) => 2,
        Some(
            Error::MissingFile { .. }
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Image(_)
            | Error::Json(_)
            | Error::MissingFlow { .. }
            | Error::NoEdgesForFrame(_)
            | Error::DisconnectedGraph(_),
        ) => 3,
        Some(Error::Diverged { .. } | Error::NoSurvivingPoints | Error::NoStaticPixels) => 4,
        None => 1,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring {THREADS_ENV}={v}: expected a positive integer"),
        }
    }
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { config, out, seed } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.set("scene.seed", seed);
            cmd_synth(&cfg, &out)
        }
        Command::Ingest {
            input,
            out,
            config,
            strides,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.set(
                "scene.strides",
                strides.map(|s| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
            );
            cmd_ingest(&cfg, &input, &out)
        }
        Command::Align {
            input,
            out,
            config,
            iterations,
            w_smooth,
            w_flow,
            lr,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.set("align.iterations", iterations);
            cfg.set("align.w_smooth", w_smooth);
            cfg.set("align.w_flow", w_flow);
            cfg.set("align.lr", lr);
            cmd_align(&cfg, &input, &out)
        }
        Command::Train {
            input,
            align,
            out,
            config,
            iterations,
            seed,
            loss_form,
            lr_staticness,
            confidence_percentile,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.set("train.iterations", iterations);
            cfg.set("train.seed", seed);
            cfg.set("train.loss_form", loss_form);
            cfg.set("train.lr_staticness", lr_staticness);
            cfg.set("train.confidence_percentile", confidence_percentile);
            cmd_train(&cfg, &input, &align, &out)
        }
        Command::Render {
            checkpoint,
            out,
            config,
            mode,
            all,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.set(
                "render.mode",
                mode.map(|m| match m {
                    ModeArg::Plain => "plain",
                    ModeArg::Staticness => "staticness",
                }),
            );
            if all {
                cfg.set("render.frames", Some("all"));
            }
            cmd_render(&cfg, &checkpoint, &out)
        }
        Command::Eval {
            input,
            align,
            checkpoint,
            out,
            config,
            sequence,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.set("eval.sequence", sequence);
            cmd_eval(&cfg, &input, &align, &checkpoint, &out)
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        anyhow!(Error::InvalidInput(format!("cannot create output directory {}: {e}", dir.display())))
    })
}

fn scene_spec(cfg: &RunConfig) -> anyhow::Result<SceneSpec> {
    let width = cfg.get_or("scene.width", 64usize)?;
    let height = cfg.get_or("scene.height", 64usize)?;
    let frames = cfg.get_or("scene.frames", 50usize)?;
    let dynamic = cfg.get_or("scene.dynamic", 2usize)?;
    let seed = cfg.get_or("scene.seed", 0u64)?;
    let mut spec = SceneSpec::standard(width, height, frames, dynamic, seed);
    spec.coverage = cfg.get("scene.coverage")?;
    spec.pointmap_noise = cfg.get_or("scene.noise", 0.0)?;
    spec.mask_fp_rate = cfg.get_or("scene.fp_rate", 0.0)?;
    spec.mask_fn_rate = cfg.get_or("scene.fn_rate", 0.0)?;
    if let Some(s) = cfg.get_list("scene.strides")? {
        spec.strides = s;
    }
    spec.window = cfg.get_or("scene.window", spec.window)?;
    match cfg.get::<String>("scene.camera")?.as_deref() {
        None | Some("moving") => {}
        Some("still") => spec.camera = CameraPath::still(),
        Some(other) => {
            return Err(ConfigError(format!("scene.camera must be 'moving' or 'still', got '{other}'")).into());
        }
    }
    Ok(spec)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let spec = scene_spec(cfg)?;
    let ds = generate(&spec)?;
    create_dir(out)?;
    let manifest = io::write_synthetic(out, &ds)?;
    log::info!(
        "wrote {} frames, {} pair predictions (coverage {:.3}) to {}",
        ds.num_frames(),
        ds.pairs.len(),
        ds.coverage,
        out.display()
    );
    log::debug!("{} manifest entries", manifest.files.len());
    Ok(())
}

fn copy_into(src: &Path, out: &Path, name: &str) -> anyhow::Result<String> {
    if !src.exists() {
        return Err(Error::MissingFile {
            path: src.to_path_buf(),
            reason: "no such file".into(),
        }
        .into());
    }
    std::fs::copy(src, out.join(name)).with_context(|| format!("copying {}", src.display()))?;
    Ok(name.to_owned())
}

/// Expects `frame_XXXXX.png` per frame and, per graph edge,
/// `mask_N_M.png`, `pts_nn_N_M.pfm`, `pts_mn_N_M.pfm`, `conf_nn_N_M.pfm`
/// and `conf_mn_N_M.pfm`; `flow_N_M.pfm` and `trajectory.txt` are optional.
fn cmd_ingest(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    use io::Role;
    let mut n = 0;
    while input.join(format!("{}.png", io::frame_stem(Role::Frame, n))).exists() {
        n += 1;
    }
    if n < 2 {
        return Err(Error::MissingFile {
            path: input.join(format!("{}.png", io::frame_stem(Role::Frame, n))),
            reason: "at least two frames are required".into(),
        }
        .into());
    }
    let first = io::read_rgb_png(&input.join(format!("{}.png", io::frame_stem(Role::Frame, 0))))?;
    let (w, h) = first.shape();
    create_dir(out)?;
    let mut m = io::Manifest::new(w, h, n);
    m.strides = cfg.get_list("scene.strides")?.unwrap_or_else(|| vec![1]);
    m.window = cfg.get_or("scene.window", m.window)?;
    for t in 0..n {
        let name = format!("{}.png", io::frame_stem(Role::Frame, t));
        let img = io::read_rgb_png(&input.join(&name))?;
        if img.shape() != (w, h) {
            return Err(Error::ShapeMismatch {
                expected: (w, h),
                got: img.shape(),
            }
            .into());
        }
        m.add(Role::Frame, copy_into(&input.join(&name), out, &name)?, Some(t), None);
    }
    let graph = staticsplat::align::build_graph(n, &m.strides)?;
    for &e in graph.edges() {
        for (role, ext) in [
            (Role::PairMask, "png"),
            (Role::PtsNn, "pfm"),
            (Role::PtsMn, "pfm"),
            (Role::ConfNn, "pfm"),
            (Role::ConfMn, "pfm"),
            (Role::Flow, "pfm"),
        ] {
            let name = format!("{}.{ext}", io::edge_stem(role, e));
            let src = input.join(&name);
            if role == Role::Flow && !src.exists() {
                continue;
            }
            m.add(role, copy_into(&src, out, &name)?, None, Some(e));
        }
    }
    if input.join("trajectory.txt").exists() {
        m.add(Role::Trajectory, copy_into(&input.join("trajectory.txt"), out, "trajectory.txt")?, None, None);
    }
    m.save(out)?;
    // full validation pass over what was copied
    io::read_dataset(out)?;
    log::info!("ingested {n} frames and {} edges into {}", graph.num_edges(), out.display());
    Ok(())
}

/// Alignment products consumed by `train` and `eval`.
struct Aligned {
    intrinsics: Intrinsics,
    poses: Vec<Pose>,
    depths: Vec<DepthMap>,
    masks: Vec<FrameMask>,
}

const ALIGN_INFO: &str = "alignment.json";

fn write_aligned(out: &Path, a: &Aligned) -> anyhow::Result<()> {
    io::write_trajectory(&out.join("trajectory.txt"), &a.poses)?;
    let mut depths = Vec::new();
    let mut masks = Vec::new();
    for t in 0..a.poses.len() {
        let d = format!("depth_{t:05}.pfm");
        io::write_pfm(&out.join(&d), a.depths[t].values())?;
        depths.push(d);
        let m = format!("dynamic_{t:05}.pfm");
        io::write_pfm(&out.join(&m), a.masks[t].values())?;
        masks.push(m);
    }
    let i = &a.intrinsics;
    let info = json!({
        "width": i.width, "height": i.height,
        "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
        "trajectory": "trajectory.txt",
        "depths": depths,
        "masks": masks,
    });
    std::fs::write(out.join(ALIGN_INFO), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(())
}

fn read_aligned(dir: &Path) -> anyhow::Result<Aligned> {
    let path = dir.join(ALIGN_INFO);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::MissingFile {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let bad = |what: &str| Error::Format {
        path: path.clone(),
        reason: format!("missing or invalid '{what}'"),
    };
    let num = |k: &str| v[k].as_f64().ok_or_else(|| bad(k));
    let intrinsics = Intrinsics::new(
        num("fx")?,
        num("fy")?,
        num("cx")?,
        num("cy")?,
        v["width"].as_u64().ok_or_else(|| bad("width"))? as usize,
        v["height"].as_u64().ok_or_else(|| bad("height"))? as usize,
    )?;
    let poses = io::read_trajectory(&dir.join(v["trajectory"].as_str().ok_or_else(|| bad("trajectory"))?))?;
    let list = |k: &str| -> anyhow::Result<Vec<Grid<f64>>> {
        let arr = v[k].as_array().ok_or_else(|| bad(k))?;
        arr.iter()
            .map(|p| {
                let p = p.as_str().ok_or_else(|| bad(k))?;
                Ok(io::read_pfm(&dir.join(p))?)
            })
            .collect()
    };
    let depths = list("depths")?.into_iter().map(DepthMap::new).collect::<Result<Vec<_>, _>>()?;
    let masks = list("masks")?.into_iter().map(FrameMask::new).collect::<Result<Vec<_>, _>>()?;
    if depths.len() != poses.len() || masks.len() != poses.len() {
        return Err(bad("depths/masks count").into());
    }
    Ok(Aligned {
        intrinsics,
        poses,
        depths,
        masks,
    })
}

fn cmd_align(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    let ds = io::read_dataset(input)?;
    let defaults = AlignConfig::default();
    let acfg = AlignConfig {
        iterations: cfg.get_or("align.iterations", defaults.iterations)?,
        learning_rate: cfg.get_or("align.lr", defaults.learning_rate)?,
        w_smooth: cfg.get_or("align.w_smooth", defaults.w_smooth)?,
        w_flow: cfg.get_or("align.w_flow", defaults.w_flow)?,
        ..defaults
    };
    for (k, v) in [("align.lr", acfg.learning_rate), ("align.w_smooth", acfg.w_smooth), ("align.w_flow", acfg.w_flow)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!("{k} must be finite and >= 0, got {v}")).into());
        }
    }
    let masks = aggregate_all(&ds.problem.graph, &ds.problem.pair_masks())?;
    if acfg.w_flow > 0.0 {
        for (a, b) in ds.windows.pairs() {
            if !ds.problem.graph.contains_edge((a, b)) {
                log::warn!("flow pair ({a}, {b}) is not a graph edge");
            }
        }
        for &(a, b) in ds.problem.graph.edges() {
            if !ds.windows.flows.contains_key(&(a, b)) {
                log::debug!("no flow for edge ({a}, {b})");
            }
        }
    }
    let init = initialize_state(&ds.problem)?;
    let result = optimize_alignment(&ds.problem, &ds.windows, &masks, init, &acfg)?;
    create_dir(out)?;
    let mut logf = BufWriter::new(File::create(out.join("align_log.jsonl"))?);
    for (i, t) in result.trace.iter().enumerate() {
        writeln!(
            logf,
            "{}",
            json!({"iteration": i, "total": t.total, "align": t.align, "smooth": t.smooth, "flow": t.flow})
        )?;
    }
    let state = &result.state;
    let poses = state.poses();
    let mut summary = json!({"focal": state.focal()});
    if let Some(gt) = &ds.gt_poses {
        let m = trajectory_metrics(&poses, gt)?;
        summary["ate"] = json!(m.ate);
        summary["rpe_trans"] = json!(m.rpe_trans);
        summary["rpe_rot"] = json!(m.rpe_rot);
        log::info!("ATE {:.6} RPE {:.6} / {:.4} deg", m.ate, m.rpe_trans, m.rpe_rot);
    }
    writeln!(logf, "{summary}")?;
    logf.flush()?;
    write_aligned(
        out,
        &Aligned {
            intrinsics: state.intrinsics(),
            poses,
            depths: (0..state.num_frames()).map(|t| state.depth(t)).collect(),
            masks: masks.clone(),
        },
    )?;
    write_fused_cloud(&out.join("fused.ply"), state, &ds.problem, &ds.frames)?;
    Ok(())
}

/// World points of the pixels at or above their frame's median confidence.
fn write_fused_cloud(
    path: &Path,
    state: &AlignState,
    problem: &staticsplat::align::AlignProblem,
    frames: &[staticsplat::Image],
) -> anyhow::Result<()> {
    let conf = frame_confidences(problem);
    let mut pts = Vec::new();
    for t in 0..state.num_frames() {
        let mut c: Vec<f64> = conf[t].iter().copied().collect();
        c.sort_by(f64::total_cmp);
        let median = c[c.len() / 2];
        let world = state.global_pointmap(t).points;
        for (i, p) in world.iter().enumerate() {
            if conf[t][i] >= median {
                pts.push((*p, frames[t][i]));
            }
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(
        f,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pts.len()
    )?;
    for (p, c) in pts {
        let b = c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(f, "{} {} {} {} {} {}", p.x as f32, p.y as f32, p.z as f32, b[0], b[1], b[2])?;
    }
    f.flush()?;
    Ok(())
}

fn train_config(cfg: &RunConfig) -> anyhow::Result<TrainConfig> {
    let d = TrainConfig::default();
    let lr = LearningRates {
        position: cfg.get_or("train.lr_position", d.lr.position)?,
        opacity: cfg.get_or("train.lr_opacity", d.lr.opacity)?,
        staticness: cfg.get_or("train.lr_staticness", d.lr.staticness)?,
        pose_rotation: cfg.get_or("train.lr_rotation", d.lr.pose_rotation)?,
        pose_translation: cfg.get_or("train.lr_translation", d.lr.pose_translation)?,
    };
    let loss_form = match cfg.get::<String>("train.loss_form")?.as_deref() {
        None | Some("masked") => LossForm::Masked,
        Some("literal") => LossForm::Literal,
        Some(other) => {
            return Err(ConfigError(format!("train.loss_form must be 'masked' or 'literal', got '{other}'")).into())
        }
    };
    let t = TrainConfig {
        iterations: cfg.get_or("train.iterations", d.iterations)?,
        lr,
        lambda_ssim: cfg.get_or("train.lambda_ssim", d.lambda_ssim)?,
        confidence_percentile: cfg.get_or("train.confidence_percentile", d.confidence_percentile)?,
        loss_form,
        refine_poses: cfg.get_or("train.refine_poses", d.refine_poses)?,
        refine_iterations: cfg.get_or("train.refine_iterations", d.refine_iterations)?,
        seed: cfg.get_or("train.seed", d.seed)?,
    };
    t.validate()?;
    Ok(t)
}

fn config_dump(t: &TrainConfig, export: Option<f64>) -> String {
    let mut s = String::new();
    let form = match t.loss_form {
        LossForm::Masked => "masked",
        LossForm::Literal => "literal",
    };
    for (k, v) in [
        ("train.iterations", t.iterations.to_string()),
        ("train.lambda_ssim", t.lambda_ssim.to_string()),
        ("train.confidence_percentile", t.confidence_percentile.to_string()),
        ("train.loss_form", form.to_string()),
        ("train.refine_poses", t.refine_poses.to_string()),
        ("train.refine_iterations", t.refine_iterations.to_string()),
        ("train.lr_position", t.lr.position.to_string()),
        ("train.lr_opacity", t.lr.opacity.to_string()),
        ("train.lr_staticness", t.lr.staticness.to_string()),
        ("train.lr_rotation", t.lr.pose_rotation.to_string()),
        ("train.lr_translation", t.lr.pose_translation.to_string()),
        ("train.seed", t.seed.to_string()),
    ] {
        s += &format!("{k} = {v}\n");
    }
    if let Some(x) = export {
        s += &format!("train.export_threshold = {x}\n");
    }
    s
}

const CAMERA_FILE: &str = "camera.json";

fn write_camera(dir: &Path, i: &Intrinsics) -> anyhow::Result<()> {
    let v = json!({"width": i.width, "height": i.height, "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy});
    std::fs::write(dir.join(CAMERA_FILE), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

fn read_camera(dir: &Path) -> anyhow::Result<Intrinsics> {
    let path = dir.join(CAMERA_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::MissingFile {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let f = |k: &str| {
        v[k].as_f64().ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: format!("missing '{k}'"),
        })
    };
    Ok(Intrinsics::new(f("fx")?, f("fy")?, f("cx")?, f("cy")?, f("width")? as usize, f("height")? as usize)?)
}

fn cmd_train(cfg: &RunConfig, input: &Path, align_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let tcfg = train_config(cfg)?;
    let export: Option<f64> = cfg.get("train.export_threshold")?;
    let ds = io::read_dataset(input)?;
    let aligned = read_aligned(align_dir)?;
    let n = ds.frames.len();
    if aligned.poses.len() != n {
        return Err(Error::InvalidInput(format!("alignment has {} frames, dataset {n}", aligned.poses.len())).into());
    }
    let state = AlignState::from_parts(&aligned.poses, &aligned.depths, &aligned.intrinsics, ds.problem.graph.num_edges())?;
    let conf = frame_confidences(&ds.problem);
    let (train_frames, test_frames) = split_frames(n);
    let cloud = init_cloud(&state, &conf, &aligned.masks, &ds.frames, &train_frames, &tcfg)?;
    create_dir(out)?;
    write_cloud(&out.join("cloud_init.ply"), &cloud)?;
    log::info!("initialized {} Gaussians from {} training frames", cloud.len(), train_frames.len());
    let staticness: Vec<StaticnessMap> = aligned.masks.iter().map(staticness_from_mask).collect();
    let intr = aligned.intrinsics;
    let fd = FrameDataset::new(intr, ds.frames.clone(), aligned.poses.clone(), staticness.clone())?;
    let result = train(cloud, &fd, &tcfg)?;
    let mut poses = result.poses;
    if tcfg.iterations > 0 && !test_frames.is_empty() {
        let imgs: Vec<_> = test_frames.iter().map(|&t| ds.frames[t].clone()).collect();
        let stat: Vec<_> = test_frames.iter().map(|&t| staticness[t].clone()).collect();
        let init: Vec<_> = test_frames.iter().map(|&t| poses[t]).collect();
        let refined = refine_test_poses(&result.cloud, &imgs, &stat, &init, &intr, &tcfg)?;
        for (&t, p) in test_frames.iter().zip(refined) {
            poses[t] = p;
        }
    }
    write_cloud(&out.join("cloud.ply"), &result.cloud)?;
    if let Some(tau) = export {
        write_cloud(&out.join("cloud_static.ply"), &result.cloud.prune_dynamic(tau))?;
    }
    io::write_trajectory(&out.join("trajectory.txt"), &poses)?;
    write_camera(out, &intr)?;
    std::fs::write(out.join("config.txt"), config_dump(&tcfg, export))?;
    let mut f = BufWriter::new(File::create(out.join("loss.csv"))?);
    writeln!(f, "iteration,loss_total,loss_l1,loss_ssim")?;
    for e in &result.trace {
        writeln!(f, "{},{},{},{}", e.iteration, e.total, e.l1, e.ssim)?;
    }
    f.flush()?;
    if let Some(last) = result.trace.last() {
        log::info!("final loss {:.6}", last.total);
    }
    Ok(())
}

fn render_mode(cfg: &RunConfig) -> anyhow::Result<RenderMode> {
    match cfg.get::<String>("render.mode")?.as_deref() {
        None | Some("staticness") => Ok(RenderMode::Staticness),
        Some("plain") => Ok(RenderMode::Plain),
        Some(other) => Err(ConfigError(format!("render.mode must be 'plain' or 'staticness', got '{other}'")).into()),
    }
}

fn cmd_render(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let mode = render_mode(cfg)?;
    let cloud = read_cloud(&checkpoint.join("cloud.ply"))?;
    let poses = io::read_trajectory(&checkpoint.join("trajectory.txt"))?;
    let intr = read_camera(checkpoint)?;
    let frames: Vec<usize> = match cfg.get::<String>("render.frames")?.as_deref() {
        None | Some("test") => split_frames(poses.len()).1,
        Some("all") => (0..poses.len()).collect(),
        Some(other) => return Err(ConfigError(format!("render.frames must be 'test' or 'all', got '{other}'")).into()),
    };
    create_dir(out)?;
    for t in frames {
        let img = render(&cloud, &poses[t], &intr, mode).image;
        io::write_rgb_png(&out.join(format!("render_{t:05}.png")), &img)?;
        io::write_image_pfm(&out.join(format!("render_{t:05}.pfm")), &img)?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, input: &Path, align_dir: &Path, checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let threshold = cfg.get_or("eval.threshold", 0.5)?;
    let sequence = cfg.get_or("eval.sequence", "sequence".to_string())?;
    let ds = io::read_dataset(input)?;
    let aligned = read_aligned(align_dir)?;
    let cloud = read_cloud(&checkpoint.join("cloud.ply"))?;
    let poses = io::read_trajectory(&checkpoint.join("trajectory.txt"))?;
    let intr = read_camera(checkpoint)?;
    let n = ds.frames.len();
    if poses.len() != n {
        return Err(Error::InvalidInput(format!("checkpoint trajectory has {} poses, dataset {n} frames", poses.len())).into());
    }
    let traj = match &ds.gt_poses {
        Some(gt) => Some(trajectory_metrics(&poses, gt)?),
        None => None,
    };
    let (_, test) = split_frames(n);
    let mut rows = Vec::new();
    for &t in &test {
        let img = render(&cloud, &poses[t], &intr, RenderMode::Staticness).image;
        let gt_mask = ds.gt_masks.as_ref().map(|m| m[t].clone()).unwrap_or_else(|| aligned.masks[t].clone());
        let target = ds.static_frames[t].as_ref().unwrap_or(&ds.frames[t]);
        let iou = match &ds.gt_masks {
            Some(m) => mask_iou(&aligned.masks[t], &m[t], threshold)?,
            None => f64::NAN,
        };
        rows.push(MetricsRow {
            sequence: format!("{sequence}/{t:05}"),
            psnr: masked_psnr(&img, target, &gt_mask, threshold)?,
            ssim: masked_ssim(&img, target, &gt_mask, threshold)?,
            iou,
            ate: traj.map_or(f64::NAN, |m| m.ate),
            rpe_trans: traj.map_or(f64::NAN, |m| m.rpe_trans),
            rpe_rot: traj.map_or(f64::NAN, |m| m.rpe_rot),
        });
    }
    create_dir(out)?;
    io::write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    let report = format!(
        "sequence {sequence}\ntest frames {}\npsnr {:.4}\nssim {:.4}\niou {:.4}\nate {:.6}\nrpe_trans {:.6}\nrpe_rot {:.6}\n",
        rows.len(),
        mean(|r| r.psnr),
        mean(|r| r.ssim),
        mean(|r| r.iou),
        mean(|r| r.ate),
        mean(|r| r.rpe_trans),
        mean(|r| r.rpe_rot),
    );
    std::fs::write(out.join("metrics.txt"), &report)?;
    print!("{report}");
    Ok(())
}
