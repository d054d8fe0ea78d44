//! On-disk formats: float maps, PNG frames and masks, trajectories and the
//! dataset manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::align::{build_graph, AlignProblem, PairPrediction, WindowSet};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, Pose};
use crate::grid::{Grid, Image};
use crate::masks::{FrameMask, PairMask};
use crate::synth::SyntheticDataset;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::MissingFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Single-channel little-endian float map (`Pf`, negative scale), rows
/// stored bottom to top.
pub fn write_pfm(path: &Path, map: &Grid<f64>) -> Result<()> {
    let (w, h) = map.shape();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for v in (0..h).rev() {
        for u in 0..w {
            out.write_all(&(*map.get(u, v) as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn header_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return String::from_utf8(tok).map_err(|_| format_err(path, "non-ASCII header"));
        }
        tok.push(b[0]);
    }
}

/// Reads `Pf` maps of either endianness. `PF` (three-channel) is rejected.
pub fn read_pfm(path: &Path) -> Result<Grid<f64>> {
    let mut r = BufReader::new(open(path)?);
    let magic = header_token(&mut r, path)?;
    if magic != "Pf" {
        return Err(format_err(path, format!("expected single-channel 'Pf' map, found '{magic}'")));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| format_err(path, format!("bad dimension '{s}'")));
    let w = parse(header_token(&mut r, path)?)?;
    let h = parse(header_token(&mut r, path)?)?;
    let scale: f64 = header_token(&mut r, path)?
        .parse()
        .map_err(|_| format_err(path, "bad scale"))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * w * h {
        return Err(format_err(path, format!("expected {} data bytes, found {}", 4 * w * h, bytes.len())));
    }
    let mut data = vec![0.0; w * h];
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (u, row) = (k % w, k / w);
        data[(h - 1 - row) * w + u] = x as f64;
    }
    Grid::from_vec(w, h, data)
}

fn split_channels<const C: usize>(path: &Path, stacked: Grid<f64>) -> Result<Vec<Grid<f64>>> {
    let (w, h3) = stacked.shape();
    if h3 % C != 0 {
        return Err(format_err(path, format!("height {h3} is not a multiple of {C}")));
    }
    let h = h3 / C;
    let data = stacked.into_vec();
    (0..C)
        .map(|c| Grid::from_vec(w, h, data[c * w * h..(c + 1) * w * h].to_vec()))
        .collect()
}

fn stack(channels: &[Grid<f64>]) -> Result<Grid<f64>> {
    let (w, h) = channels[0].shape();
    let mut data = Vec::with_capacity(w * h * channels.len());
    for c in channels {
        data.extend_from_slice(c.as_slice());
    }
    Grid::from_vec(w, h * channels.len(), data)
}

/// Pointmaps are three single-channel maps (x, y, z) stacked vertically.
pub fn write_points(path: &Path, points: &Grid<Vector3<f64>>) -> Result<()> {
    let ch: Vec<Grid<f64>> = (0..3).map(|c| points.map(|p| p[c])).collect();
    write_pfm(path, &stack(&ch)?)
}

pub fn read_points(path: &Path) -> Result<Grid<Vector3<f64>>> {
    let ch = split_channels::<3>(path, read_pfm(path)?)?;
    let (w, h) = ch[0].shape();
    Ok(Grid::from_fn(w, h, |u, v| Vector3::new(*ch[0].get(u, v), *ch[1].get(u, v), *ch[2].get(u, v))))
}

/// Float image as three stacked maps (r, g, b).
pub fn write_image_pfm(path: &Path, img: &Image) -> Result<()> {
    let ch: Vec<Grid<f64>> = (0..3).map(|c| img.map(|p| p[c])).collect();
    write_pfm(path, &stack(&ch)?)
}

pub fn read_image_pfm(path: &Path) -> Result<Image> {
    let ch = split_channels::<3>(path, read_pfm(path)?)?;
    let (w, h) = ch[0].shape();
    Ok(Grid::from_fn(w, h, |u, v| [*ch[0].get(u, v), *ch[1].get(u, v), *ch[2].get(u, v)]))
}

/// Flow is two stacked maps (du, dv); invalid pixels hold NaN.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let ch: Vec<Grid<f64>> = (0..2)
        .map(|c| {
            let (w, h) = flow.shape();
            Grid::from_fn(w, h, |u, v| if *flow.valid.get(u, v) { flow.flow.get(u, v)[c] } else { f64::NAN })
        })
        .collect();
    write_pfm(path, &stack(&ch)?)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let ch = split_channels::<2>(path, read_pfm(path)?)?;
    let (w, h) = ch[0].shape();
    Ok(FlowField {
        flow: Grid::from_fn(w, h, |u, v| Vector2::new(*ch[0].get(u, v), *ch[1].get(u, v))),
        valid: Grid::from_fn(w, h, |u, v| ch[0].get(u, v).is_finite() && ch[1].get(u, v).is_finite()),
    })
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = img.shape();
    let buf: Vec<u8> = img.iter().flat_map(|p| p.map(to_u8)).collect();
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches")
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            reason: "no such file".into(),
        });
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Grid::from_vec(w, h, data)
}

/// Masks are 8-bit grayscale, 255 = dynamic.
pub fn write_mask_png(path: &Path, values: &Grid<f64>) -> Result<()> {
    let (w, h) = values.shape();
    let buf: Vec<u8> = values.iter().map(|&x| to_u8(x)).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches")
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Grid<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            reason: "no such file".into(),
        });
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(w, h, img.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
}

/// One line per frame: `timestamp tx ty tz qx qy qz qw`, camera-to-world.
pub fn write_trajectory(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (i, p) in poses.iter().enumerate() {
        let t = p.translation;
        let q = p.rotation.quaternion();
        writeln!(out, "{i} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>> {
    let r = BufReader::new(open(path)?);
    let mut poses = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", ln + 1)))?;
        if vals.len() != 8 {
            return Err(format_err(path, format!("line {}: expected 8 values, found {}", ln + 1, vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.0) {
            return Err(format_err(path, format!("line {}: zero quaternion", ln + 1)));
        }
        poses.push(Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3])));
    }
    Ok(poses)
}

/// What a manifest entry holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Frame,
    Depth,
    Mask,
    StaticFrame,
    PairMask,
    PtsNn,
    PtsMn,
    ConfNn,
    ConfMn,
    Flow,
    Trajectory,
    GtTrajectory,
    Intrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub role: Role,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<(usize, usize)>,
}

/// Lists every file of a dataset with its role. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    #[serde(default)]
    pub focal: Option<f64>,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    #[serde(default = "default_window")]
    pub window: usize,
    pub files: Vec<Entry>,
}

fn default_strides() -> Vec<usize> {
    vec![1]
}

fn default_window() -> usize {
    10
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Base file name for a per-edge role, e.g. `mask_00001_00002`.
pub fn edge_stem(role: Role, (n, m): (usize, usize)) -> String {
    let prefix = match role {
        Role::PairMask => "mask",
        Role::PtsNn => "pts_nn",
        Role::PtsMn => "pts_mn",
        Role::ConfNn => "conf_nn",
        Role::ConfMn => "conf_mn",
        Role::Flow => "flow",
        _ => "edge",
    };
    format!("{prefix}_{n:05}_{m:05}")
}

impl Manifest {
    pub fn new(width: usize, height: usize, num_frames: usize) -> Self {
        Self {
            width,
            height,
            num_frames,
            focal: None,
            strides: default_strides(),
            window: default_window(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, role: Role, path: impl Into<String>, frame: Option<usize>, edge: Option<(usize, usize)>) {
        self.files.push(Entry {
            role,
            path: path.into(),
            frame,
            edge,
        });
    }

    pub fn count(&self, role: Role) -> usize {
        self.files.iter().filter(|e| e.role == role).count()
    }

    pub fn find_frame(&self, role: Role, frame: usize) -> Option<&Entry> {
        self.files.iter().find(|e| e.role == role && e.frame == Some(frame))
    }

    pub fn find_edge(&self, role: Role, edge: (usize, usize)) -> Option<&Entry> {
        self.files.iter().find(|e| e.role == role && e.edge == Some(edge))
    }

    pub fn find(&self, role: Role) -> Option<&Entry> {
        self.files.iter().find(|e| e.role == role)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let m: Manifest = serde_json::from_reader(BufReader::new(open(&path)?))
            .map_err(|e| format_err(&path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(dir.join(MANIFEST_NAME))?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    /// Absolute path of a per-frame file; a missing entry names the role and
    /// frame.
    pub fn frame_path(&self, dir: &Path, role: Role, frame: usize) -> Result<PathBuf> {
        self.find_frame(role, frame).map(|e| dir.join(&e.path)).ok_or_else(|| Error::MissingFile {
            path: dir.join(format!("{}_{frame:05}", role_name(role))),
            reason: "not listed in the manifest".into(),
        })
    }

    /// Absolute path of a per-edge file; a missing entry names the expected
    /// stem, e.g. `mask_00001_00002`.
    pub fn edge_path(&self, dir: &Path, role: Role, edge: (usize, usize)) -> Result<PathBuf> {
        self.find_edge(role, edge).map(|e| dir.join(&e.path)).ok_or_else(|| Error::MissingFile {
            path: dir.join(edge_stem(role, edge)),
            reason: "not listed in the manifest".into(),
        })
    }
}

fn role_name(role: Role) -> String {
    serde_json::to_value(role)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Reads a mask and checks its shape.
pub fn read_frame_mask(path: &Path, shape: (usize, usize)) -> Result<FrameMask> {
    let g = read_mask_png(path)?;
    if g.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            got: g.shape(),
        });
    }
    FrameMask::new(g)
}

/// Metrics report row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub sequence: String,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
}

pub const METRICS_HEADER: &str = "sequence,psnr,ssim,iou,ate,rpe_trans,rpe_rot";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.sequence, r.psnr, r.ssim, r.iou, r.ate, r.rpe_trans, r.rpe_rot
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Frame file names used by writers.
pub fn frame_stem(role: Role, t: usize) -> String {
    format!("{}_{t:05}", role_name(role))
}

/// Writes a generated dataset and its manifest into `dir`.
pub fn write_synthetic(dir: &Path, ds: &SyntheticDataset) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let n = ds.num_frames();
    let mut m = Manifest::new(ds.spec.width, ds.spec.height, n);
    m.focal = Some(ds.intrinsics.fx);
    m.strides = ds.spec.strides.clone();
    m.window = ds.spec.window;
    let (_, test) = crate::eval::split_frames(n);
    for t in 0..n {
        let name = format!("{}.png", frame_stem(Role::Frame, t));
        write_rgb_png(&dir.join(&name), &ds.frames[t])?;
        m.add(Role::Frame, name, Some(t), None);
        let name = format!("{}.pfm", frame_stem(Role::Depth, t));
        write_pfm(&dir.join(&name), ds.depths[t].values())?;
        m.add(Role::Depth, name, Some(t), None);
        let name = format!("{}.png", frame_stem(Role::Mask, t));
        write_mask_png(&dir.join(&name), ds.masks[t].values())?;
        m.add(Role::Mask, name, Some(t), None);
        if test.contains(&t) {
            let name = format!("{}.png", frame_stem(Role::StaticFrame, t));
            write_rgb_png(&dir.join(&name), &ds.static_frames[t])?;
            m.add(Role::StaticFrame, name, Some(t), None);
        }
    }
    for (pair, &e) in ds.pairs.iter().zip(ds.graph.edges()) {
        let name = format!("{}.png", edge_stem(Role::PairMask, e));
        write_mask_png(&dir.join(&name), &pair.mask.values)?;
        m.add(Role::PairMask, name, None, Some(e));
        for (role, pts) in [(Role::PtsNn, &pair.x_nn), (Role::PtsMn, &pair.x_mn)] {
            let name = format!("{}.pfm", edge_stem(role, e));
            write_points(&dir.join(&name), pts)?;
            m.add(role, name, None, Some(e));
        }
        for (role, c) in [(Role::ConfNn, &pair.c_nn), (Role::ConfMn, &pair.c_mn)] {
            let name = format!("{}.pfm", edge_stem(role, e));
            write_pfm(&dir.join(&name), c)?;
            m.add(role, name, None, Some(e));
        }
    }
    for (&e, flow) in &ds.flows.flows {
        let name = format!("{}.pfm", edge_stem(Role::Flow, e));
        write_flow(&dir.join(&name), flow)?;
        m.add(Role::Flow, name, None, Some(e));
    }
    write_trajectory(&dir.join("trajectory.txt"), &ds.poses)?;
    m.add(Role::Trajectory, "trajectory.txt", None, None);
    m.save(dir)?;
    Ok(m)
}

/// Everything the pipeline reads from a dataset directory. Ground-truth
/// parts are present only when the manifest lists them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<Image>,
    pub problem: AlignProblem,
    pub windows: WindowSet,
    pub gt_poses: Option<Vec<Pose>>,
    pub gt_masks: Option<Vec<FrameMask>>,
    /// Indexed by frame; `None` where not listed.
    pub static_frames: Vec<Option<Image>>,
}

fn check_shape<T>(path: &Path, g: &Grid<T>, shape: (usize, usize)) -> Result<()> {
    if g.shape() != shape {
        return Err(format_err(path, format!("shape {:?} differs from the manifest's {:?}", g.shape(), shape)));
    }
    Ok(())
}

/// Loads a manifest directory. Every graph edge needs a pair mask, both
/// pointmaps and both confidence maps; flow is optional per edge.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    let n = manifest.num_frames;
    let shape = (manifest.width, manifest.height);
    let graph = build_graph(n, &manifest.strides)?;
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let p = manifest.frame_path(dir, Role::Frame, t)?;
        let img = read_rgb_png(&p)?;
        check_shape(&p, &img, shape)?;
        frames.push(img);
    }
    let mut pairs = Vec::with_capacity(graph.num_edges());
    let mut flows = Vec::new();
    for &e in graph.edges() {
        let mp = manifest.edge_path(dir, Role::PairMask, e)?;
        let mask = read_mask_png(&mp)?;
        check_shape(&mp, &mask, shape)?;
        let mut pts = Vec::new();
        for role in [Role::PtsNn, Role::PtsMn] {
            let p = manifest.edge_path(dir, role, e)?;
            let g = read_points(&p)?;
            check_shape(&p, &g, shape)?;
            pts.push(g);
        }
        let mut conf = Vec::new();
        for role in [Role::ConfNn, Role::ConfMn] {
            let p = manifest.edge_path(dir, role, e)?;
            let g = read_pfm(&p)?;
            check_shape(&p, &g, shape)?;
            conf.push(g);
        }
        let c_mn = conf.pop().expect("two maps");
        let c_nn = conf.pop().expect("two maps");
        let x_mn = pts.pop().expect("two maps");
        let x_nn = pts.pop().expect("two maps");
        pairs.push(PairPrediction {
            x_nn,
            x_mn,
            c_nn,
            c_mn,
            mask: PairMask::new(e, mask)?,
        });
        if let Some(entry) = manifest.find_edge(Role::Flow, e) {
            let p = dir.join(&entry.path);
            let f = read_flow(&p)?;
            if f.shape() != shape {
                return Err(format_err(&p, "flow shape differs from the manifest"));
            }
            flows.push((e, f));
        }
    }
    let problem = AlignProblem::new(graph, pairs)?;
    let windows = WindowSet::from_pairs(flows, manifest.window)?;
    let gt_poses = match manifest.find(Role::Trajectory) {
        Some(e) => {
            let p = dir.join(&e.path);
            let poses = read_trajectory(&p)?;
            if poses.len() != n {
                return Err(format_err(&p, format!("{} poses for {n} frames", poses.len())));
            }
            Some(poses)
        }
        None => None,
    };
    let gt_masks = if manifest.count(Role::Mask) > 0 {
        Some(
            (0..n)
                .map(|t| read_frame_mask(&manifest.frame_path(dir, Role::Mask, t)?, shape))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let static_frames = (0..n)
        .map(|t| match manifest.find_frame(Role::StaticFrame, t) {
            Some(e) => read_rgb_png(&dir.join(&e.path)).map(Some),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        frames,
        problem,
        windows,
        gt_poses,
        gt_masks,
        static_frames,
    })
}
