//! Focal-time scans: construction via dual random walks over sharp
//! sources, replay of pre-captured focal stacks, the environment-step
//! function, the ground-truth focus oracle, and the on-disk scan format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    defocus_render, defocus_render_patch, default_patch_center, extract_patch, DefocusModel,
    GrayImage,
};
use crate::metrics::mgm;
use crate::pgm;

pub const SCAN_FORMAT_VERSION: u32 = 1;

/// Parameters of the two damped-velocity random walks: one stepping the
/// cropping rectangle across the source, one driving the optimal focal
/// power. Velocities follow `v <- decay * v + N(0, std)` and positions
/// reflect off their bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub crop_velocity_decay: f64,
    pub crop_noise_std: f64,
    pub focus_velocity_decay: f64,
    pub focus_noise_std: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            crop_velocity_decay: 0.9,
            crop_noise_std: 1.5,
            focus_velocity_decay: 0.9,
            focus_noise_std: 0.004,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("walk parameter {name} out of range")))
            }
        };
        check(
            "crop_velocity_decay",
            self.crop_velocity_decay > 0.0 && self.crop_velocity_decay < 1.0,
        )?;
        check(
            "focus_velocity_decay",
            self.focus_velocity_decay > 0.0 && self.focus_velocity_decay < 1.0,
        )?;
        check("crop_noise_std", self.crop_noise_std >= 0.0)?;
        check("focus_noise_std", self.focus_noise_std >= 0.0)?;
        Ok(())
    }
}

/// One step of a damped-velocity walk with reflective bounds. Velocity is
/// negated on every reflection.
pub fn walk_step(
    position: &mut [f64],
    velocity: &mut [f64],
    decay: f64,
    noise_std: f64,
    bounds: &[(f64, f64)],
    rng: &mut impl Rng,
) {
    debug_assert_eq!(position.len(), velocity.len());
    debug_assert_eq!(position.len(), bounds.len());
    for i in 0..position.len() {
        let noise: f64 = rng.sample(StandardNormal);
        velocity[i] = decay * velocity[i] + noise_std * noise;
        let (lo, hi) = bounds[i];
        if !(hi > lo) {
            position[i] = lo;
            velocity[i] = 0.0;
            continue;
        }
        let mut p = position[i] + velocity[i];
        while p < lo || p > hi {
            if p > hi {
                p = 2.0 * hi - p;
            } else {
                p = 2.0 * lo - p;
            }
            velocity[i] = -velocity[i];
        }
        position[i] = p;
    }
}

/// A simulated focal-time scan: sharp crops plus the ground-truth focus
/// trajectory. Blur is rendered on demand by `env_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub frames: Vec<GrayImage>,
    pub f_star: Vec<f64>,
    pub sigma0: f64,
    pub seed: u64,
    pub source_id: String,
}

impl SimulatedScan {
    pub fn model_at(&self, t: usize) -> DefocusModel {
        DefocusModel {
            sigma0: self.sigma0,
            f_star: self.f_star[t],
        }
    }
}

/// A pre-captured focal-time scan: one image per (pose, grid focal power).
#[derive(Debug, Clone, PartialEq)]
pub struct FocalStackScan {
    pub focal_grid: Vec<f64>,
    /// `images[pose][grid_index]`.
    pub images: Vec<Vec<GrayImage>>,
    pub f_star: Option<Vec<f64>>,
    pub seed: u64,
    pub source_id: String,
}

impl FocalStackScan {
    pub fn new(
        focal_grid: Vec<f64>,
        images: Vec<Vec<GrayImage>>,
        f_star: Option<Vec<f64>>,
    ) -> Result<Self> {
        if focal_grid.is_empty()
            || focal_grid.windows(2).any(|w| w[0] >= w[1])
            || focal_grid.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::BadFocalGrid);
        }
        if images.is_empty() {
            return Err(Error::EmptyStack);
        }
        for stack in &images {
            if stack.len() != focal_grid.len() {
                return Err(Error::StackGridMismatch {
                    images: stack.len(),
                    grid: focal_grid.len(),
                });
            }
        }
        if let Some(fs) = &f_star {
            if fs.len() != images.len() {
                return Err(Error::BadManifest(format!(
                    "f_star has {} entries for {} poses",
                    fs.len(),
                    images.len()
                )));
            }
        }
        Ok(FocalStackScan {
            focal_grid,
            images,
            f_star,
            seed: 0,
            source_id: String::new(),
        })
    }

    pub fn poses(&self) -> usize {
        self.images.len()
    }
}

/// Either scan dataset form.
#[derive(Debug, Clone, PartialEq)]
pub enum Scan {
    Simulated(SimulatedScan),
    Stack(FocalStackScan),
}

/// Nearest grid index to `f`; equidistant values resolve to the lower
/// index.
pub fn nearest_grid_index(grid: &[f64], f: f64) -> usize {
    let mut best = 0;
    let mut best_d = (grid[0] - f).abs();
    for (k, g) in grid.iter().enumerate().skip(1) {
        let d = (g - f).abs();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

impl Scan {
    pub fn frame_count(&self) -> usize {
        match self {
            Scan::Simulated(s) => s.frames.len(),
            Scan::Stack(s) => s.poses(),
        }
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        match self {
            Scan::Simulated(s) => (s.frames[0].width(), s.frames[0].height()),
            Scan::Stack(s) => (s.images[0][0].width(), s.images[0][0].height()),
        }
    }

    /// Ground-truth optimal focal power for frame `t`, if known.
    pub fn f_star(&self, t: usize) -> Option<f64> {
        match self {
            Scan::Simulated(s) => s.f_star.get(t).copied(),
            Scan::Stack(s) => s.f_star.as_ref().and_then(|fs| fs.get(t).copied()),
        }
    }

    /// The image an agent sees when requesting focal power `f` at frame
    /// `t`: rendered defocus for simulated scans, the nearest grid capture
    /// for focal stacks.
    pub fn env_step(&self, t: usize, f: f64) -> Result<GrayImage> {
        let len = self.frame_count();
        if t >= len {
            return Err(Error::FrameIndex { t, len });
        }
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::FocalPowerRange(f));
        }
        match self {
            Scan::Simulated(s) => defocus_render(&s.frames[t], f, &s.model_at(t)),
            Scan::Stack(s) => {
                let k = nearest_grid_index(&s.focal_grid, f);
                Ok(s.images[t][k].clone())
            }
        }
    }

    /// Centre `size`x`size` patch of `env_step(t, f)`, computed without
    /// rendering the rest of the frame. Bit-identical to the full path.
    pub fn observe_patch(&self, t: usize, f: f64, size: usize) -> Result<GrayImage> {
        let len = self.frame_count();
        if t >= len {
            return Err(Error::FrameIndex { t, len });
        }
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::FocalPowerRange(f));
        }
        match self {
            Scan::Simulated(s) => {
                let frame = &s.frames[t];
                let (cx, cy) = default_patch_center(frame);
                defocus_render_patch(frame, f, &s.model_at(t), cx, cy, size)
            }
            Scan::Stack(s) => {
                let k = nearest_grid_index(&s.focal_grid, f);
                let img = &s.images[t][k];
                let (cx, cy) = default_patch_center(img);
                extract_patch(img, cx, cy, size)
            }
        }
    }
}

/// Builds a simulated scan from a sharp source. A single-image source is
/// cropped repeatedly; videos are cropped from frame `t` (cycling if the
/// clip is shorter than the scan). Fully determined by `cfg.seed`.
pub fn build_simulated_scan(
    source: &[GrayImage],
    source_id: &str,
    frames: usize,
    crop_size: usize,
    cfg: &WalkConfig,
) -> Result<SimulatedScan> {
    assert!(frames >= 1, "scan must have at least one frame");
    if source.is_empty() {
        return Err(Error::Config("empty scan source".into()));
    }
    let (w, h) = (source[0].width(), source[0].height());
    for img in source {
        if img.width() != w || img.height() != h {
            return Err(Error::Config(
                "source frames must share dimensions".into(),
            ));
        }
    }
    if w < crop_size || h < crop_size {
        return Err(Error::SourceTooSmall {
            width: w,
            height: h,
            crop: crop_size,
        });
    }
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma0 = 2.0 + 6.0 * rng.random::<f64>();
    let crop_bounds = [
        (0.0, (w - crop_size) as f64),
        (0.0, (h - crop_size) as f64),
    ];
    let mut crop_pos = [
        rng.random::<f64>() * crop_bounds[0].1,
        rng.random::<f64>() * crop_bounds[1].1,
    ];
    let mut crop_vel = [0.0, 0.0];
    let focus_bounds = [(0.0, 1.0)];
    let mut focus_pos = [rng.random::<f64>()];
    let mut focus_vel = [0.0];

    let mut out_frames = Vec::with_capacity(frames);
    let mut f_star = Vec::with_capacity(frames);
    for t in 0..frames {
        let src = &source[t % source.len()];
        let x0 = (crop_pos[0].round() as usize).min(w - crop_size);
        let y0 = (crop_pos[1].round() as usize).min(h - crop_size);
        out_frames.push(
            extract_patch(src, x0 + crop_size / 2, y0 + crop_size / 2, crop_size)
                .expect("crop stays inside source"),
        );
        debug_assert!((0.0..=1.0).contains(&focus_pos[0]));
        f_star.push(focus_pos[0]);

        walk_step(
            &mut crop_pos,
            &mut crop_vel,
            cfg.crop_velocity_decay,
            cfg.crop_noise_std,
            &crop_bounds,
            &mut rng,
        );
        walk_step(
            &mut focus_pos,
            &mut focus_vel,
            cfg.focus_velocity_decay,
            cfg.focus_noise_std,
            &focus_bounds,
            &mut rng,
        );
    }

    Ok(SimulatedScan {
        frames: out_frames,
        f_star,
        sigma0,
        seed: cfg.seed,
        source_id: source_id.to_string(),
    })
}

/// Ground-truth focus for one focal stack: exhaustive search of MGM over
/// the centre 32x32 patch. Argmax ties resolve to the lower grid index.
pub fn oracle_optimal_focus(stack: &[GrayImage], focal_grid: &[f64]) -> Result<f64> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    if stack.len() != focal_grid.len() {
        return Err(Error::StackGridMismatch {
            images: stack.len(),
            grid: focal_grid.len(),
        });
    }
    let mut best_k = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, img) in stack.iter().enumerate() {
        let (cx, cy) = default_patch_center(img);
        let patch = extract_patch(img, cx, cy, 32)?;
        let v = mgm(&patch);
        if v > best_v {
            best_v = v;
            best_k = k;
        }
    }
    Ok(focal_grid[best_k])
}

// ---------------------------------------------------------------------------
// Scan directory format
// ---------------------------------------------------------------------------

/// Parsed and structurally validated `manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScanManifest {
    #[serde(rename = "type")]
    kind: String,
    format_version: u32,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poses: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    focal_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    f_star: Option<Vec<f64>>,
    seed: u64,
    source_id: String,
    /// CRC32 of the concatenated frame files in manifest order. Optional:
    /// externally produced scans may omit it; it is verified when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crc32: Option<u32>,
}

impl ScanManifest {
    /// Parses manifest JSON and checks everything that does not require
    /// the frame files: format version, scan type, field presence, and
    /// f_star consistency.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: ScanManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::BadManifest(e.to_string()))?;
        if manifest.format_version != SCAN_FORMAT_VERSION {
            return Err(Error::UnsupportedFormatVersion(manifest.format_version));
        }
        if manifest.width == 0 || manifest.height == 0 {
            return Err(Error::BadManifest("zero image dimensions".into()));
        }
        match manifest.kind.as_str() {
            "simulated" => {
                let frames = manifest
                    .frames
                    .ok_or_else(|| Error::BadManifest("simulated scan missing frames".into()))?;
                if frames == 0 {
                    return Err(Error::BadManifest("simulated scan with zero frames".into()));
                }
                let f_star = manifest
                    .f_star
                    .as_ref()
                    .ok_or_else(|| Error::BadManifest("simulated scan missing f_star".into()))?;
                if f_star.len() != frames {
                    return Err(Error::BadManifest(format!(
                        "f_star has {} entries for {frames} frames",
                        f_star.len()
                    )));
                }
                if f_star.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return Err(Error::BadManifest("f_star outside [0,1]".into()));
                }
                let sigma0 = manifest
                    .sigma0
                    .ok_or_else(|| Error::BadManifest("simulated scan missing sigma0".into()))?;
                if !(sigma0 > 0.0 && sigma0.is_finite()) {
                    return Err(Error::BadManifest(format!("bad sigma0 {sigma0}")));
                }
            }
            "stack" => {
                let poses = manifest
                    .poses
                    .ok_or_else(|| Error::BadManifest("stack scan missing poses".into()))?;
                if poses == 0 {
                    return Err(Error::BadManifest("stack scan with zero poses".into()));
                }
                let grid = manifest
                    .focal_grid
                    .as_ref()
                    .ok_or_else(|| Error::BadManifest("stack scan missing focal_grid".into()))?;
                if grid.is_empty()
                    || grid.windows(2).any(|w| !(w[0] < w[1]))
                    || grid.iter().any(|f| !(0.0..=1.0).contains(f))
                {
                    return Err(Error::BadFocalGrid);
                }
                if let Some(fs) = &manifest.f_star {
                    if fs.len() != poses {
                        return Err(Error::BadManifest(format!(
                            "f_star has {} entries for {poses} poses",
                            fs.len()
                        )));
                    }
                    if fs.iter().any(|f| !(0.0..=1.0).contains(f)) {
                        return Err(Error::BadManifest("f_star outside [0,1]".into()));
                    }
                }
            }
            other => return Err(Error::BadManifest(format!("unknown scan type {other:?}"))),
        }
        Ok(manifest)
    }
}

fn frame_file(t: usize) -> String {
    format!("frame_{t:05}.pgm")
}

fn pose_file(p: usize, k: usize) -> String {
    format!("pose_{p:05}_k_{k:03}.pgm")
}

pub fn save_scan(scan: &Scan, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut hasher = crc32fast::Hasher::new();
    let manifest = match scan {
        Scan::Simulated(s) => {
            for (t, frame) in s.frames.iter().enumerate() {
                let bytes = pgm::encode_pgm(frame);
                hasher.update(&bytes);
                fs::write(dir.join(frame_file(t)), &bytes)?;
            }
            ScanManifest {
                kind: "simulated".into(),
                format_version: SCAN_FORMAT_VERSION,
                width: s.frames[0].width(),
                height: s.frames[0].height(),
                frames: Some(s.frames.len()),
                poses: None,
                sigma0: Some(s.sigma0),
                focal_grid: None,
                f_star: Some(s.f_star.clone()),
                seed: s.seed,
                source_id: s.source_id.clone(),
                crc32: None,
            }
        }
        Scan::Stack(s) => {
            for (p, stack) in s.images.iter().enumerate() {
                for (k, img) in stack.iter().enumerate() {
                    let bytes = pgm::encode_pgm(img);
                    hasher.update(&bytes);
                    fs::write(dir.join(pose_file(p, k)), &bytes)?;
                }
            }
            ScanManifest {
                kind: "stack".into(),
                format_version: SCAN_FORMAT_VERSION,
                width: s.images[0][0].width(),
                height: s.images[0][0].height(),
                frames: None,
                poses: Some(s.poses()),
                sigma0: None,
                focal_grid: Some(s.focal_grid.clone()),
                f_star: s.f_star.clone(),
                seed: s.seed,
                source_id: s.source_id.clone(),
                crc32: None,
            }
        }
    };
    let manifest = ScanManifest {
        crc32: Some(hasher.finalize()),
        ..manifest
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_frame(
    dir: &Path,
    name: String,
    index: usize,
    want: (usize, usize),
    hasher: &mut crc32fast::Hasher,
) -> Result<GrayImage> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|_| Error::MissingScanFrame { index, path })?;
    hasher.update(&bytes);
    let img = pgm::decode_pgm(&bytes)?;
    if (img.width(), img.height()) != want {
        return Err(Error::FrameDimensions {
            index,
            got_w: img.width(),
            got_h: img.height(),
            want_w: want.0,
            want_h: want.1,
        });
    }
    Ok(img)
}

pub fn load_scan(dir: &Path) -> Result<Scan> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|_| Error::MissingManifest(manifest_path))?;
    let manifest = ScanManifest::from_json(&raw)?;
    let dims = (manifest.width, manifest.height);
    let mut hasher = crc32fast::Hasher::new();

    let scan = match manifest.kind.as_str() {
        "simulated" => {
            let frames = manifest.frames.expect("validated");
            let f_star = manifest.f_star.clone().expect("validated");
            let sigma0 = manifest.sigma0.expect("validated");
            let mut images = Vec::with_capacity(frames);
            for t in 0..frames {
                images.push(read_frame(dir, frame_file(t), t, dims, &mut hasher)?);
            }
            Scan::Simulated(SimulatedScan {
                frames: images,
                f_star,
                sigma0,
                seed: manifest.seed,
                source_id: manifest.source_id.clone(),
            })
        }
        "stack" => {
            let poses = manifest.poses.expect("validated");
            let grid = manifest.focal_grid.clone().expect("validated");
            let mut images = Vec::with_capacity(poses);
            for p in 0..poses {
                let mut stack = Vec::with_capacity(grid.len());
                for k in 0..grid.len() {
                    stack.push(read_frame(dir, pose_file(p, k), p, dims, &mut hasher)?);
                }
                images.push(stack);
            }
            let mut s = FocalStackScan::new(grid, images, manifest.f_star.clone())?;
            s.seed = manifest.seed;
            s.source_id = manifest.source_id.clone();
            Scan::Stack(s)
        }
        _ => unreachable!("validated scan type"),
    };

    if let Some(expected) = manifest.crc32 {
        let actual = hasher.finalize();
        if actual != expected {
            return Err(Error::ScanChecksum { expected, actual });
        }
    }
    Ok(scan)
}

/// Rewrites a stack scan's manifest with oracle-computed ground truth.
/// The original manifest is kept as `manifest.json.bak` (first run only,
/// so repeated runs are idempotent).
pub fn write_stack_f_star(dir: &Path, f_star: Vec<f64>) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|_| Error::MissingManifest(manifest_path.clone()))?;
    let mut manifest = ScanManifest::from_json(&raw)?;
    if manifest.kind != "stack" {
        return Err(Error::Incompatible(
            "oracle focus applies to stack scans only".into(),
        ));
    }
    let backup = dir.join("manifest.json.bak");
    if !backup.exists() {
        fs::write(&backup, &raw)?;
    }
    manifest.f_star = Some(f_star);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// An ordered collection of scans, either resident or loaded from scan
/// directories on demand.
#[derive(Debug, Clone)]
pub struct ScanSet {
    ids: Vec<String>,
    backing: Backing,
}

#[derive(Debug, Clone)]
enum Backing {
    Memory(Vec<Scan>),
    Disk(Vec<PathBuf>),
}

impl ScanSet {
    pub fn from_memory(scans: Vec<(String, Scan)>) -> Self {
        let (ids, scans) = scans.into_iter().unzip();
        ScanSet {
            ids,
            backing: Backing::Memory(scans),
        }
    }

    /// Scans are the sub-directories of `dir` that contain a
    /// `manifest.json`, ordered by name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut entries: Vec<(String, PathBuf)> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join("manifest.json").exists())
            .map(|p| {
                let id = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (id, p)
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::Config(format!(
                "no scan directories under {}",
                dir.display()
            )));
        }
        let (ids, paths) = entries.into_iter().unzip();
        Ok(ScanSet {
            ids,
            backing: Backing::Disk(paths),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn with_scan<R>(&self, i: usize, f: impl FnOnce(&Scan) -> Result<R>) -> Result<R> {
        match &self.backing {
            Backing::Memory(scans) => f(&scans[i]),
            Backing::Disk(paths) => {
                let scan = load_scan(&paths[i])?;
                f(&scan)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::generate_texture;

    #[test]
    fn walk_zero_noise_zero_velocity_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pos = [0.4];
        let mut vel = [0.0];
        for _ in 0..50 {
            walk_step(&mut pos, &mut vel, 0.9, 0.0, &[(0.0, 1.0)], &mut rng);
        }
        assert_eq!(pos[0], 0.4);
    }

    #[test]
    fn walk_ballistic_advances_by_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pos = [0.1];
        let mut vel = [0.05];
        for _ in 0..4 {
            walk_step(&mut pos, &mut vel, 1.0, 0.0, &[(0.0, 1.0)], &mut rng);
        }
        assert!((pos[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn walk_reflects_at_upper_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pos = [0.98];
        let mut vel = [0.05];
        walk_step(&mut pos, &mut vel, 1.0, 0.0, &[(0.0, 1.0)], &mut rng);
        // raw 1.03 reflects to 0.97, velocity flips sign
        assert!((pos[0] - 0.97).abs() < 1e-12);
        assert!((vel[0] + 0.05).abs() < 1e-12);
    }

    fn tiny_scan(seed: u64, frames: usize) -> SimulatedScan {
        let tex = generate_texture(48, 48, 7);
        let cfg = WalkConfig {
            seed,
            ..WalkConfig::default()
        };
        build_simulated_scan(std::slice::from_ref(&tex), "tex", frames, 40, &cfg).unwrap()
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = tiny_scan(7, 5);
        let b = tiny_scan(7, 5);
        assert_eq!(a, b);
        let c = tiny_scan(8, 5);
        assert_ne!(a.f_star, c.f_star);
        assert!((2.0..=8.0).contains(&a.sigma0));
    }

    #[test]
    fn single_frame_scan_uses_initial_focus() {
        let s = tiny_scan(3, 1);
        assert_eq!(s.frames.len(), 1);
        assert!((0.0..=1.0).contains(&s.f_star[0]));
    }

    #[test]
    fn default_walk_trajectories_are_smooth_and_cover_range() {
        // Monte-Carlo oracle over the frozen defaults: per-step focus
        // deltas stay under the 0.05 action step and the trajectory
        // explores a fair share of [0,1] on average.
        let tex = generate_texture(40, 40, 1);
        let mut ranges = 0.0;
        for seed in 0..100 {
            let cfg = WalkConfig {
                seed,
                ..WalkConfig::default()
            };
            let s =
                build_simulated_scan(std::slice::from_ref(&tex), "tex", 250, 32, &cfg).unwrap();
            let mut lo = 1.0f64;
            let mut hi = 0.0f64;
            for w in s.f_star.windows(2) {
                assert!((w[1] - w[0]).abs() <= 0.05, "seed {seed}: step too large");
            }
            for &f in &s.f_star {
                assert!((0.0..=1.0).contains(&f));
                lo = lo.min(f);
                hi = hi.max(f);
            }
            ranges += hi - lo;
        }
        let mean_range = ranges / 100.0;
        assert!(mean_range >= 0.3, "mean range {mean_range}");
    }

    #[test]
    fn env_step_at_optimum_returns_sharp_frame() {
        let s = tiny_scan(11, 3);
        let scan = Scan::Simulated(s.clone());
        let img = scan.env_step(1, s.f_star[1]).unwrap();
        assert_eq!(img, s.frames[1]);
    }

    #[test]
    fn env_step_bounds_checks() {
        let scan = Scan::Simulated(tiny_scan(1, 2));
        assert!(matches!(
            scan.env_step(2, 0.5),
            Err(Error::FrameIndex { t: 2, len: 2 })
        ));
        assert!(matches!(
            scan.env_step(0, 1.5),
            Err(Error::FocalPowerRange(_))
        ));
    }

    #[test]
    fn stack_env_step_picks_nearest_with_lower_tie() {
        let img = |v: f64| GrayImage::from_pixels(4, 4, vec![v; 16]).unwrap();
        let stack = FocalStackScan::new(
            vec![0.2, 0.5, 0.8],
            vec![vec![img(0.1), img(0.2), img(0.3)]],
            None,
        )
        .unwrap();
        let scan = Scan::Stack(stack);
        assert_eq!(scan.env_step(0, 0.34).unwrap().get(0, 0), 0.1);
        assert_eq!(scan.env_step(0, 0.35).unwrap().get(0, 0), 0.1); // tie -> lower
        assert_eq!(scan.env_step(0, 0.36).unwrap().get(0, 0), 0.2);
        assert_eq!(scan.env_step(0, 1.0).unwrap().get(0, 0), 0.3);
    }

    #[test]
    fn env_step_is_continuous_in_focal_power() {
        let s = tiny_scan(19, 2);
        let scan = Scan::Simulated(s);
        let a = scan.env_step(0, 0.3).unwrap();
        let b = scan.env_step(0, 0.301).unwrap();
        let max_diff = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 0.02, "max pixel jump {max_diff}");
    }

    #[test]
    fn observe_patch_matches_env_step_extraction() {
        let s = tiny_scan(23, 3);
        let scan = Scan::Simulated(s);
        for &f in &[0.0, 0.37, 0.91] {
            let full = scan.env_step(2, f).unwrap();
            let (cx, cy) = default_patch_center(&full);
            let want = extract_patch(&full, cx, cy, 32).unwrap();
            let got = scan.observe_patch(2, f, 32).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn oracle_recovers_known_optimum() {
        let tex = generate_texture(64, 64, 31);
        let model = DefocusModel::new(5.0, 0.6).unwrap();
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let stack: Vec<GrayImage> = grid
            .iter()
            .map(|&f| defocus_render(&tex, f, &model).unwrap())
            .collect();
        let got = oracle_optimal_focus(&stack, &grid).unwrap();
        assert_eq!(got, 0.6);
    }

    #[test]
    fn oracle_tie_breaks_low_and_rejects_empty() {
        let img = generate_texture(40, 40, 2);
        let grid = [0.3, 0.7];
        let got = oracle_optimal_focus(&[img.clone(), img], &grid).unwrap();
        assert_eq!(got, 0.3);
        assert!(matches!(
            oracle_optimal_focus(&[], &[]),
            Err(Error::EmptyStack)
        ));
    }

    #[test]
    fn scan_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scan = Scan::Simulated(tiny_scan(5, 4));
        save_scan(&scan, dir.path()).unwrap();
        let loaded = load_scan(dir.path()).unwrap();
        assert_eq!(loaded, scan);
    }

    #[test]
    fn stack_round_trip_preserves_grid_order() {
        // Round-trips are bit-exact for pixel data on the 8-bit grid, so
        // the rendered stack is quantized the way a capture rig would.
        let quantize = |img: GrayImage| {
            let px = img
                .pixels()
                .iter()
                .map(|p| (p * 255.0).round() / 255.0)
                .collect();
            GrayImage::from_pixels(img.width(), img.height(), px).unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        let tex = generate_texture(36, 36, 3);
        let model = DefocusModel::new(4.0, 0.5).unwrap();
        let grid = vec![0.1, 0.4, 0.9];
        let images: Vec<GrayImage> = grid
            .iter()
            .map(|&f| quantize(defocus_render(&tex, f, &model).unwrap()))
            .collect();
        let stack = FocalStackScan::new(grid.clone(), vec![images], Some(vec![0.5])).unwrap();
        save_scan(&Scan::Stack(stack.clone()), dir.path()).unwrap();
        match load_scan(dir.path()).unwrap() {
            Scan::Stack(s) => {
                assert_eq!(s.focal_grid, grid);
                assert_eq!(s, stack);
            }
            _ => panic!("wrong scan type"),
        }
    }

    #[test]
    fn load_names_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        save_scan(&Scan::Simulated(tiny_scan(5, 4)), dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_00002.pgm")).unwrap();
        match load_scan(dir.path()) {
            Err(Error::MissingScanFrame { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected missing-frame error, got {other:?}"),
        }
    }

    #[test]
    fn load_detects_corruption_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        save_scan(&Scan::Simulated(tiny_scan(5, 4)), dir.path()).unwrap();

        // Flip one raster byte in a frame file.
        let path = dir.path().join("frame_00001.pgm");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_scan(dir.path()),
            Err(Error::ScanChecksum { .. })
        ));

        let manifest = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(
            load_scan(dir.path()),
            Err(Error::UnsupportedFormatVersion(9))
        ));

        fs::remove_file(&manifest).unwrap();
        assert!(matches!(
            load_scan(dir.path()),
            Err(Error::MissingManifest(_))
        ));
    }
}
