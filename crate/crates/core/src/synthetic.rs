//! Deterministic blob scenes with stand-in segmenter, tracker and embedder.
//!
//! Every object is one class. Objects are colored by evenly spaced hues, which
//! is how the embedder recognises them in a masked image.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{normalize, ImageEmbedder};
use crate::masklet::{box_from_mask, Mask, PixelBox, RegionIdRaster, RegionIdTracker, RegionMask, Segmenter, Tracker};
use crate::raster::{compute_contributions, render_rgb};
use crate::scene::{covariance_to_upper, CameraPose, Frame, FrameSequence, GaussianBundle};

/// Pixels whose accumulated alpha is below this are background.
pub const COVERAGE_CUTOFF: f64 = 0.5;
/// Spatial extent of one object, in world units.
pub const BLOB_RADIUS: f64 = 0.5;
pub const CAMERA_ELEVATION_DEG: f64 = 35.0;
/// Offsets used by `scale_skew`: image embeddings are pushed along a shared
/// gap direction and text embeddings twice as far the opposite way, so the
/// two modalities sit in separate cones.
pub const IMAGE_GAP: f64 = 0.5;
pub const TEXT_GAP: f64 = -1.0;

const CLASS_NAMES: [&str; 16] = [
    "apple", "banana", "teapot", "mug", "lamp", "plant", "book", "shoe", "clock", "vase", "chair", "bottle", "kettle",
    "candle", "radio", "globe",
];

pub fn class_name(k: usize) -> String {
    CLASS_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("object{k}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_objects: usize,
    pub gaussians_per_object: usize,
    pub n_frames: usize,
    /// (height, width)
    pub resolution: (usize, usize),
    pub noise_level: f64,
    pub scale_skew: bool,
    pub seed: u64,
    pub feature_dim: usize,
    pub latent_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_objects: 8,
            gaussians_per_object: 50,
            n_frames: 20,
            resolution: (64, 64),
            noise_level: 0.05,
            scale_skew: false,
            seed: 0,
            feature_dim: 512,
            latent_dim: crate::scene::DEFAULT_LATENT_DIM,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_objects", self.n_objects),
            ("gaussians_per_object", self.gaussians_per_object),
            ("n_frames", self.n_frames),
            ("height", self.resolution.0),
            ("width", self.resolution.1),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "noise level must lie in [0, 1), got {}",
                self.noise_level
            )));
        }
        if self.n_objects > u16::MAX as usize - 1 {
            return Err(Error::InvalidArgument("too many objects".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_objects).map(class_name).collect()
    }
}

fn hsv_to_rgb(hue_deg: f64) -> [f64; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Hue in degrees, or `None` for greys.
fn rgb_to_hue(c: [f64; 3]) -> Option<f64> {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    if d <= 1e-9 {
        return None;
    }
    let h = if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        (c[2] - c[0]) / d + 2.0
    } else {
        (c[0] - c[1]) / d + 4.0
    };
    Some(h * 60.0)
}

pub fn class_hue(k: usize, n_classes: usize) -> f64 {
    360.0 * k as f64 / n_classes as f64
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalize(&v) {
            return u;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy farthest-point unit vectors: each new vector is the candidate with
/// the smallest maximum cosine to those already chosen.
pub fn farthest_point_prototypes(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    const CANDIDATES: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let best = (0..CANDIDATES)
            .map(|_| unit_gaussian(&mut rng, dim))
            .map(|c| {
                let worst = out.iter().map(|p| dot(p, &c)).fold(f64::NEG_INFINITY, f64::max);
                (worst, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("candidates");
        out.push(best.1);
    }
    out
}

fn place_centers(n: usize, rng: &mut impl Rng) -> (Vec<[f64; 3]>, f64) {
    let separation = 4.0 * BLOB_RADIUS;
    let mut radius = separation * (n as f64).sqrt() * 0.6;
    'grow: loop {
        let mut centers: Vec<[f64; 3]> = Vec::with_capacity(n);
        let mut failures = 0;
        while centers.len() < n {
            let r = radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let c = [r * a.cos(), r * a.sin(), 0.0];
            let ok = centers.iter().all(|o| {
                let (dx, dy) = (o[0] - c[0], o[1] - c[1]);
                (dx * dx + dy * dy).sqrt() >= separation
            });
            if ok {
                centers.push(c);
            } else {
                failures += 1;
                if failures > 2000 {
                    radius *= 1.05;
                    continue 'grow;
                }
            }
        }
        return (centers, radius);
    }
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis: Vec<f64> = unit_gaussian(rng, 3);
    let axis = Unit::new_normalize(Vector3::new(axis[0], axis[1], axis[2]));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    *Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Orbit cameras looking at the scene center, one per frame.
fn orbit_cameras(cfg: &SyntheticConfig, scene_radius: f64) -> Result<Vec<CameraPose>> {
    let (h, w) = cfg.resolution;
    let extent = scene_radius + BLOB_RADIUS;
    let distance = 2.5 * extent + 2.0;
    let elevation = CAMERA_ELEVATION_DEG.to_radians();
    let half_fov = (1.15 * extent / (distance - extent)).atan();
    let focal = ((h.min(w) as f64 - 1.0) / 2.0) / half_fov.tan();
    (0..cfg.n_frames)
        .map(|t| {
            let theta = std::f64::consts::TAU * t as f64 / cfg.n_frames as f64 + 0.1;
            let eye = [
                distance * elevation.cos() * theta.cos(),
                distance * elevation.cos() * theta.sin(),
                distance * elevation.sin(),
            ];
            CameraPose::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], (focal, focal), (h, w))
        })
        .collect()
}

/// Blob scene with instance labels `0..n_objects` and rendered RGB frames.
pub fn generate_scene(cfg: &SyntheticConfig) -> Result<(GaussianBundle, FrameSequence)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (centers, scene_radius) = place_centers(cfg.n_objects, &mut rng);
    let mut bundle = GaussianBundle::empty(cfg.latent_dim);
    let zero = vec![0.0; cfg.latent_dim];
    for (k, center) in centers.iter().enumerate() {
        let color = hsv_to_rgb(class_hue(k, cfg.n_objects));
        for _ in 0..cfg.gaussians_per_object {
            // truncated isotropic normal around the center
            let offset = loop {
                let o: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * BLOB_RADIUS / 2.0);
                if o.iter().map(|x| x * x).sum::<f64>().sqrt() <= BLOB_RADIUS {
                    break o;
                }
            };
            let position = std::array::from_fn(|a| center[a] + offset[a]);
            let stds: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.06..0.14));
            let r = random_rotation(&mut rng);
            let d = Matrix3::from_diagonal(&Vector3::from(stds.map(|s| s * s)));
            let cov = covariance_to_upper(&(r * d * r.transpose()));
            let opacity = rng.random_range(0.6..0.9);
            bundle.push(position, cov, color, opacity, &zero, Some(k as i32))?;
        }
    }
    let cameras = orbit_cameras(cfg, scene_radius)?;
    let frames: Vec<Frame> = cameras
        .into_par_iter()
        .enumerate()
        .map(|(t, camera)| Frame {
            index: t + 1,
            rgb: Some(render_rgb(&bundle, &camera)),
            camera,
        })
        .collect();
    Ok((bundle, FrameSequence::new(frames)))
}

/// Per-pixel dominant instance (label + 1, 0 for background): the label
/// with the largest summed compositing weight, on pixels whose accumulated
/// alpha reaches [`COVERAGE_CUTOFF`].
pub fn instance_raster(bundle: &GaussianBundle, frame: &Frame) -> Result<RegionIdRaster> {
    let labels = bundle
        .instance_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("scene has no instance labels".into()))?;
    let contribs = compute_contributions(bundle, &frame.camera);
    let (h, w) = (frame.camera.height(), frame.camera.width());
    let mut ids = vec![0u16; h * w];
    let mut votes: BTreeMap<i32, f64> = BTreeMap::new();
    for (p, id) in ids.iter_mut().enumerate() {
        let list = contribs.pixel(p);
        let alpha: f64 = list.iter().map(|(_, wgt)| wgt).sum();
        if alpha < COVERAGE_CUTOFF {
            continue;
        }
        votes.clear();
        for &(g, wgt) in list {
            *votes.entry(labels[g as usize]).or_default() += wgt;
        }
        // smallest label wins exact ties
        let (label, _) = votes.iter().fold(
            (i32::MIN, f64::NEG_INFINITY),
            |best, (&l, &v)| if v > best.1 { (l, v) } else { best },
        );
        if label >= 0 {
            *id = label as u16 + 1;
        }
    }
    Ok(RegionIdRaster {
        frame: frame.index,
        height: h,
        width: w,
        ids,
    })
}

pub fn instance_rasters(bundle: &GaussianBundle, frames: &FrameSequence) -> Result<Vec<RegionIdRaster>> {
    frames.frames.par_iter().map(|f| instance_raster(bundle, f)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmenterMode {
    Perfect,
    /// Each mask is split in two along its box's long axis with probability 0.5.
    Oversplit,
    /// Each mask is dropped with probability 0.3.
    Dropout,
}

impl FromStr for SegmenterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(SegmenterMode::Perfect),
            "oversplit" => Ok(SegmenterMode::Oversplit),
            "dropout" => Ok(SegmenterMode::Dropout),
            other => Err(Error::InvalidArgument(format!("unknown segmenter mode {other:?}"))),
        }
    }
}

pub const SPLIT_PROBABILITY: f64 = 0.5;
pub const DROPOUT_PROBABILITY: f64 = 0.3;

/// Halves of `mask` on either side of its box's midline along the longer
/// axis. Returns `None` when one half would be empty.
pub fn split_long_axis(mask: &Mask) -> Option<(Mask, Mask)> {
    let b: PixelBox = box_from_mask(mask).ok()?;
    let (h, w) = mask.shape();
    let by_rows = b.height() >= b.width();
    let mid = if by_rows {
        (b.row_min + b.row_max).div_ceil(2)
    } else {
        (b.col_min + b.col_max).div_ceil(2)
    };
    let first = Mask::from_fn(h, w, |r, c| mask.get(r, c) && if by_rows { r < mid } else { c < mid });
    let mut second = mask.clone();
    second.subtract(&first).ok()?;
    if first.is_empty() || second.is_empty() {
        None
    } else {
        Some((first, second))
    }
}

/// Proposals from dominant-instance rasters, optionally corrupted.
pub struct SyntheticSegmenter {
    rasters: BTreeMap<usize, RegionIdRaster>,
    mode: SegmenterMode,
    seed: u64,
}

impl SyntheticSegmenter {
    pub fn new(rasters: &[RegionIdRaster], mode: SegmenterMode, seed: u64) -> Self {
        SyntheticSegmenter {
            rasters: rasters.iter().map(|r| (r.frame, r.clone())).collect(),
            mode,
            seed,
        }
    }
}

impl Segmenter for SyntheticSegmenter {
    fn segment(&self, frame: &Frame) -> Result<Vec<RegionMask>> {
        let t = frame.index;
        let raster = self.rasters.get(&t).ok_or(Error::Segmenter {
            frame: t,
            message: "frame outside the synthetic scene".into(),
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t as u64);
        let mut out = Vec::new();
        for (_, mask) in raster.masks() {
            match self.mode {
                SegmenterMode::Perfect => out.push(mask),
                SegmenterMode::Dropout => {
                    if rng.random::<f64>() >= DROPOUT_PROBABILITY {
                        out.push(mask);
                    }
                }
                SegmenterMode::Oversplit => {
                    let split = rng.random::<f64>() < SPLIT_PROBABILITY;
                    match split.then(|| split_long_axis(&mask)).flatten() {
                        Some((a, b)) => out.extend([a, b]),
                        None => out.push(mask),
                    }
                }
            }
        }
        out.into_iter().map(|m| RegionMask::new(t, m)).collect()
    }
}

/// Follows the dominant instance inside each seed box through all frames.
pub struct SyntheticTracker {
    inner: RegionIdTracker,
}

impl SyntheticTracker {
    pub fn new(rasters: &[RegionIdRaster]) -> Self {
        SyntheticTracker {
            inner: RegionIdTracker::new(rasters.to_vec()),
        }
    }
}

impl Tracker for SyntheticTracker {
    fn track(
        &self,
        frames: &FrameSequence,
        boxes: &[PixelBox],
        seed_frame: usize,
    ) -> Result<Vec<BTreeMap<usize, Mask>>> {
        self.inner.track(frames, boxes, seed_frame)
    }
}

/// Prototype embedder. An image maps to the class whose hue is nearest to
/// the intensity-weighted majority of its non-black pixels.
#[derive(Clone, Debug)]
pub struct SyntheticEmbedder {
    dim: usize,
    prototypes: Vec<Vec<f64>>,
    hues: Vec<f64>,
    names: Vec<String>,
    noise_level: f64,
    seed: u64,
    skew: Option<Skew>,
}

#[derive(Clone, Debug)]
struct Skew {
    gap: Vec<f64>,
    multipliers: Vec<f64>,
}

impl SyntheticEmbedder {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.n_objects;
        let mut vectors = farthest_point_prototypes(k + 1, cfg.feature_dim, cfg.seed ^ 0x5eed_0001);
        let gap = vectors.pop().expect("k + 1 vectors");
        let skew = cfg.scale_skew.then(|| Skew {
            gap,
            multipliers: (0..k)
                .map(|i| {
                    if k == 1 {
                        1.0
                    } else {
                        (0.3 * (k - 1 - i) as f64 + i as f64) / (k - 1) as f64
                    }
                })
                .collect(),
        });
        Ok(SyntheticEmbedder {
            dim: cfg.feature_dim,
            prototypes: vectors,
            hues: (0..k).map(|i| class_hue(i, k)).collect(),
            names: cfg.class_names(),
            noise_level: cfg.noise_level,
            seed: cfg.seed,
            skew,
        })
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k]
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    /// Per-class image multipliers when skewed.
    pub fn multipliers(&self) -> Option<&[f64]> {
        self.skew.as_ref().map(|s| s.multipliers.as_slice())
    }

    /// Class of the dominant hue among non-black pixels.
    pub fn classify(&self, image: &crate::scene::RgbImage) -> Option<usize> {
        let mut votes = vec![0.0; self.hues.len()];
        for px in image.data.chunks_exact(3) {
            let c = [px[0], px[1], px[2]];
            let Some(h) = rgb_to_hue(c) else { continue };
            let k = self
                .hues
                .iter()
                .map(|&hk| {
                    let d = (h - hk).rem_euclid(360.0);
                    d.min(360.0 - d)
                })
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)?;
            votes[k] += c[0] + c[1] + c[2];
        }
        votes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
    }

    /// `base` must be unit length; it is returned unchanged without noise.
    fn noisy(&self, base: &[f64], key: u64) -> Vec<f64> {
        if self.noise_level == 0.0 {
            return base.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let n = unit_gaussian(&mut rng, self.dim);
        let v: Vec<f64> = base.iter().zip(n).map(|(x, e)| x + self.noise_level * e).collect();
        normalize(&v).expect("unit vector plus small noise is nonzero")
    }

    /// Unit image-side direction of class `k`.
    fn image_base(&self, k: usize) -> Vec<f64> {
        match &self.skew {
            None => self.prototypes[k].clone(),
            Some(s) => offset(&self.prototypes[k], s.multipliers[k], &s.gap, IMAGE_GAP),
        }
    }

    /// Unit text-side direction of class `k`.
    fn text_base(&self, k: usize) -> Vec<f64> {
        match &self.skew {
            None => self.prototypes[k].clone(),
            Some(s) => offset(&self.prototypes[k], 1.0, &s.gap, TEXT_GAP),
        }
    }
}

fn offset(prototype: &[f64], scale: f64, gap: &[f64], length: f64) -> Vec<f64> {
    let v: Vec<f64> = prototype.iter().zip(gap).map(|(p, g)| scale * p + length * g).collect();
    normalize(&v).expect("prototype and gap are not antipodal")
}

fn content_hash(seed: u64, salt: u8, bytes: impl Iterator<Item = u64>) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    salt.hash(&mut h);
    for b in bytes {
        b.hash(&mut h);
    }
    h.finish()
}

impl ImageEmbedder for SyntheticEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &crate::scene::RgbImage) -> Result<Vec<f64>> {
        let k = self
            .classify(image)
            .ok_or_else(|| Error::Embedder("image has no colored pixels".into()))?;
        let key = content_hash(self.seed, 1, image.data.iter().map(|x| x.to_bits()));
        Ok(self.noisy(&self.image_base(k), key))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = content_hash(self.seed, 2, text.bytes().map(u64::from));
        match self.names.iter().position(|n| n == text) {
            Some(k) => Ok(self.noisy(&self.text_base(k), key)),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                Ok(unit_gaussian(&mut rng, self.dim))
            }
        }
    }
}
