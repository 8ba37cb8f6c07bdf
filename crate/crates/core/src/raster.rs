//! Tile-based alpha compositing of projected Gaussians.
//!
//! Geometry is frozen during language training, so the per-pixel compositing
//! weights are computed once per camera ([`PixelContributions`]) and any
//! per-Gaussian channel (embeddings, colors) is rendered as a weighted sum.

use nalgebra::{Matrix2x3, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::features::FeatureRaster;
use crate::scene::{CameraPose, GaussianBundle, RgbImage};

pub const TILE_SIZE: usize = 16;
pub const MIN_DEPTH: f64 = 0.01;
pub const COV2D_REGULARIZER: f64 = 0.3;
pub const RADIUS_SIGMAS: f64 = 3.0;
pub const ALPHA_CLAMP: f64 = 0.99;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Squared Mahalanobis distance beyond which a footprint contributes nothing.
pub const MAX_MAHALANOBIS_SQ: f64 = RADIUS_SIGMAS * RADIUS_SIGMAS;

#[derive(Clone, Debug, PartialEq)]
pub struct SplatFootprint {
    pub index: usize,
    /// `(x, y)` = `(col, row)` in pixels.
    pub mean2d: [f64; 2],
    /// `[xx, xy, yy]`
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `[xx, xy, yy]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub radius: f64,
    pub opacity: f64,
}

impl SplatFootprint {
    pub fn mahalanobis_sq(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    /// Clamped footprint opacity at pixel center `(x, y)`; zero outside the
    /// 3-sigma ellipse.
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let m = self.mahalanobis_sq(x, y);
        if m > MAX_MAHALANOBIS_SQ {
            return 0.0;
        }
        (self.opacity * (-0.5 * m).exp()).clamp(0.0, ALPHA_CLAMP)
    }
}

/// EWA projection of Gaussian `index` into `camera`. Returns `None` when the
/// Gaussian is culled (too close / behind the camera, or off-image).
pub fn project_gaussian(bundle: &GaussianBundle, index: usize, camera: &CameraPose) -> Option<SplatFootprint> {
    let p = camera.world_to_camera(&bundle.positions[index]);
    if !(p.z > MIN_DEPTH) {
        return None;
    }
    let (fx, fy) = camera.focal;
    let (cx, cy) = camera.principal;
    let z = p.z;
    let mean = [fx * p.x / z + cx, fy * p.y / z + cy];
    let jacobian = Matrix2x3::new(fx / z, 0.0, -fx * p.x / (z * z), 0.0, fy / z, -fy * p.y / (z * z));
    let w: Matrix3<f64> = camera.rotation_matrix();
    let cov_cam = w * bundle.covariance_matrix(index) * w.transpose();
    let cov = jacobian * cov_cam * jacobian.transpose();
    let a = cov[(0, 0)] + COV2D_REGULARIZER;
    let b = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let c = cov[(1, 1)] + COV2D_REGULARIZER;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let eig = SymmetricEigen::new(nalgebra::Matrix2::new(a, b, b, c));
    let lambda_max = eig.eigenvalues.max();
    let radius = RADIUS_SIGMAS * lambda_max.sqrt();
    let (h, w_px) = camera.resolution;
    if mean[0] + radius < 0.0
        || mean[0] - radius > (w_px as f64 - 1.0)
        || mean[1] + radius < 0.0
        || mean[1] - radius > (h as f64 - 1.0)
    {
        return None;
    }
    Some(SplatFootprint {
        index,
        mean2d: mean,
        cov2d: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: z,
        radius,
        opacity: bundle.opacities[index],
    })
}

/// Projects every Gaussian and returns the surviving footprints sorted front
/// to back (ties broken by Gaussian index).
pub fn sorted_footprints(bundle: &GaussianBundle, camera: &CameraPose) -> Vec<SplatFootprint> {
    let mut fps: Vec<SplatFootprint> = (0..bundle.len())
        .into_par_iter()
        .filter_map(|i| project_gaussian(bundle, i, camera))
        .collect();
    fps.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    fps
}

/// Per-pixel front-to-back compositing weights, stored in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelContributions {
    pub height: usize,
    pub width: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl PixelContributions {
    pub fn empty(height: usize, width: usize) -> Self {
        PixelContributions {
            height,
            width,
            offsets: vec![0; height * width + 1],
            entries: Vec::new(),
        }
    }

    /// Builds from one list per pixel (row-major).
    pub fn from_lists(height: usize, width: usize, lists: Vec<Vec<(u32, f64)>>) -> Self {
        assert_eq!(lists.len(), height * width);
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for l in lists {
            entries.extend(l);
            offsets.push(entries.len());
        }
        PixelContributions {
            height,
            width,
            offsets,
            entries,
        }
    }

    /// `(gaussian_index, weight)` pairs for pixel `p = row * width + col`.
    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn at(&self, row: usize, col: usize) -> &[(u32, f64)] {
        self.pixel(row * self.width + col)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Accumulated alpha (sum of weights) at each pixel.
    pub fn accumulated_alpha(&self) -> Vec<f64> {
        (0..self.num_pixels())
            .map(|p| self.pixel(p).iter().map(|&(_, w)| w).sum())
            .collect()
    }

    /// Renders a per-Gaussian channel of width `dim` (row-major `count x dim`).
    pub fn composite(&self, values: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_pixels() * dim];
        out.par_chunks_mut(dim.max(1)).enumerate().for_each(|(p, px)| {
            for &(i, w) in self.pixel(p) {
                let v = &values[i as usize * dim..(i as usize + 1) * dim];
                for (o, x) in px.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
        });
        out
    }
}

/// Front-to-back compositing weights for every pixel of `camera`.
pub fn compute_contributions(bundle: &GaussianBundle, camera: &CameraPose) -> PixelContributions {
    let (h, w) = camera.resolution;
    let footprints = sorted_footprints(bundle, camera);
    if footprints.is_empty() || h == 0 || w == 0 {
        return PixelContributions::empty(h, w);
    }
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);

    // bin footprints (already depth-sorted) into every tile their radius box touches
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, fp) in footprints.iter().enumerate() {
        let col0 = (fp.mean2d[0] - fp.radius).ceil().max(0.0) as usize;
        let col1 = (fp.mean2d[0] + fp.radius).floor().min(w as f64 - 1.0);
        let row0 = (fp.mean2d[1] - fp.radius).ceil().max(0.0) as usize;
        let row1 = (fp.mean2d[1] + fp.radius).floor().min(h as f64 - 1.0);
        if col1 < col0 as f64 || row1 < row0 as f64 {
            continue;
        }
        let (col1, row1) = (col1 as usize, row1 as usize);
        for ty in row0 / TILE_SIZE..=row1 / TILE_SIZE {
            for tx in col0 / TILE_SIZE..=col1 / TILE_SIZE {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let tile_lists: Vec<Vec<Vec<(u32, f64)>>> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let (ty, tx) = (t / tiles_x, t % tiles_x);
            let rows = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h);
            let cols = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w);
            let mut lists = Vec::with_capacity(rows.len() * cols.len());
            for row in rows {
                for col in cols.clone() {
                    lists.push(composite_pixel(&footprints, bin, col as f64, row as f64));
                }
            }
            lists
        })
        .collect();

    let mut lists = vec![Vec::new(); h * w];
    for (t, tile) in tile_lists.into_iter().enumerate() {
        let (ty, tx) = (t / tiles_x, t % tiles_x);
        let tile_w = ((tx + 1) * TILE_SIZE).min(w) - tx * TILE_SIZE;
        for (k, l) in tile.into_iter().enumerate() {
            let row = ty * TILE_SIZE + k / tile_w;
            let col = tx * TILE_SIZE + k % tile_w;
            lists[row * w + col] = l;
        }
    }
    PixelContributions::from_lists(h, w, lists)
}

fn composite_pixel(footprints: &[SplatFootprint], bin: &[u32], x: f64, y: f64) -> Vec<(u32, f64)> {
    let mut out = Vec::new();
    let mut transmittance = 1.0;
    for &k in bin {
        let fp = &footprints[k as usize];
        let alpha = fp.alpha_at(x, y);
        if alpha <= 0.0 {
            continue;
        }
        out.push((fp.index as u32, transmittance * alpha));
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Embeddings,
    Colors,
}

/// Renders the language embeddings into a feature raster.
pub fn render_field(bundle: &GaussianBundle, camera: &CameraPose, frame: usize) -> FeatureRaster {
    let contribs = compute_contributions(bundle, camera);
    render_with(&contribs, bundle, Channel::Embeddings, frame)
}

pub fn render_rgb(bundle: &GaussianBundle, camera: &CameraPose) -> RgbImage {
    let contribs = compute_contributions(bundle, camera);
    let data = contribs.composite(&flatten_colors(bundle), 3);
    RgbImage {
        height: contribs.height,
        width: contribs.width,
        data,
    }
}

/// Renders `channel` using precomputed compositing weights.
pub fn render_with(
    contribs: &PixelContributions,
    bundle: &GaussianBundle,
    channel: Channel,
    frame: usize,
) -> FeatureRaster {
    let (values, dim) = match channel {
        Channel::Embeddings => (bundle.embeddings.clone(), bundle.latent_dim()),
        Channel::Colors => (flatten_colors(bundle), 3),
    };
    let data = contribs.composite(&values, dim);
    let coverage = (0..contribs.num_pixels())
        .map(|p| !contribs.pixel(p).is_empty())
        .collect();
    FeatureRaster {
        frame,
        height: contribs.height,
        width: contribs.width,
        dim,
        data,
        coverage,
    }
}

fn flatten_colors(bundle: &GaussianBundle) -> Vec<f64> {
    bundle.colors.iter().flatten().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(h: usize, w: usize, f: f64) -> CameraPose {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 2.0],
            focal: (f, f),
            principal: (16.0, 16.0),
            resolution: (h, w),
        }
    }

    fn one(position: [f64; 3], var: f64, opacity: f64, emb: &[f64]) -> GaussianBundle {
        let mut b = GaussianBundle::empty(emb.len());
        b.push(position, [var, 0.0, 0.0, var, 0.0, var], [0.5; 3], opacity, emb, None)
            .unwrap();
        b
    }

    #[test]
    fn on_axis_projection_hits_principal_point() {
        let b = one([0.0, 0.0, 0.0], 0.01, 0.5, &[1.0]);
        let fp = project_gaussian(&b, 0, &camera(32, 32, 100.0)).unwrap();
        assert_eq!(fp.mean2d, [16.0, 16.0]);
        assert_eq!(fp.depth, 2.0);
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let sigma2: f64 = 0.0004;
        let b = one([0.0, 0.0, 0.0], sigma2, 0.5, &[1.0]);
        let fp = project_gaussian(&b, 0, &camera(32, 32, 100.0)).unwrap();
        let expected = sigma2 * (100.0f64 / 2.0).powi(2) + 0.3;
        assert!((fp.cov2d[0] - expected).abs() < 1e-6);
        assert!((fp.cov2d[2] - expected).abs() < 1e-6);
        assert!(fp.cov2d[1].abs() < 1e-12);
        assert!((fp.radius - 3.0 * expected.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let b = one([0.0, 0.0, -3.0], 0.01, 0.5, &[1.0]);
        assert!(project_gaussian(&b, 0, &camera(32, 32, 100.0)).is_none());
    }

    #[test]
    fn off_image_is_culled() {
        let b = one([5.0, 0.0, 0.0], 0.0001, 0.5, &[1.0]);
        assert!(project_gaussian(&b, 0, &camera(32, 32, 100.0)).is_none());
    }

    #[test]
    fn weight_at_mean_is_clamped_opacity() {
        for alpha in [0.4, 0.999] {
            let b = one([0.0, 0.0, 0.0], 0.001, alpha, &[1.0]);
            let c = compute_contributions(&b, &camera(32, 32, 100.0));
            let px = c.at(16, 16);
            assert_eq!(px.len(), 1);
            assert_eq!(px[0].0, 0);
            assert!((px[0].1 - alpha.min(0.99)).abs() < 1e-15);
        }
    }

    #[test]
    fn coincident_pair_weights() {
        let mut b = one([0.0, 0.0, 0.0], 0.001, 0.5, &[1.0]);
        b.push(
            [0.0, 0.0, 0.0],
            [0.001, 0.0, 0.0, 0.001, 0.0, 0.001],
            [0.5; 3],
            0.5,
            &[1.0],
            None,
        )
        .unwrap();
        let c = compute_contributions(&b, &camera(32, 32, 100.0));
        assert_eq!(c.at(16, 16), &[(0, 0.5), (1, 0.25)]);
    }

    #[test]
    fn empty_bundle_has_no_contributions() {
        let c = compute_contributions(&GaussianBundle::empty(3), &camera(20, 24, 100.0));
        assert_eq!(c.num_pixels(), 480);
        assert!((0..480).all(|p| c.pixel(p).is_empty()));
    }

    #[test]
    fn opaque_gaussian_renders_scaled_embedding() {
        let b = one([0.0, 0.0, 0.0], 0.001, 0.99, &[0.2, -0.4, 1.0]);
        let r = render_field(&b, &camera(32, 32, 100.0), 1);
        let px = r.pixel(16, 16);
        for (got, want) in px.iter().zip([0.2, -0.4, 1.0]) {
            assert!((got - 0.99 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn tiles_cover_non_multiple_resolution() {
        // Gaussian straddling a tile border in a 20x37 image
        let mut cam = camera(20, 37, 100.0);
        cam.principal = (16.0, 15.5);
        let b = one([0.0, 0.0, 0.0], 0.004, 0.8, &[1.0]);
        let c = compute_contributions(&b, &cam);
        let total: f64 = c.accumulated_alpha().iter().sum();
        assert!(total > 1.0);
        assert!(!c.at(15, 16).is_empty() && !c.at(16, 16).is_empty());
    }
}
