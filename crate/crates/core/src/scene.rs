//! Scene, camera and frame types.
//!
//! A [`GaussianBundle`] is a set of 3D Gaussians with frozen geometry
//! (position, covariance, color, opacity) plus a learnable language
//! embedding per Gaussian. Covariances are stored as the six upper-triangular
//! entries `[xx, xy, xz, yy, yz, zz]`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use std::fmt;

use crate::error::{Error, Result};

/// Default latent (embedding) width of a Gaussian.
pub const DEFAULT_LATENT_DIM: usize = 3;

const PSD_TOLERANCE: f64 = -1e-9;
const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBundle {
    pub positions: Vec<[f64; 3]>,
    pub covariances: Vec<[f64; 6]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    latent_dim: usize,
    /// Row-major `count x latent_dim`.
    pub embeddings: Vec<f64>,
    pub instance_labels: Option<Vec<i32>>,
}

impl GaussianBundle {
    pub fn empty(latent_dim: usize) -> Self {
        GaussianBundle {
            positions: Vec::new(),
            covariances: Vec::new(),
            colors: Vec::new(),
            opacities: Vec::new(),
            latent_dim,
            embeddings: Vec::new(),
            instance_labels: None,
        }
    }

    /// Builds a bundle, checking that all per-Gaussian arrays agree in length.
    pub fn new(
        positions: Vec<[f64; 3]>,
        covariances: Vec<[f64; 6]>,
        colors: Vec<[f64; 3]>,
        opacities: Vec<f64>,
        latent_dim: usize,
        embeddings: Vec<f64>,
        instance_labels: Option<Vec<i32>>,
    ) -> Result<Self> {
        let n = positions.len();
        let check = |len: usize, context: &'static str| {
            if len != n {
                Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                    context,
                })
            } else {
                Ok(())
            }
        };
        check(covariances.len(), "covariances")?;
        check(colors.len(), "colors")?;
        check(opacities.len(), "opacities")?;
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if embeddings.len() != n * latent_dim {
            return Err(Error::DimensionMismatch {
                expected: n * latent_dim,
                actual: embeddings.len(),
                context: "embeddings",
            });
        }
        if let Some(labels) = &instance_labels {
            check(labels.len(), "instance_labels")?;
        }
        Ok(GaussianBundle {
            positions,
            covariances,
            colors,
            opacities,
            latent_dim,
            embeddings,
            instance_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn embedding_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.embeddings[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn covariance_matrix(&self, i: usize) -> Matrix3<f64> {
        covariance_from_upper(&self.covariances[i])
    }

    /// Appends one Gaussian. `embedding` must have `latent_dim` entries.
    pub fn push(
        &mut self,
        position: [f64; 3],
        covariance: [f64; 6],
        color: [f64; 3],
        opacity: f64,
        embedding: &[f64],
        label: Option<i32>,
    ) -> Result<()> {
        if embedding.len() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim,
                actual: embedding.len(),
                context: "embedding",
            });
        }
        let was_empty = self.is_empty();
        match (&mut self.instance_labels, label) {
            (Some(labels), Some(l)) => labels.push(l),
            (None, None) => {}
            (None, Some(l)) if was_empty => self.instance_labels = Some(vec![l]),
            _ => {
                return Err(Error::InvalidArgument(
                    "instance labels must be given for all Gaussians or none".into(),
                ))
            }
        }
        self.positions.push(position);
        self.covariances.push(covariance);
        self.colors.push(color);
        self.opacities.push(opacity);
        self.embeddings.extend_from_slice(embedding);
        Ok(())
    }

    /// Copy of the bundle restricted to `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> GaussianBundle {
        let d = self.latent_dim;
        let mut embeddings = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            embeddings.extend_from_slice(self.embedding(i));
        }
        GaussianBundle {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            covariances: indices.iter().map(|&i| self.covariances[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            opacities: indices.iter().map(|&i| self.opacities[i]).collect(),
            latent_dim: d,
            embeddings,
            instance_labels: self
                .instance_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Replaces the embedding table with a new one of width `latent_dim`.
    pub fn set_embeddings(&mut self, latent_dim: usize, embeddings: Vec<f64>) -> Result<()> {
        if latent_dim == 0 || embeddings.len() != self.len() * latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.len() * latent_dim,
                actual: embeddings.len(),
                context: "embeddings",
            });
        }
        self.latent_dim = latent_dim;
        self.embeddings = embeddings;
        Ok(())
    }
}

pub fn covariance_from_upper(c: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(c[0], c[1], c[2], c[1], c[3], c[4], c[2], c[4], c[5])
}

pub fn covariance_to_upper(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

/// Pinhole camera. World points map to camera space as `R * x + t`; the
/// camera looks down +z, pixel `(row, col)` sits at image point `(col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub focal: (f64, f64),
    pub principal: (f64, f64),
    /// `(height, width)`
    pub resolution: (usize, usize),
}

impl CameraPose {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn height(&self) -> usize {
        self.resolution.0
    }

    pub fn width(&self) -> usize {
        self.resolution.1
    }

    pub fn world_to_camera(&self, p: &[f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(*p) + Vector3::from(self.translation)
    }

    /// Camera at `eye` looking at `target`, with `up` roughly vertical.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: (f64, f64),
        resolution: (usize, usize),
    ) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let forward = Vector3::from(target) - eye_v;
        if forward.norm() == 0.0 {
            return Err(Error::InvalidArgument("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-12 {
            return Err(Error::InvalidArgument("up is parallel to view direction".into()));
        }
        let right = right.normalize();
        // image y grows downwards
        let down = forward.cross(&right);
        let rotation = [
            [right.x, right.y, right.z],
            [down.x, down.y, down.z],
            [forward.x, forward.y, forward.z],
        ];
        let r = Matrix3::new(
            right.x, right.y, right.z, down.x, down.y, down.z, forward.x, forward.y, forward.z,
        );
        let t = -(r * eye_v);
        let (h, w) = resolution;
        Ok(CameraPose {
            rotation,
            translation: [t.x, t.y, t.z],
            focal,
            principal: ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            resolution,
        })
    }
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// 1-based frame index.
    pub index: usize,
    pub camera: CameraPose,
    pub rgb: Option<RgbImage>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Self {
        FrameSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Frame> {
        self.frames.iter().find(|f| f.index == index)
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| f.camera.resolution)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonPositiveSemidefinite { gaussian: usize, min_eigenvalue: f64 },
    AsymmetricCovariance { gaussian: usize },
    OpacityOutOfRange { gaussian: usize, value: f64 },
    ColorOutOfRange { gaussian: usize },
    NonFiniteEmbedding { gaussian: usize },
    NonFinitePosition { gaussian: usize },
    NonOrthonormalRotation { frame: usize, error: f64 },
    NonPositiveFocal { frame: usize },
    EmptyResolution { frame: usize },
    ResolutionMismatch { frame: usize },
    FrameIndexGap { position: usize, index: usize },
    RgbShape { frame: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NonPositiveSemidefinite {
                gaussian,
                min_eigenvalue,
            } => write!(
                f,
                "gaussian {gaussian}: covariance not PSD (min eigenvalue {min_eigenvalue:e})"
            ),
            AsymmetricCovariance { gaussian } => {
                write!(f, "gaussian {gaussian}: covariance not symmetric")
            }
            OpacityOutOfRange { gaussian, value } => {
                write!(f, "gaussian {gaussian}: opacity {value} outside [0, 1]")
            }
            ColorOutOfRange { gaussian } => write!(f, "gaussian {gaussian}: color outside [0, 1]"),
            NonFiniteEmbedding { gaussian } => {
                write!(f, "gaussian {gaussian}: non-finite embedding")
            }
            NonFinitePosition { gaussian } => write!(f, "gaussian {gaussian}: non-finite position"),
            NonOrthonormalRotation { frame, error } => {
                write!(f, "frame {frame}: rotation not orthonormal (error {error:e})")
            }
            NonPositiveFocal { frame } => write!(f, "frame {frame}: focal length must be > 0"),
            EmptyResolution { frame } => write!(f, "frame {frame}: resolution must be >= 1x1"),
            ResolutionMismatch { frame } => {
                write!(f, "frame {frame}: resolution differs from the first frame")
            }
            FrameIndexGap { position, index } => write!(
                f,
                "frame at position {position} has index {index}, expected {}",
                position + 1
            ),
            RgbShape { frame } => write!(f, "frame {frame}: RGB raster does not match resolution"),
        }
    }
}

pub fn min_covariance_eigenvalue(c: &[f64; 6]) -> f64 {
    SymmetricEigen::new(covariance_from_upper(c))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Checks every structural invariant of the scene and returns the violations.
pub fn validate_scene(bundle: &GaussianBundle, frames: &FrameSequence) -> Vec<Violation> {
    let mut report = Vec::new();
    for i in 0..bundle.len() {
        if bundle.positions[i].iter().any(|v| !v.is_finite()) {
            report.push(Violation::NonFinitePosition { gaussian: i });
        }
        let c = &bundle.covariances[i];
        if c.iter().any(|v| !v.is_finite()) {
            report.push(Violation::AsymmetricCovariance { gaussian: i });
        } else {
            let min_eig = min_covariance_eigenvalue(c);
            if min_eig < PSD_TOLERANCE {
                report.push(Violation::NonPositiveSemidefinite {
                    gaussian: i,
                    min_eigenvalue: min_eig,
                });
            }
        }
        let a = bundle.opacities[i];
        if !(0.0..=1.0).contains(&a) {
            report.push(Violation::OpacityOutOfRange { gaussian: i, value: a });
        }
        if bundle.colors[i].iter().any(|v| !(0.0..=1.0).contains(v)) {
            report.push(Violation::ColorOutOfRange { gaussian: i });
        }
        if bundle.embedding(i).iter().any(|v| !v.is_finite()) {
            report.push(Violation::NonFiniteEmbedding { gaussian: i });
        }
    }

    let first_res = frames.resolution();
    for (pos, frame) in frames.iter().enumerate() {
        let cam = &frame.camera;
        if frame.index != pos + 1 {
            report.push(Violation::FrameIndexGap {
                position: pos,
                index: frame.index,
            });
        }
        let r = cam.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOLERANCE) {
            report.push(Violation::NonOrthonormalRotation {
                frame: frame.index,
                error: err,
            });
        }
        if !(cam.focal.0 > 0.0 && cam.focal.1 > 0.0) {
            report.push(Violation::NonPositiveFocal { frame: frame.index });
        }
        if cam.resolution.0 == 0 || cam.resolution.1 == 0 {
            report.push(Violation::EmptyResolution { frame: frame.index });
        }
        if Some(cam.resolution) != first_res {
            report.push(Violation::ResolutionMismatch { frame: frame.index });
        }
        if let Some(rgb) = &frame.rgb {
            if (rgb.height, rgb.width) != cam.resolution || rgb.data.len() != rgb.height * rgb.width * 3 {
                report.push(Violation::RgbShape { frame: frame.index });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bundle(opacity: f64, cov: [f64; 6]) -> GaussianBundle {
        GaussianBundle::new(
            vec![[0.0, 0.0, 0.0]],
            vec![cov],
            vec![[0.5, 0.5, 0.5]],
            vec![opacity],
            3,
            vec![0.0; 3],
            None,
        )
        .unwrap()
    }

    fn camera() -> CameraPose {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 2.0],
            focal: (100.0, 100.0),
            principal: (16.0, 16.0),
            resolution: (32, 32),
        }
    }

    const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];

    // Closed-form eigenvalues of a symmetric 3x3 matrix (trigonometric method).
    fn eigenvalues_closed_form(c: &[f64; 6]) -> [f64; 3] {
        let (a, b, cc, d, e, f) = (c[0], c[1], c[2], c[3], c[4], c[5]);
        let p1 = b * b + cc * cc + e * e;
        if p1 == 0.0 {
            return [a, d, f];
        }
        let q = (a + d + f) / 3.0;
        let p2 = (a - q).powi(2) + (d - q).powi(2) + (f - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let m = covariance_from_upper(c) - Matrix3::identity() * q;
        let r = (m / p).determinant() / 2.0;
        let phi = if r <= -1.0 {
            std::f64::consts::PI / 3.0
        } else if r >= 1.0 {
            0.0
        } else {
            r.acos() / 3.0
        };
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    }

    #[test]
    fn valid_single_gaussian() {
        let frames = FrameSequence::new(vec![Frame {
            index: 1,
            camera: camera(),
            rgb: None,
        }]);
        assert!(validate_scene(&unit_bundle(0.5, IDENTITY), &frames).is_empty());
    }

    #[test]
    fn opacity_violation() {
        let report = validate_scene(&unit_bundle(1.5, IDENTITY), &FrameSequence::default());
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::OpacityOutOfRange { gaussian: 0, .. }));
    }

    #[test]
    fn negative_eigenvalue_detected() {
        let cov = [-0.01, 0.0, 0.0, 1.0, 0.0, 1.0];
        let oracle = eigenvalues_closed_form(&cov);
        let min_oracle = oracle.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((min_oracle + 0.01).abs() < 1e-12);
        let report = validate_scene(&unit_bundle(0.5, cov), &FrameSequence::default());
        assert_eq!(report.len(), 1);
        match report[0] {
            Violation::NonPositiveSemidefinite { min_eigenvalue, .. } => {
                assert!((min_eigenvalue - min_oracle).abs() < 1e-12)
            }
            ref v => panic!("unexpected violation {v}"),
        }
    }

    #[test]
    fn eigen_solver_matches_closed_form() {
        let covs = [
            [2.0, 0.3, -0.1, 1.5, 0.2, 0.7],
            [1.0, 0.9, 0.0, 1.0, 0.0, 0.2],
            [0.1, 0.0, 0.05, 3.0, -1.0, 2.0],
        ];
        for c in covs {
            let oracle = eigenvalues_closed_form(&c);
            let min_oracle = oracle.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((min_covariance_eigenvalue(&c) - min_oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn frame_violations() {
        let mut cam = camera();
        cam.rotation[0][0] = 2.0;
        cam.focal = (0.0, 1.0);
        let frames = FrameSequence::new(vec![
            Frame {
                index: 2,
                camera: cam,
                rgb: None,
            },
            Frame {
                index: 3,
                camera: CameraPose {
                    resolution: (8, 8),
                    ..camera()
                },
                rgb: Some(RgbImage::zeros(4, 4)),
            },
        ]);
        let report = validate_scene(&GaussianBundle::empty(3), &frames);
        assert!(report.contains(&Violation::FrameIndexGap { position: 0, index: 2 }));
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::NonOrthonormalRotation { frame: 2, .. })));
        assert!(report.contains(&Violation::NonPositiveFocal { frame: 2 }));
        assert!(report.contains(&Violation::ResolutionMismatch { frame: 3 }));
        assert!(report.contains(&Violation::RgbShape { frame: 3 }));
    }

    #[test]
    fn validation_is_pure() {
        let bundle = unit_bundle(1.5, [-1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let copy = bundle.clone();
        let a = validate_scene(&bundle, &FrameSequence::default());
        let b = validate_scene(&bundle, &FrameSequence::default());
        assert_eq!(a, b);
        assert_eq!(bundle, copy);
    }

    #[test]
    fn look_at_is_orthonormal_and_centers_target() {
        let cam = CameraPose::look_at(
            [5.0, -3.0, 2.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            (50.0, 50.0),
            (33, 33),
        )
        .unwrap();
        let frames = FrameSequence::new(vec![Frame {
            index: 1,
            camera: cam.clone(),
            rgb: None,
        }]);
        assert!(validate_scene(&GaussianBundle::empty(3), &frames).is_empty());
        let p = cam.world_to_camera(&[0.0, 0.0, 0.0]);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((p.z - (38.0f64).sqrt()).abs() < 1e-12);
    }
}
