//! Lightweight autoencoder between region embeddings and Gaussian latents.
//!
//! Fully connected layers with a leaky rectifier on hidden layers and an
//! identity activation on the last encoder and last decoder layer. Latents
//! are projected onto the unit sphere, so distinct regions must differ in
//! direction rather than only in length.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::error::{Error, Result};

pub const DEFAULT_ENCODER_WIDTHS: [usize; 6] = [256, 128, 128, 64, 32, 3];
pub const DEFAULT_DECODER_WIDTHS: [usize; 7] = [16, 32, 64, 128, 256, 256, 512];
pub const LEAKY_SLOPE: f64 = 0.01;

/// Epoch loss growth over the first epoch that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn uniform(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Layer {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub leaky_slope: f64,
}

impl CodecParams {
    /// Randomly initialised codec: weights uniform in `±1/sqrt(fan_in)`,
    /// biases zero.
    pub fn init(feature_dim: usize, encoder_widths: &[usize], decoder_widths: &[usize], seed: u64) -> Result<Self> {
        check_widths(feature_dim, encoder_widths, decoder_widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut prev = feature_dim;
        for &w in encoder_widths {
            encoder.push(Layer::uniform(prev, w, &mut rng));
            prev = w;
        }
        let mut decoder = Vec::new();
        for &w in decoder_widths {
            decoder.push(Layer::uniform(prev, w, &mut rng));
            prev = w;
        }
        Ok(CodecParams {
            encoder,
            decoder,
            leaky_slope: LEAKY_SLOPE,
        })
    }

    pub fn from_layers(encoder: Vec<Layer>, decoder: Vec<Layer>) -> Result<Self> {
        let params = CodecParams {
            encoder,
            decoder,
            leaky_slope: LEAKY_SLOPE,
        };
        params.check()?;
        Ok(params)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder[0].input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().expect("nonempty encoder").output_dim()
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder.iter().map(Layer::output_dim).collect()
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.decoder.iter().map(Layer::output_dim).collect()
    }

    /// Verifies that consecutive layer shapes chain and the decoder returns
    /// to the feature width.
    pub fn check(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::InvalidArgument("codec needs at least one layer each way".into()));
        }
        let mut prev = self.feature_dim();
        for layer in self.encoder.iter().chain(&self.decoder) {
            if layer.input_dim() != prev || layer.bias.len() != layer.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: prev,
                    actual: layer.input_dim(),
                    context: "codec layer chain",
                });
            }
            prev = layer.output_dim();
        }
        if prev != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                actual: prev,
                context: "decoder output width",
            });
        }
        Ok(())
    }

    pub fn encode(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                actual: v.len(),
                context: "encoder input",
            });
        }
        let mut z = run_stack(&self.encoder, row(v), self.leaky_slope);
        normalize_rows(&mut z);
        Ok(z.into_raw_vec_and_offset().0)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                actual: z.len(),
                context: "decoder input",
            });
        }
        Ok(run_stack(&self.decoder, row(z), self.leaky_slope)
            .into_raw_vec_and_offset()
            .0)
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All weights and biases, layer by layer (weight row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in self.encoder.iter().chain(&self.decoder) {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_parameters());
        let mut k = 0;
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for w in l.weight.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
    }
}

fn check_widths(feature_dim: usize, enc: &[usize], dec: &[usize]) -> Result<()> {
    if feature_dim == 0 || enc.is_empty() || dec.is_empty() || enc.iter().chain(dec).any(|&w| w == 0) {
        return Err(Error::InvalidArgument(
            "codec widths must be positive and nonempty".into(),
        ));
    }
    if *dec.last().unwrap() != feature_dim {
        return Err(Error::DimensionMismatch {
            expected: feature_dim,
            actual: *dec.last().unwrap(),
            context: "decoder output width",
        });
    }
    Ok(())
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn run_stack(layers: &[Layer], mut x: Array2<f64>, slope: f64) -> Array2<f64> {
    let last = layers.len() - 1;
    for (k, l) in layers.iter().enumerate() {
        x = x.dot(&l.weight.t()) + &l.bias;
        if k != last {
            x.mapv_inplace(|v| leaky(v, slope));
        }
    }
    x
}

/// Scales every row to unit length; zero rows stay zero. Returns the
/// original row norms.
fn normalize_rows(x: &mut Array2<f64>) -> Vec<f64> {
    x.outer_iter_mut()
        .map(|mut r| {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r.mapv_inplace(|v| v / n);
            }
            n
        })
        .collect()
}

/// Forward pass over a batch, keeping every layer input and pre-activation.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Raw norms of the encoder outputs before projection onto the sphere.
    latent_norms: Vec<f64>,
    output: Array2<f64>,
}

fn forward_trace(params: &CodecParams, x: ArrayView2<f64>) -> Trace {
    let layers: Vec<&Layer> = params.encoder.iter().chain(&params.decoder).collect();
    let enc_last = params.encoder.len() - 1;
    let last = layers.len() - 1;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x.to_owned();
    let mut latent_norms = Vec::new();
    for (k, l) in layers.iter().enumerate() {
        let z = cur.dot(&l.weight.t()) + &l.bias;
        let identity = k == enc_last || k == last;
        let mut a = if identity {
            z.clone()
        } else {
            z.mapv(|v| leaky(v, params.leaky_slope))
        };
        if k == enc_last {
            latent_norms = normalize_rows(&mut a);
        }
        inputs.push(cur);
        pre.push(z);
        cur = a;
    }
    Trace {
        inputs,
        pre,
        latent_norms,
        output: cur,
    }
}

/// Reconstruction loss per sample: `mean|v - r| + weight * (1 - cos(v, r))`.
fn sample_loss(v: &[f64], r: &[f64], cosine_weight: f64) -> (f64, Vec<f64>) {
    let d = v.len() as f64;
    let mut l1 = 0.0;
    let mut grad = vec![0.0; v.len()];
    for ((g, &a), &b) in grad.iter_mut().zip(v).zip(r) {
        let diff = b - a;
        l1 += diff.abs();
        *g = diff.signum() * (diff != 0.0) as u8 as f64 / d;
    }
    l1 /= d;
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut cos_term = 0.0;
    if nv > 0.0 && nr > 1e-12 {
        let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
        let cos = dot / (nv * nr);
        cos_term = 1.0 - cos;
        for ((g, &a), &b) in grad.iter_mut().zip(v).zip(r) {
            *g -= cosine_weight * (a / (nv * nr) - cos * b / (nr * nr));
        }
    }
    (l1 + cosine_weight * cos_term, grad)
}

/// Mean reconstruction loss over `batch` rows and its gradient with respect
/// to every parameter (same layout as [`CodecParams::flatten`]).
pub fn loss_and_gradient(params: &CodecParams, batch: ArrayView2<f64>, cosine_weight: f64) -> (f64, Vec<f64>) {
    let n = batch.nrows() as f64;
    let trace = forward_trace(params, batch);
    let mut loss = 0.0;
    let mut delta = Array2::zeros(trace.output.raw_dim());
    for (k, (v, r)) in batch.outer_iter().zip(trace.output.outer_iter()).enumerate() {
        let (l, g) = sample_loss(v.as_slice().unwrap(), &r.to_vec(), cosine_weight);
        loss += l / n;
        for (dst, gv) in delta.row_mut(k).iter_mut().zip(g) {
            *dst = gv / n;
        }
    }

    let layers: Vec<&Layer> = params.encoder.iter().chain(&params.decoder).collect();
    let enc_last = params.encoder.len() - 1;
    let last = layers.len() - 1;
    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
    // delta holds dL/d(activation) of the current layer
    for k in (0..layers.len()).rev() {
        if k == enc_last {
            // through u = z / |z|: dL/dz = (g - (g.u) u) / |z|
            let u = &trace.inputs[k + 1];
            for ((mut d, u), &n) in delta.outer_iter_mut().zip(u.outer_iter()).zip(&trace.latent_norms) {
                if n > 0.0 {
                    let along = d.dot(&u);
                    d.zip_mut_with(&u, |g, &uv| *g = (*g - along * uv) / n);
                }
            }
        }
        if !(k == enc_last || k == last) {
            let slope = params.leaky_slope;
            ndarray::Zip::from(&mut delta).and(&trace.pre[k]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d *= slope
                }
            });
        }
        let gw = delta.t().dot(&trace.inputs[k]);
        let gb = delta.sum_axis(Axis(0));
        let next = delta.dot(&layers[k].weight);
        grads.push((gw, gb));
        delta = next;
    }
    grads.reverse();
    let mut flat = Vec::with_capacity(params.num_parameters());
    for (gw, gb) in grads {
        flat.extend(gw.iter());
        flat.extend(gb.iter());
    }
    (loss, flat)
}

#[derive(Clone, Debug)]
pub struct CodecTrainConfig {
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            encoder_widths: DEFAULT_ENCODER_WIDTHS.to_vec(),
            decoder_widths: DEFAULT_DECODER_WIDTHS.to_vec(),
            lr: 0.0006,
            epochs: 300,
            batch_size: 64,
            cosine_weight: 1.0,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CodecTraining {
    pub params: CodecParams,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a codec on `vectors` with mini-batch Adam.
pub fn train_codec(vectors: &[Vec<f64>], cfg: &CodecTrainConfig) -> Result<CodecTraining> {
    let first = vectors.first().ok_or(Error::EmptyInput("codec training vectors"))?;
    let dim = first.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: v.len(),
            context: "codec training vector",
        });
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch_size and lr must be positive".into()));
    }
    let mut params = CodecParams::init(dim, &cfg.encoder_widths, &cfg.decoder_widths, cfg.seed)?;
    let data = Array2::from_shape_fn((vectors.len(), dim), |(i, j)| vectors[i][j]);
    let mut flat = params.flatten();
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(Axis(0), chunk);
            let (loss, grad) = loss_and_gradient(&params, batch.view(), cfg.cosine_weight);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage: "codec epoch",
                    step: epoch,
                    loss,
                });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut flat, &grad);
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    stage: "codec epoch",
                    step: epoch,
                    loss: f64::NAN,
                });
            }
            params.assign(&flat);
        }
        let mean = total / vectors.len() as f64;
        if let Some(&initial) = epoch_losses.first() {
            if mean > DIVERGENCE_FACTOR * initial {
                return Err(Error::Divergence {
                    stage: "codec epoch",
                    step: epoch,
                    loss: mean,
                });
            }
        }
        epoch_losses.push(mean);
    }
    Ok(CodecTraining { params, epoch_losses })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
