//! Interchange formats.
//!
//! All binary formats are little-endian with a four-byte magic whose last
//! character is the version. Readers reject any file whose length disagrees
//! with the length implied by its header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecParams, Layer};
use crate::error::{Error, Result};
use crate::features::{BankEntry, FeatureRaster, RegionEmbeddingRecord, RegionFeatureBank};
use crate::masklet::{Mask, RegionIdRaster};
use crate::scene::{CameraPose, Frame, FrameSequence, GaussianBundle, RgbImage};

pub const GAUSSIANS_MAGIC: &[u8; 4] = b"LGF1";
pub const REGION_ID_MAGIC: &[u8; 4] = b"RID1";
pub const BANK_MAGIC: &[u8; 4] = b"BNK1";
pub const FEATURE_RASTER_MAGIC: &[u8; 4] = b"FRS1";
pub const CODEC_MAGIC: &[u8; 4] = b"CDC1";
pub const REGION_EMBEDDINGS_MAGIC: &[u8; 4] = b"REM1";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads from an in-memory payload after its length has been validated, so
/// short reads are bugs rather than user errors.
struct Cursor<'a> {
    what: &'static str,
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn new(what: &'static str, buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::format(what, "file shorter than its magic"));
        }
        if &buf[..4] != magic {
            return Err(Error::format(
                what,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf[..4]),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(Cursor { what, buf: &buf[4..] })
    }

    fn truncated(&self) -> Error {
        Error::format(self.what, "truncated header")
    }

    fn u8(&mut self) -> Result<u8> {
        self.buf.read_u8().map_err(|_| self.truncated())
    }

    fn u16(&mut self) -> Result<u16> {
        self.buf.read_u16::<LE>().map_err(|_| self.truncated())
    }

    fn u32(&mut self) -> Result<usize> {
        self.buf
            .read_u32::<LE>()
            .map(|v| v as usize)
            .map_err(|_| self.truncated())
    }

    fn u64(&mut self) -> Result<u64> {
        self.buf.read_u64::<LE>().map_err(|_| self.truncated())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0f32; n];
        self.buf.read_f32_into::<LE>(&mut out).map_err(|_| self.truncated())?;
        Ok(out.into_iter().map(f64::from).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0f64; n];
        self.buf.read_f64_into::<LE>(&mut out).map_err(|_| self.truncated())?;
        Ok(out)
    }

    fn expect_remaining(&self, n: Option<usize>) -> Result<()> {
        match n {
            Some(n) if n == self.buf.len() => Ok(()),
            Some(n) => Err(Error::format(
                self.what,
                format!("payload is {} bytes, header implies {n}", self.buf.len()),
            )),
            None => Err(Error::format(self.what, "header sizes overflow")),
        }
    }

    fn finish(&self) -> Result<()> {
        self.expect_remaining(Some(0))
    }
}

/// `a * b * c * ...` without overflow.
fn product(factors: &[usize]) -> Option<usize> {
    factors.iter().try_fold(1usize, |acc, &f| acc.checked_mul(f))
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(what, format!("{v} exceeds u32")))?;
    out.write_u32::<LE>(v).expect("vec write");
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.write_f32::<LE>(v as f32).expect("vec write");
    }
}

// ---- gaussians.bin ----

pub fn encode_gaussians(bundle: &GaussianBundle) -> Result<Vec<u8>> {
    const W: &str = "gaussians";
    let n = bundle.len();
    let d = bundle.latent_dim();
    let mut out = Vec::with_capacity(13 + n * (13 + d) * 4 + n * 4);
    out.extend_from_slice(GAUSSIANS_MAGIC);
    put_u32(&mut out, n, W)?;
    put_u32(&mut out, d, W)?;
    out.push(bundle.instance_labels.is_some() as u8);
    put_f32s(&mut out, bundle.positions.iter().flatten().copied());
    put_f32s(&mut out, bundle.covariances.iter().flatten().copied());
    put_f32s(&mut out, bundle.colors.iter().flatten().copied());
    put_f32s(&mut out, bundle.opacities.iter().copied());
    put_f32s(&mut out, bundle.embeddings.iter().copied());
    if let Some(labels) = &bundle.instance_labels {
        for &l in labels {
            out.write_i32::<LE>(l).expect("vec write");
        }
    }
    Ok(out)
}

pub fn decode_gaussians(bytes: &[u8]) -> Result<GaussianBundle> {
    let mut c = Cursor::new("gaussians", bytes, GAUSSIANS_MAGIC)?;
    let n = c.u32()?;
    let d = c.u32()?;
    let has_labels = match c.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::format("gaussians", format!("label flag {other} is not 0 or 1"))),
    };
    let per = 13usize.checked_add(d).and_then(|x| x.checked_add(has_labels as usize));
    c.expect_remaining(per.and_then(|p| product(&[n, p, 4])))?;
    let chunk3 = |v: Vec<f64>| v.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect::<Vec<_>>();
    let positions = chunk3(c.f32s(n * 3)?);
    let covariances = c
        .f32s(n * 6)?
        .chunks_exact(6)
        .map(|x| [x[0], x[1], x[2], x[3], x[4], x[5]])
        .collect();
    let colors = chunk3(c.f32s(n * 3)?);
    let opacities = c.f32s(n)?;
    let embeddings = c.f32s(n * d)?;
    let labels = if has_labels {
        let mut l = vec![0i32; n];
        c.buf.read_i32_into::<LE>(&mut l).map_err(|_| c.truncated())?;
        Some(l)
    } else {
        None
    };
    c.finish()?;
    GaussianBundle::new(positions, covariances, colors, opacities, d, embeddings, labels)
}

// ---- region-id rasters ----

pub fn encode_region_ids(raster: &RegionIdRaster) -> Result<Vec<u8>> {
    const W: &str = "region-id raster";
    if raster.ids.len() != raster.height * raster.width {
        return Err(Error::format(W, "id count disagrees with resolution"));
    }
    let mut out = Vec::with_capacity(12 + raster.ids.len() * 2);
    out.extend_from_slice(REGION_ID_MAGIC);
    put_u32(&mut out, raster.height, W)?;
    put_u32(&mut out, raster.width, W)?;
    for &id in &raster.ids {
        out.write_u16::<LE>(id).expect("vec write");
    }
    Ok(out)
}

/// The frame index is not stored in the file; it comes from the file name.
pub fn decode_region_ids(bytes: &[u8], frame: usize) -> Result<RegionIdRaster> {
    let mut c = Cursor::new("region-id raster", bytes, REGION_ID_MAGIC)?;
    let h = c.u32()?;
    let w = c.u32()?;
    c.expect_remaining(product(&[h, w, 2]))?;
    let mut ids = vec![0u16; h * w];
    c.buf.read_u16_into::<LE>(&mut ids).map_err(|_| c.truncated())?;
    Ok(RegionIdRaster {
        frame,
        height: h,
        width: w,
        ids,
    })
}

// ---- bank.bin ----

pub fn encode_bank(bank: &RegionFeatureBank) -> Result<Vec<u8>> {
    const W: &str = "bank";
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    put_u32(&mut out, bank.len(), W)?;
    put_u32(&mut out, bank.feature_dim, W)?;
    put_u32(&mut out, bank.latent_dim, W)?;
    for (&id, e) in &bank.entries {
        let id = u16::try_from(id).map_err(|_| Error::format(W, format!("masklet id {id} exceeds u16")))?;
        if e.phi_bar.len() != bank.feature_dim || e.latent.len() != bank.latent_dim {
            return Err(Error::format(W, format!("entry {id} has the wrong width")));
        }
        out.write_u16::<LE>(id).expect("vec write");
        out.write_u64::<LE>(e.total_pixels).expect("vec write");
        put_f32s(&mut out, e.phi_bar.iter().copied());
        put_f32s(&mut out, e.latent.iter().copied());
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<RegionFeatureBank> {
    const W: &str = "bank";
    let mut c = Cursor::new(W, bytes, BANK_MAGIC)?;
    let r = c.u32()?;
    let df = c.u32()?;
    let dl = c.u32()?;
    let per = df
        .checked_add(dl)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(10));
    c.expect_remaining(per.and_then(|p| p.checked_mul(r)))?;
    let mut bank = RegionFeatureBank::new(df, dl);
    for _ in 0..r {
        let id = c.u16()? as u32;
        let total_pixels = c.u64()?;
        let phi_bar = c.f32s(df)?;
        let latent = c.f32s(dl)?;
        let entry = BankEntry {
            phi_bar,
            latent,
            total_pixels,
        };
        if bank.entries.insert(id, entry).is_some() {
            return Err(Error::format(W, format!("duplicate masklet id {id}")));
        }
    }
    c.finish()?;
    Ok(bank)
}

// ---- feature rasters ----

pub fn encode_feature_raster(raster: &FeatureRaster) -> Result<Vec<u8>> {
    const W: &str = "feature raster";
    let px = raster.height * raster.width;
    if raster.data.len() != px * raster.dim || raster.coverage.len() != px {
        return Err(Error::format(W, "array lengths disagree with the header"));
    }
    let mut out = Vec::with_capacity(20 + raster.data.len() * 4 + px);
    out.extend_from_slice(FEATURE_RASTER_MAGIC);
    put_u32(&mut out, raster.frame, W)?;
    put_u32(&mut out, raster.height, W)?;
    put_u32(&mut out, raster.width, W)?;
    put_u32(&mut out, raster.dim, W)?;
    put_f32s(&mut out, raster.data.iter().copied());
    out.extend(raster.coverage.iter().map(|&c| c as u8));
    Ok(out)
}

pub fn decode_feature_raster(bytes: &[u8]) -> Result<FeatureRaster> {
    const W: &str = "feature raster";
    let mut c = Cursor::new(W, bytes, FEATURE_RASTER_MAGIC)?;
    let t = c.u32()?;
    let h = c.u32()?;
    let w = c.u32()?;
    let d = c.u32()?;
    let px = product(&[h, w]);
    let data_bytes = px.and_then(|p| product(&[p, d, 4]));
    c.expect_remaining(data_bytes.zip(px).and_then(|(a, b)| a.checked_add(b)))?;
    let data = c.f32s(h * w * d)?;
    let coverage = c
        .buf
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(W, format!("coverage byte {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureRaster {
        frame: t,
        height: h,
        width: w,
        dim: d,
        data,
        coverage,
    })
}

// ---- codec params ----

/// Layer manifest (`n_enc`, `n_dec`, then `in, out` per layer) followed by
/// row-major f64 weights and biases, so parameters round-trip exactly.
pub fn encode_codec(params: &CodecParams) -> Result<Vec<u8>> {
    const W: &str = "codec";
    params.check()?;
    let mut out = Vec::new();
    out.extend_from_slice(CODEC_MAGIC);
    put_u32(&mut out, params.encoder.len(), W)?;
    put_u32(&mut out, params.decoder.len(), W)?;
    out.write_f64::<LE>(params.leaky_slope).expect("vec write");
    let layers = params.encoder.iter().chain(&params.decoder);
    for l in layers.clone() {
        put_u32(&mut out, l.input_dim(), W)?;
        put_u32(&mut out, l.output_dim(), W)?;
    }
    for l in layers {
        for &v in l.weight.iter().chain(l.bias.iter()) {
            out.write_f64::<LE>(v).expect("vec write");
        }
    }
    Ok(out)
}

pub fn decode_codec(bytes: &[u8]) -> Result<CodecParams> {
    const W: &str = "codec";
    let mut c = Cursor::new(W, bytes, CODEC_MAGIC)?;
    let ne = c.u32()?;
    let nd = c.u32()?;
    let leaky_slope = c.f64s(1)?[0];
    let n = ne
        .checked_add(nd)
        .ok_or_else(|| Error::format(W, "layer count overflow"))?;
    if n > c.buf.len() / 8 {
        return Err(Error::format(W, "layer manifest longer than the file"));
    }
    let shapes = (0..n).map(|_| Ok((c.u32()?, c.u32()?))).collect::<Result<Vec<_>>>()?;
    let expected = shapes.iter().try_fold(0usize, |acc, &(i, o)| {
        product(&[o, i.checked_add(1)?, 8]).and_then(|b| acc.checked_add(b))
    });
    c.expect_remaining(expected)?;
    let mut layers = Vec::with_capacity(n);
    for &(i, o) in &shapes {
        let weight = Array2::from_shape_vec((o, i), c.f64s(o * i)?).map_err(|e| Error::format(W, e.to_string()))?;
        let bias = Array1::from_vec(c.f64s(o)?);
        layers.push(Layer { weight, bias });
    }
    c.finish()?;
    let decoder = layers.split_off(ne);
    let mut params = CodecParams::from_layers(layers, decoder).map_err(|e| Error::format(W, e.to_string()))?;
    params.leaky_slope = leaky_slope;
    Ok(params)
}

// ---- precomputed region embeddings ----

/// `u32 N, u32 D`, then per record `u32 frame, u16 region_id, u64 pixels,
/// f32[D]`.
pub fn encode_region_embeddings(records: &[RegionEmbeddingRecord], dim: usize) -> Result<Vec<u8>> {
    const W: &str = "region embeddings";
    let mut out = Vec::new();
    out.extend_from_slice(REGION_EMBEDDINGS_MAGIC);
    put_u32(&mut out, records.len(), W)?;
    put_u32(&mut out, dim, W)?;
    for r in records {
        if r.embedding.len() != dim {
            return Err(Error::format(W, "record width disagrees with the header"));
        }
        put_u32(&mut out, r.frame, W)?;
        out.write_u16::<LE>(r.region_id).expect("vec write");
        out.write_u64::<LE>(r.pixel_count).expect("vec write");
        put_f32s(&mut out, r.embedding.iter().copied());
    }
    Ok(out)
}

pub fn decode_region_embeddings(bytes: &[u8]) -> Result<(Vec<RegionEmbeddingRecord>, usize)> {
    const W: &str = "region embeddings";
    let mut c = Cursor::new(W, bytes, REGION_EMBEDDINGS_MAGIC)?;
    let n = c.u32()?;
    let d = c.u32()?;
    let per = d.checked_mul(4).and_then(|x| x.checked_add(14));
    c.expect_remaining(per.and_then(|p| p.checked_mul(n)))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(RegionEmbeddingRecord {
            frame: c.u32()?,
            region_id: c.u16()?,
            pixel_count: c.u64()?,
            embedding: c.f32s(d)?,
        });
    }
    c.finish()?;
    Ok((out, d))
}

// ---- PNM ----

fn pnm_header(bytes: &[u8], magic: &str, what: &'static str) -> Result<(usize, usize, usize)> {
    // four whitespace-separated tokens, comments allowed, one whitespace
    // byte before the raster
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(what, "truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format(what, "non-ascii header"))?);
    }
    if tokens[0] != magic {
        return Err(Error::format(what, format!("bad magic {:?}", tokens[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(what, format!("bad number {s:?}")))
    };
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(Error::format(what, format!("maxval {maxval} is not 255")));
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format(what, "missing separator before raster"));
    }
    Ok((h, w, i + 1))
}

/// Binary PGM with 0/255 pixels.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let (h, w) = mask.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    const W: &str = "pgm";
    let (h, w, start) = pnm_header(bytes, "P5", W)?;
    let body = &bytes[start..];
    if Some(body.len()) != product(&[h, w]) {
        return Err(Error::format(
            W,
            format!("raster is {} bytes, expected {h}x{w}", body.len()),
        ));
    }
    let bits = body
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::format(W, format!("pixel value {other} is not 0 or 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::from_bits(h, w, bits)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM; channels are quantised to 8 bits.
pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    const W: &str = "ppm";
    let (h, w, start) = pnm_header(bytes, "P6", W)?;
    let body = &bytes[start..];
    if Some(body.len()) != product(&[h, w, 3]) {
        return Err(Error::format(
            W,
            format!("raster is {} bytes, expected {h}x{w}x3", body.len()),
        ));
    }
    Ok(RgbImage {
        height: h,
        width: w,
        data: body.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

// ---- scene directory ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCamera {
    pub index: usize,
    /// Row-major 3x3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Parameters of a synthetic embedder, kept so later stages can rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEmbedderSpec {
    pub n_objects: usize,
    pub noise_level: f64,
    pub scale_skew: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    /// `[height, width]`
    pub resolution: [usize; 2],
    #[serde(rename = "T")]
    pub n_frames: usize,
    #[serde(rename = "D_feat")]
    pub feature_dim: usize,
    #[serde(rename = "D_lat")]
    pub latent_dim: usize,
    /// Logical name to path relative to the scene directory.
    pub files: BTreeMap<String, String>,
    pub frames: Vec<FrameCamera>,
    /// Query vocabulary; entry `k` is the class of ground-truth id `k + 1`.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub synthetic: Option<SyntheticEmbedderSpec>,
}

impl FrameCamera {
    pub fn from_frame(f: &Frame) -> Self {
        let r = f.camera.rotation;
        FrameCamera {
            index: f.index,
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: f.camera.translation,
            fx: f.camera.focal.0,
            fy: f.camera.focal.1,
            cx: f.camera.principal.0,
            cy: f.camera.principal.1,
        }
    }

    pub fn camera(&self, resolution: (usize, usize)) -> CameraPose {
        let r = self.rotation;
        CameraPose {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: self.translation,
            focal: (self.fx, self.fy),
            principal: (self.cx, self.cy),
            resolution,
        }
    }
}

pub fn frame_file(dir: &str, t: usize, ext: &str) -> String {
    format!("{dir}/t_{t:04}.{ext}")
}

impl SceneManifest {
    pub fn resolution(&self) -> (usize, usize) {
        (self.resolution[0], self.resolution[1])
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: SceneManifest = serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        if self.frames.len() != self.n_frames {
            return Err(Error::format(
                "manifest",
                format!("T = {} but {} cameras listed", self.n_frames, self.frames.len()),
            ));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = String::from_utf8(read_file(&path)?).map_err(|_| Error::format("manifest", "not utf-8"))?;
        Self::from_json(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("manifest.json"), self.to_json()?.as_bytes())
    }

    pub fn path(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.files
            .get(name)
            .map(|rel| dir.join(rel))
            .ok_or_else(|| Error::InvalidArgument(format!("manifest lists no {name:?} file")))
    }

    /// Frames with cameras; RGB is loaded from `frames/t_XXXX.ppm` when present.
    pub fn frame_sequence(&self, dir: &Path) -> Result<FrameSequence> {
        let res = self.resolution();
        let frames = self
            .frames
            .iter()
            .map(|fc| {
                let path = dir.join(frame_file("frames", fc.index, "ppm"));
                let rgb = if path.exists() {
                    let img = decode_ppm(&read_file(&path)?)?;
                    if (img.height, img.width) != res {
                        return Err(Error::ResolutionMismatch {
                            a: (img.height, img.width),
                            b: res,
                        });
                    }
                    Some(img)
                } else {
                    None
                };
                Ok(Frame {
                    index: fc.index,
                    camera: fc.camera(res),
                    rgb,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameSequence::new(frames))
    }

    pub fn verify_bundle(&self, bundle: &GaussianBundle) -> Result<()> {
        if bundle.latent_dim() != self.latent_dim {
            return Err(Error::format(
                "gaussians",
                format!(
                    "D_lat {} disagrees with manifest {}",
                    bundle.latent_dim(),
                    self.latent_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn verify_bank(&self, bank: &RegionFeatureBank) -> Result<()> {
        if bank.feature_dim != self.feature_dim || bank.latent_dim != self.latent_dim {
            return Err(Error::format(
                "bank",
                format!(
                    "dims ({}, {}) disagree with manifest ({}, {})",
                    bank.feature_dim, bank.latent_dim, self.feature_dim, self.latent_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn verify_region_ids(&self, raster: &RegionIdRaster) -> Result<()> {
        if (raster.height, raster.width) != self.resolution() {
            return Err(Error::ResolutionMismatch {
                a: (raster.height, raster.width),
                b: self.resolution(),
            });
        }
        Ok(())
    }
}

pub fn load_gaussians(path: &Path) -> Result<GaussianBundle> {
    decode_gaussians(&read_file(path)?)
}

pub fn save_gaussians(path: &Path, bundle: &GaussianBundle) -> Result<()> {
    write_file(path, &encode_gaussians(bundle)?)
}

pub fn load_bank(path: &Path) -> Result<RegionFeatureBank> {
    decode_bank(&read_file(path)?)
}

pub fn save_bank(path: &Path, bank: &RegionFeatureBank) -> Result<()> {
    write_file(path, &encode_bank(bank)?)
}

pub fn load_codec(path: &Path) -> Result<CodecParams> {
    decode_codec(&read_file(path)?)
}

pub fn save_codec(path: &Path, params: &CodecParams) -> Result<()> {
    write_file(path, &encode_codec(params)?)
}

/// Region-id rasters `dir/sub/t_XXXX.rid` for every frame in the manifest.
pub fn load_region_id_dir(dir: &Path, sub: &str, manifest: &SceneManifest) -> Result<Vec<RegionIdRaster>> {
    manifest
        .frames
        .iter()
        .map(|fc| {
            let r = decode_region_ids(&read_file(&dir.join(frame_file(sub, fc.index, "rid")))?, fc.index)?;
            manifest.verify_region_ids(&r)?;
            Ok(r)
        })
        .collect()
}

pub fn save_region_id_dir(dir: &Path, sub: &str, rasters: &[RegionIdRaster]) -> Result<()> {
    for r in rasters {
        write_file(&dir.join(frame_file(sub, r.frame, "rid")), &encode_region_ids(r)?)?;
    }
    Ok(())
}

/// Renders a text report into memory, then writes it to `path`.
pub fn write_all(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecParams;

    fn bundle(labels: bool) -> GaussianBundle {
        let mut b = GaussianBundle::empty(2);
        for i in 0..3 {
            let f = i as f64;
            b.push(
                [f, 0.5, -1.25],
                [1.0, 0.0, 0.0, 2.0, 0.0, 0.5],
                [0.25, 0.5, 0.75],
                0.5,
                &[f, -f],
                labels.then_some(i),
            )
            .unwrap();
        }
        b
    }

    #[test]
    fn gaussians_roundtrip_and_layout() {
        for labels in [false, true] {
            let b = bundle(labels);
            let bytes = encode_gaussians(&b).unwrap();
            assert_eq!(&bytes[..4], b"LGF1");
            assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
            assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
            assert_eq!(bytes[12], labels as u8);
            assert_eq!(bytes.len(), 13 + 3 * (13 + 2) * 4 + if labels { 12 } else { 0 });
            // first position component
            assert_eq!(f32::from_le_bytes(bytes[13..17].try_into().unwrap()), 0.0);
            assert_eq!(decode_gaussians(&bytes).unwrap(), b);
        }
        let empty = GaussianBundle::empty(3);
        assert_eq!(decode_gaussians(&encode_gaussians(&empty).unwrap()).unwrap(), empty);
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let bytes = encode_gaussians(&bundle(true)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_gaussians(&bad), Err(Error::Format { .. })));
        assert!(decode_gaussians(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_gaussians(&long).is_err());
        let mut flag = bytes.clone();
        flag[12] = 7;
        assert!(decode_gaussians(&flag).is_err());
        assert!(decode_gaussians(b"LG").is_err());
    }

    #[test]
    fn huge_header_counts_do_not_allocate() {
        let mut bytes = b"LGF1".to_vec();
        bytes.extend(u32::MAX.to_le_bytes());
        bytes.extend(u32::MAX.to_le_bytes());
        bytes.push(1);
        assert!(decode_gaussians(&bytes).is_err());
        let mut codec = b"CDC1".to_vec();
        codec.extend(u32::MAX.to_le_bytes());
        codec.extend(u32::MAX.to_le_bytes());
        codec.extend(0.01f64.to_le_bytes());
        assert!(decode_codec(&codec).is_err());
    }

    #[test]
    fn codec_roundtrip_is_exact() {
        let p = CodecParams::init(6, &[4, 2], &[4, 6], 1).unwrap();
        let bytes = encode_codec(&p).unwrap();
        assert_eq!(decode_codec(&bytes).unwrap(), p);
        assert!(decode_codec(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn pgm_bytes() {
        let m = Mask::from_pixels(2, 3, &[(0, 1), (1, 2)]);
        let bytes = encode_pgm(&m);
        assert_eq!(bytes, b"P5\n3 2\n255\n\x00\xff\x00\x00\x00\xff".to_vec());
        assert_eq!(decode_pgm(&bytes).unwrap(), m);
        let with_comment = b"P5\n# note\n3 2\n255\n\x00\xff\x00\x00\x00\xff";
        assert_eq!(decode_pgm(with_comment).unwrap(), m);
        assert!(decode_pgm(b"P5\n3 2\n255\n\x00\x07\x00\x00\x00\xff").is_err());
        assert!(decode_pgm(b"P5\n3 2\n15\n\x00\x0f\x00\x00\x00\x0f").is_err());
        assert!(decode_pgm(b"P6\n3 2\n255\n\x00\xff\x00\x00\x00\xff").is_err());
    }

    #[test]
    fn manifest_json_keys() {
        let m = SceneManifest {
            resolution: [4, 5],
            n_frames: 0,
            feature_dim: 8,
            latent_dim: 3,
            files: BTreeMap::new(),
            frames: vec![],
            classes: vec![],
            synthetic: None,
        };
        let json = m.to_json().unwrap();
        assert!(json.contains("\"T\"") && json.contains("\"D_feat\"") && json.contains("\"D_lat\""));
        assert_eq!(SceneManifest::from_json(&json).unwrap(), m);
        let bad = json.replace("\"T\": 0", "\"T\": 2");
        assert!(SceneManifest::from_json(&bad).is_err());
    }
}
