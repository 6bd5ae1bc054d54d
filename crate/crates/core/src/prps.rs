//! Point-response supervision: turns single-point annotations into dense
//! response maps on the stride-`s` lattice.
//!
//! Per target the annotation is snapped to the brightest pixel nearby, mapped
//! to the lattice, and a unit-peak truncated Gaussian centered there is
//! modulated by the min-max normalized image patch around the snapped peak.
//! Targets are merged by element-wise maximum.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tensor, TensorF};
use crate::scene::write_pgm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    /// Gaussian prior modulated by local image contrast.
    Prps,
    /// A single 1.0 at the mapped lattice cell.
    Impulse,
    /// Unmodulated truncated Gaussian.
    Gaussian,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] = [Self::Prps, Self::Impulse, Self::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prps => "prps",
            Self::Impulse => "impulse",
            Self::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prps" => Ok(Self::Prps),
            "impulse" => Ok(Self::Impulse),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(Error::Config(format!(
                "unknown supervision mode {s:?} (expected prps, impulse or gaussian)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrpsConfig {
    /// Gaussian spread in lattice cells.
    pub sigma: f64,
    /// Support half-width in lattice cells; tied to `3·sigma`.
    pub radius: usize,
    pub stride: usize,
    pub mode: SupervisionMode,
    /// Peak-search half-width in original-image pixels.
    pub refine_radius: usize,
    /// Lets `radius` differ from `3·sigma` for scale ablations.
    pub allow_radius_override: bool,
}

impl Default for PrpsConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            radius: 6,
            stride: 4,
            mode: SupervisionMode::Prps,
            refine_radius: 4,
            allow_radius_override: false,
        }
    }
}

impl PrpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("prps sigma {} must be > 0", self.sigma)));
        }
        if self.stride == 0 {
            return Err(Error::Config("prps stride must be >= 1".into()));
        }
        if !self.allow_radius_override && (self.radius as f64 - 3.0 * self.sigma).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "prps radius {} must equal 3·sigma = {} (set the radius override flag for ablations)",
                self.radius,
                3.0 * self.sigma
            )));
        }
        Ok(())
    }
}

/// A `H′×W′` grid of per-cell target confidence on the stride-`s` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    /// Shape `[H′, W′]`.
    pub grid: TensorF,
    pub stride: usize,
}

impl ResponseMap {
    pub fn zeros(height: usize, width: usize, stride: usize) -> Self {
        Self {
            grid: TensorF::zeros(&[height, width]),
            stride,
        }
    }

    /// Wraps a `[H′, W′]`, `[1, H′, W′]` or `[1, 1, H′, W′]` tensor.
    pub fn from_tensor(t: TensorF, stride: usize) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
            _ => return Err(Error::Shape(format!("not a single response map: {:?}", t.shape()))),
        };
        Ok(Self {
            grid: t.reshape(&[h, w])?,
            stride,
        })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Value at column `u`, row `v`.
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.grid.data()[v * self.width() + u]
    }

    pub fn values(&self) -> &[f32] {
        self.grid.data()
    }
}

/// Lattice size `⌊H/s⌋ × ⌊W/s⌋` for an image.
pub fn lattice_size(height: usize, width: usize, stride: usize) -> (usize, usize) {
    (height / stride, width / stride)
}

/// `⌊(x/s, y/s) + 0.5⌋`, clamped into the lattice. Returns `(u, v)`.
pub fn map_centroid_to_lattice(x: f64, y: f64, stride: usize, lattice_w: usize, lattice_h: usize) -> (usize, usize) {
    let s = stride as f64;
    let snap = |p: f64, n: usize| ((p / s + 0.5).floor().max(0.0) as usize).min(n.saturating_sub(1));
    (snap(x, lattice_w), snap(y, lattice_h))
}

fn image_plane(image: &TensorF) -> Result<(usize, usize, &[f32])> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w, image.data())),
        _ => Err(Error::Shape(format!("expected a single image plane, got {:?}", image.shape()))),
    }
}

/// Brightest pixel in the `(2·radius+1)²` window around `round(x, y)`,
/// clipped to the image. Ties go to the first cell in row-major order.
pub fn refine_to_peak(image: &TensorF, x: f64, y: f64, radius: usize) -> Result<(usize, usize)> {
    let (h, w, data) = image_plane(image)?;
    let cx = (x.round().max(0.0) as usize).min(w - 1);
    let cy = (y.round().max(0.0) as usize).min(h - 1);
    let mut best = (cx.saturating_sub(radius), cy.saturating_sub(radius));
    let mut best_v = f32::NEG_INFINITY;
    for yy in cy.saturating_sub(radius)..=(cy + radius).min(h - 1) {
        for xx in cx.saturating_sub(radius)..=(cx + radius).min(w - 1) {
            let v = data[yy * w + xx];
            if v > best_v {
                best_v = v;
                best = (xx, yy);
            }
        }
    }
    Ok(best)
}

/// Unit-peak, unnormalized Gaussian on a `(2r+1)²` grid centered at `(r, r)`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Tensor<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian sigma {sigma} must be > 0")));
    }
    let n = 2 * radius + 1;
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(Tensor::from_fn(&[n, n], |i| {
        let (v, u) = ((i / n) as f64 - radius as f64, (i % n) as f64 - radius as f64);
        (-(u * u + v * v) * inv).exp()
    }))
}

/// Min-max normalized `(2r+1)²` image window centered at `(x, y)`, with
/// clamp-to-edge borders. `None` when the window is constant.
fn contrast_patch(image: &TensorF, x: usize, y: usize, radius: usize) -> Result<Option<Tensor<f64>>> {
    let (h, w, data) = image_plane(image)?;
    let n = 2 * radius + 1;
    let r = radius as isize;
    let raw = Tensor::<f64>::from_fn(&[n, n], |i| {
        let yy = (y as isize + (i / n) as isize - r).clamp(0, h as isize - 1) as usize;
        let xx = (x as isize + (i % n) as isize - r).clamp(0, w as isize - 1) as usize;
        data[yy * w + xx] as f64
    });
    let (lo, hi) = (raw.min_value(), raw.max_value());
    if hi <= lo {
        return Ok(None);
    }
    Ok(Some(raw.map(|v| (v - lo) / (hi - lo))))
}

/// Contrast-normalized patch; a constant window yields all ones.
pub fn extract_contrast_patch(image: &TensorF, x: usize, y: usize, radius: usize) -> Result<Tensor<f64>> {
    let n = 2 * radius + 1;
    Ok(contrast_patch(image, x, y, radius)?.unwrap_or_else(|| Tensor::full(&[n, n], 1.0)))
}

/// `minmax_norm(G ⊙ C)`; an all-constant product maps to all zeros.
pub fn compose_response(gaussian: &Tensor<f64>, contrast: &Tensor<f64>) -> Result<Tensor<f64>> {
    gaussian.check_same_shape(contrast)?;
    let prod = Tensor::from_fn(gaussian.shape(), |i| gaussian.data()[i] * contrast.data()[i]);
    let (lo, hi) = (prod.min_value(), prod.max_value());
    if hi <= lo {
        return Ok(Tensor::zeros(gaussian.shape()));
    }
    Ok(prod.map(|v| (v - lo) / (hi - lo)))
}

/// Stamps each square response at its lattice center `(u, v)`, cropping at
/// the borders, and keeps the element-wise maximum.
pub fn aggregate_targets(
    responses: &[(Tensor<f64>, (usize, usize))],
    height: usize,
    width: usize,
    stride: usize,
) -> Result<ResponseMap> {
    let mut acc = vec![0.0f64; height * width];
    for (resp, (u, v)) in responses {
        let n = resp.shape()[0];
        if resp.shape() != [n, n] || n % 2 == 0 {
            return Err(Error::Shape(format!("response must be odd-sized square, got {:?}", resp.shape())));
        }
        if *u >= width || *v >= height {
            return Err(Error::InvalidArgument(format!(
                "lattice center ({u}, {v}) outside {width}x{height}"
            )));
        }
        let r = (n / 2) as isize;
        for dy in 0..n {
            let yy = *v as isize + dy as isize - r;
            if yy < 0 || yy >= height as isize {
                continue;
            }
            for dx in 0..n {
                let xx = *u as isize + dx as isize - r;
                if xx < 0 || xx >= width as isize {
                    continue;
                }
                let cell = &mut acc[yy as usize * width + xx as usize];
                *cell = cell.max(resp.data()[dy * n + dx]);
            }
        }
    }
    Ok(ResponseMap {
        grid: TensorF::from_vec(&[height, width], acc.into_iter().map(|v| v as f32).collect())?,
        stride,
    })
}

/// Per-target responses and their lattice centers, before aggregation.
pub fn target_responses(
    image: &TensorF,
    centroids: &[(f64, f64)],
    cfg: &PrpsConfig,
) -> Result<Vec<(Tensor<f64>, (usize, usize))>> {
    cfg.validate()?;
    let (h, w, _) = image_plane(image)?;
    let (lh, lw) = lattice_size(h, w, cfg.stride);
    if lh == 0 || lw == 0 {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than stride {}", cfg.stride)));
    }
    let gauss = gaussian_kernel(cfg.sigma, cfg.radius)?;
    centroids
        .iter()
        .map(|&(x, y)| {
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                return Err(Error::InvalidArgument(format!("annotation ({x}, {y}) outside {w}x{h} image")));
            }
            Ok(match cfg.mode {
                SupervisionMode::Impulse => {
                    (Tensor::full(&[1, 1], 1.0), map_centroid_to_lattice(x, y, cfg.stride, lw, lh))
                }
                SupervisionMode::Gaussian => (gauss.clone(), map_centroid_to_lattice(x, y, cfg.stride, lw, lh)),
                SupervisionMode::Prps => {
                    let (px, py) = refine_to_peak(image, x, y, cfg.refine_radius)?;
                    let center = map_centroid_to_lattice(px as f64, py as f64, cfg.stride, lw, lh);
                    let resp = match contrast_patch(image, px, py, cfg.radius)? {
                        Some(c) => compose_response(&gauss, &c)?,
                        // Flat window: fall back to the bare prior.
                        None => gauss.clone(),
                    };
                    (resp, center)
                }
            })
        })
        .collect()
}

/// Full supervision map for one annotated image.
pub fn build_supervision_map(image: &TensorF, centroids: &[(f64, f64)], cfg: &PrpsConfig) -> Result<ResponseMap> {
    let responses = target_responses(image, centroids, cfg)?;
    let (h, w, _) = image_plane(image)?;
    let (lh, lw) = lattice_size(h, w, cfg.stride);
    aggregate_targets(&responses, lh, lw, cfg.stride)
}

const RAW_MAGIC: &[u8; 8] = b"PRPSMAP0";

/// Exact dump: `PRPSMAP0`, `H′` and `W′` as little-endian u32, then f32 LE values.
pub fn write_map_raw(path: &Path, map: &ResponseMap) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * map.values().len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(map.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_map_raw(path: &Path, stride: usize) -> Result<ResponseMap> {
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(corrupt("missing PRPSMAP0 header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if h == 0 || w == 0 || bytes.len() != 16 + 4 * h * w {
        return Err(corrupt("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ResponseMap {
        grid: TensorF::from_vec(&[h, w], data)?,
        stride,
    })
}

/// 16-bit PGM preview, `round(65535·p)`.
pub fn write_map_pgm(path: &Path, map: &ResponseMap) -> Result<()> {
    write_pgm(path, &map.grid)
}
