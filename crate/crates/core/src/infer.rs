//! Peak extraction: response map → sub-pixel detections in image coordinates.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrpe::HrpeF;
use crate::nn::{maxpool2d_3x3_s1, TensorF};
use crate::prps::ResponseMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Raw response must exceed this to become a detection.
    pub tau: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tau: 0.35,
            max_detections: 128,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} must be in [0, 1)", self.tau)));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    /// Peak response clamped to [0, 1].
    pub score: f64,
    pub u: usize,
    pub v: usize,
}

/// Keeps cells equal to their 3×3 neighbourhood maximum, zeroing the rest.
/// Plateaus survive in full.
pub fn nms_local_max(map: &ResponseMap) -> Result<ResponseMap> {
    let (h, w) = (map.height(), map.width());
    let pooled = maxpool2d_3x3_s1(&map.grid.clone().reshape(&[1, 1, h, w])?)?;
    let kept = TensorF::from_fn(&[h, w], |i| {
        let v = map.values()[i];
        if v == pooled.data()[i] {
            v
        } else {
            0.0
        }
    });
    Ok(ResponseMap {
        grid: kept,
        stride: map.stride,
    })
}

/// `(u, v, raw score)` of cells above `tau`, best first, row-major on ties.
pub fn select_candidates(suppressed: &ResponseMap, cfg: &InferConfig) -> Vec<(usize, usize, f32)> {
    let w = suppressed.width();
    let mut out: Vec<(usize, usize, f32)> = suppressed
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v as f64 > cfg.tau)
        .map(|(i, &v)| (i % w, i / w, v))
        .collect();
    // Stable sort keeps row-major order among equal scores.
    out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
    out.truncate(cfg.max_detections);
    out
}

fn sign(d: f32) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1/s)·sign` of the central difference on the pre-suppression map; zero
/// on the map border.
pub fn subpixel_refine(pre_nms: &ResponseMap, u: usize, v: usize) -> (f64, f64) {
    let (h, w) = (pre_nms.height(), pre_nms.width());
    let step = 1.0 / pre_nms.stride as f64;
    let du = if u == 0 || u + 1 >= w {
        0.0
    } else {
        step * sign(pre_nms.at(u + 1, v) - pre_nms.at(u - 1, v))
    };
    let dv = if v == 0 || v + 1 >= h {
        0.0
    } else {
        step * sign(pre_nms.at(u, v + 1) - pre_nms.at(u, v - 1))
    };
    (du, dv)
}

/// Row-major 2×3 affine map `[x', y'] = M·[x, y, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    /// Image pixels → lattice cells for stride `s` with no letterboxing.
    pub fn to_lattice(stride: usize) -> Self {
        let k = 1.0 / stride as f64;
        Self([[k, 0.0, 0.0], [0.0, k, 0.0]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn inverse(&self) -> Result<Self> {
        let [[a, b, c], [d, e, f]] = self.0;
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return Err(Error::InvalidArgument(format!("singular transform (det {det})")));
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Self([[ia, ib, -(ia * c + ib * f)], [id, ie, -(id * c + ie * f)]]))
    }
}

/// Lattice position → image coordinates through the inverse of the
/// image-to-lattice transform.
pub fn back_map(u: f64, v: f64, transform: &Affine) -> Result<(f64, f64)> {
    Ok(transform.inverse()?.apply(u, v))
}

/// Peak extraction on an already computed response map.
pub fn detect_from_map(map: &ResponseMap, transform: &Affine, cfg: &InferConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let inv = transform.inverse()?;
    let suppressed = nms_local_max(map)?;
    Ok(select_candidates(&suppressed, cfg)
        .into_iter()
        .map(|(u, v, raw)| {
            let (du, dv) = subpixel_refine(map, u, v);
            let (x, y) = inv.apply(u as f64 + du, v as f64 + dv);
            Detection {
                x,
                y,
                score: (raw as f64).clamp(0.0, 1.0),
                u,
                v,
            }
        })
        .collect())
}

/// One eval-mode forward pass followed by peak extraction.
pub fn detect(model: &HrpeF, image: &TensorF, cfg: &InferConfig) -> Result<Vec<Detection>> {
    let map = model.predict(image)?;
    detect_from_map(&map, &Affine::to_lattice(model.config().stride), cfg)
}

/// `image_id,x,y,score`, grouped by image id and best score first.
pub fn write_detections<'a>(path: &Path, results: impl IntoIterator<Item = (&'a str, &'a [Detection])>) -> Result<()> {
    let mut sorted: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for (id, dets) in results {
        sorted.entry(id).or_default().extend_from_slice(dets);
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "image_id,x,y,score")?;
    for (id, mut dets) in sorted {
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        for d in dets {
            writeln!(out, "{id},{:.6},{:.6},{:.6}", d.x, d.y, d.score)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct DetRow {
    image_id: String,
    x: f64,
    y: f64,
    score: f64,
}

/// Reads a detections file back as `image_id → [(x, y, score)]`.
pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64, f64)>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["image_id", "x", "y", "score"] {
        return Err(Error::Data(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let r: DetRow = row?;
        out.entry(r.image_id).or_default().push((r.x, r.y, r.score));
    }
    Ok(out)
}
