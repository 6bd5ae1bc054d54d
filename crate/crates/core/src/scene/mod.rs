//! Deterministic synthetic infrared scenes: smooth clutter, white sensor
//! noise and Gaussian point-spread targets with sub-pixel centers.
//!
//! Every random draw goes through [`SplitMix64`] in a fixed order, so a
//! dataset is a pure function of its master seed and knobs:
//!
//! 1. `scene_seed = splitmix64(master_seed + index)`
//! 2. a parameter stream seeded with `scene_seed` draws, in order: the
//!    clutter seed (one `u64`), the empty-scene coin, the target count, the
//!    noise sigma, then per target its PSF sigma, SNR and rejection-sampled
//!    center (x then y per attempt)
//! 3. a clutter stream seeded with the clutter seed draws the `W·H`
//!    white-noise field followed by the `W·H` sensor-noise samples, both
//!    row-major.

mod io;

pub use io::{
    load_dataset, read_annotations, read_pgm, write_annotations, write_dataset, write_pgm, Dataset,
    Manifest, ManifestImage, Sample, Split,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor, TensorF};
use crate::rng::{splitmix64, SplitMix64};

/// Largest PSF sigma still treated as a small target.
pub const MAX_PSF_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub x: f64,
    pub y: f64,
    /// Peak intensity above the local background.
    pub amplitude: f64,
    pub psf_sigma: f64,
}

impl TargetSpec {
    fn validate(&self) -> Result<()> {
        if !(self.psf_sigma > 0.0 && self.psf_sigma <= MAX_PSF_SIGMA) {
            return Err(Error::InvalidArgument(format!(
                "psf_sigma {} outside (0, {MAX_PSF_SIGMA}]",
                self.psf_sigma
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target amplitude {} must be > 0",
                self.amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub targets: Vec<TargetSpec>,
    /// Box-blur radius of the low-frequency clutter field.
    pub clutter_scale: usize,
    /// Gain applied to the blurred field before clamping into the band.
    pub clutter_contrast: f64,
    pub background_lo: f64,
    pub background_hi: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// `1×H×W`, values in `[0, 1]`.
    pub image: TensorF,
    pub centroids: Vec<(f64, f64)>,
    pub spec: SceneSpec,
}

impl Scene {
    pub fn into_sample(self, id: impl Into<String>) -> Sample {
        Sample {
            id: id.into(),
            image: self.image,
            centroids: self.centroids,
        }
    }
}

/// Adds a truncated isotropic Gaussian PSF to the last two axes of `canvas`.
pub fn render_target<T: Scalar>(canvas: &mut Tensor<T>, t: &TargetSpec) -> Result<()> {
    let (h, w) = plane_dims(canvas)?;
    t.validate()?;
    if !(t.x >= 0.0 && t.x <= (w - 1) as f64 && t.y >= 0.0 && t.y <= (h - 1) as f64) {
        return Err(Error::InvalidArgument(format!(
            "target center ({}, {}) outside {w}x{h} canvas",
            t.x, t.y
        )));
    }
    let radius = 4.0 * t.psf_sigma;
    let inv = 1.0 / (2.0 * t.psf_sigma * t.psf_sigma);
    let y0 = (t.y - radius).floor().max(0.0) as usize;
    let y1 = ((t.y + radius).ceil() as usize).min(h - 1);
    let x0 = (t.x - radius).floor().max(0.0) as usize;
    let x1 = ((t.x + radius).ceil() as usize).min(w - 1);
    let data = canvas.data_mut();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - t.x).powi(2) + (y as f64 - t.y).powi(2);
            if d2 <= radius * radius {
                let v = data[y * w + x].to_f64() + t.amplitude * (-d2 * inv).exp();
                data[y * w + x] = T::from_f64(v);
            }
        }
    }
    Ok(())
}

fn plane_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::Shape(format!("expected a single image plane, got {:?}", t.shape()))),
    }
}

/// One pass of a clamp-to-edge box filter along rows then columns.
fn box_blur(field: &mut [f64], w: usize, h: usize, radius: usize) {
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -(radius as isize)..=radius as isize {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                s += field[y * w + xx];
            }
            tmp[y * w + x] = s * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -(radius as isize)..=radius as isize {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            field[y * w + x] = s * norm;
        }
    }
}

const BLUR_PASSES: usize = 3;

/// Background clutter plus sensor noise as a `1×H×W` field (not clipped).
pub fn render_clutter(spec: &SceneSpec) -> Result<Tensor<f64>> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidArgument("scene extents must be >= 1".into()));
    }
    if !(spec.background_lo <= spec.background_hi) || spec.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(
            "background band must be ordered and noise_sigma >= 0".into(),
        ));
    }
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::new(spec.seed);
    let mut field: Vec<f64> = (0..w * h).map(|_| rng.normal()).collect();
    if spec.clutter_scale > 0 {
        for _ in 0..BLUR_PASSES {
            box_blur(&mut field, w, h, spec.clutter_scale);
        }
    }
    let mid = 0.5 * (spec.background_lo + spec.background_hi);
    let half = 0.5 * (spec.background_hi - spec.background_lo);
    for v in &mut field {
        let noise = rng.normal() * spec.noise_sigma;
        *v = mid + half * (*v * spec.clutter_contrast).clamp(-1.0, 1.0) + noise;
    }
    Tensor::from_vec(&[1, h, w], field)
}

fn check_layout(spec: &SceneSpec) -> Result<()> {
    for t in &spec.targets {
        t.validate()?;
        let m = 3.0 * t.psf_sigma;
        let (w, h) = (spec.width as f64, spec.height as f64);
        if t.x < m || t.y < m || t.x > w - 1.0 - m || t.y > h - 1.0 - m {
            return Err(Error::InvalidArgument(format!(
                "target ({:.3}, {:.3}) closer than 3·psf_sigma to the image border",
                t.x, t.y
            )));
        }
    }
    let max_sigma = spec.targets.iter().map(|t| t.psf_sigma).fold(0.0, f64::max);
    let min_sep = 6.0 * max_sigma;
    for (i, a) in spec.targets.iter().enumerate() {
        for b in &spec.targets[i + 1..] {
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
            if d < min_sep {
                return Err(Error::InvalidArgument(format!(
                    "targets ({:.2}, {:.2}) and ({:.2}, {:.2}) are {d:.2} px apart, below {min_sep:.2}",
                    a.x, a.y, b.x, b.y
                )));
            }
        }
    }
    Ok(())
}

/// Clutter + targets, clipped to `[0, 1]`. Centroids are copied from the spec.
pub fn compose_scene(spec: &SceneSpec) -> Result<Scene> {
    check_layout(spec)?;
    let mut canvas = render_clutter(spec)?;
    for t in &spec.targets {
        render_target(&mut canvas, t)?;
    }
    let image = Tensor::from_vec(
        canvas.shape(),
        canvas.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
    )?;
    Ok(Scene {
        image,
        centroids: spec.targets.iter().map(|t| (t.x, t.y)).collect(),
        spec: spec.clone(),
    })
}

/// Difficulty and layout knobs for [`gen_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneKnobs {
    pub width: usize,
    pub height: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Probability that a scene holds no targets at all.
    pub empty_fraction: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub psf_min: f64,
    pub psf_max: f64,
    pub clutter_scale: usize,
    pub clutter_contrast: f64,
    pub background_lo: f64,
    pub background_hi: f64,
    /// Minimum center distance; raised to `6·psf_max` when smaller.
    pub min_separation: f64,
    /// Minimum border distance; raised to `3·psf` per target when smaller.
    pub margin: f64,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_targets: 1,
            max_targets: 3,
            empty_fraction: 0.1,
            snr_min: 5.0,
            snr_max: 15.0,
            noise_min: 0.02,
            noise_max: 0.04,
            psf_min: 0.7,
            psf_max: 1.5,
            clutter_scale: 6,
            clutter_contrast: 6.0,
            background_lo: 0.2,
            background_hi: 0.6,
            min_separation: 16.0,
            margin: 4.0,
        }
    }
}

impl SceneKnobs {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 8 || self.height < 8 {
            return bad("scene width/height must be >= 8");
        }
        if self.min_targets > self.max_targets {
            return bad("min_targets must not exceed max_targets");
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return bad("empty_fraction must lie in [0, 1]");
        }
        if !(self.snr_min > 0.0 && self.snr_min <= self.snr_max) {
            return bad("snr range must be positive and ordered");
        }
        if !(self.noise_min > 0.0 && self.noise_min <= self.noise_max) {
            return bad("noise range must be positive and ordered");
        }
        if !(self.psf_min > 0.0 && self.psf_min <= self.psf_max && self.psf_max <= MAX_PSF_SIGMA) {
            return bad("psf range must lie in (0, 3] and be ordered");
        }
        if !(self.background_lo <= self.background_hi) {
            return bad("background band must be ordered");
        }
        Ok(())
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Seed of scene `index` in a dataset with `master_seed`.
pub fn scene_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(master_seed.wrapping_add(index as u64))
}

/// Draws the spec of scene `index`; independent of every other index.
pub fn sample_scene_spec(master_seed: u64, index: usize, knobs: &SceneKnobs) -> Result<SceneSpec> {
    knobs.validate()?;
    let mut rng = SplitMix64::new(scene_seed(master_seed, index));
    let clutter_seed = rng.next_u64();
    let empty = rng.uniform() < knobs.empty_fraction;
    let count = rng.int_range(knobs.min_targets, knobs.max_targets);
    let count = if empty { 0 } else { count };
    let noise_sigma = rng.uniform_range(knobs.noise_min, knobs.noise_max);
    let min_sep = knobs.min_separation.max(6.0 * knobs.psf_max);
    let (w, h) = (knobs.width as f64, knobs.height as f64);
    let mut targets: Vec<TargetSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let psf_sigma = rng.uniform_range(knobs.psf_min, knobs.psf_max);
        let snr = rng.uniform_range(knobs.snr_min, knobs.snr_max);
        let margin = knobs.margin.max(3.0 * psf_sigma);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.uniform_range(margin, w - 1.0 - margin);
            let y = rng.uniform_range(margin, h - 1.0 - margin);
            let clear = targets
                .iter()
                .all(|t| ((t.x - x).powi(2) + (t.y - y).powi(2)).sqrt() >= min_sep);
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else {
            return Err(Error::Config(format!(
                "could not place {count} targets {min_sep} px apart in a {}x{} scene",
                knobs.width, knobs.height
            )));
        };
        targets.push(TargetSpec {
            x,
            y,
            amplitude: snr * noise_sigma,
            psf_sigma,
        });
    }
    Ok(SceneSpec {
        width: knobs.width,
        height: knobs.height,
        targets,
        clutter_scale: knobs.clutter_scale,
        clutter_contrast: knobs.clutter_contrast,
        background_lo: knobs.background_lo,
        background_hi: knobs.background_hi,
        noise_sigma,
        seed: clutter_seed,
    })
}

pub fn generate_scene(master_seed: u64, index: usize, knobs: &SceneKnobs) -> Result<Scene> {
    compose_scene(&sample_scene_spec(master_seed, index, knobs)?)
}

/// Scenes `0..count` under `master_seed`.
pub fn gen_dataset(count: usize, master_seed: u64, knobs: &SceneKnobs) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    (0..count).map(|i| generate_scene(master_seed, i, knobs)).collect()
}
