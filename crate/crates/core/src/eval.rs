//! Centroid-level evaluation: one-to-one δ-matching, P/R/F1 and false-alarm rate.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::read_detections;
use crate::nn::TensorF;
use crate::scene::{read_annotations, Manifest, Split};

/// Optimal assignment of one image's predictions to its ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ImageMatch {
    /// `(pred index, gt index, distance)`, ordered by prediction index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub num_preds: usize,
    pub num_gts: usize,
}

impl ImageMatch {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.num_preds - self.pairs.len()
    }

    pub fn fn_(&self) -> usize {
        self.num_gts - self.pairs.len()
    }
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns the column assigned to each row.
fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    // Shortest augmenting paths with dual potentials; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

/// One-to-one matching within `delta` pixels (inclusive) that maximizes
/// the number of matches, then minimizes their total distance.
pub fn match_centroids(preds: &[(f64, f64)], gts: &[(f64, f64)], delta: f64) -> Result<ImageMatch> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("match radius {delta} must be > 0")));
    }
    let (np, ng) = (preds.len(), gts.len());
    let mut out = ImageMatch { pairs: Vec::new(), num_preds: np, num_gts: ng };
    if np == 0 || ng == 0 {
        return Ok(out);
    }
    let n = np.max(ng);
    // Any unmatched slot costs more than every feasible total distance,
    // so cardinality dominates.
    let big = delta * (n as f64 + 1.0) + 1.0;
    let mut cost = vec![big; n * n];
    let mut dist = vec![f64::INFINITY; np * ng];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d2 = (p.0 - g.0).powi(2) + (p.1 - g.1).powi(2);
            if d2 <= delta * delta {
                dist[i * ng + j] = d2.sqrt();
                cost[i * n + j] = d2.sqrt();
            }
        }
    }
    for (i, j) in hungarian(n, &cost).into_iter().enumerate() {
        if i < np && j < ng && dist[i * ng + j].is_finite() {
            out.pairs.push((i, j, dist[i * ng + j]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False alarms per pixel over the whole set.
    pub fa: f64,
    /// `fa` in units of 1e-8.
    pub fa_1e8: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_images: usize,
    pub total_pixels: u64,
    pub config: BTreeMap<String, String>,
    pub per_image: Vec<ImageReport>,
}

/// Aggregates per-image matchings. Each entry is `(id, match, (width, height))`.
pub fn compute_metrics(per_image: &[(String, ImageMatch, (usize, usize))]) -> Result<MatchReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let (mut tp, mut fp, mut fn_, mut pixels) = (0, 0, 0, 0u64);
    let mut rows = Vec::with_capacity(per_image.len());
    for (id, m, (w, h)) in per_image {
        tp += m.tp();
        fp += m.fp();
        fn_ += m.fn_();
        pixels += (*w as u64) * (*h as u64);
        rows.push(ImageReport {
            image_id: id.clone(),
            width: *w,
            height: *h,
            tp: m.tp(),
            fp: m.fp(),
            fn_: m.fn_(),
        });
    }
    let precision = if tp + fp == 0 {
        if fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let fa = if pixels == 0 { 0.0 } else { fp as f64 / pixels as f64 };
    Ok(MatchReport {
        precision,
        recall,
        f1,
        fa,
        fa_1e8: fa * 1e8,
        tp,
        fp,
        fn_,
        num_images: rows.len(),
        total_pixels: pixels,
        config: BTreeMap::new(),
        per_image: rows,
    })
}

/// 8-connected foreground components (non-zero pixels) and their centroids,
/// ordered by each component's first pixel in raster order.
pub fn mask_to_centroids(mask: &TensorF) -> Result<Vec<(f64, f64)>> {
    let (h, w) = match *mask.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
        _ => return Err(Error::Shape(format!("mask must be a single plane, got {:?}", mask.shape()))),
    };
    let fg = |i: usize| mask.data()[i] != 0.0;
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    fn union(p: &mut [usize], a: usize, b: usize) {
        let (ra, rb) = (find(p, a), find(p, b));
        // Keep the earlier raster index as root.
        if ra < rb {
            p[rb] = ra;
        } else if rb < ra {
            p[ra] = rb;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg(i) {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            if x > 0 && fg(i - 1) {
                union(&mut parent, i, i - 1);
            }
            if y > 0 {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if fg(i - w - x + nx) {
                        union(&mut parent, i, (y - 1) * w + nx);
                    }
                }
            }
        }
    }
    let mut acc: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for i in (0..h * w).filter(|&i| fg(i)) {
        let e = acc.entry(find(&mut parent, i)).or_default();
        e.0 += (i % w) as f64;
        e.1 += (i / w) as f64;
        e.2 += 1.0;
    }
    Ok(acc.into_values().map(|(sx, sy, n)| (sx / n, sy / n)).collect())
}

/// Evaluates a detections CSV against ground truth for every `split` image
/// listed in the manifest. Images absent from either file have no points.
pub fn evaluate_dataset(
    pred_csv: &Path,
    gt_csv: &Path,
    manifest: &Manifest,
    split: Split,
    delta: f64,
) -> Result<MatchReport> {
    let preds = read_detections(pred_csv)?;
    let gts = read_annotations(gt_csv)?;
    let images: Vec<_> = manifest.images_in(split).collect();
    let known: HashSet<&str> = images.iter().map(|m| m.id.as_str()).collect();
    for (id, what) in preds.keys().map(|k| (k, "detections")).chain(gts.keys().map(|k| (k, "ground truth"))) {
        if !known.contains(id.as_str()) {
            return Err(Error::Data(format!("{what} mention image {id:?} not in the {} split", split.name())));
        }
    }
    let empty = Vec::new();
    let mut per_image = Vec::with_capacity(images.len());
    for img in images {
        let p: Vec<(f64, f64)> = preds.get(&img.id).map_or(Vec::new(), |v| v.iter().map(|d| (d.0, d.1)).collect());
        let g = gts.get(&img.id).unwrap_or(&empty);
        per_image.push((img.id.clone(), match_centroids(&p, g, delta)?, (img.width, img.height)));
    }
    per_image.sort_by(|a, b| a.0.cmp(&b.0));
    let mut report = compute_metrics(&per_image)?;
    report.config.insert("eval.delta".into(), delta.to_string());
    report.config.insert("eval.split".into(), split.name().into());
    report.config.insert("dataset.master_seed".into(), manifest.master_seed.to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Best (count, -total distance) over all injective partial matchings.
    fn brute(preds: &[(f64, f64)], gts: &[(f64, f64)], delta: f64) -> (usize, f64) {
        fn rec(i: usize, preds: &[(f64, f64)], gts: &[(f64, f64)], used: &mut Vec<bool>, delta: f64) -> (usize, f64) {
            if i == preds.len() {
                return (0, 0.0);
            }
            let mut best = rec(i + 1, preds, gts, used, delta);
            for j in 0..gts.len() {
                let d = ((preds[i].0 - gts[j].0).powi(2) + (preds[i].1 - gts[j].1).powi(2)).sqrt();
                if used[j] || d > delta {
                    continue;
                }
                used[j] = true;
                let (c, s) = rec(i + 1, preds, gts, used, delta);
                used[j] = false;
                let cand = (c + 1, s + d);
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1 - 1e-12) {
                    best = cand;
                }
            }
            best
        }
        rec(0, preds, gts, &mut vec![false; gts.len()], delta)
    }

    #[test]
    fn boundary_distance_is_a_hit() {
        let m = match_centroids(&[(10.0, 10.0)], &[(13.0, 14.0)], 5.0).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 0, 0));
        assert_eq!(m.pairs[0].2, 5.0);
        let m = match_centroids(&[(10.0, 10.0)], &[(13.0, 14.0001)], 5.0).unwrap();
        assert_eq!(m.tp(), 0);
    }

    #[test]
    fn one_to_one() {
        let m = match_centroids(&[(10.0, 10.0), (11.0, 10.0)], &[(10.5, 10.0)], 5.0).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 1, 0));
        let m = match_centroids(&[], &[(1.0, 1.0), (5.0, 5.0), (9.0, 9.0)], 5.0).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (0, 0, 3));
        assert!(match_centroids(&[], &[], 0.0).is_err());
    }

    #[test]
    fn cardinality_beats_distance() {
        // Greedy nearest would pair p0 with g1 and strand g0.
        let preds = [(5.0, 0.0), (9.5, 0.0)];
        let gts = [(0.5, 0.0), (5.5, 0.0)];
        let m = match_centroids(&preds, &gts, 5.0).unwrap();
        assert_eq!(m.tp(), 2);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = SplitMix64::new(2024);
        for _ in 0..400 {
            let np = rng.int_range(0, 6);
            let ng = rng.int_range(0, 6);
            let pts = |rng: &mut SplitMix64, n| {
                (0..n).map(|_| (rng.uniform_range(0.0, 20.0), rng.uniform_range(0.0, 20.0))).collect::<Vec<_>>()
            };
            let (p, g) = (pts(&mut rng, np), pts(&mut rng, ng));
            let m = match_centroids(&p, &g, 5.0).unwrap();
            let (count, total) = brute(&p, &g, 5.0);
            assert_eq!(m.tp(), count);
            let got: f64 = m.pairs.iter().map(|t| t.2).sum();
            assert!((got - total).abs() < 1e-9, "{got} vs {total}");
            let (mut ps, mut gs) = (HashSet::new(), HashSet::new());
            for &(i, j, d) in &m.pairs {
                assert!(d <= 5.0 && ps.insert(i) && gs.insert(j));
            }
            let mut rev = p.clone();
            rev.reverse();
            assert_eq!(match_centroids(&rev, &g, 5.0).unwrap().tp(), count);
        }
    }

    fn single(tp: usize, fp: usize, fn_: usize, w: usize, h: usize) -> (String, ImageMatch, (usize, usize)) {
        let m = ImageMatch {
            pairs: (0..tp).map(|i| (i, i, 0.0)).collect(),
            num_preds: tp + fp,
            num_gts: tp + fn_,
        };
        ("a".into(), m, (w, h))
    }

    #[test]
    fn metric_arithmetic() {
        let r = compute_metrics(&[single(9, 1, 1, 10, 10)]).unwrap();
        assert!((r.precision - 0.9).abs() < 1e-15 && (r.recall - 0.9).abs() < 1e-15);
        assert!((r.f1 - 0.9).abs() < 1e-12);
        let r = compute_metrics(&[single(0, 2, 0, 512, 512)]).unwrap();
        assert!((r.fa - 7.62939453125e-6).abs() < 1e-18);
        assert!((r.fa_1e8 - 762.939453125).abs() < 1e-9);
        let r = compute_metrics(&[single(4, 0, 0, 8, 8)]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.fa), (1.0, 1.0, 1.0, 0.0));
        let double = compute_metrics(&[single(0, 2, 0, 1024, 512)]).unwrap();
        assert_eq!(double.fa * 2.0, compute_metrics(&[single(0, 2, 0, 512, 512)]).unwrap().fa);
    }

    #[test]
    fn zero_denominators() {
        let r = compute_metrics(&[single(0, 0, 0, 4, 4)]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = compute_metrics(&[single(0, 0, 3, 4, 4)]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = compute_metrics(&[single(0, 2, 0, 4, 4)]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 1.0, 0.0));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn block_and_diagonal_components() {
        let mut m = TensorF::zeros(&[20, 20]);
        for y in 10..13 {
            for x in 10..13 {
                m.data_mut()[y * 20 + x] = 1.0;
            }
        }
        assert_eq!(mask_to_centroids(&m).unwrap(), vec![(11.0, 11.0)]);
        let mut d = TensorF::zeros(&[5, 5]);
        d.data_mut()[6] = 1.0;
        d.data_mut()[12] = 1.0;
        assert_eq!(mask_to_centroids(&d).unwrap(), vec![(1.5, 1.5)]);
        // Anti-diagonal link found through the NE neighbour.
        let mut e = TensorF::zeros(&[5, 5]);
        e.data_mut()[8] = 1.0;
        e.data_mut()[12] = 1.0;
        assert_eq!(mask_to_centroids(&e).unwrap().len(), 1);
    }

    fn flood_fill(mask: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut seen = vec![false; h * w];
        let mut out = Vec::new();
        for start in 0..h * w {
            if !mask[start] || seen[start] {
                continue;
            }
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            out.push((sx / n, sy / n));
        }
        out
    }

    #[test]
    fn components_match_flood_fill() {
        let mut rng = SplitMix64::new(5);
        for trial in 0..30 {
            let (h, w) = (17 + trial % 5, 23);
            let density = 0.05 + 0.4 * (trial as f64 / 30.0);
            let bits: Vec<bool> = (0..h * w).map(|_| rng.uniform() < density).collect();
            let mask = TensorF::from_fn(&[h, w], |i| bits[i] as u8 as f32);
            let got = mask_to_centroids(&mask).unwrap();
            let want = flood_fill(&bits, h, w);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            }
        }
    }
}
