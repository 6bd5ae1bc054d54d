//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use sha2::{Digest, Sha256};
use spire_core::eval::match_centroids;
use spire_core::hrpe::{count_params_flops, HrpeConfig};
use spire_core::infer::{detect_from_map, nms_local_max, Affine, InferConfig};
use spire_core::nn::{conv2d, Tensor, TensorF};
use spire_core::pipeline::{
    cmd_gen, cmd_infer, cmd_train, evaluate_samples, run_experiment, Experiment, RunConfig, TRAIN_LOG_FILE,
    WEIGHTS_FILE,
};
use spire_core::prps::{
    build_supervision_map, map_centroid_to_lattice, refine_to_peak, PrpsConfig, ResponseMap, SupervisionMode,
};
use spire_core::rng::SplitMix64;
use spire_core::scene::{compose_scene, load_dataset, sample_scene_spec, Dataset, SceneKnobs, Split};

/// sha256 over the default dataset (gen.seed = 1), see `dataset_digest`.
const GOLDEN_DATASET_SHA256: &str = "4c66ab333c53276375fb365a5b987544d02fd17c30ebbdba2a52438f27ca2a9a";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_layer = ("", 0.0f64);
    for seed in [1, 2, 3] {
        for (name, e) in common::layer_gradient_errors(seed) {
            if e > worst_layer.1 {
                worst_layer = (name, e);
            }
        }
    }
    let (e2e, n) = common::end_to_end_gradient_error(17, 0.01);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_layer.1 < 1e-4 && e2e < 1e-3 && secs < 120.0,
        format!(
            "worst layer {} {:.2e} (< 1e-4), end-to-end {e2e:.2e} over {n} params (< 1e-3), {secs:.1}s",
            worst_layer.0, worst_layer.1
        ),
    )
}

fn strict_maxima(m: &ResponseMap) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let c = m.at(u as usize, v as usize);
            let strict = c > 0.0
                && (-1..=1).all(|dv: i64| {
                    (-1..=1).all(|du: i64| {
                        let (uu, vv) = (u + du, v + dv);
                        (du, dv) == (0, 0) || uu < 0 || vv < 0 || uu >= w || vv >= h || m.at(uu as usize, vv as usize) < c
                    })
                });
            if strict {
                out.push((u as usize, v as usize));
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let knobs = SceneKnobs::default();
    let cfg = PrpsConfig::default();
    let (mut targets, mut problems) = (0, Vec::new());
    for i in 0..100 {
        let mut spec = sample_scene_spec(99, i, &knobs).unwrap();
        spec.noise_sigma = 0.0;
        spec.clutter_contrast = 0.0;
        let scene = compose_scene(&spec).unwrap();
        let map = build_supervision_map(&scene.image, &scene.centroids, &cfg).unwrap();
        let (lh, lw) = (map.height(), map.width());
        let centers: Vec<(usize, usize)> = scene
            .centroids
            .iter()
            .map(|&(x, y)| {
                let (px, py) = refine_to_peak(&scene.image, x, y, cfg.refine_radius).unwrap();
                map_centroid_to_lattice(px as f64, py as f64, cfg.stride, lw, lh)
            })
            .collect();
        targets += centers.len();
        for &(u, v) in &centers {
            if map.at(u, v) != 1.0 {
                problems.push(format!("scene {i}: peak {} at ({u},{v})", map.at(u, v)));
            }
        }
        for v in 0..lh {
            for u in 0..lw {
                let inside = centers.iter().any(|&(cu, cv)| u.abs_diff(cu) <= cfg.radius && v.abs_diff(cv) <= cfg.radius);
                if map.at(u, v) != 0.0 && !inside {
                    problems.push(format!("scene {i}: support leaks to ({u},{v})"));
                }
            }
        }
        let maxima = strict_maxima(&map);
        if maxima.len() != centers.len() {
            problems.push(format!("scene {i}: {} strict maxima for {} targets", maxima.len(), centers.len()));
        }
    }
    // Hand-computed reference values.
    let flat = TensorF::full(&[1, 128, 128], 0.2);
    let g = build_supervision_map(
        &flat,
        &[(64.0, 64.0)],
        &PrpsConfig { mode: SupervisionMode::Gaussian, ..PrpsConfig::default() },
    )
    .unwrap();
    let refs = [
        ((16, 16), 1.0),
        ((22, 16), 0.011_108_996_538_242_3),
        ((22, 22), (-9.0f64).exp()),
        ((17, 16), (-0.125f64).exp()),
        ((18, 18), (-1.0f64).exp()),
        ((23, 16), 0.0),
    ];
    for ((u, v), want) in refs {
        if (g.at(u, v) as f64 - want).abs() > 1e-6 {
            problems.push(format!("gaussian value at ({u},{v}) = {} vs {want}", g.at(u, v)));
        }
    }
    if map_centroid_to_lattice(100.0, 60.0, 4, 160, 160) != (25, 15) {
        problems.push("lattice mapping of (100, 60)".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{targets} targets in 100 noise-free scenes, all invariants hold")
        } else {
            format!("{} problems, first: {:?}", problems.len(), &problems[..problems.len().min(3)])
        },
    )
}

fn brute_local_max(m: &ResponseMap) -> Vec<f32> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let mut out = Vec::with_capacity((h * w) as usize);
    for v in 0..h {
        for u in 0..w {
            let mut best = f32::NEG_INFINITY;
            for dv in -1..=1 {
                for du in -1..=1 {
                    let (uu, vv) = (u + du, v + dv);
                    if uu >= 0 && vv >= 0 && uu < w && vv < h {
                        best = best.max(m.at(uu as usize, vv as usize));
                    }
                }
            }
            let c = m.at(u as usize, v as usize);
            out.push(if c == best { c } else { 0.0 });
        }
    }
    out
}

fn exhaustive_match(p: &[(f64, f64)], g: &[(f64, f64)], delta: f64) -> (usize, f64) {
    fn rec(i: usize, p: &[(f64, f64)], g: &[(f64, f64)], used: &mut [bool], delta: f64) -> (usize, f64) {
        if i == p.len() {
            return (0, 0.0);
        }
        let mut best = rec(i + 1, p, g, used, delta);
        for j in 0..g.len() {
            let d = ((p[i].0 - g[j].0).powi(2) + (p[i].1 - g[j].1).powi(2)).sqrt();
            if used[j] || d > delta {
                continue;
            }
            used[j] = true;
            let (c, s) = rec(i + 1, p, g, used, delta);
            used[j] = false;
            if c + 1 > best.0 || (c + 1 == best.0 && s + d < best.1 - 1e-12) {
                best = (c + 1, s + d);
            }
        }
        best
    }
    rec(0, p, g, &mut vec![false; g.len()], delta)
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (oc, _, k, _) = w.dims4().unwrap();
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let mut out = Tensor::zeros(&[n, oc, ho, wo]);
    for bi in 0..n {
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = ((oy * stride + ky) as i64 - pad as i64, (ox * stride + kx) as i64 - pad as i64);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((o * c + ci) * k + ky) * k + kx]
                                        * x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * oc + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let mut nms_bad = 0;
    for trial in 0..1000 {
        let (h, w) = (8 + trial % 25, 8 + (trial * 7) % 25);
        let levels = if trial % 3 == 0 { 3.0 } else { 1e6 };
        let map = ResponseMap {
            grid: TensorF::from_fn(&[h, w], |_| ((rng.uniform() * levels).floor() / levels) as f32),
            stride: 4,
        };
        if nms_local_max(&map).unwrap().values() != &brute_local_max(&map)[..] {
            nms_bad += 1;
        }
    }
    let mut match_bad = 0;
    for _ in 0..500 {
        let np = rng.int_range(0, 6);
        let ng = rng.int_range(0, 6);
        let mut pts = |n| (0..n).map(|_| (rng.uniform_range(0.0, 16.0), rng.uniform_range(0.0, 16.0))).collect::<Vec<_>>();
        let (p, g) = (pts(np), pts(ng));
        let m = match_centroids(&p, &g, 5.0).unwrap();
        let (count, total) = exhaustive_match(&p, &g, 5.0);
        let got: f64 = m.pairs.iter().map(|t| t.2).sum();
        let injective = m.pairs.iter().map(|t| t.0).collect::<HashSet<_>>().len() == m.pairs.len()
            && m.pairs.iter().map(|t| t.1).collect::<HashSet<_>>().len() == m.pairs.len();
        if m.tp() != count || (got - total).abs() > 1e-9 || !injective {
            match_bad += 1;
        }
    }
    let mut conv_bad = 0;
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2), (3, 1, 0)] {
        let x = common::rand_tensor(&mut rng, &[2, 3, 9, 8]);
        let w = common::rand_tensor(&mut rng, &[4, 3, k, k]);
        let b: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let slow = naive_conv(&x, &w, &b, stride, pad);
        if fast.shape() != slow.shape() || fast.data().iter().zip(slow.data()).any(|(a, b)| (a - b).abs() > 1e-12) {
            conv_bad += 1;
        }
    }
    outcome(
        nms_bad + match_bad + conv_bad == 0,
        format!("discrepancies: nms {nms_bad}/1000, matcher {match_bad}/500, conv2d {conv_bad}/5"),
    )
}

fn criterion_4(cfg: &RunConfig, data: &Dataset) -> Outcome {
    let prps = PrpsConfig { stride: cfg.model.stride, ..cfg.prps.clone() };
    let infer = InferConfig { tau: 0.35, ..cfg.infer };
    let dets: Vec<_> = data
        .test
        .iter()
        .map(|s| {
            let map = build_supervision_map(&s.image, &s.centroids, &prps).unwrap();
            (s.id.clone(), detect_from_map(&map, &Affine::to_lattice(prps.stride), &infer).unwrap())
        })
        .collect();
    let r = evaluate_samples(&dets, &data.test, 5.0).unwrap();
    outcome(
        r.fn_ == 0 && r.fp == 0,
        format!("{} test images: tp {} fp {} fn {} (recall {:.4})", r.num_images, r.tp, r.fp, r.fn_, r.recall),
    )
}

fn criterion_5(exp: &Experiment) -> Outcome {
    let r = &exp.report;
    let secs = exp.outcome.seconds;
    outcome(
        r.f1 >= 0.85 && r.fa <= 5e-5 && secs < 1800.0,
        format!(
            "f1 {:.4} (>= 0.85), fa {:.3e} (<= 5e-5), precision {:.4}, recall {:.4}, best epoch {}, {secs:.0}s training",
            r.f1, r.fa, r.precision, r.recall, exp.outcome.best_epoch
        ),
    )
}

fn criterion_6(cfg: &RunConfig, data: &Dataset, prps: &Experiment) -> Outcome {
    let mut f1 = vec![(SupervisionMode::Prps, prps.report.f1)];
    for mode in [SupervisionMode::Impulse, SupervisionMode::Gaussian] {
        let mut c = cfg.clone();
        c.prps.mode = mode;
        let exp = run_experiment(&c, data, false).unwrap();
        f1.push((mode, exp.report.f1));
    }
    let pass = f1[0].1 >= f1[1].1;
    let table = f1.iter().map(|(m, f)| format!("{m} {f:.4}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("f1: {table}{}", if pass { "" } else { " -- ORDERING INVERTED" }))
}

fn criterion_7() -> Outcome {
    let at = |s| count_params_flops(&HrpeConfig { stride: s, ..HrpeConfig::default() }, 640, 640).unwrap();
    let (s2, s4, s8) = (at(2), at(4), at(8));
    let pass = (0.1..=0.5).contains(&s4.params_m())
        && (4.0..=12.0).contains(&s4.flops_g())
        && s8.flops < s4.flops
        && s2.flops > s4.flops;
    outcome(
        pass,
        format!(
            "s=4: {:.3} M params, {:.2} G FLOPs; s=2 {:.2} G; s=8 {:.2} G",
            s4.params_m(),
            s4.flops_g(),
            s2.flops_g(),
            s8.flops_g()
        ),
    )
}

/// sha256 over `relative path \0 length contents` of every file, sorted by path.
fn dataset_digest(root: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&f).unwrap();
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn criterion_8(cfg: &RunConfig, data_dir: &Path, work: &Path) -> Outcome {
    let mut notes = Vec::new();
    let other = work.join("data_again");
    cmd_gen(cfg, &other).unwrap();
    let (d1, d2) = (dataset_digest(data_dir), dataset_digest(&other));
    let gen_same = d1 == d2;
    let golden = d1 == GOLDEN_DATASET_SHA256;
    if !golden {
        notes.push(format!("dataset sha256 {d1} differs from golden"));
    }

    let mut short = cfg.clone();
    short.train.epochs = 2;
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let dir = work.join(format!("train_{i}"));
            cmd_train(&short, data_dir, &dir).unwrap();
            let csv = dir.join("detections.csv");
            cmd_infer(&short, &dir.join(WEIGHTS_FILE), data_dir, Split::Test, &csv).unwrap();
            dir
        })
        .collect();
    let same = |name: &str| fs::read(runs[0].join(name)).unwrap() == fs::read(runs[1].join(name)).unwrap();
    let train_same = same(WEIGHTS_FILE) && same(TRAIN_LOG_FILE);
    let infer_same = same("detections.csv");
    outcome(
        gen_same && golden && train_same && infer_same,
        format!(
            "gen identical {gen_same}, golden checksum {golden}, train identical {train_same}, infer identical {infer_same}{}",
            if notes.is_empty() { String::new() } else { format!(" ({})", notes.join("; ")) }
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture` or a filter;
    // a filter that names nothing here skips the whole suite.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let work = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let data_dir = work.path().join("data");
    cmd_gen(&cfg, &data_dir).unwrap();
    let data = load_dataset(&data_dir).unwrap();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        println!(
            "acceptance {n} {:<4} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((n, name, o));
    };
    run(1, "gradient correctness", &mut criterion_1);
    run(2, "supervision map correctness", &mut criterion_2);
    run(3, "oracle equivalences", &mut criterion_3);
    run(4, "closed-loop oracle detection", &mut || criterion_4(&cfg, &data));
    let mut trained = None;
    run(5, "desk-scale training", &mut || {
        let exp = run_experiment(&cfg, &data, false).unwrap();
        let o = criterion_5(&exp);
        trained = Some(exp);
        o
    });
    let trained = trained.unwrap();
    run(6, "ablation direction", &mut || criterion_6(&cfg, &data, &trained));
    run(7, "architecture accounting", &mut criterion_7);
    run(8, "bit-exact reproducibility", &mut || criterion_8(&cfg, &data_dir, work.path()));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance summary: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
