use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::RunConfig;
use super::train::{train_model, write_train_log, TrainOutcome};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate_dataset, match_centroids, MatchReport};
use crate::hrpe::{count_params_flops, load_weights, save_weights, HrpeConfig, HrpeF, LayerCost};
use crate::infer::{detect, write_detections, Detection};
use crate::nn::TensorF;
use crate::prps::{build_supervision_map, write_map_pgm, write_map_raw, PrpsConfig, SupervisionMode};
use crate::scene::{gen_dataset, load_dataset, write_dataset, Dataset, Manifest, Sample, Split};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Column order of the ablation summary.
pub const SUMMARY_COLUMNS: [&str; 17] = [
    "cell", "mode", "sigma", "radius", "stride", "variant", "params_m", "flops_g", "precision", "recall", "f1",
    "fa", "fa_1e8", "tp", "fp", "fn", "best_epoch",
];

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(path, cfg.to_text())?;
    Ok(())
}

/// Sidecar config echo for single-file outputs: `<file>.config.txt`.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.txt");
    PathBuf::from(s)
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}_{index:04}", split.name())
}

/// Generates the train and test splits; test scenes continue the scene
/// index sequence after the training scenes.
pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let g = &cfg.gen;
    if g.train_count == 0 || g.test_count == 0 {
        return Err(Error::Config("gen.train_count and gen.test_count must both be >= 1".into()));
    }
    let scenes = gen_dataset(g.train_count + g.test_count, g.seed, &g.knobs)?;
    let labelled: Vec<(String, Split, _)> = scenes
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i < g.train_count {
                (sample_id(Split::Train, i), Split::Train, s)
            } else {
                (sample_id(Split::Test, i - g.train_count), Split::Test, s)
            }
        })
        .collect();
    write_dataset(out_dir, &labelled, g.seed, &g.knobs, cfg.to_map())
}

fn prps_for(cfg: &RunConfig, mode: SupervisionMode) -> PrpsConfig {
    PrpsConfig {
        mode,
        stride: cfg.model.stride,
        ..cfg.prps.clone()
    }
}

/// Writes `<out>/<mode>/<id>.pgm` and `<id>.bin` for every image and mode.
pub fn cmd_targets(cfg: &RunConfig, dataset: &Path, out_dir: &Path, modes: &[SupervisionMode]) -> Result<usize> {
    cfg.validate()?;
    let data = load_dataset(dataset)?;
    let mut written = 0;
    for &mode in modes {
        let dir = out_dir.join(mode.name());
        fs::create_dir_all(&dir)?;
        let prps = prps_for(cfg, mode);
        for s in data.train.iter().chain(&data.test) {
            let map = build_supervision_map(&s.image, &s.centroids, &prps)?;
            write_map_pgm(&dir.join(format!("{}.pgm", s.id)), &map)?;
            write_map_raw(&dir.join(format!("{}.bin", s.id)), &map)?;
            written += 1;
        }
    }
    write_config(&out_dir.join(CONFIG_FILE), cfg)?;
    Ok(written)
}

pub fn train_on(cfg: &RunConfig, data: &Dataset, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_model(&data.train, &prps_for(cfg, cfg.prps.mode), &cfg.model, &cfg.train, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3}  train {:.6}  val {:.6}  lr {:e}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            );
        }
    })
}

/// Trains and writes `weights.bin`, `train_log.csv` and `config.txt` into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let data = load_dataset(dataset)?;
    let out = train_on(cfg, &data, true)?;
    fs::create_dir_all(out_dir)?;
    save_weights(&out.model, &out_dir.join(WEIGHTS_FILE))?;
    write_train_log(&out_dir.join(TRAIN_LOG_FILE), &out.log)?;
    write_config(&out_dir.join(CONFIG_FILE), cfg)?;
    Ok(out)
}

pub fn infer_samples(model: &HrpeF, samples: &[Sample], cfg: &RunConfig) -> Result<Vec<(String, Vec<Detection>)>> {
    samples
        .iter()
        .map(|s| Ok((s.id.clone(), detect(model, &s.image, &cfg.infer)?)))
        .collect()
}

pub fn cmd_infer(cfg: &RunConfig, weights: &Path, dataset: &Path, split: Split, out_csv: &Path) -> Result<usize> {
    cfg.validate()?;
    let model = load_weights(weights, &cfg.model)?;
    let data = load_dataset(dataset)?;
    let samples = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let dets = infer_samples(&model, samples, cfg)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_detections(out_csv, dets.iter().map(|(id, d)| (id.as_str(), d.as_slice())))?;
    write_config(&config_sidecar(out_csv), cfg)?;
    Ok(dets.iter().map(|d| d.1.len()).sum())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn echo_into(report: &mut MatchReport, cfg: &RunConfig) {
    for (k, v) in cfg.entries() {
        report.config.entry(k.to_string()).or_insert(v);
    }
}

pub fn cmd_eval(
    cfg: &RunConfig,
    pred_csv: &Path,
    gt_csv: &Path,
    manifest: &Path,
    split: Split,
    out_json: &Path,
) -> Result<MatchReport> {
    cfg.validate()?;
    let m = Manifest::read(manifest)?;
    let mut report = evaluate_dataset(pred_csv, gt_csv, &m, split, cfg.eval_delta)?;
    echo_into(&mut report, cfg);
    write_json(out_json, &report)?;
    Ok(report)
}

/// Matches in-memory detections against the samples' annotations.
pub fn evaluate_samples(dets: &[(String, Vec<Detection>)], samples: &[Sample], delta: f64) -> Result<MatchReport> {
    if dets.len() != samples.len() {
        return Err(Error::Data("detections and samples differ in length".into()));
    }
    let per_image = dets
        .iter()
        .zip(samples)
        .map(|((id, d), s)| {
            if *id != s.id {
                return Err(Error::Data(format!("detections for {id:?} paired with sample {:?}", s.id)));
            }
            let preds: Vec<(f64, f64)> = d.iter().map(|d| (d.x, d.y)).collect();
            Ok((id.clone(), match_centroids(&preds, &s.centroids, delta)?, (s.width(), s.height())))
        })
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&per_image)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub params_m: f64,
    pub flops: u64,
    pub flops_g: f64,
    pub repeats: usize,
    pub latency_ms_mean: f64,
    pub latency_ms_min: f64,
    pub config: std::collections::BTreeMap<String, String>,
    pub layers: Vec<LayerCost>,
}

/// Analytic cost at `bench.height × bench.width` plus measured eval-mode latency.
pub fn cmd_bench(cfg: &RunConfig, out_json: Option<&Path>) -> Result<BenchReport> {
    cfg.validate()?;
    let (h, w) = (cfg.bench.height, cfg.bench.width);
    let cost = count_params_flops(&cfg.model, h, w)?;
    let model = crate::hrpe::build_model::<f32>(&cfg.model, cfg.train.seed)?;
    let x = TensorF::full(&[1, 1, h, w], 0.5);
    let mut times = Vec::with_capacity(cfg.bench.repeats);
    for _ in 0..cfg.bench.repeats {
        let t = Instant::now();
        model.infer(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let report = BenchReport {
        height: h,
        width: w,
        params: cost.params,
        params_m: cost.params_m(),
        flops: cost.flops,
        flops_g: cost.flops_g(),
        repeats: times.len(),
        latency_ms_mean: times.iter().sum::<f64>() / times.len() as f64,
        latency_ms_min: times.iter().copied().fold(f64::INFINITY, f64::min),
        config: cfg.to_map(),
        layers: cost.layers,
    };
    if let Some(p) = out_json {
        write_json(p, &report)?;
    }
    Ok(report)
}

/// Trained model plus its test-split detections and metrics.
pub struct Experiment {
    pub outcome: TrainOutcome,
    pub detections: Vec<(String, Vec<Detection>)>,
    pub report: MatchReport,
}

pub fn run_experiment(cfg: &RunConfig, data: &Dataset, verbose: bool) -> Result<Experiment> {
    let outcome = train_on(cfg, data, verbose)?;
    let detections = infer_samples(&outcome.model, &data.test, cfg)?;
    let mut report = evaluate_samples(&detections, &data.test, cfg.eval_delta)?;
    echo_into(&mut report, cfg);
    Ok(Experiment {
        outcome,
        detections,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub mode: SupervisionMode,
    pub sigma: f64,
    pub radius: usize,
    pub stride: usize,
    pub variant: String,
    pub params_m: f64,
    pub flops_g: f64,
    pub report: MatchReport,
    pub best_epoch: usize,
}

/// Configuration of one ablation cell.
pub fn ablation_cell(base: &RunConfig, mode: SupervisionMode, sigma: f64, stride: usize, variant: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.set("prps.mode", mode.name())?;
    cfg.set("model.stride", &stride.to_string())?;
    let radius = (3.0 * sigma).round();
    cfg.prps.sigma = sigma;
    cfg.prps.radius = radius as usize;
    cfg.prps.allow_radius_override = base.prps.allow_radius_override || (radius - 3.0 * sigma).abs() > 1e-9;
    let (reorg, reweight) = match variant {
        "full" => (true, true),
        "no_reorg" => (false, true),
        "no_reweight" => (true, false),
        v => return Err(Error::Config(format!("unknown ablation variant {v:?}"))),
    };
    cfg.model = HrpeConfig {
        enable_channel_reorg: reorg,
        enable_reweighting: reweight,
        ..cfg.model
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and evaluates every grid cell; writes `cells/<cell>/report.json`,
/// `summary.csv` and `config.txt` under `out_dir`.
pub fn cmd_ablate(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = load_dataset(dataset)?;
    let a = &cfg.ablate;
    let mut rows = Vec::new();
    for &mode in &a.modes {
        for &sigma in &a.sigmas {
            for &stride in &a.strides {
                for variant in &a.variants {
                    let cell_cfg = ablation_cell(cfg, mode, sigma, stride, variant)?;
                    let cell = format!("{mode}_sigma{sigma}_s{stride}_{variant}");
                    eprintln!("ablation cell {cell}");
                    let exp = run_experiment(&cell_cfg, &data, false)?;
                    let cost = count_params_flops(&cell_cfg.model, cfg.bench.height, cfg.bench.width)?;
                    write_json(&out_dir.join("cells").join(&cell).join("report.json"), &exp.report)?;
                    rows.push(AblationRow {
                        cell,
                        mode,
                        sigma,
                        radius: cell_cfg.prps.radius,
                        stride,
                        variant: variant.clone(),
                        params_m: cost.params_m(),
                        flops_g: cost.flops_g(),
                        report: exp.report,
                        best_epoch: exp.outcome.best_epoch,
                    });
                }
            }
        }
    }
    write_summary(&out_dir.join("summary.csv"), &rows)?;
    write_config(&out_dir.join(CONFIG_FILE), cfg)?;
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        let m = &r.report;
        w.write_record([
            r.cell.clone(),
            r.mode.to_string(),
            r.sigma.to_string(),
            r.radius.to_string(),
            r.stride.to_string(),
            r.variant.clone(),
            format!("{:.4}", r.params_m),
            format!("{:.4}", r.flops_g),
            format!("{:.6}", m.precision),
            format!("{:.6}", m.recall),
            format!("{:.6}", m.f1),
            format!("{:.6e}", m.fa),
            format!("{:.3}", m.fa_1e8),
            m.tp.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            r.best_epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
