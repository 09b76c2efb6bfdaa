//! Training, evaluation, prediction, experiment matrices and overlays.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::{self, AugmentConfig, DatasetManifest, DedupMode, Sample, Split};
use crate::error::{config_err, Error, Result};
use crate::lora::{self, LoraConfig, TrainableReport};
use crate::mask::Mask;
use crate::metrics::{self, Averaging, ConfusionMatrix, MetricsReport};
use crate::segformer::{ModelConfig, SegFormer};
use crate::tensor::{AdamW, AdamWConfig, Tape};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Named architecture, `"nano"` or `"b0-like"`.
    pub model: String,
    /// Full architecture; overrides `model` when present.
    pub model_config: Option<ModelConfig>,
    /// Dataset roots, merged in order.
    pub data: Vec<PathBuf>,
    /// Source whose test split is kept when several roots have one.
    pub eval_source: Option<String>,
    pub dedup: DedupMode,
    /// Fraction of the merged training split to use.
    pub train_fraction: f64,
    pub lora: LoraConfig,
    /// Full checkpoint to start from instead of random weights.
    pub init_checkpoint: Option<PathBuf>,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub augment_config: AugmentConfig,
    pub threshold: f64,
    pub averaging: Averaging,
    /// Also score the training split after the last epoch.
    pub eval_train: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "nano".into(),
            model_config: None,
            data: Vec::new(),
            eval_source: None,
            dedup: DedupMode::Exact,
            train_fraction: 1.0,
            lora: LoraConfig::default(),
            init_checkpoint: None,
            optimizer: AdamWConfig::default(),
            epochs: 10,
            batch_size: 4,
            seed: 0,
            augment: true,
            augment_config: AugmentConfig::default(),
            threshold: 0.5,
            averaging: Averaging::Micro,
            eval_train: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.model_config {
            Some(c) => Ok(c.clone()),
            None => ModelConfig::by_name(&self.model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(config_err!("no data roots configured"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(config_err!("threshold must lie in [0, 1]"));
        }
        self.model_config()?.validate()
    }

    /// Loads, merges, dedups and subsets the configured corpora.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let manifests = self.data.iter().map(|r| datasets::load_manifest(r)).collect::<Result<Vec<_>>>()?;
        let merged = datasets::merge_datasets(&manifests, self.eval_source.as_deref(), self.dedup)?;
        if self.train_fraction < 1.0 {
            merged.with_train_fraction(self.train_fraction, self.seed)
        } else {
            Ok(merged)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub epoch_seconds: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub val_iou: Vec<Option<f64>>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub train_samples: usize,
    pub total_params: usize,
    pub trainable: TrainableReport,
    pub train_metrics: Option<MetricsReport>,
    pub test_metrics: Option<MetricsReport>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl RunRecord {
    pub fn seconds_per_epoch(&self) -> f64 {
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len().max(1) as f64
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

fn load_split(samples: &[Sample]) -> Result<Vec<(RgbImage, Mask)>> {
    samples.iter().map(datasets::load_pair).collect()
}

fn score(model: &SegFormer<f32>, data: &[(RgbImage, Mask)], threshold: f64, averaging: Averaging) -> Result<MetricsReport> {
    let per = data
        .iter()
        .map(|(img, gt)| ConfusionMatrix::from_masks(&metrics::predict_mask(model, img, threshold)?, gt))
        .collect::<Result<Vec<_>>>()?;
    metrics::aggregate(&per, averaging)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x.wrapping_mul(0xff51_afd7_ed55_8ccd)
}

/// Builds the model a run starts from: fresh or loaded weights, plus adapters.
pub fn build_model(config: &RunConfig) -> Result<SegFormer<f32>> {
    let mut model = SegFormer::<f32>::new(config.model_config()?, config.seed)?;
    if let Some(path) = &config.init_checkpoint {
        checkpoint::load_into(&mut model, path)?;
        model.params_mut().set_all_requires_grad(true);
    }
    if config.lora.enabled {
        lora::inject_lora(&mut model, &config.lora.targets, config.lora.rank, config.lora.alpha(), mix(config.seed, 1, 0))?;
    }
    Ok(model)
}

/// Runs the configured training loop and writes checkpoints and the record
/// under `config.out_dir`.
pub fn train(config: &RunConfig) -> Result<RunRecord> {
    config.validate()?;
    let manifest = config.manifest()?;
    let train_set = load_split(&manifest.split(Split::Train))?;
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let val_set = load_split(&manifest.split(Split::Val))?;
    let test_set = load_split(&manifest.split(Split::Test))?;

    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")
        .map_err(|e| Error::io(out.join("config.json"), e))?;
    manifest.save(&out.join("manifest.json"))?;

    let mut model = build_model(config)?;
    let mut opt = AdamW::new(model.params(), config.optimizer);
    let best_path = out.join("best.json");
    let final_path = out.join("final.json");
    let mut record = RunRecord {
        config: config.clone(),
        epoch_seconds: Vec::with_capacity(config.epochs),
        epoch_loss: Vec::with_capacity(config.epochs),
        val_iou: Vec::with_capacity(config.epochs),
        steps: 0,
        best_epoch: None,
        train_samples: train_set.len(),
        total_params: model.param_count(false),
        trainable: lora::trainable_param_report(model.params()),
        train_metrics: None,
        test_metrics: None,
        final_checkpoint: final_path.clone(),
        best_checkpoint: best_path.clone(),
    };
    let mut best_iou = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, 2, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, mask) = &train_set[i];
                if config.augment {
                    let seed = mix(config.seed, 3, (epoch * train_set.len() + i) as u64);
                    let (a, m) = datasets::augment(img, mask, seed, &config.augment_config)?;
                    images.push(a);
                    masks.push(m);
                } else {
                    images.push(img.clone());
                    masks.push(mask.clone());
                }
            }
            let x = datasets::batch_images::<f32>(&images)?;
            let y = datasets::batch_masks::<f32>(&masks)?;
            let (loss, grads) = {
                let tape = Tape::with_params(model.params());
                let loss = model.forward(&tape, tape.constant(x))?.bce_with_logits(&y)?;
                tape.backward(loss)?;
                let value = f64::from(loss.value().data()[0]);
                (value, tape.param_grads())
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {loss} at epoch {epoch}, step {}; lower optimizer.lr",
                    record.steps
                )));
            }
            opt.step(model.params_mut(), &grads)?;
            record.steps += 1;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        record.epoch_loss.push(loss_sum / seen as f64);
        let val = if val_set.is_empty() {
            None
        } else {
            score(&model, &val_set, config.threshold, config.averaging)?.iou
        };
        record.val_iou.push(val);
        record.epoch_seconds.push(start.elapsed().as_secs_f64());
        let current = val.unwrap_or(f64::NEG_INFINITY);
        if record.best_epoch.is_none() || current > best_iou {
            best_iou = current;
            record.best_epoch = Some(epoch);
            checkpoint::save(&model, &best_path)?;
        }
        log::info!(
            "epoch {}/{}: loss {:.5}, val IoU {}, {:.2}s",
            epoch + 1,
            config.epochs,
            record.epoch_loss[epoch],
            metrics::fmt_fraction(val, 5),
            record.epoch_seconds[epoch]
        );
    }
    checkpoint::save(&model, &final_path)?;
    if config.eval_train {
        record.train_metrics = Some(score(&model, &train_set, config.threshold, config.averaging)?);
    }
    if !test_set.is_empty() {
        record.test_metrics = Some(score(&model, &test_set, config.threshold, config.averaging)?);
    }
    fs::write(out.join("record.json"), serde_json::to_string_pretty(&record)? + "\n")
        .map_err(|e| Error::io(out.join("record.json"), e))?;
    Ok(record)
}

/// Scores a checkpoint on one split of a corpus.
pub fn evaluate(
    checkpoint_path: &Path,
    data_root: &Path,
    split: Split,
    threshold: f64,
    averaging: Averaging,
) -> Result<MetricsReport> {
    let model = checkpoint::load::<f32>(checkpoint_path)?;
    let samples = datasets::load_manifest(data_root)?.split(split);
    metrics::evaluate_dataset(&model, &samples, threshold, averaging)
}

/// Writes a `{0, 255}` mask PNG predicted for `image_path`.
pub fn predict(checkpoint_path: &Path, image_path: &Path, out: &Path, threshold: f64) -> Result<Mask> {
    let model = checkpoint::load::<f32>(checkpoint_path)?;
    let image = datasets::read_rgb(image_path)?;
    let mask = metrics::predict_mask(&model, &image, threshold)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    datasets::write_mask(&mask, out)?;
    Ok(mask)
}

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];

/// `(1 − alpha)·v + alpha·c`, with exact halves rounded down.
fn blend(v: u8, c: u8, alpha: f64) -> u8 {
    let x = (1.0 - alpha) * f64::from(v) + alpha * f64::from(c);
    (x - 0.5).ceil().clamp(0.0, 255.0) as u8
}

/// Colors hits blue, false alarms green and misses red; true negatives keep
/// the original pixel.
pub fn render_overlay(image: &RgbImage, pred: &Mask, gt: &Mask, alpha: f64) -> Result<RgbImage> {
    pred.same_shape(gt)?;
    if (image.width() as usize, image.height() as usize) != (pred.width(), pred.height()) {
        return Err(Error::Shape(format!(
            "image is {}x{} but masks are {}x{}",
            image.width(),
            image.height(),
            pred.width(),
            pred.height()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err!("alpha must lie in [0, 1], got {alpha}"));
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let color = match (pred.get(x as usize, y as usize), gt.get(x as usize, y as usize)) {
            (true, true) => BLUE,
            (true, false) => GREEN,
            (false, true) => RED,
            (false, false) => continue,
        };
        *px = Rgb([0, 1, 2].map(|c| blend(px.0[c], color[c], alpha)));
    }
    Ok(out)
}

/// One row of an experiment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// Text for the datasets column; derived from the sources when absent.
    #[serde(default)]
    pub datasets: Option<String>,
    #[serde(default = "one")]
    pub train_fraction: f64,
    #[serde(default)]
    pub lora: bool,
}

fn one() -> f64 {
    1.0
}

impl Variant {
    /// `subset-25`, `subset-50`, `full` and `lora` are predefined.
    pub fn named(name: &str) -> Result<Self> {
        let v = |fraction: f64, lora: bool| Variant {
            name: name.to_string(),
            datasets: None,
            train_fraction: fraction,
            lora,
        };
        if let Some(pct) = name.strip_prefix("subset-") {
            let pct: f64 = pct.parse().map_err(|_| config_err!("bad subset variant {name:?}"))?;
            if !(pct > 0.0 && pct <= 100.0) {
                return Err(config_err!("subset percentage must be in (0, 100], got {pct}"));
            }
            return Ok(v(pct / 100.0, false));
        }
        match name {
            "full" => Ok(v(1.0, false)),
            "lora" => Ok(v(1.0, true)),
            _ => Err(config_err!("unknown variant {name:?} (use subset-<pct>, full or lora)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub datasets: String,
    pub runs: Vec<RunRecord>,
    /// Median test IoU over seeds.
    pub iou: Option<f64>,
    pub seconds_per_epoch: f64,
    pub total_params: usize,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub results: Vec<VariantResult>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

fn test_hashes(m: &DatasetManifest) -> BTreeSet<String> {
    m.samples.iter().filter(|s| s.split == Split::Test).map(|s| s.content_hash.clone()).collect()
}

/// Trains every variant for every seed on the same test split.
///
/// A LoRA variant without its own `init_checkpoint` starts from the weights
/// of the smallest-fraction non-LoRA variant trained with the same seed.
pub fn experiment_matrix(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<ExperimentReport> {
    if variants.len() < 2 {
        return Err(config_err!("an experiment needs at least two variants"));
    }
    if seeds.is_empty() {
        return Err(config_err!("an experiment needs at least one seed"));
    }
    let names: BTreeSet<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    if names.len() != variants.len() {
        return Err(config_err!("variant names must be unique"));
    }
    let configs: Vec<RunConfig> = variants
        .iter()
        .map(|v| RunConfig {
            train_fraction: v.train_fraction,
            lora: LoraConfig {
                enabled: v.lora,
                ..base.lora.clone()
            },
            ..base.clone()
        })
        .collect();
    let mut reference: Option<(String, BTreeSet<String>)> = None;
    let mut labels = Vec::new();
    for (v, c) in variants.iter().zip(&configs) {
        let m = c.manifest()?;
        let hashes = test_hashes(&m);
        if hashes.is_empty() {
            return Err(Error::Validation(format!("variant {} has no test split", v.name)));
        }
        match &reference {
            Some((name, h)) if *h != hashes => {
                return Err(config_err!("variants {name} and {} use different test splits", v.name))
            }
            Some(_) => {}
            None => reference = Some((v.name.clone(), hashes)),
        }
        let sources: Vec<String> = m.sources().into_iter().collect();
        let mut label = sources.join(" + ");
        if v.train_fraction < 1.0 {
            label = format!("{label} ({}% train)", (v.train_fraction * 100.0).round());
        }
        labels.push(v.datasets.clone().unwrap_or(label));
    }
    let warm_from = variants
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.lora)
        .min_by(|a, b| a.1.train_fraction.total_cmp(&b.1.train_fraction))
        .map(|(i, _)| i);
    let mut order: Vec<usize> = (0..variants.len()).filter(|&i| !variants[i].lora).collect();
    order.extend((0..variants.len()).filter(|&i| variants[i].lora));

    let mut runs: Vec<Vec<RunRecord>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        for &i in &order {
            let mut cfg = configs[i].clone();
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(&variants[i].name).join(format!("seed{seed}"));
            if variants[i].lora && cfg.init_checkpoint.is_none() {
                let src = warm_from.ok_or_else(|| config_err!("a LoRA variant needs a non-LoRA variant or init_checkpoint"))?;
                let rec = runs[src].last().expect("non-LoRA variants run first");
                cfg.init_checkpoint = Some(rec.final_checkpoint.clone());
            }
            log::info!("variant {} seed {seed}", variants[i].name);
            runs[i].push(train(&cfg)?);
        }
    }
    let results = variants
        .iter()
        .zip(labels)
        .zip(runs)
        .map(|((v, datasets), runs)| {
            let ious: Vec<f64> = runs.iter().filter_map(|r| r.test_metrics.and_then(|m| m.iou)).collect();
            let first = &runs[0];
            VariantResult {
                variant: v.clone(),
                datasets,
                iou: median(&ious),
                seconds_per_epoch: runs.iter().map(RunRecord::seconds_per_epoch).sum::<f64>() / runs.len() as f64,
                total_params: first.total_params,
                trainable_params: first.trainable.trainable,
                runs,
            }
        })
        .collect();
    let report = ExperimentReport {
        seeds: seeds.to_vec(),
        results,
    };
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let p = base.out_dir.join("experiment.json");
    fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// `Configuration | Datasets | IoU` rows.
pub fn render_comparison_table(rows: &[(&str, &str, Option<f64>)]) -> String {
    let mut out = String::from("Configuration | Datasets | IoU\n");
    for (name, datasets, iou) in rows {
        writeln!(out, "{name} | {datasets} | {}", metrics::fmt_fraction(*iou, 5)).unwrap();
    }
    out
}

/// `Model | Training Time (seconds/epoch) | Parameter Count | Trainable` rows.
pub fn render_resource_table(rows: &[(&str, f64, usize, usize)]) -> String {
    let mut out = String::from("Model | Training Time (seconds/epoch) | Parameter Count | Trainable\n");
    for (name, secs, total, trainable) in rows {
        writeln!(out, "{name} | {} | {total} | {trainable}", secs.round() as u64).unwrap();
    }
    out
}

impl ExperimentReport {
    pub fn comparison_table(&self) -> String {
        let rows: Vec<_> = self
            .results
            .iter()
            .map(|r| (r.variant.name.as_str(), r.datasets.as_str(), r.iou))
            .collect();
        render_comparison_table(&rows)
    }

    pub fn resource_table(&self) -> String {
        let rows: Vec<_> = self
            .results
            .iter()
            .map(|r| (r.variant.name.as_str(), r.seconds_per_epoch, r.total_params, r.trainable_params))
            .collect();
        render_resource_table(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_hand_case() {
        let img = RgbImage::from_pixel(2, 2, Rgb([128, 128, 128]));
        let pred = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let gt = Mask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let o = render_overlay(&img, &pred, &gt, 0.5).unwrap();
        assert_eq!(o.get_pixel(0, 0).0, [64, 64, 191]);
        assert_eq!(o.get_pixel(1, 0).0, [64, 191, 64]);
        assert_eq!(o.get_pixel(0, 1).0, [191, 64, 64]);
        assert_eq!(o.get_pixel(1, 1).0, [128, 128, 128]);
    }

    #[test]
    fn overlay_alpha_zero_is_identity() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7]));
        let pred = Mask::new(3, 2, vec![1, 0, 1, 0, 1, 1]).unwrap();
        let gt = Mask::new(3, 2, vec![1, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(render_overlay(&img, &pred, &gt, 0.0).unwrap(), img);
        let small = Mask::new(2, 2, vec![0; 4]).unwrap();
        assert!(render_overlay(&img, &small, &small, 0.5).is_err());
    }

    #[test]
    fn comparison_row_format() {
        let t = render_comparison_table(&[("Full Dataset", "LuFI + ADE20K + RIWA", Some(0.94397))]);
        assert_eq!(t.lines().nth(1), Some("Full Dataset | LuFI + ADE20K + RIWA | 0.94397"));
        assert_eq!(t.lines().next(), Some("Configuration | Datasets | IoU"));
    }

    #[test]
    fn resource_row_format() {
        let t = render_resource_table(&[("full", 394.4, 82_000_000, 82_000_000)]);
        assert_eq!(t.lines().nth(1), Some("full | 394 | 82000000 | 82000000"));
    }

    #[test]
    fn variant_names() {
        assert_eq!(Variant::named("subset-25").unwrap().train_fraction, 0.25);
        assert!(Variant::named("lora").unwrap().lora);
        assert!(Variant::named("subset-0").is_err());
        assert!(Variant::named("half").is_err());
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&[0.3, 0.9, 0.5]), Some(0.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn config_defaults_from_empty_json() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.lora.alpha(), 8.0);
        assert!(c.validate().is_err());
    }
}
