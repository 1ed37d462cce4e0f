//! Optimizer, learning-rate schedule, metrics, the training loop, and the
//! model-scale sensitivity sweep.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, Schedule};
use crate::error::{Error, Result};
use crate::extraction::{build_bag, InstanceBag, RoiRecord};
use crate::features::{build_feature_bag, FeatureBag};
use crate::model::{argmax, IViT, IViTConfig, ModelKind, ParameterStore};
use crate::numerics::graph::{Gradients, Graph};

/// Stream id for epoch shuffling, disjoint from the generator's purpose ids.
const SHUFFLE_STREAM: u64 = 0x0F00_0000_0000_0001;

/// Warm-up scales the currently scheduled rate: linear ramp over the first
/// `warmup_epochs`, base rate until `decay_epoch`, the decayed rate after.
pub fn lr_at_epoch(s: &Schedule, epoch: usize) -> f64 {
    let scheduled = if epoch >= s.decay_epoch { s.decay_lr } else { s.base_lr };
    if epoch < s.warmup_epochs {
        scheduled * (epoch + 1) as f64 / s.warmup_epochs as f64
    } else {
        scheduled
    }
}

/// Per-parameter gradient sums over a mini-batch, keyed by parameter name.
/// Parameters absent from a sample's gradients contribute zero.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sums: IndexMap<String, Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> GradAccumulator {
        GradAccumulator::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds one sample's gradients for every parameter in `params`.
    pub fn absorb(&mut self, params: &ParameterStore, grads: &Gradients) -> Result<()> {
        for (name, t) in params.iter() {
            let sum = self
                .sums
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.numel()]);
            if let Some(g) = grads.get(t) {
                if g.len() != sum.len() {
                    return Err(Error::Shape {
                        op: "GradAccumulator::absorb",
                        details: format!("{}: gradient length {} vs {}", name, g.len(), sum.len()),
                    });
                }
                for (a, b) in sum.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    fn zero(&mut self) {
        for v in self.sums.values_mut() {
            v.fill(0.0);
        }
        self.count = 0;
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on the first step.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// One update from the accumulated mean gradients; zeroes the accumulator
    /// afterward. A non-finite gradient aborts before any parameter moves.
    pub fn step(&mut self, params: &ParameterStore, acc: &mut GradAccumulator, lr: f64) -> Result<()> {
        if acc.count == 0 {
            return Err(Error::Contract { op: "Adam::step", msg: "empty gradient accumulator".into() });
        }
        for (name, _) in params.iter() {
            if let Some(sum) = acc.sums.get(name) {
                if !sum.iter().all(|v| v.is_finite()) {
                    return Err(Error::NanGradient { name: name.to_string() });
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let scale = 1.0 / acc.count as f64;
        for (name, tensor) in params.iter() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; tensor.numel()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; tensor.numel()]);
            let sum = acc.sums.get(name);
            let mut data = tensor.data_mut();
            for i in 0..data.len() {
                let g = sum.map_or(0.0, |s| s[i] * scale);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        acc.zero();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy plus per-class precision/recall/F1 and the raw confusion matrix
/// (`confusion[truth][predicted]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predictions: &[usize], truth: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if predictions.len() != truth.len() || predictions.is_empty() {
        return Err(Error::Contract {
            op: "evaluate",
            msg: format!("{} predictions vs {} labels", predictions.len(), truth.len()),
        });
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Contract {
                op: "evaluate",
                msg: format!("label {} out of range for {} classes", p.max(t), n_classes),
            });
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / truth.len() as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fp: usize = (0..n_classes).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
            let fn_: usize = (0..n_classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    Ok(MetricsReport { accuracy, per_class, confusion })
}

impl fmt::Display for MetricsReport {
    /// One row per class of percentage metrics, mirroring the usual
    /// subtyping report layout.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "All     Acc%: {:6.2}", self.accuracy * 100.0)?;
        for (c, m) in self.per_class.iter().enumerate() {
            writeln!(
                f,
                "Type {}  Prec%: {:6.2}  Rec%: {:6.2}  F1%: {:6.2}",
                c + 1,
                m.precision * 100.0,
                m.recall * 100.0,
                m.f1 * 100.0
            )?;
        }
        Ok(())
    }
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,split,acc,prec_type1,rec_type1,f1_type1,prec_type2,rec_type2,f1_type2,lr";

/// One metrics CSV row; the report must be two-class.
pub fn metrics_csv_row(epoch: usize, split: &str, m: &MetricsReport, lr: f64) -> String {
    let (a, b) = (&m.per_class[0], &m.per_class[1]);
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        epoch, split, m.accuracy, a.precision, a.recall, a.f1, b.precision, b.recall, b.f1, lr
    )
}

// ---------------------------------------------------------------------------
// Training data plumbing

/// A training split: either patch bags for the patch model or feature bags
/// for the feature-token variant.
pub enum TrainSet<'a> {
    Patches(&'a [InstanceBag]),
    Features(&'a [FeatureBag]),
}

impl TrainSet<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainSet::Patches(b) => b.len(),
            TrainSet::Features(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> usize {
        match self {
            TrainSet::Patches(b) => b[i].label.index(),
            TrainSet::Features(b) => b[i].label.index(),
        }
    }

    pub fn roi_id(&self, i: usize) -> &str {
        match self {
            TrainSet::Patches(b) => &b[i].roi_id,
            TrainSet::Features(b) => &b[i].roi_id,
        }
    }

    /// Records the logits for sample `i` on `g`.
    pub fn forward(&self, model: &IViT, g: &mut Graph, i: usize) -> Result<crate::Tensor> {
        match self {
            TrainSet::Patches(b) => model.forward_classify(g, &b[i]),
            TrainSet::Features(b) => {
                model.forward_classify_h(g, &b[i].features, &b[i].grade_ids, &b[i].valid)
            }
        }
    }
}

/// Inference predictions over a whole split, in order. Read-only on the
/// model, so samples evaluate in parallel.
pub fn predict_set(model: &IViT, set: &TrainSet) -> Result<Vec<usize>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::inference();
            let logits = set.forward(model, &mut g, i)?;
            Ok(argmax(&logits.to_vec()))
        })
        .collect()
}

/// Predictions plus metrics for a split.
pub fn evaluate_set(model: &IViT, set: &TrainSet) -> Result<(Vec<usize>, MetricsReport)> {
    let predictions = predict_set(model, set)?;
    let truth: Vec<usize> = (0..set.len()).map(|i| set.label(i)).collect();
    let report = evaluate(&predictions, &truth, model.config.n_classes)?;
    Ok((predictions, report))
}

// ---------------------------------------------------------------------------
// Training loop

pub struct TrainOutcome {
    /// The model carrying the best-validation-accuracy weights.
    pub model: IViT,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Full per-epoch log: header plus one train and one val row per epoch.
    pub metrics_csv: String,
}

/// Trains a fresh model for `epochs` epochs and returns the checkpoint with
/// the best validation accuracy (earliest epoch on ties). Deterministic in
/// `seed`: initialization and per-epoch shuffling both derive from it.
/// With `epochs == 0` the initialized model is evaluated and returned as is.
pub fn train(
    kind: ModelKind,
    config: &IViTConfig,
    train_set: &TrainSet,
    val_set: &TrainSet,
    schedule: &Schedule,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract { op: "train", msg: "empty train or val split".into() });
    }
    if batch_size == 0 {
        return Err(Error::Contract { op: "train", msg: "batch_size must be >= 1".into() });
    }
    let model = IViT::new(kind, config.clone(), seed)?;
    let mut adam = Adam::new();
    let mut acc = GradAccumulator::new();
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let train_truth: Vec<usize> = (0..train_set.len()).map(|i| train_set.label(i)).collect();
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');

    let mut best: Option<(f64, usize, Vec<(String, Vec<f64>)>)> = None;
    for epoch in 0..epochs {
        let lr = lr_at_epoch(schedule, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        // predictions from the pre-update forward passes double as the
        // epoch's train metrics
        let mut train_preds = vec![0usize; train_set.len()];
        for batch in order.chunks(batch_size) {
            // per-sample tapes are independent; absorbing in batch order
            // keeps the accumulated sums bit-identical to a serial pass
            let batch_grads: Vec<(usize, usize, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let logits = train_set.forward(&model, &mut g, i)?;
                    let pred = argmax(&logits.to_vec());
                    let loss = g.cross_entropy(&logits, &[train_truth[i]])?;
                    let grads = g.compute_gradients(&loss)?;
                    Ok((i, pred, grads))
                })
                .collect::<Result<_>>()?;
            for (i, pred, grads) in batch_grads {
                train_preds[i] = pred;
                acc.absorb(&model.params, &grads)?;
            }
            adam.step(&model.params, &mut acc, lr)?;
        }

        let train_metrics = evaluate(&train_preds, &train_truth, config.n_classes)?;
        let (_, val_metrics) = evaluate_set(&model, val_set)?;
        csv.push_str(&metrics_csv_row(epoch, "train", &train_metrics, lr));
        csv.push('\n');
        csv.push_str(&metrics_csv_row(epoch, "val", &val_metrics, lr));
        csv.push('\n');
        log::info!(
            "epoch {:3}  lr {:9.2e}  train acc {:5.3}  val acc {:5.3}",
            epoch,
            lr,
            train_metrics.accuracy,
            val_metrics.accuracy
        );

        if best.as_ref().is_none_or(|(b, _, _)| val_metrics.accuracy > *b) {
            let snapshot =
                model.params.iter().map(|(n, t)| (n.to_string(), t.to_vec())).collect();
            best = Some((val_metrics.accuracy, epoch, snapshot));
        }
    }

    let (best_val_acc, best_epoch) = match best {
        Some((acc_val, epoch, snapshot)) => {
            for (name, data) in &snapshot {
                model.params.get(name)?.data_mut().copy_from_slice(data);
            }
            (acc_val, epoch)
        }
        None => {
            // zero-epoch run: report the initialized model's validation score
            let (_, m) = evaluate_set(&model, val_set)?;
            (m.accuracy, 0)
        }
    };
    Ok(TrainOutcome { model, best_epoch, best_val_acc, metrics_csv: csv })
}

// ---------------------------------------------------------------------------
// Bag assembly over ROI lists

/// Builds patch bags for every ROI, skipping (with a warning) those without
/// tumor nuclei.
pub fn build_bags(rois: &[RoiRecord], config: &IViTConfig) -> Result<Vec<InstanceBag>> {
    let mut out = Vec::with_capacity(rois.len());
    for roi in rois {
        match build_bag(roi, config) {
            Ok(bag) => out.push(bag),
            Err(Error::EmptyBag { roi_id }) => {
                log::warn!("skipping ROI {}: no tumor nuclei", roi_id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Feature-bag analogue of [`build_bags`]. ROIs with fewer than two tumor
/// nuclei cannot provide neighbor distances and are skipped likewise.
pub fn build_feature_bags(rois: &[RoiRecord], config: &IViTConfig) -> Result<Vec<FeatureBag>> {
    let mut out = Vec::with_capacity(rois.len());
    for roi in rois {
        match build_feature_bag(roi, config) {
            Ok(bag) => out.push(bag),
            Err(Error::EmptyBag { roi_id }) => {
                log::warn!("skipping ROI {}: no tumor nuclei", roi_id);
            }
            Err(Error::Contract { op: "cellular_features", .. }) => {
                log::warn!("skipping ROI {}: too few tumor nuclei for neighbor features", roi.roi_id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sensitivity sweep

/// Encoder scales: name, layers, heads. Hidden width is always 128; the
/// digits in the name are layers and heads.
pub const SWEEP_SCALES: [(&str, usize, usize); 3] =
    [("H-24-12", 24, 12), ("M-12-12", 12, 12), ("T-6-6", 6, 6)];

pub fn scale_config(name: &str) -> Option<(usize, usize)> {
    SWEEP_SCALES.iter().find(|(n, _, _)| *n == name).map(|&(_, l, h)| (l, h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub scale: String,
    pub p: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Renders sweep cells as CSV, sorted lexicographically by (scale, P, N).
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut sorted: Vec<&SweepCell> = cells.iter().collect();
    sorted.sort_by(|a, b| a.scale.cmp(&b.scale).then(a.p.cmp(&b.p)).then(a.n.cmp(&b.n)));
    let mut out = String::from("p,n,scale,accuracy\n");
    for c in sorted {
        out.push_str(&format!("{},{},{},{}\n", c.p, c.n, c.scale, c.accuracy));
    }
    out
}

/// Trains and tests the patch model at every (scale, P, N) grid cell. A cell
/// that fails records NaN accuracy and the sweep continues. Each cell builds
/// its own bags (patch size and bag length differ per cell), trains with the
/// run's schedule/epochs/seed, and reports test accuracy of the best-val
/// checkpoint.
pub fn sensitivity_sweep(
    train_rois: &[RoiRecord],
    val_rois: &[RoiRecord],
    test_rois: &[RoiRecord],
    base: &RunConfig,
    p_values: &[usize],
    n_values: &[usize],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for (scale, layers, heads) in SWEEP_SCALES {
        for &p in p_values {
            for &n in n_values {
                let accuracy = run_sweep_cell(
                    train_rois, val_rois, test_rois, base, p, n, layers, heads,
                )
                .unwrap_or_else(|e| {
                    log::warn!("sweep cell {}/P={}/N={} failed: {}", scale, p, n, e);
                    f64::NAN
                });
                log::info!("sweep cell {}/P={}/N={}: accuracy {}", scale, p, n, accuracy);
                cells.push(SweepCell { scale: scale.to_string(), p, n, accuracy });
            }
        }
    }
    Ok(cells)
}

#[allow(clippy::too_many_arguments)]
fn run_sweep_cell(
    train_rois: &[RoiRecord],
    val_rois: &[RoiRecord],
    test_rois: &[RoiRecord],
    base: &RunConfig,
    p: usize,
    n: usize,
    layers: usize,
    heads: usize,
) -> Result<f64> {
    let config = IViTConfig { p, n, d: 128, heads, layers, ..base.model_config() };
    config.validate()?;
    let train_bags = build_bags(train_rois, &config)?;
    let val_bags = build_bags(val_rois, &config)?;
    let test_bags = build_bags(test_rois, &config)?;
    let outcome = train(
        ModelKind::Ivit,
        &config,
        &TrainSet::Patches(&train_bags),
        &TrainSet::Patches(&val_bags),
        &base.schedule(ModelKind::Ivit),
        base.epochs,
        base.batch_size,
        base.seed,
    )?;
    let (_, metrics) = evaluate_set(&outcome.model, &TrainSet::Patches(&test_bags))?;
    Ok(metrics.accuracy)
}
