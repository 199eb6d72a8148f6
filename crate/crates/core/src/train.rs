//! Class weighting, the weighted cross-entropy loss, momentum SGD and the
//! training loop.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{collate, LabelMap, SegSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::Model;
use crate::params::{ParamStore, Session, BN_MOMENTUM};
use crate::seed::rng_for;
use crate::tensor::{Graph, Var};

/// How per-class loss weights are derived from label frequencies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightScheme {
    /// `N / (C * n_c)`.
    #[default]
    InverseFrequency,
    /// `median(f) / f_c` with `f_c = n_c / N`.
    MedianFrequency,
    Uniform,
}

impl WeightScheme {
    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::InverseFrequency => "inverse",
            WeightScheme::MedianFrequency => "median",
            WeightScheme::Uniform => "uniform",
        }
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(WeightScheme::InverseFrequency),
            "median" => Ok(WeightScheme::MedianFrequency),
            "uniform" => Ok(WeightScheme::Uniform),
            other => Err(Error::Config(format!(
                "unknown class weighting '{other}' (expected inverse, median or uniform)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub ignore: Option<u8>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize, ignore: Option<u8>) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
            ignore,
        }
    }

    /// Pixel count per class over `labels`, skipping the ignore label.
    pub fn count(labels: &[&LabelMap], num_classes: usize, ignore: Option<u8>) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; num_classes];
        for m in labels {
            m.validate(num_classes)?;
            for &l in m.data() {
                if Some(l) == ignore || l == IGNORE_LABEL {
                    continue;
                }
                counts[l as usize] += 1;
            }
        }
        Ok(counts)
    }

    /// Weights from class pixel counts. Absent classes get weight 0.
    pub fn from_counts(counts: &[u64], scheme: WeightScheme, ignore: Option<u8>) -> Result<Self> {
        let c = counts.len();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("no labelled pixels to compute class weights from".into()));
        }
        for (k, _) in counts.iter().enumerate().filter(|(_, &n)| n == 0) {
            log::warn!("class {k} never occurs in the training labels; its loss weight is 0");
        }
        let weights = match scheme {
            WeightScheme::Uniform => vec![1.0; c],
            WeightScheme::InverseFrequency => counts
                .iter()
                .map(|&n| if n == 0 { 0.0 } else { total as f64 / (c as f64 * n as f64) })
                .collect(),
            WeightScheme::MedianFrequency => {
                let mut freqs: Vec<f64> = counts
                    .iter()
                    .filter(|&&n| n > 0)
                    .map(|&n| n as f64 / total as f64)
                    .collect();
                freqs.sort_by(f64::total_cmp);
                let m = freqs.len();
                let median = if m % 2 == 1 {
                    freqs[m / 2]
                } else {
                    (freqs[m / 2 - 1] + freqs[m / 2]) / 2.0
                };
                counts
                    .iter()
                    .map(|&n| if n == 0 { 0.0 } else { median / (n as f64 / total as f64) })
                    .collect()
            }
        };
        Ok(ClassWeights { weights, ignore })
    }

    /// Inverse-frequency weights `N / (C * n_c)` over a label set.
    pub fn from_frequency(labels: &[&LabelMap], num_classes: usize, ignore: Option<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot compute class weights from an empty dataset".into()));
        }
        let counts = Self::count(labels, num_classes, ignore)?;
        Self::from_counts(&counts, WeightScheme::InverseFrequency, ignore)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

/// Weighted mean cross-entropy of `logits` (N, C, H, W) against `labels`.
pub fn weighted_cross_entropy(g: &mut Graph, logits: Var, labels: &LabelMap, w: &ClassWeights) -> Result<Var> {
    let s = g.shape(logits);
    if labels.shape() != s.with_channels(1) {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("labels {:?} do not match logits {s:?}", labels.shape()),
        ));
    }
    g.weighted_cross_entropy(logits, labels.data(), &w.weights, w.ignore)
}

/// Momentum SGD state: one zero-initialized velocity per learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    velocities: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, l2: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} not in [0, 1)")));
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!("l2 {l2} must be finite and >= 0")));
        }
        let velocities = store
            .iter()
            .flat_map(|l| l.learnables().into_iter().map(|(_, t)| vec![0.0; t.data().len()]))
            .collect();
        Ok(OptimState {
            lr,
            momentum,
            l2,
            velocities,
        })
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }
}

/// `g' = g + l2 * p; v = momentum * v - lr * g'; p += v` for every learnable.
pub fn sgdm_step(state: &mut OptimState, store: &mut ParamStore) -> Result<()> {
    let (lr, mu, l2) = (state.lr, state.momentum, state.l2);
    let mut vi = 0;
    for layer in store.iter_mut() {
        let id = layer.id.clone();
        for (slot, t) in layer.learnables_mut() {
            let v = state
                .velocities
                .get_mut(vi)
                .filter(|v| v.len() == t.data().len())
                .ok_or_else(|| Error::Usage("optimizer state does not match the parameters".into()))?;
            vi += 1;
            let grad = t
                .grad()
                .ok_or_else(|| Error::Usage(format!("no gradient for {id}.{}; the layer is unreachable from the loss", slot.name())))?
                .to_vec();
            for ((p, vk), gk) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                let g = gk + l2 * *p;
                *vk = mu * *vk - lr * g;
                *p += *vk;
            }
        }
    }
    if vi != state.velocities.len() {
        return Err(Error::Usage("optimizer state does not match the parameters".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Stops after this many iterations even if epochs remain.
    pub max_iters: Option<usize>,
    pub flip: bool,
    pub ignore: Option<u8>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 3,
            lr: 0.001,
            momentum: 0.9,
            l2: 1e-4,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.1,
            max_iters: None,
            flip: false,
            ignore: Some(IGNORE_LABEL),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * self.epochs as f64)
            .count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// `iter,epoch,loss,lr` with shortest round-trip float formatting.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("iter,epoch,loss,lr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iter, r.epoch, r.loss, r.lr);
    }
    out
}

/// One forward/backward/update on a batch; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimState,
    images: &crate::tensor::Tensor,
    labels: &LabelMap,
    weights: &ClassWeights,
) -> Result<f64> {
    let (loss, grads, stats) = {
        let mut s = Session::new(&model.store, true);
        let x = s.graph.constant(images.clone());
        let logits = model.forward_session(&mut s, x)?;
        let loss = weighted_cross_entropy(&mut s.graph, logits, labels, weights)?;
        let value = s.graph.value(loss).data()[0];
        if !value.is_finite() {
            let origin = s
                .graph
                .first_non_finite()
                .map(|(node, op)| format!("first produced by op `{op}` (node {node})"))
                .unwrap_or_else(|| "no intermediate value is non-finite".into());
            return Err(Error::Numeric(format!("loss is {value}; {origin}")));
        }
        s.graph.backward(loss)?;
        (value, s.param_grads(), s.take_stats())
    };
    model.store.clear_grads();
    model.store.load_grads(grads)?;
    sgdm_step(state, &mut model.store)?;
    model.store.update_running_stats(&stats, BN_MOMENTUM)?;
    if let Some(bad) = model
        .store
        .iter()
        .find(|l| l.learnables().iter().any(|(_, t)| !t.is_finite()))
    {
        return Err(Error::Numeric(format!("parameters of {} became non-finite", bad.id)));
    }
    Ok(loss)
}

/// Trains `model` on `data` and returns one history row per iteration.
///
/// Each epoch visits the samples in an order shuffled from `cfg.seed` and
/// the epoch index; optional horizontal flips use the same stream.
pub fn train(model: &mut Model, data: &[SegSample], weights: &ClassWeights, cfg: &TrainConfig) -> Result<Vec<HistoryRow>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if weights.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "{} class weights for a {}-class model",
            weights.num_classes(),
            model.config().num_classes
        )));
    }
    let mut state = OptimState::new(&model.store, cfg.lr, cfg.momentum, cfg.l2)?;
    let mut history = Vec::new();
    let mut iter = 0;
    'epochs: for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        let mut rng = rng_for(cfg.seed, &format!("train.epoch{epoch}"));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_iters.is_some_and(|m| iter >= m) {
                break 'epochs;
            }
            let flipped: Vec<SegSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip && rng.random_bool(0.5) {
                        data[i].flip_horizontal()
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let (images, labels) = collate(&flipped.iter().collect::<Vec<_>>())?;
            let loss = train_step(model, &mut state, &images, &labels, weights)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("iteration {iter} (epoch {epoch}): {msg}")),
                    other => other,
                })?;
            history.push(HistoryRow {
                iter,
                epoch,
                loss,
                lr: state.lr,
            });
            epoch_loss += loss;
            batches += 1;
            iter += 1;
        }
        log::info!("epoch {epoch}: mean loss {:.6} over {batches} batches", epoch_loss / batches.max(1) as f64);
    }
    Ok(history)
}

/// Eval-mode predictions accumulated into a confusion matrix.
pub fn evaluate(model: &Model, data: &[SegSample], batch_size: usize, ignore: Option<u8>) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(model.config().num_classes, ignore);
    for chunk in data.chunks(batch_size.max(1)) {
        let (images, labels) = collate(&chunk.iter().collect::<Vec<_>>())?;
        let pred = model.predict(&images)?;
        cm.accumulate(&pred, &labels)?;
    }
    Ok(cm)
}
