//! Loss, optimizer, learning-rate schedule, and the train/validate loop.
//!
//! Training is deliberately plain: per-sample tapes, batch-mean gradients
//! reduced in a fixed order, global-norm clipping, decoupled AdamW, and a
//! one-cycle cosine schedule. Every stochastic choice (init, shuffling,
//! dropout masks) flows from the seed in [`TrainConfig`], so two runs with
//! equal seeds produce bitwise-identical epoch logs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{bind, forward, init_params, Mode, ViskGatConfig};
use crate::tensor::{ErgRng, ParamMap, Scalar, Tensor};

/// AdamW moment decay rates.
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
/// AdamW denominator epsilon.
pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent ramping up to `peak_lr`.
    pub warmup_fraction: f64,
    /// Start/end learning rate is `peak_lr / div_factor`.
    pub div_factor: f64,
    pub label_smoothing: f64,
    /// Global L2 gradient clip threshold (may be infinite).
    pub clip_norm: f64,
    pub seed: u64,
    /// Train/validation/test fractions; must sum to 1.
    pub split_fractions: [f64; 3],
    /// Optional early stop: end training once the epoch's training
    /// accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            peak_lr: 3e-4,
            // Meaningful decay matters here: the fusion stack pools to a
            // single post-norm token, and with near-zero decay the easiest
            // descent direction is to inflate a constant component until
            // normalization cancels the input signal entirely (the model
            // then predicts the class prior forever). Decay at this scale
            // keeps that attractor out of reach.
            weight_decay: 2e-2,
            warmup_fraction: 0.10,
            div_factor: 1000.0,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            seed: 42,
            split_fractions: [0.70, 0.10, 0.20],
            stop_at_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0) || !(self.div_factor >= 1.0) {
            return fail(format!(
                "peak_lr {} must be positive and div_factor {} at least 1",
                self.peak_lr, self.div_factor
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("warmup_fraction {} outside (0,1)", self.warmup_fraction));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm {} must be positive", self.clip_norm));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("split_fractions sum to {sum}, expected 1"));
        }
        if self.split_fractions[0] <= 0.0 || self.split_fractions.iter().any(|&f| f < 0.0) {
            return fail("split fractions must be nonnegative with a positive train share".into());
        }
        if let Some(t) = self.stop_at_train_acc {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("stop_at_train_acc {t} outside [0,1]"));
            }
        }
        Ok(())
    }
}

/// One labeled sample: rendered frame, pose matrix, class in `0..classes`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub pose: Tensor<f32>,
    pub label: usize,
}

/// Disjoint index lists covering a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: within every class, indices are shuffled by `seed` and
/// apportioned by largest-remainder rounding, so per-class counts stay
/// within one sample of the exact fractional targets.
pub fn stratified_split(labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let rng = ErgRng::seed(seed);
    let mut out = SplitIndices { train: vec![], val: vec![], test: vec![] };
    for (class, mut idx) in by_class {
        idx.shuffle(&mut rng.stream(class as u64));
        let n = idx.len();
        let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        // Hand out the remainder by largest fractional part; ties go to
        // the earlier split (train before val before test).
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for k in 0..(n - assigned) {
            counts[order[k % 3]] += 1;
        }
        let (a, b) = (counts[0], counts[0] + counts[1]);
        out.train.extend_from_slice(&idx[..a]);
        out.val.extend_from_slice(&idx[a..b]);
        out.test.extend_from_slice(&idx[b..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Mean smoothed cross-entropy of a logits batch, computed directly (no
/// graph): targets are one-hot mixed with uniform at rate `smoothing`.
pub fn cross_entropy_smoothed<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    smoothing: f64,
) -> Result<f64> {
    let (n, c) = logits.dims2();
    if labels.len() != n {
        return Err(Error::Value(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Value(format!("label {label} outside 0..{c}")));
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let uniform = smoothing / c as f64;
        let mut loss = 0.0;
        for (j, v) in row.iter().enumerate() {
            let q = uniform + if j == label { 1.0 - smoothing } else { 0.0 };
            loss -= q * (v - lse);
        }
        total += loss;
    }
    Ok(total / n as f64)
}

/// Graph node for one sample's smoothed cross-entropy.
pub fn smoothed_ce_var<'g, S: Scalar>(
    g: &'g Graph<S>,
    logits_row: Var<'g, S>,
    label: usize,
    smoothing: f64,
    classes: usize,
) -> Result<Var<'g, S>> {
    if label >= classes {
        return Err(Error::Value(format!("label {label} outside 0..{classes}")));
    }
    let uniform = smoothing / classes as f64;
    let mut q = Tensor::full(vec![1, classes], S::from_f64(uniform));
    q.data_mut()[label] = S::from_f64(uniform + 1.0 - smoothing);
    Ok(logits_row.log_softmax_rows().hadamard(g.constant(q)).sum().scale(-1.0))
}

/// First/second-moment state for [`adamw_step`].
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    m: ParamMap<S>,
    v: ParamMap<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamMap<S>) -> Self {
        let zeros = |p: &ParamMap<S>| {
            p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect()
        };
        AdamState { step: 0, m: zeros(params), v: zeros(params) }
    }
}

/// One decoupled-weight-decay Adam update: parameters first shrink by
/// `lr * weight_decay`, then move against the bias-corrected moment ratio.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamMap<S>,
    grads: &ParamMap<S>,
    state: &mut AdamState<S>,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len()
        || !grads.keys().eq(params.keys())
        || !state.m.keys().eq(params.keys())
    {
        return Err(Error::Config("optimizer state and gradients must mirror the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::from_f64(betas.0), S::from_f64(betas.1));
    let bc1 = S::from_f64(1.0 - betas.0.powi(t));
    let bc2 = S::from_f64(1.0 - betas.1.powi(t));
    let lr_s = S::from_f64(lr);
    let decay = S::from_f64(1.0 - lr * weight_decay);
    let eps_s = S::from_f64(eps);
    for (name, theta) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != theta.shape() {
            return Err(Error::Config(format!("gradient shape mismatch for '{name}'")));
        }
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (S::ONE - b1) * gi;
            let vi = b2 * v.data()[i] + (S::ONE - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let p = theta.data()[i] * decay;
            theta.data_mut()[i] = p - lr_s * mhat / (vhat.sqrt() + eps_s);
        }
    }
    Ok(())
}

/// One-cycle learning rate: cosine ramp from `peak/div_factor` up to
/// `peak_lr` over the first `warmup_fraction` of steps, cosine decay back
/// down over the rest.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Value(format!("step {step} outside 0..={total_steps}")));
    }
    let min_lr = cfg.peak_lr / cfg.div_factor;
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    let span = |s: usize, len: usize, from: f64, to: f64| -> f64 {
        if len == 0 {
            return to;
        }
        let cos = (std::f64::consts::PI * s as f64 / len as f64).cos();
        to + (from - to) * (1.0 + cos) / 2.0
    };
    Ok(if step <= warmup {
        span(step, warmup, min_lr, cfg.peak_lr)
    } else {
        span(step - warmup, total_steps - warmup, cfg.peak_lr, min_lr)
    })
}

/// Everything a training run produces.
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the final epoch when no
    /// validation samples exist).
    pub params: ParamMap<f32>,
    /// Parameters after the last epoch.
    pub final_params: ParamMap<f32>,
    /// CSV log: `epoch,lr,train_loss,train_acc,val_loss,val_acc`.
    pub log_csv: String,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub split: SplitIndices,
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-sample work item result: loss, gradient map, correctness flag.
type StepResult = (f64, ParamMap<f32>, bool);

fn sample_pass(
    sample: &Sample,
    params: &ParamMap<f32>,
    model_cfg: &ViskGatConfig,
    smoothing: f64,
    dropout_rng: &mut ErgRng,
) -> Result<StepResult> {
    let g = Graph::new();
    let vars = bind(&g, params, true);
    let out = forward(&g, &sample.image, &sample.pose, &vars, model_cfg, Mode::Train, dropout_rng)?;
    let loss = smoothed_ce_var(&g, out.logits_row, sample.label, smoothing, model_cfg.num_classes)?;
    let loss_value = loss.value().item().to_f64();
    g.backward(loss)?;
    let grads: ParamMap<f32> = vars
        .iter()
        .map(|(k, v)| {
            let grad =
                g.grad(*v).unwrap_or_else(|| Tensor::zeros(params[k].shape().to_vec()));
            (k.clone(), grad)
        })
        .collect();
    let correct = argmax(out.logits.value().data()) == sample.label;
    Ok((loss_value, grads, correct))
}

/// Train the network on `data`. The dataset is split internally (stratified
/// by label with `cfg.seed`); every epoch logs one CSV line via `on_epoch`
/// and into the returned log.
pub fn train(
    model_cfg: &ViskGatConfig,
    cfg: &TrainConfig,
    data: &[Sample],
    mut on_epoch: impl FnMut(&str),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Value("training dataset is empty".into()));
    }
    for s in data {
        if s.label >= model_cfg.num_classes {
            return Err(Error::Value(format!(
                "sample '{}' has label {} outside 0..{}",
                s.id, s.label, model_cfg.num_classes
            )));
        }
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, cfg.split_fractions, cfg.seed)?;
    if split.train.is_empty() {
        return Err(Error::Value("train split is empty".into()));
    }

    let rng = ErgRng::seed(cfg.seed);
    let mut params: ParamMap<f32> = init_params(model_cfg, &mut rng.stream(0))?;
    let mut adam = AdamState::new(&params);
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut log = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
    let mut best_params = params.clone();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut step = 0usize;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng.stream(1_000 + epoch as u64));
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        let mut last_lr = 0.0f64;

        for batch in order.chunks(cfg.batch_size) {
            let lr = onecycle_lr(step, total_steps, cfg)?;
            last_lr = lr;
            let results: Vec<Result<StepResult>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut dropout_rng = ErgRng::seed(cfg.seed ^ 0xD120_77A5)
                        .stream(epoch as u64 * data.len() as u64 + idx as u64);
                    sample_pass(&data[idx], &params, model_cfg, cfg.label_smoothing, &mut dropout_rng)
                })
                .collect();
            let mut grads_total: Option<ParamMap<f32>> = None;
            let mut batch_loss = 0.0f64;
            for r in results {
                let (loss, grads, ok) = r?;
                batch_loss += loss;
                if ok {
                    correct += 1;
                }
                match &mut grads_total {
                    None => grads_total = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            acc.get_mut(&name).unwrap().add_assign(&g);
                        }
                    }
                }
            }
            let mut grads = grads_total.unwrap();
            let inv = 1.0 / batch.len() as f64;
            for t in grads.values_mut() {
                *t = t.scale(inv as f32);
            }
            batch_loss *= inv;
            epoch_loss += batch_loss * batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adamw_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay, ADAM_BETAS, ADAM_EPS)?;
            step += 1;
        }

        let train_loss = epoch_loss / split.train.len() as f64;
        let train_acc = correct as f64 / split.train.len() as f64;
        let (val_loss, val_acc) = if split.val.is_empty() {
            (0.0, 0.0)
        } else {
            let ev = evaluate(&params, model_cfg, data, &split.val, cfg.label_smoothing)?;
            (ev.mean_loss, ev.accuracy)
        };
        let line = format!("{epoch},{last_lr},{train_loss},{train_acc},{val_loss},{val_acc}");
        on_epoch(&line);
        let _ = writeln!(log, "{line}");
        epochs_run = epoch + 1;

        if split.val.is_empty() || val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_params = params.clone();
            best_epoch = epoch;
        }
        if cfg.stop_at_train_acc.is_some_and(|t| train_acc >= t) {
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        log_csv: log,
        best_epoch,
        best_val_acc: best_val_acc.max(0.0),
        epochs_run,
        split,
    })
}

/// Predictions and probabilities over one split, eval mode.
pub struct EvalOutputs {
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    /// Per-sample softmax rows.
    pub probs: Vec<Vec<f64>>,
    /// Mean smoothed cross-entropy at the given smoothing rate.
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Run eval-mode forward over `indices` and collect predictions.
pub fn evaluate(
    params: &ParamMap<f32>,
    model_cfg: &ViskGatConfig,
    data: &[Sample],
    indices: &[usize],
    smoothing: f64,
) -> Result<EvalOutputs> {
    if indices.is_empty() {
        return Err(Error::Value("evaluation split is empty".into()));
    }
    let rows: Vec<Result<(usize, usize, Vec<f64>, f64)>> = indices
        .par_iter()
        .map(|&idx| {
            let s = &data[idx];
            let (logits, probs) = crate::model::predict(&s.image, &s.pose, params, model_cfg)?;
            let loss = cross_entropy_smoothed(
                &Tensor::new(vec![1, model_cfg.num_classes], logits.data().to_vec()),
                &[s.label],
                smoothing,
            )?;
            let p64: Vec<f64> = probs.data().iter().map(|&v| v as f64).collect();
            Ok((s.label, argmax(logits.data()), p64, loss))
        })
        .collect();
    let mut out = EvalOutputs {
        labels: Vec::new(),
        preds: Vec::new(),
        probs: Vec::new(),
        mean_loss: 0.0,
        accuracy: 0.0,
    };
    let mut correct = 0usize;
    for r in rows {
        let (label, pred, probs, loss) = r?;
        if pred == label {
            correct += 1;
        }
        out.labels.push(label);
        out.preds.push(pred);
        out.probs.push(probs);
        out.mean_loss += loss;
    }
    out.mean_loss /= indices.len() as f64;
    out.accuracy = correct as f64 / indices.len() as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_ce_uniform_logits_is_ln_8() {
        let logits = Tensor::full(vec![4, 8], 0.7f64);
        for smoothing in [0.0, 0.1, 0.4] {
            let loss = cross_entropy_smoothed(&logits, &[0, 3, 5, 7], smoothing).unwrap();
            assert!((loss - (8.0f64).ln()).abs() < 1e-12, "smoothing {smoothing}: {loss}");
        }
    }

    #[test]
    fn smoothed_ce_confident_correct_approaches_zero() {
        let mut logits = Tensor::zeros(vec![1, 8]);
        logits.data_mut()[2] = 60.0f64;
        let loss = cross_entropy_smoothed(&logits, &[2], 0.0).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn smoothed_ce_matches_per_sample_oracle() {
        let mut rng = ErgRng::seed(3);
        let mut logits = Tensor::<f64>::zeros(vec![5, 8]);
        rng.fill_uniform(&mut logits, -2.0, 2.0);
        let labels = [1usize, 0, 7, 4, 4];
        let smoothing = 0.1;
        let got = cross_entropy_smoothed(&logits, &labels, smoothing).unwrap();

        let mut want = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                let p = v.exp() / z;
                let q = smoothing / 8.0 + if j == label { 1.0 - smoothing } else { 0.0 };
                want -= q * p.ln();
            }
        }
        want /= labels.len() as f64;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn smoothed_ce_rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(vec![2, 8]);
        assert!(cross_entropy_smoothed(&logits, &[0, 8], 0.1).is_err());
        assert!(cross_entropy_smoothed(&logits, &[0], 0.1).is_err());
    }

    #[test]
    fn graph_ce_matches_direct_ce() {
        let mut rng = ErgRng::seed(4);
        let mut logits = Tensor::<f64>::zeros(vec![1, 8]);
        rng.fill_uniform(&mut logits, -2.0, 2.0);
        let g = Graph::new();
        let lv = g.constant(logits.clone());
        let loss = smoothed_ce_var(&g, lv, 5, 0.1, 8).unwrap().value().item();
        let want = cross_entropy_smoothed(&logits, &[5], 0.1).unwrap();
        assert!((loss - want).abs() < 1e-12);
    }

    fn scalar_map(v: f64) -> ParamMap<f64> {
        [("theta".to_string(), Tensor::scalar(v))].into()
    }

    #[test]
    fn adamw_zero_grads_zero_decay_is_identity() {
        let mut params = scalar_map(1.5);
        let grads = scalar_map(0.0);
        let mut st = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut st, 0.1, 0.0, ADAM_BETAS, ADAM_EPS).unwrap();
        assert_eq!(params["theta"].item(), 1.5);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut params = scalar_map(1.0);
        let grads = scalar_map(1.0);
        let mut st = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut st, 0.1, 0.0, ADAM_BETAS, ADAM_EPS).unwrap();
        // Bias-corrected m-hat and v-hat are both 1 after one step, so the
        // update is lr / (1 + eps).
        assert!((params["theta"].item() - 0.9).abs() < 1e-3);
    }

    #[test]
    fn adamw_decay_only_scales_exactly() {
        let mut params = scalar_map(2.0);
        let grads = scalar_map(0.0);
        let mut st = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut st, 0.1, 0.5, ADAM_BETAS, ADAM_EPS).unwrap();
        assert_eq!(params["theta"].item(), 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn adamw_rejects_mismatched_state() {
        let mut params = scalar_map(1.0);
        let grads: ParamMap<f64> = [("other".to_string(), Tensor::scalar(0.0))].into();
        let mut st = AdamState::new(&params);
        assert!(adamw_step(&mut params, &grads, &mut st, 0.1, 0.0, ADAM_BETAS, ADAM_EPS).is_err());
    }

    #[test]
    fn adamw_reduces_convex_quadratic_loss() {
        // f(x) = 0.5 xT A x with A positive definite; one small-lr step
        // from a random start must reduce f, across ten seeds.
        for seed in 0..10 {
            let mut rng = ErgRng::seed(seed);
            let n = 4;
            let mut b = Tensor::zeros(vec![n, n]);
            rng.fill_uniform(&mut b, -1.0, 1.0);
            let mut a = b.transpose2().matmul(&b);
            for i in 0..n {
                a.data_mut()[i * n + i] += 1.0;
            }
            let mut x = Tensor::zeros(vec![n, 1]);
            rng.fill_uniform(&mut x, -2.0, 2.0);
            let f = |x: &Tensor<f64>| -> f64 {
                0.5 * x.transpose2().matmul(&a).matmul(x).item()
            };
            let before = f(&x);
            let grad = a.matmul(&x);
            let mut params: ParamMap<f64> = [("x".to_string(), x.clone())].into();
            let grads: ParamMap<f64> = [("x".to_string(), grad)].into();
            let mut st = AdamState::new(&params);
            adamw_step(&mut params, &grads, &mut st, 1e-3, 0.0, ADAM_BETAS, ADAM_EPS).unwrap();
            let after = f(&params["x"]);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn onecycle_endpoints_and_peak() {
        let cfg = TrainConfig::default();
        let total = 400;
        let lr0 = onecycle_lr(0, total, &cfg).unwrap();
        assert!((lr0 - 3e-7).abs() / 3e-7 < 1e-9, "{lr0}");
        let warmup = (0.10f64 * total as f64).ceil() as usize;
        let peak = onecycle_lr(warmup, total, &cfg).unwrap();
        assert!((peak - 3e-4).abs() / 3e-4 < 1e-9, "{peak}");
        let last = onecycle_lr(total, total, &cfg).unwrap();
        assert!((last - 3e-7).abs() / 3e-7 < 1e-9, "{last}");
        assert!(onecycle_lr(total + 1, total, &cfg).is_err());
    }

    #[test]
    fn onecycle_is_unimodal() {
        let cfg = TrainConfig::default();
        let total = 137;
        let lrs: Vec<f64> = (0..=total).map(|s| onecycle_lr(s, total, &cfg).unwrap()).collect();
        let peak_at = lrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for w in lrs[..=peak_at].windows(2) {
            assert!(w[1] >= w[0] - 1e-15);
        }
        for w in lrs[peak_at..].windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn stratified_split_80_samples_10_per_class() {
        let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let split = stratified_split(&labels, [0.70, 0.10, 0.20], 9).unwrap();
        assert_eq!(split.train.len(), 56);
        assert_eq!(split.val.len(), 8);
        assert_eq!(split.test.len(), 16);
        for class in 0..8 {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == class).count();
            assert_eq!(count(&split.train), 7);
            assert_eq!(count(&split.val), 1);
            assert_eq!(count(&split.test), 2);
        }
    }

    #[test]
    fn stratified_split_is_disjoint_covering_and_seeded() {
        let mut rng = ErgRng::seed(17);
        let labels: Vec<usize> =
            (0..143).map(|_| rand::Rng::gen_range(&mut rng, 0..5)).collect();
        let a = stratified_split(&labels, [0.70, 0.10, 0.20], 31).unwrap();
        let b = stratified_split(&labels, [0.70, 0.10, 0.20], 31).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> =
            a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..143).collect();
        assert_eq!(all, expect);
        let c = stratified_split(&labels, [0.70, 0.10, 0.20], 32).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    fn toy_dataset(n: usize, cfg: &ViskGatConfig, seed: u64) -> Vec<Sample> {
        let mut rng = ErgRng::seed(seed);
        (0..n)
            .map(|i| {
                let mut image = Tensor::zeros(vec![3, cfg.image_size, cfg.image_size]);
                let mut pose = Tensor::zeros(vec![cfg.pose_points, 2]);
                rng.fill_uniform(&mut image, 0.0, 1.0);
                rng.fill_uniform(&mut pose, 0.0, 1.0);
                Sample { id: format!("s{i}"), image, pose, label: i % cfg.num_classes }
            })
            .collect()
    }

    #[test]
    fn initial_loss_is_near_ln_8() {
        let model_cfg = ViskGatConfig::tiny();
        let data = toy_dataset(8, &model_cfg, 5);
        let mut rng = ErgRng::seed(1);
        let params: ParamMap<f32> = init_params(&model_cfg, &mut rng).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let ev = evaluate(&params, &model_cfg, &data, &idx, 0.1).unwrap();
        // Fresh parameters give roughly-uniform predictions, so the loss
        // sits near ln(8); the fan-in-scaled init leaves logits with
        // modest spread, hence the loose band.
        assert!(
            (ev.mean_loss - (8.0f64).ln()).abs() < 0.6,
            "initial loss {}",
            ev.mean_loss
        );
    }

    #[test]
    fn short_training_run_is_deterministic_and_learns() {
        let model_cfg = ViskGatConfig::tiny();
        let data = toy_dataset(16, &model_cfg, 6);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            split_fractions: [0.75, 0.125, 0.125],
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || train(&model_cfg, &cfg, &data, |_| ()).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.log_csv, b.log_csv);
        assert_eq!(a.epochs_run, 6);
        let first: f64 = a.log_csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
        let last: f64 = a.log_csv.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert!(last < first, "loss did not fall: {first} -> {last}");
        for (pa, pb) in a.params.values().zip(b.params.values()) {
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn early_stop_halts_on_train_accuracy() {
        let model_cfg = ViskGatConfig::tiny();
        let data = toy_dataset(8, &model_cfg, 7);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            // Trivially satisfied threshold: any accuracy qualifies.
            stop_at_train_acc: Some(0.0),
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&model_cfg, &cfg, &data, |_| ()).unwrap();
        assert_eq!(out.epochs_run, 1);
    }

    #[test]
    fn train_rejects_empty_and_bad_labels() {
        let model_cfg = ViskGatConfig::tiny();
        let cfg = TrainConfig::default();
        assert!(train(&model_cfg, &cfg, &[], |_| ()).is_err());
        let mut data = toy_dataset(4, &model_cfg, 8);
        data[0].label = 8;
        assert!(train(&model_cfg, &cfg, &data, |_| ()).is_err());
    }
}
