//! SGD training, top-k metrics and the per-epoch convergence trace.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::autograd::{Module, Param, Tape};
use crate::backbone::Model;
use crate::data::{batch_iter, sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::report::sig6;
use crate::tensor::{tracker_peak, tracker_reset, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// Half-cosine from `lr` to 0 over the epoch budget.
    Cosine,
    /// `lr`, then x0.1 at 50% and again at 75% of the epochs.
    Step,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Step => "step",
        }
    }

    /// Learning rate for 0-based `epoch` of `epochs`.
    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let t = epoch as f64 / epochs.max(1) as f64;
        match self {
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * t).cos()),
            LrSchedule::Step if t >= 0.75 => base * 0.01,
            LrSchedule::Step if t >= 0.5 => base * 0.1,
            LrSchedule::Step => base,
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(LrSchedule::Cosine),
            "step" => Ok(LrSchedule::Step),
            other => Err(Error::config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap on the gradient; 0 disables clipping.
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub convergence_window: usize,
    pub convergence_delta: f64,
    /// Random crop + flip on training batches.
    pub augment: bool,
    /// Write wall-clock seconds; when off the column holds 0 so reruns are
    /// byte-identical.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 5.0,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            convergence_window: 5,
            convergence_delta: 0.3,
            augment: true,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::InvalidValue {
            key: key.into(),
            msg: msg.into(),
        });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1");
        }
        if self.convergence_window == 0 {
            return bad("train.convergence_window", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("train.weight_decay", "must be non-negative");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("train.grad_clip", "must be non-negative");
        }
        if self.convergence_delta.is_nan() || self.convergence_delta < 0.0 {
            return bad("train.convergence_delta", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

/// Momentum buffers, one per parameter in visiting order.
#[derive(Default)]
pub struct SgdState<F: Float> {
    velocity: Vec<Tensor<F>>,
}

impl<F: Float> SgdState<F> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }
}

/// Global L2 norm over every parameter gradient, accumulated in f64.
pub fn grad_norm<F: Float>(params: &[&mut Param<F>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn clip_scale(norm: f64, cap: f64) -> f64 {
    if cap > 0.0 && norm > cap {
        cap / norm
    } else {
        1.0
    }
}

/// `v <- m v + g + wd p; p <- p - lr v`, reading `g` from each parameter's
/// gradient slot. With `grad_clip > 0`, `g` is first scaled so its global L2
/// norm is at most `grad_clip`. Nothing is updated when any gradient is
/// non-finite.
pub fn sgd_step<F: Float>(params: &mut [&mut Param<F>], state: &mut SgdState<F>, cfg: &SgdConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.has_non_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient in `{}`", p.name)));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let (lr, m, wd) = (F::of(cfg.lr), F::of(cfg.momentum), F::of(cfg.weight_decay));
    let scale = F::of(clip_scale(grad_norm(params), cfg.grad_clip));
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if v.shape() != p.shape() {
            return Err(Error::dim("sgd_step", v.shape(), p.shape()));
        }
        let g = p.grad.data();
        let vd = v.data_mut();
        let pd = p.value.data_mut();
        for i in 0..pd.len() {
            vd[i] = m * vd[i] + scale * g[i] + wd * pd[i];
            pd[i] -= lr * vd[i];
        }
    }
    Ok(())
}

/// Rows whose label is among the `k` largest logits; on equal logits the
/// lower class index ranks first.
pub fn topk_hits<F: Float>(logits: &Tensor<F>, labels: &[usize], k: usize) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("topk_accuracy", s, &[labels.len()]));
    }
    let c = s[1];
    if k == 0 || k > c {
        return Err(Error::Input(format!("k = {k} outside 1..={c}")));
    }
    let mut hits = 0;
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        if y >= c {
            return Err(Error::Input(format!("label {y} out of range for {c} classes")));
        }
        let t = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > t || (v == t && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Percentage in `[0, 100]`.
pub fn topk_accuracy<F: Float>(logits: &Tensor<F>, labels: &[usize], k: usize) -> Result<f64> {
    let hits = topk_hits(logits, labels, k)?;
    Ok(if labels.is_empty() { 0.0 } else { 100.0 * hits as f64 / labels.len() as f64 })
}

/// Eval-mode `(top1, top5)` over the whole dataset. Top-5 falls back to
/// top-`classes` for models with fewer than 5 classes.
pub fn evaluate<F: Float>(model: &Model<F>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let k5 = model.spec.classes.min(5);
    let (mut h1, mut h5) = (0, 0);
    for b in sequential_batches::<F>(ds, batch)? {
        let mut tape = Tape::inference();
        let x = tape.constant(b.images);
        let y = model.forward(&mut tape, x, false)?;
        h1 += topk_hits(tape.value(y), &b.labels, 1)?;
        h5 += topk_hits(tape.value(y), &b.labels, k5)?;
    }
    let n = ds.len() as f64;
    Ok((100.0 * h1 as f64 / n, 100.0 * h5 as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    EpochBudget,
    /// Test top-1 range over the window fell below the threshold.
    Converged,
    Diverged(String),
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// One loss + gradient + update on a batch; returns the pre-step loss.
pub fn train_step<F: Float>(
    model: &mut Model<F>,
    images: Tensor<F>,
    labels: &[usize],
    state: &mut SgdState<F>,
    sgd: &SgdConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let logits = model.forward(&mut tape, x, true)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss became {value}")));
    }
    model.zero_grad();
    tape.backward_into(loss, model.param_list_mut())?;
    sgd_step(&mut model.param_list_mut(), state, sgd)?;
    Ok(value)
}

/// Mean cross-entropy of a batch in training mode without touching the
/// batch-norm running statistics.
pub fn batch_loss<F: Float>(model: &Model<F>, images: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    let saved: Vec<_> = model.batch_norms().iter().map(|(_, s)| s.snapshot()).collect();
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let logits = model.forward(&mut tape, x, true)?;
    let loss = tape.cross_entropy(logits, labels)?;
    for ((_, s), (m, v)) in model.batch_norms().iter().zip(saved) {
        s.set(m, v);
    }
    Ok(tape.value(loss).item().to_f64().unwrap_or(f64::NAN))
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Epoch loop: shuffled training pass, then test evaluation. Stops at the
/// epoch budget, on convergence, or on divergence (keeping completed epochs).
pub fn train<F: Float>(model: &mut Model<F>, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut state = SgdState::new();
    for epoch in 0..cfg.epochs {
        tracker_reset();
        let start = Instant::now();
        let sgd = SgdConfig {
            lr: cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
        };
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for b in batch_iter::<F>(train_ds, cfg.batch_size, shuffle_seed(cfg.seed, epoch), cfg.augment)? {
            let n = b.labels.len();
            match train_step(model, b.images, &b.labels, &mut state, &sgd) {
                Ok(l) => loss_sum += l * n as f64,
                Err(Error::Diverged(msg)) => {
                    log::warn!("epoch {}: {msg}", epoch + 1);
                    return Ok(TrainRun {
                        records,
                        stop: StopReason::Diverged(msg),
                    });
                }
                Err(e) => return Err(e),
            }
            seen += n;
        }
        let (top1, top5) = evaluate(model, test_ds, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
            top1,
            top5,
            seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
            peak_bytes: tracker_peak(),
        };
        log::info!(
            "epoch {} lr {:.4} loss {:.4} top1 {:.2} top5 {:.2}",
            rec.epoch,
            sgd.lr,
            rec.train_loss,
            rec.top1,
            rec.top5
        );
        records.push(rec);
        if converged(&records, cfg.convergence_window, cfg.convergence_delta) {
            log::info!("converged after {} epochs", records.len());
            return Ok(TrainRun {
                records,
                stop: StopReason::Converged,
            });
        }
    }
    Ok(TrainRun {
        records,
        stop: StopReason::EpochBudget,
    })
}

/// `max - min` of test top-1 over the last `window` epochs is below `delta`.
pub fn converged(records: &[EpochRecord], window: usize, delta: f64) -> bool {
    if window == 0 || records.len() < window {
        return false;
    }
    let tail = &records[records.len() - window..];
    let hi = tail.iter().map(|r| r.top1).fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().map(|r| r.top1).fold(f64::INFINITY, f64::min);
    hi - lo < delta
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "train_loss", "top1", "top5", "seconds", "peak_bytes"];

pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            sig6(r.train_loss),
            sig6(r.top1),
            sig6(r.top5),
            sig6(r.seconds),
            r.peak_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let field = |j: usize| -> Result<&str> {
            row.get(j).ok_or_else(|| Error::Format(format!("metrics row {i} has {} fields", row.len())))
        };
        let num = |j: usize| -> Result<f64> {
            field(j)?.parse().map_err(|_| Error::Format(format!("metrics row {i}, column {j}")))
        };
        let int = |j: usize| -> Result<usize> {
            field(j)?.parse().map_err(|_| Error::Format(format!("metrics row {i}, column {j}")))
        };
        out.push(EpochRecord {
            epoch: int(0)?,
            train_loss: num(1)?,
            top1: num(2)?,
            top5: num(3)?,
            seconds: num(4)?,
            peak_bytes: int(5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Cosine.lr_at(0.1, 0, 10), 0.1);
        assert!((LrSchedule::Cosine.lr_at(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(LrSchedule::Step.lr_at(1.0, 4, 10), 1.0);
        assert!((LrSchedule::Step.lr_at(1.0, 5, 10) - 0.1).abs() < 1e-15);
        assert!((LrSchedule::Step.lr_at(1.0, 8, 10) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn convergence_rule() {
        let rec = |top1| EpochRecord {
            epoch: 0,
            train_loss: 0.0,
            top1,
            top5: 100.0,
            seconds: 0.0,
            peak_bytes: 0,
        };
        let rs: Vec<_> = [50.0, 60.0, 70.0, 70.1, 70.2].into_iter().map(rec).collect();
        assert!(!converged(&rs, 5, 0.3));
        assert!(converged(&rs, 3, 0.3));
        assert!(!converged(&rs[..2], 3, 0.3));
    }
}
