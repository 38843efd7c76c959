//! Peak-memory and latency sweeps over the six model variants.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::attention::{Mechanism, NeighborPattern};
use crate::autograd::{Module, Tape};
use crate::backbone::{build_model, Augment, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::report::{sig6, CsvReport};
use crate::tensor::{score_tracker, tracker_current, tracker_peak, tracker_reset, Float, Tensor};

pub const DEFAULT_SIDES: [usize; 4] = [32, 64, 96, 128];
pub const DEFAULT_BUDGET_BYTES: usize = 2 << 30;
pub const MEMORY_BATCH: usize = 4;
pub const WARMUP: usize = 10;
pub const ITERS: usize = 50;
/// Which passes a memory row covers.
pub const MEMORY_PASS: &str = "forward+backward";

/// Layers (1-based) that carry attention in the augmented variants.
pub const AUGMENTED_LAYERS: [usize; 2] = [3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    ResNet18,
    FullConcat,
    LinformerConcat,
    LongformerConcat,
    LinformerReplace,
    LongformerReplace,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ResNet18,
        Variant::FullConcat,
        Variant::LinformerConcat,
        Variant::LongformerConcat,
        Variant::LinformerReplace,
        Variant::LongformerReplace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ResNet18 => "resnet18",
            Variant::FullConcat => "full-concat",
            Variant::LinformerConcat => "linformer-concat",
            Variant::LongformerConcat => "longformer-concat",
            Variant::LinformerReplace => "linformer-replace",
            Variant::LongformerReplace => "longformer-replace",
        }
    }

    pub fn augment(self) -> Augment {
        match self {
            Variant::ResNet18 => Augment::None,
            Variant::FullConcat | Variant::LinformerConcat | Variant::LongformerConcat => Augment::Concat,
            Variant::LinformerReplace | Variant::LongformerReplace => Augment::Replace,
        }
    }

    pub fn mechanism(self) -> Option<Mechanism> {
        match self {
            Variant::ResNet18 => None,
            Variant::FullConcat => Some(Mechanism::Full),
            Variant::LinformerConcat | Variant::LinformerReplace => Some(Mechanism::Linformer),
            Variant::LongformerConcat | Variant::LongformerReplace => Some(Mechanism::Longformer2D),
        }
    }

    /// `base` with this variant's wiring on layers 3 and 4 and input `side`.
    /// Everything else (widths, heads, k, w) comes from `base`.
    pub fn spec_from(self, base: &ModelSpec, side: usize) -> ModelSpec {
        let mut s = base.clone();
        s.input_side = side;
        for l in &mut s.layers {
            l.augment = Augment::None;
        }
        if let Some(m) = self.mechanism() {
            s.attn.mechanism = m;
        }
        s.with_augment(&AUGMENTED_LAYERS, self.augment())
    }

    pub fn spec(self, side: usize) -> ModelSpec {
        self.spec_from(&ModelSpec::flagship(), side)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Comma-separated variant names.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub fn parse_sides(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("side `{}` is not a positive integer", s.trim())))
        })
        .collect()
}

pub fn check_sides(sides: &[usize]) -> Result<()> {
    if sides.is_empty() {
        return Err(Error::config("no input sides given"));
    }
    for &s in sides {
        if s < 32 || s % 16 != 0 {
            return Err(Error::config(format!("side {s} must be at least 32 and divisible by 16")));
        }
    }
    if sides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("sides {sides:?} must be strictly ascending")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    SkippedBudget,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::SkippedBudget => "skipped-budget",
        }
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(Status::Ok),
            "skipped-budget" => Ok(Status::SkippedBudget),
            other => Err(Error::Format(format!("unknown status `{other}`"))),
        }
    }
}

/// Bytes observed during one forward + backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassMemory {
    /// Absolute high-water mark, including parameters and their gradients.
    pub peak: usize,
    /// High-water mark above what was live before the pass.
    pub activation: usize,
    /// High-water mark of attention score / weight buffers.
    pub scores: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRow {
    pub variant: Variant,
    pub side: usize,
    pub batch: usize,
    /// Tokens entering the first attention block; 0 for the plain model.
    pub tokens: usize,
    pub lower_bound: usize,
    pub status: Status,
    /// `None` on skipped rows.
    pub memory: Option<PassMemory>,
    /// Activation bytes minus the plain model's at the same side.
    pub attention_bytes: Option<i64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
}

impl MemoryReport {
    /// `(tokens, attention bytes)` of the ok rows of `variant`, side ascending.
    pub fn attention_series(&self, variant: Variant) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.status == Status::Ok)
            .filter_map(|r| r.attention_bytes.map(|a| (r.tokens as f64, a as f64)))
            .collect()
    }

    pub fn score_series(&self, variant: Variant) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.memory.map(|m| (r.tokens as f64, m.scores as f64)))
            .collect()
    }

    pub fn row(&self, variant: Variant, side: usize) -> Option<&MemoryRow> {
        self.rows.iter().find(|r| r.variant == variant && r.side == side)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<usize> {
                get(i).parse().map_err(|_| Error::Format(format!("column {i}: `{}`", get(i))))
            };
            let opt = |i: usize| -> Result<Option<usize>> {
                if get(i).is_empty() { Ok(None) } else { num(i).map(Some) }
            };
            let memory = match (opt(4)?, opt(5)?, opt(7)?) {
                (Some(peak), Some(activation), Some(scores)) => Some(PassMemory { peak, activation, scores }),
                _ => None,
            };
            let attention_bytes = if get(6).is_empty() {
                None
            } else {
                Some(get(6).parse().map_err(|_| Error::Format(format!("column 6: `{}`", get(6))))?)
            };
            rows.push(MemoryRow {
                variant: get(0).parse()?,
                side: num(1)?,
                batch: num(2)?,
                tokens: num(3)?,
                memory,
                attention_bytes,
                lower_bound: num(8)?,
                status: get(9).parse()?,
            });
        }
        Ok(Self { rows })
    }
}

impl CsvReport for MemoryReport {
    fn header(&self) -> Vec<&'static str> {
        vec![
            "variant",
            "side",
            "batch",
            "tokens",
            "peak_bytes",
            "activation_bytes",
            "attention_bytes",
            "score_bytes",
            "lower_bound_bytes",
            "status",
            "pass",
        ]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.to_string(),
                    r.side.to_string(),
                    r.batch.to_string(),
                    r.tokens.to_string(),
                    opt(r.memory.map(|m| m.peak)),
                    opt(r.memory.map(|m| m.activation)),
                    r.attention_bytes.map_or_else(String::new, |a| a.to_string()),
                    opt(r.memory.map(|m| m.scores)),
                    r.lower_bound.to_string(),
                    r.status.as_str().to_string(),
                    MEMORY_PASS.to_string(),
                ]
            })
            .collect()
    }
}

/// Tokens entering the first augmented layer's attention block.
pub fn first_attention_tokens(spec: &ModelSpec) -> usize {
    (0..spec.layers.len())
        .find_map(|i| spec.evit_spec(i))
        .map_or(0, |e| e.seq_len())
}

/// Score-buffer elements of one attention pass in layer `idx`, summed over
/// batch and heads.
fn score_elems(spec: &ModelSpec, idx: usize, batch: usize) -> Result<usize> {
    let Some(e) = spec.evit_spec(idx) else { return Ok(0) };
    let n = e.seq_len();
    let per_head = match e.attn.mechanism {
        Mechanism::Full => n * n,
        Mechanism::Linformer => n * e.attn.k_rank,
        Mechanism::Longformer2D => {
            NeighborPattern::longformer2d(e.grid_h, e.grid_w, e.attn.window, e.attn.effective_globals())?.nnz()
        }
    };
    Ok(batch * e.attn.heads * per_head)
}

/// Bytes that must be live at the turn from forward to backward: every conv
/// output (kept for its batch norm) plus one score buffer per attention
/// block. Parameters are not counted.
pub fn analytic_lower_bound<F: Float>(spec: &ModelSpec, batch: usize) -> Result<usize> {
    spec.validate()?;
    let mut elems = batch * spec.stem_channels * spec.input_side * spec.input_side;
    for (i, (l, &(c_in, side))) in spec.layers.iter().zip(&spec.layer_inputs()).enumerate() {
        let out_side = side.div_ceil(l.stride);
        let map = batch * l.channels * out_side * out_side;
        let has_shortcut = l.stride != 1 || c_in != l.channels;
        let head_convs = match l.augment {
            Augment::Replace => 0,
            _ => 2 + has_shortcut as usize,
        };
        elems += map * (head_convs + 2 * (l.blocks - 1));
        elems += score_elems(spec, i, batch)?;
    }
    Ok(elems * F::BYTES)
}

/// One training-mode forward + backward on seeded random input, measured
/// from a freshly reset tracker. The model is built before the reset, so its
/// parameters and gradient slots count only toward `peak`.
pub fn measure_pass(spec: &ModelSpec, batch: usize, seed: u64) -> Result<PassMemory> {
    let mut model = build_model::<f32>(spec, seed)?;
    let shape = [batch, spec.in_channels, spec.input_side, spec.input_side];
    let data = Init::new(seed ^ 0x5eed).standard_normal_vec(shape.iter().product());
    let input = Tensor::<f32>::from_f64(&shape, &data)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.classes).collect();

    tracker_reset();
    let live = tracker_current();
    let score_live = score_tracker().current();
    {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let logits = model.forward(&mut tape, x, true)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        tape.backward_into(loss, model.param_list_mut())?;
    }
    let peak = tracker_peak();
    Ok(PassMemory {
        peak,
        activation: peak.saturating_sub(live),
        scores: score_tracker().peak().saturating_sub(score_live),
    })
}

/// Peak memory of every `(variant, side)`, rows in variant then side order.
/// The plain model is measured at each side as the attribution baseline even
/// when not requested. A row whose analytic lower bound exceeds the budget is
/// skipped without being run.
pub fn bench_peak_memory(
    base: &ModelSpec,
    variants: &[Variant],
    sides: &[usize],
    batch: usize,
    budget_bytes: usize,
    seed: u64,
) -> Result<MemoryReport> {
    check_sides(sides)?;
    if batch == 0 {
        return Err(Error::config("bench batch must be at least 1"));
    }
    let mut variants = variants.to_vec();
    variants.sort();
    variants.dedup();
    for v in &variants {
        for &s in sides {
            v.spec_from(base, s).validate()?;
        }
    }

    let mut baseline: HashMap<usize, Option<PassMemory>> = HashMap::new();
    let run = |v: Variant, side: usize| -> Result<(usize, Option<PassMemory>)> {
        let spec = v.spec_from(base, side);
        let lb = analytic_lower_bound::<f32>(&spec, batch)?;
        if lb > budget_bytes {
            log::info!("{v} @ {side}: lower bound {lb} B exceeds budget, skipped");
            return Ok((lb, None));
        }
        let m = measure_pass(&spec, batch, seed)?;
        log::info!("{v} @ {side}: peak {} B, activation {} B, scores {} B", m.peak, m.activation, m.scores);
        Ok((lb, Some(m)))
    };

    let mut rows = Vec::new();
    for &v in &variants {
        for &side in sides {
            let (lower_bound, memory) = run(v, side)?;
            let base_mem = if v == Variant::ResNet18 {
                *baseline.entry(side).or_insert(memory)
            } else {
                match baseline.get(&side) {
                    Some(m) => *m,
                    None => {
                        let m = run(Variant::ResNet18, side)?.1;
                        baseline.insert(side, m);
                        m
                    }
                }
            };
            let attention_bytes = match (memory, base_mem) {
                (Some(m), Some(b)) => Some(m.activation as i64 - b.activation as i64),
                _ => None,
            };
            rows.push(MemoryRow {
                variant: v,
                side,
                batch,
                tokens: first_attention_tokens(&v.spec_from(base, side)),
                lower_bound,
                status: if memory.is_some() { Status::Ok } else { Status::SkippedBudget },
                memory,
                attention_bytes,
            });
        }
    }
    Ok(MemoryReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub variant: Variant,
    pub side: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, variant: Variant) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let bad = |i: usize| Error::Format(format!("column {i}: `{}`", get(i)));
            rows.push(LatencyRow {
                variant: get(0).parse()?,
                side: get(1).parse().map_err(|_| bad(1))?,
                batch: get(2).parse().map_err(|_| bad(2))?,
                mean_ms: get(3).parse().map_err(|_| bad(3))?,
                std_ms: get(4).parse().map_err(|_| bad(4))?,
                iterations: get(5).parse().map_err(|_| bad(5))?,
            });
        }
        Ok(Self { rows })
    }
}

impl CsvReport for LatencyReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["variant", "side", "batch", "mean_ms_per_image", "std_ms_per_image", "iterations"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.to_string(),
                    r.side.to_string(),
                    r.batch.to_string(),
                    sig6(r.mean_ms),
                    sig6(r.std_ms),
                    r.iterations.to_string(),
                ]
            })
            .collect()
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Eval-mode forward time per image, after `warmup` untimed passes.
///
/// Variants are timed in interleaved rounds, one pass of each per round with
/// the starting variant rotating, so slow drift in machine speed lands on all
/// of them alike.
pub fn bench_latency(
    base: &ModelSpec,
    variants: &[Variant],
    side: usize,
    batch: usize,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<LatencyReport> {
    check_sides(&[side])?;
    if iters < 10 {
        return Err(Error::config(format!("latency needs at least 10 iterations, got {iters}")));
    }
    if batch == 0 {
        return Err(Error::config("bench batch must be at least 1"));
    }
    let mut variants = variants.to_vec();
    variants.sort();
    variants.dedup();
    let mut runs = Vec::with_capacity(variants.len());
    for &v in &variants {
        let spec = v.spec_from(base, side);
        let model = build_model::<f32>(&spec, seed)?;
        let shape = [batch, spec.in_channels, side, side];
        let data = Init::new(seed ^ 0x1a7e).standard_normal_vec(shape.iter().product());
        runs.push((model, Tensor::<f32>::from_f64(&shape, &data)?));
    }
    let pass = |model: &Model<f32>, input: &Tensor<f32>| -> Result<f64> {
        let start = Instant::now();
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let y = model.forward(&mut tape, x, false)?;
        std::hint::black_box(tape.value(y));
        drop(tape);
        Ok(start.elapsed().as_secs_f64() * 1e3 / batch as f64)
    };
    let mut times = vec![Vec::with_capacity(iters); runs.len()];
    for round in 0..warmup + iters {
        for j in 0..runs.len() {
            let k = (round + j) % runs.len();
            let t = pass(&runs[k].0, &runs[k].1)?;
            if round >= warmup {
                times[k].push(t);
            }
        }
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (v, t) in variants.into_iter().zip(&times) {
        let (mean_ms, std_ms) = mean_std(t);
        log::info!("{v} @ {side}: {mean_ms:.3} +- {std_ms:.3} ms/image");
        rows.push(LatencyRow {
            variant: v,
            side,
            batch,
            mean_ms,
            std_ms,
            iterations: iters,
        });
    }
    Ok(LatencyReport { rows })
}

/// Least-squares slope of `ln y` on `ln x`. Needs two or more points with
/// distinct positive `x` and positive `y`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, _) = mean_std(&lx);
    let (my, _) = mean_std(&ly);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("longformer".parse::<Variant>().is_err());
        assert_eq!(
            parse_variants("full-concat, resnet18").unwrap(),
            vec![Variant::FullConcat, Variant::ResNet18]
        );
    }

    #[test]
    fn variant_specs() {
        let s = Variant::LinformerReplace.spec(64);
        assert_eq!(s.input_side, 64);
        assert_eq!(s.attn.mechanism, Mechanism::Linformer);
        let aug: Vec<_> = s.layers.iter().map(|l| l.augment).collect();
        assert_eq!(aug, [Augment::None, Augment::None, Augment::Replace, Augment::Replace]);
        assert!(!Variant::ResNet18.spec(32).is_augmented());
        assert_eq!(first_attention_tokens(&Variant::FullConcat.spec(32)), 64);
    }

    #[test]
    fn side_rules() {
        check_sides(&[32, 48, 128]).unwrap();
        assert!(check_sides(&[40]).is_err());
        assert!(check_sides(&[16]).is_err());
        assert!(check_sides(&[64, 32]).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<_> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.7))).collect();
        assert!((loglog_slope(&pts).unwrap() - 1.7).abs() < 1e-12);
        assert!(loglog_slope(&[(1.0, 1.0)]).is_none());
    }
}
