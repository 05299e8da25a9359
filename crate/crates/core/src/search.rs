//! Iterative greedy sublayer removal and an exhaustive oracle for small
//! models.
//!
//! Each greedy step tries every candidate sublayer, measures how far the
//! pruned model's logits move from the original model's logits on the
//! calibration set, and drops the candidate with the smallest change. The
//! scan runs in ascending flat index and keeps a candidate when
//! `q <= q_min`, so among tied candidates the largest index wins.
//! Candidates are scored in parallel; the selection is always replayed
//! serially in ascending order, so the trace does not depend on the number
//! of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::metrics::{mean_over_samples, sequence_objective, MetricKind};
use crate::model::{LayerMask, Logits, Model};

pub const TRACE_VERSION: u32 = 1;
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.6;
pub const DEFAULT_WINDOW_RATIO_CUTOFF: f64 = 0.4;
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

/// Slack for float comparisons on ratios derived from integer counts.
const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub target_ratio: f64,
    pub metric: MetricKind,
    /// Fraction of trailing blocks eligible while the window is active.
    pub window_fraction: f64,
    /// The window is active while the pruned fraction is at most this.
    pub window_ratio_cutoff: f64,
    /// Worker threads for candidate scoring; 0 lets rayon decide.
    #[serde(skip)]
    pub threads: usize,
}

impl PruneConfig {
    pub fn new(target_ratio: f64, metric: MetricKind) -> Self {
        PruneConfig {
            target_ratio,
            metric,
            window_fraction: DEFAULT_WINDOW_FRACTION,
            window_ratio_cutoff: DEFAULT_WINDOW_RATIO_CUTOFF,
            threads: 0,
        }
    }

    /// Every sublayer is a candidate at every step.
    pub fn full_window(mut self) -> Self {
        self.window_fraction = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::Config(format!(
                "target ratio {} must lie in (0, 1)",
                self.target_ratio
            )));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "window fraction {} must lie in (0, 1]",
                self.window_fraction
            )));
        }
        if !self.window_ratio_cutoff.is_finite() {
            return Err(Error::Config("window cutoff must be finite".into()));
        }
        Ok(())
    }
}

/// Number of sublayers to drop: `2L·r` rounded half up.
pub fn target_count(n_blocks: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("ratio {ratio} must lie in (0, 1)")));
    }
    let total = 2 * n_blocks;
    let k = (total as f64 * ratio + 0.5 + RATIO_EPS).floor() as usize;
    if k == 0 || k >= total {
        return Err(Error::Config(format!(
            "ratio {ratio} over {total} sublayers gives a degenerate target of {k}"
        )));
    }
    Ok(k)
}

/// Unmasked flat indices eligible at the current step, ascending.
///
/// While `popcount/2L <= window_ratio_cutoff`, only sublayers of blocks
/// `>= floor(L·(1 - window_fraction))` qualify; afterwards every unmasked
/// sublayer does.
pub fn candidate_window(mask: &LayerMask, config: &PruneConfig) -> Vec<usize> {
    let n_blocks = mask.n_blocks();
    let windowed = mask.ratio() <= config.window_ratio_cutoff + RATIO_EPS;
    let first_block = if windowed {
        ((n_blocks as f64) * (1.0 - config.window_fraction) + RATIO_EPS).floor() as usize
    } else {
        0
    };
    (2 * first_block..mask.len())
        .filter(|&i| !mask.is_set(i))
        .collect()
}

/// Unpruned logits for every calibration sample, computed once.
pub fn reference_logits(model: &Model, calib: &CalibrationSet) -> Result<Vec<Logits>> {
    calib
        .sequences()
        .iter()
        .map(|seq| model.forward(seq))
        .collect()
}

/// Objective between the reference logits and the model under `mask`.
pub fn mask_objective(
    model: &Model,
    mask: &LayerMask,
    calib: &CalibrationSet,
    kind: MetricKind,
    original: &[Logits],
) -> Result<f64> {
    if original.len() != calib.len() {
        return Err(Error::Contract(format!(
            "{} reference outputs for {} calibration samples",
            original.len(),
            calib.len()
        )));
    }
    let per_sample = calib
        .sequences()
        .iter()
        .zip(original)
        .map(|(seq, reference)| {
            let pruned = model.forward_masked(seq, mask)?;
            sequence_objective(reference, &pruned, kind)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_samples(&per_sample)
}

/// Objective after additionally dropping sublayer `flat` from `base`.
pub fn evaluate_removal(
    model: &Model,
    base: &LayerMask,
    flat: usize,
    calib: &CalibrationSet,
    kind: MetricKind,
    original: &[Logits],
) -> Result<f64> {
    if flat >= base.len() {
        return Err(Error::Contract(format!(
            "sublayer {flat} out of range for {} sublayers",
            base.len()
        )));
    }
    if base.is_set(flat) {
        return Err(Error::Contract(format!(
            "sublayer {flat} is already masked"
        )));
    }
    mask_objective(model, &base.with(flat), calib, kind, original)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub layer: usize,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub step: usize,
    /// Flat index of the sublayer dropped at this step.
    pub layer: usize,
    pub q_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<CandidateScore>>,
}

/// Ordered record of the greedy decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub trace_version: u32,
    pub metric: MetricKind,
    pub target_ratio: f64,
    #[serde(default = "default_window_fraction")]
    pub window_fraction: f64,
    #[serde(default = "default_window_cutoff")]
    pub window_ratio_cutoff: f64,
    #[serde(default)]
    pub calibration_fingerprint: String,
    pub steps: Vec<PruneStep>,
    pub final_mask: LayerMask,
}

fn default_window_fraction() -> f64 {
    DEFAULT_WINDOW_FRACTION
}

fn default_window_cutoff() -> f64 {
    DEFAULT_WINDOW_RATIO_CUTOFF
}

impl PruneTrace {
    /// Checks the bookkeeping invariants: distinct chosen layers whose
    /// replay reconstructs `final_mask`.
    pub fn validate(&self) -> Result<()> {
        if self.trace_version != TRACE_VERSION {
            return Err(Error::Input(format!(
                "trace_version {} is not supported (expected {TRACE_VERSION})",
                self.trace_version
            )));
        }
        let mut replay = LayerMask::empty(self.final_mask.n_blocks());
        for (i, s) in self.steps.iter().enumerate() {
            if s.step != i {
                return Err(Error::Input(format!("step {i} is numbered {}", s.step)));
            }
            if s.layer >= replay.len() || replay.is_set(s.layer) {
                return Err(Error::Input(format!(
                    "step {i}: layer {} is out of range or repeated",
                    s.layer
                )));
            }
            replay.set(s.layer);
        }
        if replay != self.final_mask {
            return Err(Error::Input(
                "replaying the steps does not reproduce final_mask".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let trace: PruneTrace = serde_json::from_str(text)?;
        trace.validate()?;
        Ok(trace)
    }
}

/// Reads a mask from either a bare 0/1 array or any JSON object carrying a
/// `final_mask` array (such as a trace).
pub fn mask_from_json(text: &str) -> Result<LayerMask> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let array = match &value {
        serde_json::Value::Array(_) => value,
        serde_json::Value::Object(map) => map
            .get("final_mask")
            .cloned()
            .ok_or_else(|| Error::Input("mask JSON object has no `final_mask`".into()))?,
        _ => {
            return Err(Error::Input(
                "mask JSON must be an array or an object".into(),
            ))
        }
    };
    Ok(serde_json::from_value(array)?)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn require_full_model(model: &Model) -> Result<()> {
    if !model.config().removed_sublayers.is_empty() {
        return Err(Error::Config(
            "search needs a model with every sublayer present".into(),
        ));
    }
    Ok(())
}

fn check_calibration(model: &Model, calib: &CalibrationSet) -> Result<()> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    calib.check_vocab(model.config().vocab_size)
}

fn finite(layer: usize, q: f64) -> Result<f64> {
    if q.is_finite() {
        Ok(q)
    } else {
        Err(Error::MetricDomain(format!(
            "objective for sublayer {layer} is not finite"
        )))
    }
}

/// Greedy search until `target_count(L, r)` sublayers are dropped.
pub fn greedy_prune(
    model: &Model,
    calib: &CalibrationSet,
    config: &PruneConfig,
) -> Result<PruneTrace> {
    config.validate()?;
    require_full_model(model)?;
    check_calibration(model, calib)?;
    let n_blocks = model.config().n_blocks;
    let target = target_count(n_blocks, config.target_ratio)?;
    let pool = thread_pool(config.threads)?;
    let original = reference_logits(model, calib)?;

    let mut mask = LayerMask::empty(n_blocks);
    let mut steps = Vec::with_capacity(target);
    while mask.popcount() < target {
        let candidates = candidate_window(&mask, config);
        if candidates.is_empty() {
            return Err(Error::SearchExhausted {
                pruned: mask.popcount(),
                target,
            });
        }
        let scores: Vec<f64> = pool.install(|| {
            candidates
                .par_iter()
                .map(|&l| {
                    evaluate_removal(model, &mask, l, calib, config.metric, &original)
                        .and_then(|q| finite(l, q))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut q_min = f64::INFINITY;
        let mut l_min = candidates[0];
        for (&l, &q) in candidates.iter().zip(&scores) {
            if q <= q_min {
                q_min = q;
                l_min = l;
            }
        }
        mask.set(l_min);
        steps.push(PruneStep {
            step: steps.len(),
            layer: l_min,
            q_min,
            candidate_scores: Some(
                candidates
                    .iter()
                    .zip(&scores)
                    .map(|(&layer, &q)| CandidateScore { layer, q })
                    .collect(),
            ),
        });
    }

    Ok(PruneTrace {
        trace_version: TRACE_VERSION,
        metric: config.metric,
        target_ratio: config.target_ratio,
        window_fraction: config.window_fraction,
        window_ratio_cutoff: config.window_ratio_cutoff,
        calibration_fingerprint: calib.fingerprint().to_string(),
        steps,
        final_mask: mask,
    })
}

/// `n choose k` in exact integer arithmetic, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub k: usize,
    pub metric: MetricKind,
    pub mask: LayerMask,
    pub objective: f64,
    pub evaluated: u128,
}

/// Advances `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact minimizer over all masks with exactly `k` bits set (no window).
///
/// Masks are enumerated as ascending index tuples in lexicographic order
/// and a strictly smaller objective is required to replace the incumbent,
/// so ties resolve to the lexicographically smallest index tuple.
pub fn brute_force_oracle(
    model: &Model,
    calib: &CalibrationSet,
    k: usize,
    kind: MetricKind,
    cap: u128,
    threads: usize,
) -> Result<OracleResult> {
    require_full_model(model)?;
    check_calibration(model, calib)?;
    let n = model.config().n_sublayers();
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "oracle size k = {k} must lie in 1..{n}"
        )));
    }
    let count = binomial(n, k);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let pool = thread_pool(threads)?;
    let original = reference_logits(model, calib)?;
    let n_blocks = model.config().n_blocks;

    const CHUNK: usize = 1024;
    let mut idx: Vec<usize> = (0..k).collect();
    let mut more = true;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut evaluated: u128 = 0;
    while more {
        let mut chunk = Vec::with_capacity(CHUNK);
        while more && chunk.len() < CHUNK {
            chunk.push(idx.clone());
            more = next_combination(&mut idx, n);
        }
        let scores: Vec<f64> = pool.install(|| {
            chunk
                .par_iter()
                .map(|combo| {
                    let mask = LayerMask::from_indices(n_blocks, combo)?;
                    mask_objective(model, &mask, calib, kind, &original)
                        .and_then(|q| finite(combo[0], q))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        evaluated += chunk.len() as u128;
        for (combo, q) in chunk.into_iter().zip(scores) {
            if best.as_ref().is_none_or(|(_, b)| q < *b) {
                best = Some((combo, q));
            }
        }
    }
    let (combo, objective) = best.expect("at least one combination is enumerated");
    Ok(OracleResult {
        k,
        metric: kind,
        mask: LayerMask::from_indices(n_blocks, &combo)?,
        objective,
        evaluated,
    })
}

/// Reads `FINERCUT_THREADS` (0 or unset = automatic).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("FINERCUT_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("FINERCUT_THREADS=`{v}` is not a count"))),
        _ => Ok(0),
    }
}
