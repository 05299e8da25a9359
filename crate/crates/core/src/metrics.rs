//! Output-change measures between original and pruned logits, and their
//! aggregation over positions and calibration samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Logits;
use crate::tensor::log_softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "acos")]
    Angular,
    #[serde(rename = "norm")]
    Euclidean,
    #[serde(rename = "js")]
    JensenShannon,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::Angular,
        MetricKind::Euclidean,
        MetricKind::JensenShannon,
    ];

    /// Command-line label.
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Angular => "acos",
            MetricKind::Euclidean => "norm",
            MetricKind::JensenShannon => "js",
        }
    }

    pub fn distance(self, z: &[f32], z_pruned: &[f32]) -> Result<f64> {
        match self {
            MetricKind::Angular => angular_distance(z, z_pruned),
            MetricKind::Euclidean => euclidean_distance(z, z_pruned),
            MetricKind::JensenShannon => js_divergence(z, z_pruned),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acos" => Ok(MetricKind::Angular),
            "norm" => Ok(MetricKind::Euclidean),
            "js" => Ok(MetricKind::JensenShannon),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected acos, norm or js)"
            ))),
        }
    }
}

fn check_lengths(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "logit vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("empty logit vectors".into()));
    }
    Ok(())
}

/// `arccos` of the cosine similarity, cosine clamped to `[-1, 1]`.
pub fn angular_distance(z: &[f32], z_pruned: &[f32]) -> Result<f64> {
    check_lengths(z, z_pruned)?;
    let mut dot = 0.0f64;
    let mut nz = 0.0f64;
    let mut nt = 0.0f64;
    for (&a, &b) in z.iter().zip(z_pruned) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nz += a * a;
        nt += b * b;
    }
    if nz == 0.0 || nt == 0.0 {
        return Err(Error::MetricDomain(
            "angular distance of a zero-norm logit vector".into(),
        ));
    }
    // single sqrt of the product: identical inputs give a cosine of exactly 1
    let cos = (dot / (nz * nt).sqrt()).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

pub fn euclidean_distance(z: &[f32], z_pruned: &[f32]) -> Result<f64> {
    check_lengths(z, z_pruned)?;
    let sum: f64 = z
        .iter()
        .zip(z_pruned)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Jensen-Shannon divergence (natural log) between `softmax(z)` and
/// `softmax(z_pruned)`. Evaluated in log space; result in `[0, ln 2]`.
pub fn js_divergence(z: &[f32], z_pruned: &[f32]) -> Result<f64> {
    check_lengths(z, z_pruned)?;
    let zs: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let ts: Vec<f64> = z_pruned.iter().map(|&v| v as f64).collect();
    let ls = log_softmax(&zs)?;
    let lt = log_softmax(&ts)?;
    let mut kl_s = 0.0f64;
    let mut kl_t = 0.0f64;
    for (&a, &b) in ls.iter().zip(&lt) {
        let lm = if a == b {
            a
        } else {
            log_add_exp(a, b) - std::f64::consts::LN_2
        };
        let (pa, pb) = (a.exp(), b.exp());
        if pa > 0.0 {
            kl_s += pa * (a - lm);
        }
        if pb > 0.0 {
            kl_t += pb * (b - lm);
        }
    }
    let js = 0.5 * kl_s + 0.5 * kl_t;
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Mean over positions of the per-position distance.
pub fn sequence_objective(original: &Logits, pruned: &Logits, kind: MetricKind) -> Result<f64> {
    let (a, b) = (original.matrix(), pruned.matrix());
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Contract("logits with zero positions".into()));
    }
    let mut total = 0.0f64;
    for i in 0..a.rows() {
        total += kind.distance(a.row(i), b.row(i))?;
    }
    Ok(total / a.rows() as f64)
}

/// Unweighted mean of per-sample values.
pub fn mean_over_samples(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("objective over an empty sample set".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-sample `sequence_objective`, then the unweighted mean across samples.
pub fn corpus_objective(pairs: &[(&Logits, &Logits)], kind: MetricKind) -> Result<f64> {
    let per_sample = pairs
        .iter()
        .map(|(o, p)| sequence_objective(o, p, kind))
        .collect::<Result<Vec<_>>>()?;
    mean_over_samples(&per_sample)
}
