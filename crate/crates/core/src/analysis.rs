//! Accounting, perplexity and structural reports for pruned models.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{flat_index, split_flat, LayerMask, Model, ModelConfig, SublayerKind};
use crate::search::PruneTrace;
use crate::tensor::log_softmax;

pub const DEFAULT_BYTES_PER_PARAM: u64 = 2;

fn effective_mask(config: &ModelConfig, mask: &LayerMask) -> Result<LayerMask> {
    if mask.len() != config.n_sublayers() {
        return Err(Error::Contract(format!(
            "mask length {} != 2L = {}",
            mask.len(),
            config.n_sublayers()
        )));
    }
    config.removed_mask().union(mask)
}

/// Parameters of one attention sublayer, norm gain included.
pub fn attention_params(c: &ModelConfig) -> u64 {
    let d = c.d_model as u64;
    let hd = c.head_dim as u64;
    d * (c.n_heads as u64 + 2 * c.n_kv_heads as u64) * hd + c.n_heads as u64 * hd * d + d
}

/// Parameters of one FFN sublayer, norm gain included.
pub fn ffn_params(c: &ModelConfig) -> u64 {
    let d = c.d_model as u64;
    3 * d * c.d_ff as u64 + d
}

/// Embedding, untied head and final norm.
pub fn shared_params(c: &ModelConfig) -> u64 {
    let d = c.d_model as u64;
    let v = c.vocab_size as u64;
    let head = if c.tied_head { 0 } else { d * v };
    v * d + head + d
}

pub fn count_params(config: &ModelConfig, mask: &LayerMask) -> Result<u64> {
    let mask = effective_mask(config, mask)?;
    let mut total = shared_params(config);
    for flat in mask.unset_indices() {
        total += match split_flat(flat).1 {
            SublayerKind::Attention => attention_params(config),
            SublayerKind::Ffn => ffn_params(config),
        };
    }
    Ok(total)
}

/// MACs of one attention sublayer over `n` positions: Q/K/V projections,
/// full `n × n` score and value-mix products, output projection.
pub fn attention_macs(c: &ModelConfig, n: u64) -> u64 {
    let d = c.d_model as u64;
    let hd = c.head_dim as u64;
    let h = c.n_heads as u64;
    let kv = c.n_kv_heads as u64;
    n * d * (h + 2 * kv) * hd + 2 * n * n * h * hd + n * h * hd * d
}

pub fn ffn_macs(c: &ModelConfig, n: u64) -> u64 {
    3 * n * c.d_model as u64 * c.d_ff as u64
}

/// Prediction head; the embedding lookup is free.
pub fn head_macs(c: &ModelConfig, n: u64) -> u64 {
    n * c.d_model as u64 * c.vocab_size as u64
}

pub fn count_macs(config: &ModelConfig, mask: &LayerMask, context_len: usize) -> Result<u64> {
    if context_len == 0 {
        return Err(Error::Contract("context length must be at least 1".into()));
    }
    let mask = effective_mask(config, mask)?;
    let n = context_len as u64;
    let mut total = head_macs(config, n);
    for flat in mask.unset_indices() {
        total += match split_flat(flat).1 {
            SublayerKind::Attention => attention_macs(config, n),
            SublayerKind::Ffn => ffn_macs(config, n),
        };
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: u64,
    pub macs: u64,
    pub context_len: usize,
    pub bytes_per_param: u64,
    /// `params × bytes_per_param`; an estimate of the weight footprint.
    pub est_memory_bytes: u64,
}

pub fn model_stats(
    config: &ModelConfig,
    mask: &LayerMask,
    context_len: usize,
    bytes_per_param: u64,
) -> Result<ModelStats> {
    let params = count_params(config, mask)?;
    Ok(ModelStats {
        params,
        macs: count_macs(config, mask, context_len)?,
        context_len,
        bytes_per_param,
        est_memory_bytes: params * bytes_per_param,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub n_predictions: usize,
}

/// Token-weighted perplexity of the masked model: every position except the
/// last predicts the following token, and all predictions across the corpus
/// are averaged together.
pub fn eval_perplexity(
    model: &Model,
    mask: &LayerMask,
    corpus: &CalibrationSet,
) -> Result<Perplexity> {
    let mut total_nll = 0.0f64;
    let mut count = 0usize;
    for (s, seq) in corpus.sequences().iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::Input(format!(
                "sequence {s} has fewer than 2 tokens"
            )));
        }
        let logits = model.forward_masked(seq, mask)?;
        for i in 0..seq.len() - 1 {
            let row: Vec<f64> = logits.position(i).iter().map(|&v| v as f64).collect();
            let lp = log_softmax(&row)?;
            total_nll -= lp[seq[i + 1] as usize];
            count += 1;
        }
    }
    let mean_nll = total_nll / count as f64;
    Ok(Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        n_predictions: count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStatus {
    Intact,
    AttnPruned,
    FfnPruned,
    BlockPruned,
}

impl BlockStatus {
    fn letter(self) -> Option<char> {
        match self {
            BlockStatus::Intact => None,
            BlockStatus::AttnPruned => Some('A'),
            BlockStatus::FfnPruned => Some('F'),
            BlockStatus::BlockPruned => Some('T'),
        }
    }
}

/// Inclusive range of block indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub start: usize,
    pub end: usize,
}

impl BlockSpan {
    fn label(&self) -> String {
        if self.start == self.end {
            self.start.to_string()
        } else {
            format!("{}-{}", self.start, self.end)
        }
    }
}

/// FFN of `ffn_block` and attention of `ffn_block + 1` both dropped: the
/// two blocks collapse into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub ffn_block: usize,
    pub attention_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub n_blocks: usize,
    pub blocks: Vec<BlockStatus>,
    pub attention_pruned: usize,
    pub ffn_pruned: usize,
    pub blocks_pruned: usize,
    pub ratio: f64,
    /// Maximal runs of consecutive blocks whose attention is dropped.
    pub attention_runs: Vec<BlockSpan>,
    pub merge_events: Vec<MergeEvent>,
}

impl MaskReport {
    pub fn pruned_total(&self) -> usize {
        self.attention_pruned + self.ffn_pruned
    }

    /// Run-length notation such as `A13 A15 A18-19 T20 A21-24`: consecutive
    /// blocks with the same status share one entry; `A` attention only, `F`
    /// FFN only, `T` whole block.
    pub fn notation(&self) -> String {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < self.blocks.len() {
            let status = self.blocks[i];
            let mut j = i;
            while j + 1 < self.blocks.len() && self.blocks[j + 1] == status {
                j += 1;
            }
            if let Some(letter) = status.letter() {
                parts.push(format!(
                    "{letter}{}",
                    BlockSpan { start: i, end: j }.label()
                ));
            }
            i = j + 1;
        }
        parts.join(" ")
    }
}

pub fn classify_mask(mask: &LayerMask) -> MaskReport {
    let n_blocks = mask.n_blocks();
    let blocks: Vec<BlockStatus> = (0..n_blocks)
        .map(|l| {
            let a = mask.is_set(flat_index(l, SublayerKind::Attention));
            let f = mask.is_set(flat_index(l, SublayerKind::Ffn));
            match (a, f) {
                (false, false) => BlockStatus::Intact,
                (true, false) => BlockStatus::AttnPruned,
                (false, true) => BlockStatus::FfnPruned,
                (true, true) => BlockStatus::BlockPruned,
            }
        })
        .collect();

    let attn = |l: usize| mask.is_set(flat_index(l, SublayerKind::Attention));
    let ffn = |l: usize| mask.is_set(flat_index(l, SublayerKind::Ffn));

    let mut attention_runs = Vec::new();
    let mut l = 0;
    while l < n_blocks {
        if attn(l) {
            let start = l;
            while l + 1 < n_blocks && attn(l + 1) {
                l += 1;
            }
            attention_runs.push(BlockSpan { start, end: l });
        }
        l += 1;
    }

    let merge_events = (0..n_blocks.saturating_sub(1))
        .filter(|&l| ffn(l) && attn(l + 1))
        .map(|l| MergeEvent {
            ffn_block: l,
            attention_block: l + 1,
        })
        .collect();

    MaskReport {
        n_blocks,
        attention_pruned: (0..n_blocks).filter(|&l| attn(l)).count(),
        ffn_pruned: (0..n_blocks).filter(|&l| ffn(l)).count(),
        blocks_pruned: blocks
            .iter()
            .filter(|&&s| s == BlockStatus::BlockPruned)
            .count(),
        ratio: mask.ratio(),
        blocks,
        attention_runs,
        merge_events,
    }
}

const BLOCKS_PER_ROW: usize = 10;

/// Plain-text report of a trace and its mask classification.
pub fn render_report(trace: &PruneTrace, report: &MaskReport) -> Result<String> {
    if trace.final_mask.n_blocks() != report.n_blocks {
        return Err(Error::Contract(format!(
            "trace covers {} blocks, report {}",
            trace.final_mask.n_blocks(),
            report.n_blocks
        )));
    }
    let mask = &trace.final_mask;
    let mut out = String::new();
    // writes to a String cannot fail
    let _ = writeln!(out, "sublayer pruning report");
    let _ = writeln!(
        out,
        "metric: {}  target ratio: {}  window: last {} of blocks while pruned <= {}",
        trace.metric, trace.target_ratio, trace.window_fraction, trace.window_ratio_cutoff
    );
    if !trace.calibration_fingerprint.is_empty() {
        let _ = writeln!(out, "calibration: {}", trace.calibration_fingerprint);
    }
    let _ = writeln!(
        out,
        "sublayers: {}  pruned: {}  realized ratio: {:.6}",
        mask.len(),
        report.pruned_total(),
        report.ratio
    );
    let _ = writeln!(out, "attention pruned: {}", report.attention_pruned);
    let _ = writeln!(out, "ffn pruned: {}", report.ffn_pruned);
    let _ = writeln!(out, "blocks pruned: {}", report.blocks_pruned);
    let _ = writeln!(out);

    let _ = writeln!(out, "layout (two cells per block: attention, ffn)");
    let _ = writeln!(
        out,
        "legend: A = attention pruned, F = ffn pruned, . = kept"
    );
    for row_start in (0..report.n_blocks).step_by(BLOCKS_PER_ROW) {
        let row_end = (row_start + BLOCKS_PER_ROW).min(report.n_blocks);
        let cells: Vec<String> = (row_start..row_end)
            .map(|l| {
                let a = if mask.is_set(2 * l) { 'A' } else { '.' };
                let f = if mask.is_set(2 * l + 1) { 'F' } else { '.' };
                format!("{a}{f}")
            })
            .collect();
        let _ = writeln!(out, "  {:>4} | {}", row_start, cells.join(" "));
    }
    let _ = writeln!(out);

    let notation = report.notation();
    let _ = writeln!(
        out,
        "pruned layers: {}",
        if notation.is_empty() {
            "none"
        } else {
            &notation
        }
    );
    let runs: Vec<String> = report.attention_runs.iter().map(BlockSpan::label).collect();
    let _ = writeln!(
        out,
        "attention runs: {}",
        if runs.is_empty() {
            "none".to_string()
        } else {
            runs.join(", ")
        }
    );
    let merges: Vec<String> = report
        .merge_events
        .iter()
        .map(|m| format!("F{}+A{}", m.ffn_block, m.attention_block))
        .collect();
    let _ = writeln!(
        out,
        "block merges: {}",
        if merges.is_empty() {
            "none".to_string()
        } else {
            merges.join(", ")
        }
    );

    if !trace.steps.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>5}  {:>6}  {:<9}  {:>5}  q_min",
            "step", "layer", "kind", "block"
        );
        for s in &trace.steps {
            let (block, kind) = split_flat(s.layer);
            let kind = match kind {
                SublayerKind::Attention => "attention",
                SublayerKind::Ffn => "ffn",
            };
            let _ = writeln!(
                out,
                "{:>5}  {:>6}  {:<9}  {:>5}  {:.9e}",
                s.step, s.layer, kind, block, s.q_min
            );
        }
    }
    Ok(out)
}
