//! Decoder-only transformer with per-sublayer skipping.
//!
//! Architecture: token embedding, `n_blocks` pre-norm blocks each holding a
//! grouped-query attention sublayer (RoPE on queries and keys) and a SwiGLU
//! FFN sublayer, each wrapped in a residual connection, then a final RMS
//! norm and the prediction head. A masked sublayer is replaced by the
//! residual identity, including its norm.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{self, dot, matmul, Matrix};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub tied_head: bool,
    /// Flat sublayer indices whose weights were physically dropped from
    /// this model. Sorted, unique. Empty for a full model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed_sublayers: Vec<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) is not a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) != n_heads ({}) * head_dim ({})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim ({}) must be even for rotary embeddings",
                self.head_dim
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        let n = self.n_sublayers();
        if self.removed_sublayers.windows(2).any(|w| w[0] >= w[1])
            || self.removed_sublayers.iter().any(|&i| i >= n)
        {
            return Err(Error::Config(format!(
                "removed_sublayers must be sorted, unique and below {n}"
            )));
        }
        Ok(())
    }

    /// `2L`: number of prunable sublayers.
    pub fn n_sublayers(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn is_removed(&self, flat: usize) -> bool {
        self.removed_sublayers.binary_search(&flat).is_ok()
    }

    /// Mask of the sublayers that are physically absent.
    pub fn removed_mask(&self) -> LayerMask {
        let mut m = LayerMask::empty(self.n_blocks);
        for &i in &self.removed_sublayers {
            m.bits[i] = true;
        }
        m
    }
}

/// Which half of a block a flat sublayer index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerKind {
    Attention,
    Ffn,
}

/// Splits a flat index into `(block, kind)`: `2l` is attention, `2l+1` FFN.
pub fn split_flat(flat: usize) -> (usize, SublayerKind) {
    let kind = if flat.is_multiple_of(2) {
        SublayerKind::Attention
    } else {
        SublayerKind::Ffn
    };
    (flat / 2, kind)
}

pub fn flat_index(block: usize, kind: SublayerKind) -> usize {
    match kind {
        SublayerKind::Attention => 2 * block,
        SublayerKind::Ffn => 2 * block + 1,
    }
}

/// Indicator vector over the `2L` sublayers; `true` means dropped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerMask {
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn empty(n_blocks: usize) -> Self {
        LayerMask {
            bits: vec![false; 2 * n_blocks],
        }
    }

    pub fn full(n_blocks: usize) -> Self {
        LayerMask {
            bits: vec![true; 2 * n_blocks],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() || !bits.len().is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "mask length {} is not a positive even number",
                bits.len()
            )));
        }
        Ok(LayerMask { bits })
    }

    pub fn from_indices(n_blocks: usize, indices: &[usize]) -> Result<Self> {
        let mut m = LayerMask::empty(n_blocks);
        for &i in indices {
            if i >= m.len() {
                return Err(Error::Contract(format!(
                    "sublayer index {i} out of range for {} sublayers",
                    m.len()
                )));
            }
            m.bits[i] = true;
        }
        Ok(m)
    }

    /// Parses a 0/1 array such as the `final_mask` of a trace.
    pub fn from_01(values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Input(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        LayerMask::from_bits(bits)
    }

    pub fn to_01(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.bits.len() / 2
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_set(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn set(&mut self, flat: usize) {
        self.bits[flat] = true;
    }

    /// Copy of this mask with `flat` additionally set.
    pub fn with(&self, flat: usize) -> LayerMask {
        let mut m = self.clone();
        m.bits[flat] = true;
        m
    }

    pub fn union(&self, other: &LayerMask) -> Result<LayerMask> {
        if self.len() != other.len() {
            return Err(Error::Contract(format!(
                "mask lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(LayerMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Realized pruning ratio `popcount / 2L`.
    pub fn ratio(&self) -> f64 {
        self.popcount() as f64 / self.len() as f64
    }

    pub fn set_indices(&self) -> Vec<usize> {
        self.unset_or_set(true)
    }

    pub fn unset_indices(&self) -> Vec<usize> {
        self.unset_or_set(false)
    }

    fn unset_or_set(&self, want: bool) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == want)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Serialized as a JSON array of 0/1 of length `2L`.
impl Serialize for LayerMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_01().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayerMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<u8>::deserialize(d)?;
        LayerMask::from_01(&values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub norm_gain: Vec<f32>,
    /// `d × (n_heads·head_dim)`
    pub wq: Matrix,
    /// `d × (n_kv_heads·head_dim)`
    pub wk: Matrix,
    pub wv: Matrix,
    /// `(n_heads·head_dim) × d`
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub norm_gain: Vec<f32>,
    /// `d × d_ff`
    pub w_gate: Matrix,
    pub w_up: Matrix,
    /// `d_ff × d`
    pub w_down: Matrix,
}

/// One decoder block. A sublayer is `None` only when it was physically
/// removed (listed in `ModelConfig::removed_sublayers`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: Option<AttentionWeights>,
    pub ffn: Option<FfnWeights>,
}

/// Per-position next-token logits, `N × |V|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Matrix);

impl Logits {
    pub fn n_positions(&self) -> usize {
        self.0.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.0.cols()
    }

    pub fn position(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn bit_eq(&self, other: &Logits) -> bool {
        self.0.shape() == other.0.shape()
            && self
                .0
                .data()
                .iter()
                .zip(other.0.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    /// `|V| × d`
    embedding: Matrix,
    blocks: Vec<BlockWeights>,
    final_norm: Vec<f32>,
    /// `d × |V|`; `None` when the head is tied to the embedding.
    head: Option<Matrix>,
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Contract(format!(
            "{name}: expected {rows}x{cols}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn check_len(name: &str, v: &[f32], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Contract(format!(
            "{name}: expected length {len}, got {}",
            v.len()
        )));
    }
    Ok(())
}

impl AttentionWeights {
    fn validate(&self, c: &ModelConfig, block: usize) -> Result<()> {
        let p = |s: &str| format!("blocks.{block}.{s}");
        check_len(&p("attn_norm"), &self.norm_gain, c.d_model)?;
        check_shape(&p("wq"), &self.wq, c.d_model, c.q_dim())?;
        check_shape(&p("wk"), &self.wk, c.d_model, c.kv_dim())?;
        check_shape(&p("wv"), &self.wv, c.d_model, c.kv_dim())?;
        check_shape(&p("wo"), &self.wo, c.q_dim(), c.d_model)
    }
}

impl FfnWeights {
    fn validate(&self, c: &ModelConfig, block: usize) -> Result<()> {
        let p = |s: &str| format!("blocks.{block}.{s}");
        check_len(&p("ffn_norm"), &self.norm_gain, c.d_model)?;
        check_shape(&p("w_gate"), &self.w_gate, c.d_model, c.d_ff)?;
        check_shape(&p("w_up"), &self.w_up, c.d_model, c.d_ff)?;
        check_shape(&p("w_down"), &self.w_down, c.d_ff, c.d_model)
    }
}

impl Model {
    pub fn new(
        config: ModelConfig,
        embedding: Matrix,
        blocks: Vec<BlockWeights>,
        final_norm: Vec<f32>,
        head: Option<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        check_shape("embed", &embedding, config.vocab_size, config.d_model)?;
        check_len("final_norm", &final_norm, config.d_model)?;
        match (&head, config.tied_head) {
            (Some(h), false) => check_shape("head", h, config.d_model, config.vocab_size)?,
            (None, true) => {}
            (Some(_), true) => {
                return Err(Error::Contract("tied model must not carry a head".into()))
            }
            (None, false) => return Err(Error::Contract("untied model needs a head".into())),
        }
        if blocks.len() != config.n_blocks {
            return Err(Error::Contract(format!(
                "expected {} blocks, got {}",
                config.n_blocks,
                blocks.len()
            )));
        }
        for (l, b) in blocks.iter().enumerate() {
            let attn_removed = config.is_removed(flat_index(l, SublayerKind::Attention));
            let ffn_removed = config.is_removed(flat_index(l, SublayerKind::Ffn));
            match (&b.attn, attn_removed) {
                (Some(a), false) => a.validate(&config, l)?,
                (None, true) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "block {l}: attention presence disagrees with removed_sublayers"
                    )))
                }
            }
            match (&b.ffn, ffn_removed) {
                (Some(f), false) => f.validate(&config, l)?,
                (None, true) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "block {l}: FFN presence disagrees with removed_sublayers"
                    )))
                }
            }
        }
        Ok(Model {
            config,
            embedding,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn head(&self) -> Option<&Matrix> {
        self.head.as_ref()
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [BlockWeights] {
        &mut self.blocks
    }

    pub(crate) fn head_mut(&mut self) -> Option<&mut Matrix> {
        self.head.as_mut()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Logits> {
        self.forward_masked(tokens, &LayerMask::empty(self.config.n_blocks))
    }

    /// Non-autoregressive forward pass with the sublayers in `mask` skipped.
    pub fn forward_masked(&self, tokens: &[u32], mask: &LayerMask) -> Result<Logits> {
        let c = &self.config;
        if mask.len() != c.n_sublayers() {
            return Err(Error::Contract(format!(
                "mask length {} != 2L = {}",
                mask.len(),
                c.n_sublayers()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut h = Matrix::zeros(tokens.len(), c.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= c.vocab_size {
                return Err(Error::Input(format!(
                    "token id {t} at position {i} is outside the vocabulary of {}",
                    c.vocab_size
                )));
            }
            h.row_mut(i).copy_from_slice(self.embedding.row(t));
        }

        for (l, block) in self.blocks.iter().enumerate() {
            if !mask.is_set(flat_index(l, SublayerKind::Attention)) {
                if let Some(attn) = &block.attn {
                    let delta = attention_sublayer(&h, attn, c)?;
                    h.add_assign(&delta)?;
                }
            }
            if !mask.is_set(flat_index(l, SublayerKind::Ffn)) {
                if let Some(ffn) = &block.ffn {
                    let delta = ffn_sublayer(&h, ffn, c)?;
                    h.add_assign(&delta)?;
                }
            }
        }

        let normed = norm_rows(&h, &self.final_norm, c.norm_eps)?;
        let logits = match &self.head {
            Some(head) => matmul(&normed, head)?,
            None => Matrix::from_fn(normed.rows(), c.vocab_size, |i, v| {
                dot(normed.row(i), self.embedding.row(v)) as f32
            }),
        };
        Ok(Logits(logits))
    }

    /// Physically drops the weights of every sublayer in `mask`. The
    /// reduced model's unmasked forward equals `forward_masked(mask)` of
    /// this model bit-for-bit.
    pub fn reduce(&self, mask: &LayerMask) -> Result<Model> {
        let removed = self.config.removed_mask().union(mask)?;
        let mut config = self.config.clone();
        config.removed_sublayers = removed.set_indices();
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| BlockWeights {
                attn: if removed.is_set(flat_index(l, SublayerKind::Attention)) {
                    None
                } else {
                    b.attn.clone()
                },
                ffn: if removed.is_set(flat_index(l, SublayerKind::Ffn)) {
                    None
                } else {
                    b.ffn.clone()
                },
            })
            .collect();
        Model::new(
            config,
            self.embedding.clone(),
            blocks,
            self.final_norm.clone(),
            self.head.clone(),
        )
    }
}

fn norm_rows(h: &Matrix, gain: &[f32], eps: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        tensor::rms_norm_into(h.row(i), gain, eps, out.row_mut(i))?;
    }
    Ok(out)
}

/// `Attn(h)` without the residual: pre-norm, Q/K/V projections, RoPE,
/// causal grouped-query attention scaled by `1/sqrt(head_dim)`, and the
/// output projection.
pub fn attention_sublayer(h: &Matrix, w: &AttentionWeights, c: &ModelConfig) -> Result<Matrix> {
    if h.cols() != c.d_model {
        return Err(Error::Contract(format!(
            "attention input has {} columns, expected {}",
            h.cols(),
            c.d_model
        )));
    }
    let n = h.rows();
    let hd = c.head_dim;
    let x = norm_rows(h, &w.norm_gain, c.norm_eps)?;
    let mut q = matmul(&x, &w.wq)?;
    let mut k = matmul(&x, &w.wk)?;
    let v = matmul(&x, &w.wv)?;

    for pos in 0..n {
        for head in q.row_mut(pos).chunks_exact_mut(hd) {
            tensor::rope_in_place(head, pos, c.rope_theta)?;
        }
        for head in k.row_mut(pos).chunks_exact_mut(hd) {
            tensor::rope_in_place(head, pos, c.rope_theta)?;
        }
    }

    let group = c.n_heads / c.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(n, c.q_dim());
    let mut scores = vec![0.0f64; n];
    let mut acc = vec![0.0f64; hd];
    for head in 0..c.n_heads {
        let kv = head / group;
        let q_off = head * hd;
        let kv_off = kv * hd;
        for i in 0..n {
            let qi = &q.row(i)[q_off..q_off + hd];
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                *s = dot(qi, &k.row(j)[kv_off..kv_off + hd]) * scale;
            }
            let probs = tensor::stable_softmax(&scores[..=i])?;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &p) in probs.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(&v.row(j)[kv_off..kv_off + hd]) {
                    *a += p * vv as f64;
                }
            }
            for (o, &a) in ctx.row_mut(i)[q_off..q_off + hd].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    matmul(&ctx, &w.wo)
}

/// `FFN(h)` without the residual: `W_down(silu(W_gate x) * W_up x)` with
/// `x = rms_norm(h)`.
pub fn ffn_sublayer(h: &Matrix, w: &FfnWeights, c: &ModelConfig) -> Result<Matrix> {
    if h.cols() != c.d_model {
        return Err(Error::Contract(format!(
            "ffn input has {} columns, expected {}",
            h.cols(),
            c.d_model
        )));
    }
    let x = norm_rows(h, &w.norm_gain, c.norm_eps)?;
    let mut gate = matmul(&x, &w.w_gate)?;
    let up = matmul(&x, &w.w_up)?;
    for (g, &u) in gate.data_mut().iter_mut().zip(up.data()) {
        *g = tensor::silu(*g) * u;
    }
    matmul(&gate, &w.w_down)
}
