//! Seeded random toy models for tests and desk runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionWeights, BlockWeights, FfnWeights, Model, ModelConfig};
use crate::tensor::Matrix;

/// Blocks whose output projections are forced to exact zeros, making the
/// corresponding sublayer an identity under the residual connection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroSublayers {
    pub zero_attn_out_blocks: Vec<usize>,
    pub zero_ffn_down_blocks: Vec<usize>,
}

/// `L = 4`, `d = 16`, 4 heads sharing 2 KV heads, `|V| = 64`.
pub fn default_toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_blocks: 4,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        d_ff: 32,
        rope_theta: 10000.0,
        norm_eps: 1e-5,
        tied_head: false,
        removed_sublayers: Vec::new(),
    }
}

/// Toy config with `n_blocks` blocks of width `d_model` (head_dim 8,
/// two query heads per KV head where possible).
pub fn toy_config(n_blocks: usize, d_model: usize, vocab_size: usize) -> ModelConfig {
    let head_dim = if d_model.is_multiple_of(8) { 8 } else { 2 };
    let n_heads = d_model / head_dim;
    let n_kv_heads = if n_heads.is_multiple_of(2) {
        n_heads / 2
    } else {
        n_heads
    };
    ModelConfig {
        vocab_size,
        d_model,
        n_blocks,
        n_heads,
        n_kv_heads,
        head_dim,
        d_ff: 2 * d_model,
        rope_theta: 10000.0,
        norm_eps: 1e-5,
        tied_head: false,
        removed_sublayers: Vec::new(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        (z * scale) as f32
    })
}

/// Draws every weight from `N(0, 1/fan_in)` with a ChaCha8 stream seeded by
/// `seed`. Norm gains are ones; the embedding uses unit variance.
pub fn gen_toy_model(seed: u64, config: &ModelConfig, special: &ZeroSublayers) -> Result<Model> {
    config.validate()?;
    if !config.removed_sublayers.is_empty() {
        return Err(Error::Config(
            "toy models are generated with every sublayer present".into(),
        ));
    }
    for &b in special
        .zero_attn_out_blocks
        .iter()
        .chain(&special.zero_ffn_down_blocks)
    {
        if b >= config.n_blocks {
            return Err(Error::Config(format!(
                "block index {b} out of range for {} blocks",
                config.n_blocks
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let inv_sqrt = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    let embedding = gaussian(&mut rng, config.vocab_size, d, 1.0);
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for l in 0..config.n_blocks {
        let wq = gaussian(&mut rng, d, config.q_dim(), inv_sqrt(d));
        let wk = gaussian(&mut rng, d, config.kv_dim(), inv_sqrt(d));
        let wv = gaussian(&mut rng, d, config.kv_dim(), inv_sqrt(d));
        let mut wo = gaussian(&mut rng, config.q_dim(), d, inv_sqrt(config.q_dim()));
        let w_gate = gaussian(&mut rng, d, config.d_ff, inv_sqrt(d));
        let w_up = gaussian(&mut rng, d, config.d_ff, inv_sqrt(d));
        let mut w_down = gaussian(&mut rng, config.d_ff, d, inv_sqrt(config.d_ff));
        if special.zero_attn_out_blocks.contains(&l) {
            wo = Matrix::zeros(config.q_dim(), d);
        }
        if special.zero_ffn_down_blocks.contains(&l) {
            w_down = Matrix::zeros(config.d_ff, d);
        }
        blocks.push(BlockWeights {
            attn: Some(AttentionWeights {
                norm_gain: vec![1.0; d],
                wq,
                wk,
                wv,
                wo,
            }),
            ffn: Some(FfnWeights {
                norm_gain: vec![1.0; d],
                w_gate,
                w_up,
                w_down,
            }),
        });
    }
    let head = if config.tied_head {
        None
    } else {
        Some(gaussian(&mut rng, d, config.vocab_size, inv_sqrt(d)))
    };
    Model::new(config.clone(), embedding, blocks, vec![1.0; d], head)
}

/// Replaces the prediction head with zeros, giving uniform logits.
pub fn zero_head(model: &mut Model) -> Result<()> {
    match model.head_mut() {
        Some(h) => {
            h.data_mut().iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        }
        None => Err(Error::Contract("tied model has no separate head".into())),
    }
}

/// Sets one block's attention output projection to zeros.
pub fn zero_attention_output(model: &mut Model, block: usize) -> Result<()> {
    let b = model
        .blocks_mut()
        .get_mut(block)
        .ok_or_else(|| Error::Contract(format!("block {block} out of range")))?;
    let attn = b
        .attn
        .as_mut()
        .ok_or_else(|| Error::Contract(format!("block {block} has no attention")))?;
    attn.wo.data_mut().iter_mut().for_each(|v| *v = 0.0);
    Ok(())
}

/// `count` sequences of `len` uniformly random token ids.
pub fn gen_toy_tokens(seed: u64, vocab_size: usize, count: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..len)
                .map(|_| rng.random_range(0..vocab_size as u32))
                .collect()
        })
        .collect()
}
