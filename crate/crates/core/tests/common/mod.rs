//! Test-only reference code, written independently of the library's
//! kernels: plain scalar loops, `f64` throughout.

#![allow(dead_code, clippy::needless_range_loop)]

use finercut::model::{AttentionWeights, FfnWeights, LayerMask, Model, ModelConfig};

pub type Rows = Vec<Vec<f64>>;

fn get(m: &finercut::tensor::Matrix, r: usize, c: usize) -> f64 {
    m.data()[r * m.cols() + c] as f64
}

fn project(x: &Rows, w: &finercut::tensor::Matrix) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut s = 0.0;
                    for (p, &v) in row.iter().enumerate() {
                        s += v * get(w, p, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn rms(row: &[f64], gain: &[f32], eps: f64) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let r = (ms + eps).sqrt();
    row.iter()
        .zip(gain)
        .map(|(v, &g)| g as f64 * v / r)
        .collect()
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let n = v.len();
    for j in 0..n / 2 {
        let angle = pos as f64 / theta.powf(2.0 * j as f64 / n as f64);
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = a * angle.cos() - b * angle.sin();
        v[2 * j + 1] = a * angle.sin() + b * angle.cos();
    }
}

pub fn attention(h: &Rows, w: &AttentionWeights, c: &ModelConfig) -> Rows {
    let n = h.len();
    let hd = c.head_dim;
    let x: Rows = h.iter().map(|r| rms(r, &w.norm_gain, c.norm_eps)).collect();
    let mut q = project(&x, &w.wq);
    let mut k = project(&x, &w.wk);
    let v = project(&x, &w.wv);
    for i in 0..n {
        for head in 0..c.n_heads {
            rotate(&mut q[i][head * hd..(head + 1) * hd], i, c.rope_theta);
        }
        for head in 0..c.n_kv_heads {
            rotate(&mut k[i][head * hd..(head + 1) * hd], i, c.rope_theta);
        }
    }
    let per_group = c.n_heads / c.n_kv_heads;
    let mut ctx = vec![vec![0.0; c.n_heads * hd]; n];
    for head in 0..c.n_heads {
        let g = head / per_group;
        for i in 0..n {
            let mut scores = Vec::new();
            for j in 0..=i {
                let mut s = 0.0;
                for t in 0..hd {
                    s += q[i][head * hd + t] * k[j][g * hd + t];
                }
                scores.push(s / (hd as f64).sqrt());
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..hd {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += e[j] / z * v[j][g * hd + t];
                }
                ctx[i][head * hd + t] = acc;
            }
        }
    }
    project(&ctx, &w.wo)
}

pub fn ffn(h: &Rows, w: &FfnWeights, c: &ModelConfig) -> Rows {
    let x: Rows = h.iter().map(|r| rms(r, &w.norm_gain, c.norm_eps)).collect();
    let g = project(&x, &w.w_gate);
    let u = project(&x, &w.w_up);
    let act: Rows = g
        .iter()
        .zip(&u)
        .map(|(gr, ur)| {
            gr.iter()
                .zip(ur)
                .map(|(a, b)| a / (1.0 + (-a).exp()) * b)
                .collect()
        })
        .collect();
    project(&act, &w.w_down)
}

pub fn to_rows(m: &finercut::tensor::Matrix) -> Rows {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| get(m, r, c)).collect())
        .collect()
}

/// Full masked forward pass in `f64`.
pub fn forward(model: &Model, tokens: &[u32], mask: &LayerMask) -> Rows {
    let c = model.config();
    let mut h: Rows = tokens
        .iter()
        .map(|&t| {
            (0..c.d_model)
                .map(|j| get(model.embedding(), t as usize, j))
                .collect()
        })
        .collect();
    for (l, b) in model.blocks().iter().enumerate() {
        if !mask.bits()[2 * l] {
            if let Some(a) = &b.attn {
                let d = attention(&h, a, c);
                add(&mut h, &d);
            }
        }
        if !mask.bits()[2 * l + 1] {
            if let Some(f) = &b.ffn {
                let d = ffn(&h, f, c);
                add(&mut h, &d);
            }
        }
    }
    let x: Rows = h
        .iter()
        .map(|r| rms(r, model.final_norm(), c.norm_eps))
        .collect();
    match model.head() {
        Some(head) => project(&x, head),
        None => x
            .iter()
            .map(|row| {
                (0..c.vocab_size)
                    .map(|v| {
                        row.iter()
                            .enumerate()
                            .map(|(j, x)| x * get(model.embedding(), v, j))
                            .sum()
                    })
                    .collect()
            })
            .collect(),
    }
}

fn add(h: &mut Rows, d: &Rows) {
    for (hr, dr) in h.iter_mut().zip(d) {
        for (a, b) in hr.iter_mut().zip(dr) {
            *a += b;
        }
    }
}

pub fn max_abs_diff(a: &Rows, b: &finercut::tensor::Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - get(b, r, c)).abs());
        }
    }
    worst
}

/// Scalar metrics, written straight from their definitions.
pub fn js_ref(z: &[f64], t: &[f64]) -> f64 {
    let sm = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p, q) = (sm(z), sm(t));
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        if p[i] > 0.0 {
            kl_p += p[i] * (p[i] / m).ln();
        }
        if q[i] > 0.0 {
            kl_q += q[i] * (q[i] / m).ln();
        }
    }
    0.5 * (kl_p + kl_q)
}

pub fn angular_ref(z: &[f64], t: &[f64]) -> f64 {
    let dot: f64 = z.iter().zip(t).map(|(a, b)| a * b).sum();
    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nz * nt)).clamp(-1.0, 1.0).acos()
}

pub fn euclid_ref(z: &[f64], t: &[f64]) -> f64 {
    z.iter()
        .zip(t)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn metric_ref(kind: finercut::MetricKind, z: &[f64], t: &[f64]) -> f64 {
    match kind {
        finercut::MetricKind::Angular => angular_ref(z, t),
        finercut::MetricKind::Euclidean => euclid_ref(z, t),
        finercut::MetricKind::JensenShannon => js_ref(z, t),
    }
}

/// Scripted objective: per-sample mean over positions, then mean over
/// samples, using the scalar forward for both the original and pruned model.
pub fn objective_ref(
    model: &Model,
    seqs: &[Vec<u32>],
    mask: &LayerMask,
    kind: finercut::MetricKind,
) -> f64 {
    let empty = LayerMask::empty(model.config().n_blocks);
    let mut total = 0.0;
    for seq in seqs {
        let a = forward(model, seq, &empty);
        let b = forward(model, seq, mask);
        let per_pos: f64 = a.iter().zip(&b).map(|(x, y)| metric_ref(kind, x, y)).sum();
        total += per_pos / seq.len() as f64;
    }
    total / seqs.len() as f64
}

/// Builds a mask from run-length notation (`A13 A40-50 T51-52 F73` or
/// `A40-A50`): `A` attention, `F` FFN, `T` both.
pub fn mask_from_notation(n_blocks: usize, notation: &str) -> LayerMask {
    let mut bits = vec![false; 2 * n_blocks];
    for item in notation.split_whitespace() {
        let (kind, range) = item.split_at(1);
        let range = range.replace(kind, "");
        let (start, end) = match range.split_once('-') {
            Some((s, e)) => (s.parse::<usize>().unwrap(), e.parse::<usize>().unwrap()),
            None => {
                let v = range.parse::<usize>().unwrap();
                (v, v)
            }
        };
        for b in start..=end {
            match kind {
                "A" => bits[2 * b] = true,
                "F" => bits[2 * b + 1] = true,
                "T" => {
                    bits[2 * b] = true;
                    bits[2 * b + 1] = true;
                }
                other => panic!("unknown layer kind {other}"),
            }
        }
    }
    LayerMask::from_bits(bits).unwrap()
}

/// Pruned layers of the 80-block model at 25%.
pub const LLAMA3_70B_25: &str =
    "A33 A40-A50 T51-52 A53-A57 T58 T59 A60-A66 T67 A68-A70 F73 A74 A79";
/// Pruned layers of the 80-block model at 40%.
pub const LLAMA3_70B_40: &str =
    "A33 F35 A36 A38-40 T41-44 A45 T46-55 A56 T57-T63 A64 T65-68 A69-70 F73 A74 A79";
/// Pruned layers of the 32-block model at 25%.
pub const LLAMA3_8B_25: &str = "A13 A15 A18-19 T20 A21-24 T25 A26-27 T28";
/// Pruned layers of the 32-block model at 40%.
pub const LLAMA3_8B_40: &str = "A13 F14 A15 F16 T17-20 A21 T22-23 A24 T25-26 A27 T28";

/// Public Llama3-70B architecture dimensions.
pub fn llama3_70b_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 128_256,
        d_model: 8192,
        n_blocks: 80,
        n_heads: 64,
        n_kv_heads: 8,
        head_dim: 128,
        d_ff: 28_672,
        rope_theta: 500_000.0,
        norm_eps: 1e-5,
        tied_head: false,
        removed_sublayers: vec![],
    }
}

/// Public Llama3-8B architecture dimensions.
pub fn llama3_8b_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 128_256,
        d_model: 4096,
        n_blocks: 32,
        n_heads: 32,
        n_kv_heads: 8,
        head_dim: 128,
        d_ff: 14_336,
        rope_theta: 500_000.0,
        norm_eps: 1e-5,
        tied_head: false,
        removed_sublayers: vec![],
    }
}
