//! Straight-line reference implementations on nested `Vec`s, written
//! without the library's tensor or tape code.

#![allow(dead_code)]

use groupformer::attention::{DecoderLayer, EncoderLayer, FeedForward, LayerNorm, MultiHeadAttention, LAYER_NORM_EPS};
use groupformer::params::{ParamId, ParamStore};
use groupformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Rows of the last axis.
pub fn rows(t: &Tensor) -> Mat {
    let w = *t.shape().last().unwrap();
    t.data().chunks(w).map(|r| r.to_vec()).collect()
}

pub fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn param(store: &ParamStore, id: ParamId) -> Mat {
    rows(store.get(id))
}

pub fn vector(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &[Vec<f64>], bias: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(bias).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn columns(a: &[Vec<f64>], from: usize, to: usize) -> Mat {
    a.iter().map(|r| r[from..to].to_vec()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &[Vec<f64>], gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

pub fn norm(store: &ParamStore, ln: &LayerNorm, x: &[Vec<f64>]) -> Mat {
    layer_norm(x, &vector(store, ln.gamma), &vector(store, ln.beta))
}

/// One head: `softmax(q kᵀ · scale) v (+ v)`, with `allowed(i, j)` selecting keys.
pub fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64, residual: bool, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let w = softmax(&logits);
            let mut out = vec![0.0; v[0].len()];
            for (wj, &j) in w.iter().zip(&keys) {
                for (o, x) in out.iter_mut().zip(&v[j]) {
                    *o += wj * x;
                }
            }
            if residual {
                for (o, x) in out.iter_mut().zip(&v[i]) {
                    *o += x;
                }
            }
            out
        })
        .collect()
}

/// Multi-head attention for one sequence; `allowed` masks keys for every head.
pub fn mha_masked(
    store: &ParamStore,
    m: &MultiHeadAttention,
    query: &[Vec<f64>],
    key: &[Vec<f64>],
    value: &[Vec<f64>],
    residual: bool,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let q = matmul(query, &param(store, m.w_q));
    let k = matmul(key, &param(store, m.w_k));
    let v = matmul(value, &param(store, m.w_v));
    let dh = m.width / m.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![Vec::new(); query.len()];
    for h in 0..m.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let out = attend(&columns(&q, a, b), &columns(&k, a, b), &columns(&v, a, b), scale, residual, allowed);
        for (c, o) in concat.iter_mut().zip(out) {
            c.extend(o);
        }
    }
    matmul(&concat, &param(store, m.w_o))
}

pub fn mha(store: &ParamStore, m: &MultiHeadAttention, query: &[Vec<f64>], kv: &[Vec<f64>], residual: bool) -> Mat {
    mha_masked(store, m, query, kv, kv, residual, &|_, _| true)
}

pub fn ffn(store: &ParamStore, f: &FeedForward, x: &[Vec<f64>]) -> Mat {
    let h = add_row(&matmul(x, &param(store, f.hidden.weight)), &vector(store, f.hidden.bias.unwrap()));
    let h: Mat = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    add_row(&matmul(&h, &param(store, f.out.weight)), &vector(store, f.out.bias.unwrap()))
}

/// Encoder layer body given the attention sub-block output.
pub fn encoder_tail(store: &ParamStore, layer: &EncoderLayer, attended: &[Vec<f64>]) -> Mat {
    let h = norm(store, &layer.norm_ffn, attended);
    add(attended, &ffn(store, &layer.ffn, &h))
}

pub fn encoder(store: &ParamStore, layer: &EncoderLayer, x: &[Vec<f64>]) -> Mat {
    let h = norm(store, &layer.norm_attn, x);
    let a = mha(store, &layer.attn, &h, &h, true);
    encoder_tail(store, layer, &a)
}

pub fn decoder(store: &ParamStore, layer: &DecoderLayer, query: &[Vec<f64>], memory: &[Vec<f64>]) -> Mat {
    assert!(layer.self_attn.is_none());
    let q = norm(store, &layer.norm_query, query);
    let m = norm(store, &layer.norm_memory, memory);
    let x = add(query, &mha(store, &layer.cross, &q, &m, layer.value_residual));
    let h = norm(store, &layer.norm_ffn, &x);
    add(&x, &ffn(store, &layer.ffn, &h))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
