//! Straight-line reference implementations shared by the integration tests.
//! Nothing here goes through the tape; loops are written out by hand.

#![allow(dead_code)]

use std::collections::BTreeMap;

use glab::data::Example;
use glab::garfa::alpha_of;
use glab::model::{Model, Projection, RMS_EPS};
use glab::numcore::Tensor;
use glab::probes::PairedStimulus;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data[i * c..(i + 1) * c].to_vec()).collect()
}

/// `x · wᵀ` for `w` stored `[out, in]`.
pub fn linear(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn rms_norm(x: &Mat, g: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter().zip(g).map(|(v, gi)| v * inv * gi).collect()
        })
        .collect()
}

/// Rotate pair `(2i, 2i+1)` of `v` by `m · base^(-2i/d)`.
pub fn rope_vec(v: &[f64], m: usize, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let angle = m as f64 * base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Effective weight with any LoRA delta merged in: `W0 + (α/r)·B·A`.
fn merged(model: &Model, layer: usize, p: Projection) -> Mat {
    let mut w = to_mat(model.params.layers[layer].projection(p));
    if let Some(ad) = &model.lora {
        if let Some(f) = ad.get(layer, p) {
            let (a, b) = (to_mat(&f.a), to_mat(&f.b));
            let s = ad.spec.scale();
            for (i, row) in w.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += s * (0..a.len()).map(|r| b[i][r] * a[r][j]).sum::<f64>();
                }
            }
        }
    }
    w
}

pub struct OracleTrace {
    pub logits: Mat,
    pub hidden: Vec<Mat>,
}

/// Reference forward pass. Each query head `h` attends through KV head
/// `h / G`; RoPE base per layer is `θ·scale[l]` for queries and
/// `θ·scale[l]·√α` for keys on GARFA layers.
pub fn oracle_forward(model: &Model, tokens: &[usize], rope_scale: &BTreeMap<usize, f64>) -> OracleTrace {
    let c = &model.config;
    let p = &model.params;
    let embed = to_mat(&p.embed);
    let mut h: Mat = tokens.iter().map(|&t| embed[t].clone()).collect();
    let seq = tokens.len();
    let dh = c.d_head;
    let g = c.n_q_heads / c.n_kv_heads;
    let mut hidden = Vec::new();
    for l in 0..c.n_layers {
        let lp = &p.layers[l];
        let theta = c.rope_base * rope_scale.get(&l).copied().unwrap_or(1.0);
        let x = rms_norm(&h, &lp.attn_norm.data);
        let q = linear(&x, &merged(model, l, Projection::Q));
        let k = linear(&x, &merged(model, l, Projection::K));
        let v = linear(&x, &merged(model, l, Projection::V));
        let mut attn = vec![vec![0.0; c.n_q_heads * dh]; seq];
        for head in 0..c.n_q_heads {
            let kv = head / g;
            let k_base = match model.garfa.as_ref().and_then(|gp| gp.raw.get(&(l, kv))) {
                Some(w) => theta * alpha_of(w.data[0]).sqrt(),
                None => theta,
            };
            let qs: Mat = (0..seq)
                .map(|i| rope_vec(&q[i][head * dh..(head + 1) * dh], i, theta))
                .collect();
            let ks: Mat = (0..seq)
                .map(|j| rope_vec(&k[j][kv * dh..(kv + 1) * dh], j, k_base))
                .collect();
            for i in 0..seq {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    attn[i][head * dh + d] = (0..=i).map(|j| e[j] / z * v[j][kv * dh + d]).sum();
                }
            }
        }
        let o = linear(&attn, &merged(model, l, Projection::O));
        for i in 0..seq {
            for d in 0..c.d_model {
                h[i][d] += o[i][d];
            }
        }
        let x = rms_norm(&h, &lp.mlp_norm.data);
        let gate = linear(&x, &merged(model, l, Projection::Gate));
        let up = linear(&x, &merged(model, l, Projection::Up));
        let inner: Mat = gate
            .iter()
            .zip(&up)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect())
            .collect();
        let down = linear(&inner, &merged(model, l, Projection::Down));
        for i in 0..seq {
            for d in 0..c.d_model {
                h[i][d] += down[i][d];
            }
        }
        hidden.push(h.clone());
    }
    let x = rms_norm(&h, &p.final_norm.data);
    let logits = linear(&x, &to_mat(&p.lm_head));
    OracleTrace { logits, hidden }
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let b = to_mat(b);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Token-weighted mean cross-entropy over a batch, via the oracle forward.
pub fn oracle_loss(model: &Model, batch: &[Example], rope_scale: &BTreeMap<usize, f64>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for ex in batch {
        let logits = oracle_forward(model, &ex.tokens, rope_scale).logits;
        for &(pos, t) in &ex.targets {
            let row = &logits[pos];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
    }
    total / count as f64
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv)
}

pub fn mean_pool(m: &Mat) -> Vec<f64> {
    let n = m.len() as f64;
    (0..m[0].len())
        .map(|d| m.iter().map(|r| r[d]).sum::<f64>() / n)
        .collect()
}

/// Sensitivity walked out by hand: bucket by domain, average distances within
/// each bucket, then average the buckets.
pub fn sensitivity_oracle(model: &Model, stimuli: &[PairedStimulus]) -> Vec<f64> {
    let n = model.config.n_layers;
    let mut buckets: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for s in stimuli {
        let pos = oracle_forward(model, &s.correct, &BTreeMap::new());
        let neg = oracle_forward(model, &s.incorrect, &BTreeMap::new());
        let d: Vec<f64> = (0..n)
            .map(|l| cosine(&mean_pool(&pos.hidden[l]), &mean_pool(&neg.hidden[l])))
            .collect();
        buckets.entry(&s.domain).or_default().push(d);
    }
    (0..n)
        .map(|l| {
            buckets
                .values()
                .map(|ds| ds.iter().map(|d| d[l]).sum::<f64>() / ds.len() as f64)
                .sum::<f64>()
                / buckets.len() as f64
        })
        .collect()
}
