//! Learnable per-(layer, KV head) multipliers on the key-side RoPE base.
//!
//! Each targeted layer carries one unconstrained scalar `w` per KV head. The
//! multiplier is `α = 0.1 + 9.9·σ(w)`, always strictly inside `(0.1, 10)`,
//! and the key rotation for that head uses base `θ·√α`. Queries keep `θ`.
//! Because every KV head is shared by `G` query heads, one scalar reaches
//! `G·d_head` attention dimensions per layer.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::error::{GlabError, Result};
use crate::model::ModelConfig;
use crate::numcore::{sigmoid, Tape, Tensor, Var};

pub const ALPHA_LO: f64 = 0.1;
pub const ALPHA_HI: f64 = 10.0;

/// Raw value at which `alpha_of` returns 1: σ(w) = 0.9/9.9 = 1/11 ⇔ w = ln(0.1).
pub fn identity_raw() -> f64 {
    0.1f64.ln()
}

/// Largest and smallest representable α strictly inside the open interval.
/// σ saturates in f64 for |w| ≳ 37, so the raw map alone would reach the bounds.
const ALPHA_MIN: f64 = ALPHA_LO.next_up();
const ALPHA_MAX: f64 = ALPHA_HI.next_down();

pub fn alpha_of(w: f64) -> f64 {
    (ALPHA_LO + (ALPHA_HI - ALPHA_LO) * sigmoid(w)).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// `θ·√α`, the base used for the key rotation of one KV head.
pub fn effective_key_base(theta_base: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(GlabError::NumericDomain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(theta_base * alpha.sqrt())
}

/// Number of (KV head, query head in group, head dim, layer) combinations a
/// GARFA layer set touches.
pub fn amplification_reach(config: &ModelConfig, layer_set: &BTreeSet<usize>) -> usize {
    config.n_kv_heads * config.group_size() * config.d_head * layer_set.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarfaParams {
    /// `(layer, kv_head) → w`, each a trainable scalar tensor.
    pub raw: BTreeMap<(usize, usize), Tensor>,
    pub layer_set: BTreeSet<usize>,
    pub n_kv_heads: usize,
}

impl GarfaParams {
    /// Every multiplier starts at exactly α = 1.
    pub fn init_identity(layer_set: &BTreeSet<usize>, n_kv_heads: usize) -> Result<Self> {
        if layer_set.is_empty() {
            return Err(GlabError::Config("GARFA layer set is empty".into()));
        }
        if n_kv_heads == 0 {
            return Err(GlabError::Config("GARFA needs at least one KV head".into()));
        }
        let w0 = identity_raw();
        let raw = layer_set
            .iter()
            .flat_map(|&l| (0..n_kv_heads).map(move |k| (l, k)))
            .map(|key| (key, Tensor::scalar(w0).with_requires_grad(true)))
            .collect();
        Ok(GarfaParams {
            raw,
            layer_set: layer_set.clone(),
            n_kv_heads,
        })
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if self.n_kv_heads != config.n_kv_heads {
            return Err(GlabError::Config(format!(
                "GARFA built for {} KV heads, model has {}",
                self.n_kv_heads, config.n_kv_heads
            )));
        }
        if let Some(&l) = self.layer_set.iter().find(|&&l| l >= config.n_layers) {
            return Err(GlabError::Config(format!(
                "GARFA layer {l} out of range for {} layers",
                config.n_layers
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.raw.len()
    }

    pub fn covers(&self, layer: usize) -> bool {
        self.layer_set.contains(&layer)
    }

    pub fn alpha(&self, layer: usize, kv_head: usize) -> Option<f64> {
        self.raw.get(&(layer, kv_head)).map(|t| alpha_of(t.data[0]))
    }

    /// `(layer, head, α)` for every parameter, in key order.
    pub fn alphas(&self) -> Vec<(usize, usize, f64)> {
        self.raw
            .iter()
            .map(|(&(l, k), t)| (l, k, alpha_of(t.data[0])))
            .collect()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.raw.values_mut().for_each(|t| t.requires_grad = on);
    }

    pub fn set_alpha(&mut self, layer: usize, kv_head: usize, alpha: f64) -> Result<()> {
        if !(alpha > ALPHA_LO && alpha < ALPHA_HI) {
            return Err(GlabError::NumericDomain(format!(
                "alpha {alpha} outside ({ALPHA_LO}, {ALPHA_HI})"
            )));
        }
        let s = (alpha - ALPHA_LO) / (ALPHA_HI - ALPHA_LO);
        let t = self
            .raw
            .get_mut(&(layer, kv_head))
            .ok_or_else(|| GlabError::Input(format!("no GARFA parameter at ({layer}, {kv_head})")))?;
        t.data[0] = (s / (1.0 - s)).ln();
        Ok(())
    }

    pub fn write_heatmap_csv(&self, path: &Path) -> Result<()> {
        write_alpha_csv(path, &self.alphas())
    }
}

/// `layer,head,alpha` CSV, one row per parameter.
pub fn write_alpha_csv(path: &Path, rows: &[(usize, usize, f64)]) -> Result<()> {
    let mut out = String::from("layer,head,alpha\n");
    for (l, k, a) in rows {
        out.push_str(&format!("{l},{k},{a}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| GlabError::io(path, e))
}

/// Key-side RoPE base for one head as a tape node: `θ·scale·√(0.1 + 9.9σ(w))`.
pub(crate) fn key_base_on_tape(tape: &mut Tape, raw: Var, theta: f64) -> Result<Var> {
    let s = tape.sigmoid(raw);
    let span = tape.scale(s, ALPHA_HI - ALPHA_LO);
    let alpha = tape.add_scalar(span, ALPHA_LO);
    let alpha = tape.clamp(alpha, ALPHA_MIN, ALPHA_MAX);
    let root = tape.sqrt(alpha)?;
    Ok(tape.scale(root, theta))
}
