//! Layer-selective LoRA: rank-`r` factor pairs on a chosen subset of
//! projections and layers. The adapted weight is `W0 + (α/r)·B·A`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GlabError, Result};
use crate::model::{ModelConfig, Projection};
use crate::numcore::{matmul, Tensor};

/// Standard deviation of the Gaussian used for `A`.
pub const A_INIT_STD: f64 = 0.02;

/// Published trainable-parameter count for LS-LoRA at r = 64 on ten layers
/// of Llama 3.1 8B.
pub const PUBLISHED_LLAMA_LORA_PARAMS: usize = 42_598_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: BTreeSet<Projection>,
    pub layers: BTreeSet<usize>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            targets: Projection::ALL.into_iter().collect(),
            layers: BTreeSet::new(),
        }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(GlabError::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(GlabError::Config(format!(
                "LoRA alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GlabError::Config(format!(
                "LoRA dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(GlabError::Config(format!(
                "LoRA layer {l} out of range for {} layers",
                config.n_layers
            )));
        }
        for &p in &self.targets {
            let (d, k) = p.shape(config);
            if self.rank > d.min(k) {
                return Err(GlabError::Config(format!(
                    "LoRA rank {} exceeds min dimension of {p} ({d}x{k})",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    /// `[r, in]`
    pub a: Tensor,
    /// `[out, r]`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub spec: LoraSpec,
    pub factors: BTreeMap<(usize, Projection), LoraFactors>,
}

impl LoraAdapter {
    /// Attach factors to every `(layer, target)` in `spec`. `A` is Gaussian,
    /// `B` is zero, so the adapted model starts out identical to the base.
    pub fn inject(spec: &LoraSpec, config: &ModelConfig, seed: u64) -> Result<Self> {
        spec.validate(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, A_INIT_STD).expect("positive std");
        let mut factors = BTreeMap::new();
        for &layer in &spec.layers {
            for &p in &spec.targets {
                let (d, k) = p.shape(config);
                let a_data = (0..spec.rank * k).map(|_| normal.sample(&mut rng)).collect();
                let a = Tensor::new(vec![spec.rank, k], a_data)?.with_requires_grad(true);
                let b = Tensor::zeros(vec![d, spec.rank]).with_requires_grad(true);
                factors.insert((layer, p), LoraFactors { a, b });
            }
        }
        Ok(LoraAdapter {
            spec: spec.clone(),
            factors,
        })
    }

    pub fn get(&self, layer: usize, p: Projection) -> Option<&LoraFactors> {
        self.factors.get(&(layer, p))
    }

    pub fn pair_count(&self) -> usize {
        self.factors.len()
    }

    pub fn param_count(&self) -> usize {
        self.factors.values().map(|f| f.a.numel() + f.b.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for f in self.factors.values_mut() {
            f.a.requires_grad = on;
            f.b.requires_grad = on;
        }
    }

    /// Checkpoint names `lora.<layer>.<projection>.{A|B}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.factors.len() * 2);
        for (&(l, p), f) in &self.factors {
            out.push((format!("lora.{l}.{p}.A"), &f.a));
            out.push((format!("lora.{l}.{p}.B"), &f.b));
        }
        out
    }
}

/// `W0 + (alpha/rank)·B·A`.
pub fn effective_weight(w0: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    let (d, k) = w0.dims2()?;
    let (r_a, k_a) = a.dims2()?;
    let (d_b, r_b) = b.dims2()?;
    if r_a != rank || r_b != rank || k_a != k || d_b != d {
        return Err(GlabError::Shape(format!(
            "LoRA factors A {:?}, B {:?} do not fit W0 {:?} at rank {rank}",
            a.shape, b.shape, w0.shape
        )));
    }
    let ba = matmul(b, a)?;
    let s = alpha / rank as f64;
    let data = w0.data.iter().zip(&ba.data).map(|(w, u)| w + s * u).collect();
    Tensor::new(vec![d, k], data)
}

/// `Σ r·(d + k)` over every `(layer, target)` pair of the spec.
pub fn param_count(spec: &LoraSpec, config: &ModelConfig) -> usize {
    let per_layer: usize = spec
        .targets
        .iter()
        .map(|p| {
            let (d, k) = p.shape(config);
            spec.rank * (d + k)
        })
        .sum();
    per_layer * spec.layers.len()
}

/// Direct count against the published figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountComparison {
    pub direct: usize,
    pub published: usize,
}

impl CountComparison {
    pub fn delta(&self) -> i64 {
        self.direct as i64 - self.published as i64
    }
}

/// LS-LoRA at r = 64, α = 128 on all seven projections of ten Llama 3.1 8B
/// layers, counted directly and set beside the published total.
pub fn llama_table_comparison() -> CountComparison {
    let spec = LoraSpec {
        rank: 64,
        alpha: 128.0,
        dropout: 0.05,
        targets: Projection::ALL.into_iter().collect(),
        layers: [0, 23, 24, 25, 26, 27, 28, 29, 30, 31].into(),
    };
    CountComparison {
        direct: param_count(&spec, &ModelConfig::llama3_8b()),
        published: PUBLISHED_LLAMA_LORA_PARAMS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(layers: &[usize], targets: &[Projection], rank: usize) -> LoraSpec {
        LoraSpec {
            rank,
            alpha: 2.0 * rank as f64,
            dropout: 0.0,
            targets: targets.iter().copied().collect(),
            layers: layers.iter().copied().collect(),
        }
    }

    #[test]
    fn single_pair() {
        let a = LoraAdapter::inject(&spec(&[0], &[Projection::Q], 2), &ModelConfig::toy(), 0).unwrap();
        assert_eq!(a.pair_count(), 1);
        let f = a.get(0, Projection::Q).unwrap();
        assert_eq!(f.a.shape, vec![2, 64]);
        assert_eq!(f.b.shape, vec![64, 2]);
        assert!(f.b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn llama_pair_count() {
        let s = spec(&(0..10).collect::<Vec<_>>(), &Projection::ALL, 64);
        s.validate(&ModelConfig::llama3_8b()).unwrap();
        let pairs = s.layers.len() * s.targets.len();
        assert_eq!(pairs, 70);
    }

    #[test]
    fn rank_and_layer_errors() {
        let c = ModelConfig::toy();
        assert!(matches!(
            LoraAdapter::inject(&spec(&[0], &[Projection::K], 17), &c, 0),
            Err(GlabError::Config(_))
        ));
        assert!(matches!(
            LoraAdapter::inject(&spec(&[8], &[Projection::Q], 2), &c, 0),
            Err(GlabError::Config(_))
        ));
        assert!(LoraAdapter::inject(&spec(&[0], &[Projection::Q], 0), &c, 0).is_err());
    }

    #[test]
    fn effective_weight_examples() {
        let w0 = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let a = Tensor::from_rows(&[&[0.0, 1.0]]);
        let zero_b = Tensor::zeros(vec![2, 1]);
        assert_eq!(effective_weight(&w0, &a, &zero_b, 2.0, 1).unwrap().data, w0.data);

        let b = Tensor::from_rows(&[&[1.0], &[0.0]]);
        let w = effective_weight(&w0, &a, &b, 2.0, 1).unwrap();
        assert_eq!(w.data, vec![1.0, 4.0, 3.0, 4.0]);
        let w = effective_weight(&w0, &a, &b, 1.0, 1).unwrap();
        assert_eq!(w.data, vec![1.0, 3.0, 3.0, 4.0]);

        assert!(effective_weight(&w0, &a, &Tensor::zeros(vec![3, 1]), 1.0, 1).is_err());
    }

    #[test]
    fn counts() {
        let mut c = ModelConfig::toy();
        c.n_kv_heads = 8;
        // Q on an 8-wide model: 8x8
        c.d_model = 8;
        c.n_q_heads = 8;
        c.d_head = 1;
        let s = spec(&[0], &[Projection::Q], 2);
        assert_eq!(param_count(&s, &c), 32);

        let cmp = llama_table_comparison();
        assert_eq!(cmp.direct, 52_428_800);
        assert_eq!(cmp.published, 42_598_400);
        assert_eq!(cmp.delta(), 9_830_400);
    }
}
