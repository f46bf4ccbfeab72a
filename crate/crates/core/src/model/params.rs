use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GlabError, Result};
use crate::model::config::ModelConfig;
use crate::numcore::Tensor;

/// The seven weight matrices of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    /// `(out, in)` shape of this projection's weight.
    pub fn shape(self, c: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::Q => (c.q_width(), c.d_model),
            Projection::K | Projection::V => (c.kv_width(), c.d_model),
            Projection::O => (c.d_model, c.q_width()),
            Projection::Gate | Projection::Up => (c.d_ff, c.d_model),
            Projection::Down => (c.d_model, c.d_ff),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| GlabError::Config(format!("unknown projection {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerParams {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// All base weights. Projections are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelParams {
    /// Gaussian projections with std `d_model^-1/2`, unit-variance embeddings,
    /// unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (config.d_model as f64).powf(-0.5);
        let mut gauss = |shape: (usize, usize), s: f64| -> Tensor {
            let normal = Normal::new(0.0, s).expect("positive std");
            let data = (0..shape.0 * shape.1).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(vec![shape.0, shape.1], data).expect("consistent shape")
        };
        let embed = gauss((config.vocab_size, config.d_model), 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: Tensor::full(vec![config.d_model], 1.0),
                wq: gauss(Projection::Q.shape(config), std),
                wk: gauss(Projection::K.shape(config), std),
                wv: gauss(Projection::V.shape(config), std),
                wo: gauss(Projection::O.shape(config), std),
                mlp_norm: Tensor::full(vec![config.d_model], 1.0),
                w_gate: gauss(Projection::Gate.shape(config), std),
                w_up: gauss(Projection::Up.shape(config), std),
                w_down: gauss(Projection::Down.shape(config), std),
            });
        }
        let lm_head = gauss((config.vocab_size, config.d_model), std);
        Ok(ModelParams {
            embed,
            layers,
            final_norm: Tensor::full(vec![config.d_model], 1.0),
            lm_head,
        })
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    /// Mark every base weight as requiring (or not requiring) a gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.requires_grad = on;
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::toy();
        let a = ModelParams::init(&c, 3).unwrap();
        let b = ModelParams::init(&c, 3).unwrap();
        let d = ModelParams::init(&c, 4).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), d.fingerprint());
    }

    #[test]
    fn shapes_follow_config() {
        let c = ModelConfig::toy();
        let p = ModelParams::init(&c, 0).unwrap();
        assert_eq!(p.layers.len(), 8);
        assert_eq!(p.layers[0].wk.shape, vec![16, 64]);
        assert_eq!(p.layers[0].wo.shape, vec![64, 64]);
        assert_eq!(p.layers[0].w_down.shape, vec![64, 128]);
        assert_eq!(p.named_tensors().len(), 3 + 9 * 8);
    }

    #[test]
    fn projection_names_round_trip() {
        for p in Projection::ALL {
            assert_eq!(p.name().parse::<Projection>().unwrap(), p);
        }
        assert!("wq".parse::<Projection>().is_err());
    }
}
