use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GlabError, Result};
use crate::garfa::{key_base_on_tape, GarfaParams};
use crate::lslora::LoraAdapter;
use crate::model::config::ModelConfig;
use crate::model::params::{ModelParams, Projection};
use crate::numcore::{derive_seed, Tape, Tensor, Var};

pub const RMS_EPS: f64 = 1e-5;

/// Inverted dropout on LoRA adapter inputs. Masks are a pure function of
/// `seed`, the layer and the projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    /// Per-layer multiplier on the RoPE base, applied to both queries and
    /// keys. Layers not listed use 1.
    pub rope_scale: BTreeMap<usize, f64>,
    pub dropout: Option<Dropout>,
}

impl ForwardOptions {
    pub fn scale_layer(layer: usize, gamma: f64) -> Self {
        ForwardOptions {
            rope_scale: [(layer, gamma)].into(),
            dropout: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[seq, vocab]`
    pub logits: Tensor,
    /// Block outputs, one `[seq, d_model]` tensor per layer, before the
    /// final norm.
    pub hidden: Vec<Tensor>,
}

/// Handles into a tape after a recorded forward pass.
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub logits: Var,
    pub hidden: Vec<Var>,
    /// Base weights in `ModelParams::named_tensors` order.
    pub base: Vec<Var>,
    pub lora: BTreeMap<(usize, Projection), (Var, Var)>,
    pub garfa: BTreeMap<(usize, usize), Var>,
}

/// Base weights plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub lora: Option<LoraAdapter>,
    pub garfa: Option<GarfaParams>,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Model {
            config: config.clone(),
            params: ModelParams::init(config, seed)?,
            lora: None,
            garfa: None,
        })
    }

    pub fn attach_lora(&mut self, lora: LoraAdapter) -> Result<()> {
        lora.spec.validate(&self.config)?;
        self.lora = Some(lora);
        Ok(())
    }

    pub fn attach_garfa(&mut self, garfa: GarfaParams) -> Result<()> {
        garfa.check_against(&self.config)?;
        self.garfa = Some(garfa);
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        self.forward_with(tokens, &ForwardOptions::default())
    }

    pub fn forward_with(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let t = self.record(&mut tape, tokens, opts)?;
        Ok(ForwardTrace {
            logits: tape.value(t.logits).clone(),
            hidden: t.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        })
    }

    pub fn record(&self, tape: &mut Tape, tokens: &[usize], opts: &ForwardOptions) -> Result<TapeTrace> {
        record(
            tape,
            tokens,
            &self.config,
            &self.params,
            self.lora.as_ref(),
            self.garfa.as_ref(),
            opts,
        )
    }
}

/// One forward pass with optional LoRA and GARFA, no dropout.
pub fn forward(
    tokens: &[usize],
    config: &ModelConfig,
    params: &ModelParams,
    lora: Option<&LoraAdapter>,
    garfa: Option<&GarfaParams>,
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let t = record(
        &mut tape,
        tokens,
        config,
        params,
        lora,
        garfa,
        &ForwardOptions::default(),
    )?;
    Ok(ForwardTrace {
        logits: tape.value(t.logits).clone(),
        hidden: t.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
    })
}

struct Linear<'a> {
    tape: &'a mut Tape,
    lora_vars: &'a BTreeMap<(usize, Projection), (Var, Var)>,
    lora_scale: f64,
    dropout: Option<Dropout>,
}

impl Linear<'_> {
    /// `x·Wᵀ`, plus `(α/r)·drop(x)·Aᵀ·Bᵀ` when the projection is adapted.
    fn apply(&mut self, x: Var, w: Var, layer: usize, p: Projection) -> Result<Var> {
        let y = self.tape.matmul_nt(x, w)?;
        let Some(&(a, b)) = self.lora_vars.get(&(layer, p)) else {
            return Ok(y);
        };
        let xin = match self.dropout {
            Some(d) if d.p > 0.0 => {
                let mask = dropout_mask(self.tape.value(x).shape.clone(), d, layer, p);
                let m = self.tape.constant(mask);
                self.tape.mul(x, m)?
            }
            _ => x,
        };
        let xa = self.tape.matmul_nt(xin, a)?;
        let delta = self.tape.matmul_nt(xa, b)?;
        let delta = self.tape.scale(delta, self.lora_scale);
        self.tape.add(y, delta)
    }
}

fn dropout_mask(shape: Vec<usize>, d: Dropout, layer: usize, p: Projection) -> Tensor {
    let pidx = Projection::ALL.iter().position(|&q| q == p).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[d.seed, layer as u64, pidx]));
    let keep = 1.0 / (1.0 - d.p);
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = if rng.gen::<f64>() < d.p { 0.0 } else { keep };
    }
    t
}

/// Record a full forward pass onto `tape`.
pub(crate) fn record(
    tape: &mut Tape,
    tokens: &[usize],
    config: &ModelConfig,
    params: &ModelParams,
    lora: Option<&LoraAdapter>,
    garfa: Option<&GarfaParams>,
    opts: &ForwardOptions,
) -> Result<TapeTrace> {
    if tokens.is_empty() {
        return Err(GlabError::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(GlabError::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(GlabError::Input(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    if params.layers.len() != config.n_layers {
        return Err(GlabError::Config(format!(
            "parameters hold {} layers, config says {}",
            params.layers.len(),
            config.n_layers
        )));
    }
    if let Some(g) = garfa {
        g.check_against(config)?;
    }
    for (&l, &s) in &opts.rope_scale {
        if l >= config.n_layers {
            return Err(GlabError::Config(format!("rope scale for missing layer {l}")));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(GlabError::Config(format!("rope scale must be positive, got {s}")));
        }
    }

    let base: Vec<Var> = params.named_tensors().into_iter().map(|(_, t)| tape.leaf(t)).collect();
    let lora_vars: BTreeMap<(usize, Projection), (Var, Var)> = lora
        .map(|ad| {
            ad.factors
                .iter()
                .map(|(&key, f)| (key, (tape.leaf(&f.a), tape.leaf(&f.b))))
                .collect()
        })
        .unwrap_or_default();
    let garfa_vars: BTreeMap<(usize, usize), Var> = garfa
        .map(|g| g.raw.iter().map(|(&key, w)| (key, tape.leaf(w))).collect())
        .unwrap_or_default();

    // Layout of `base`: embed, 9 per layer, final_norm, lm_head.
    let embed = base[0];
    let layer_var = |l: usize, i: usize| base[1 + 9 * l + i];
    let final_norm = base[1 + 9 * config.n_layers];
    let lm_head = base[2 + 9 * config.n_layers];

    let seq = tokens.len();
    let positions: Vec<usize> = (0..seq).collect();
    let dh = config.d_head;
    let group = config.group_size();
    let attn_scale = 1.0 / (dh as f64).sqrt();

    let mut lin = Linear {
        tape,
        lora_vars: &lora_vars,
        lora_scale: lora.map_or(1.0, |a| a.spec.scale()),
        dropout: opts.dropout,
    };

    let mut h = lin.tape.embedding(embed, tokens)?;
    let mut hidden = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let theta = config.rope_base * opts.rope_scale.get(&l).copied().unwrap_or(1.0);

        // attention
        let x = lin.tape.rms_norm(h, layer_var(l, 0), RMS_EPS)?;
        let q = lin.apply(x, layer_var(l, 1), l, Projection::Q)?;
        let k = lin.apply(x, layer_var(l, 2), l, Projection::K)?;
        let v = lin.apply(x, layer_var(l, 3), l, Projection::V)?;

        let q_base = lin.tape.scalar_constant(theta);
        let mut keys = Vec::with_capacity(config.n_kv_heads);
        let mut values = Vec::with_capacity(config.n_kv_heads);
        for j in 0..config.n_kv_heads {
            let kj = lin.tape.slice_cols(k, j * dh, dh)?;
            let k_base = match garfa_vars.get(&(l, j)) {
                Some(&w) => key_base_on_tape(lin.tape, w, theta)?,
                None => q_base,
            };
            keys.push(lin.tape.rope(kj, &positions, k_base)?);
            values.push(lin.tape.slice_cols(v, j * dh, dh)?);
        }
        let mut heads = Vec::with_capacity(config.n_q_heads);
        for qh in 0..config.n_q_heads {
            let j = qh / group;
            let qi = lin.tape.slice_cols(q, qh * dh, dh)?;
            let qi = lin.tape.rope(qi, &positions, q_base)?;
            let scores = lin.tape.matmul_nt(qi, keys[j])?;
            let scores = lin.tape.scale(scores, attn_scale);
            let probs = lin.tape.softmax_rows(scores, true)?;
            heads.push(lin.tape.matmul(probs, values[j])?);
        }
        let attn = lin.tape.concat_cols(&heads)?;
        let o = lin.apply(attn, layer_var(l, 4), l, Projection::O)?;
        h = lin.tape.add(h, o)?;

        // MLP
        let x = lin.tape.rms_norm(h, layer_var(l, 5), RMS_EPS)?;
        let gate = lin.apply(x, layer_var(l, 6), l, Projection::Gate)?;
        let up = lin.apply(x, layer_var(l, 7), l, Projection::Up)?;
        let act = lin.tape.silu(gate);
        let inner = lin.tape.mul(act, up)?;
        let down = lin.apply(inner, layer_var(l, 8), l, Projection::Down)?;
        h = lin.tape.add(h, down)?;
        hidden.push(h);
    }
    let tape = lin.tape;
    let x = tape.rms_norm(h, final_norm, RMS_EPS)?;
    let logits = tape.matmul_nt(x, lm_head)?;

    Ok(TapeTrace {
        logits,
        hidden,
        base,
        lora: lora_vars,
        garfa: garfa_vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lslora::LoraSpec;

    fn toy() -> Model {
        Model::init(&ModelConfig::toy(), 7).unwrap()
    }

    #[test]
    fn shapes() {
        let m = toy();
        let t = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(t.logits.shape, vec![5, 64]);
        assert_eq!(t.hidden.len(), 8);
        assert!(t.hidden.iter().all(|h| h.shape == vec![5, 64]));
    }

    #[test]
    fn bad_inputs() {
        let m = toy();
        assert!(matches!(m.forward(&[64]), Err(GlabError::Input(_))));
        assert!(matches!(m.forward(&[]), Err(GlabError::Input(_))));
        assert!(matches!(m.forward(&vec![0; 65]), Err(GlabError::Input(_))));
    }

    #[test]
    fn zero_lora_and_identity_garfa_are_no_ops() {
        let mut m = toy();
        let tokens = [3, 9, 27, 17, 51, 0];
        let plain = m.forward(&tokens).unwrap();
        let spec = LoraSpec {
            layers: [0, 5].into(),
            ..LoraSpec::default()
        };
        let ad = LoraAdapter::inject(&spec, &m.config, 1).unwrap();
        m.attach_lora(ad).unwrap();
        m.attach_garfa(GarfaParams::init_identity(&[1, 5, 7].into(), 2).unwrap())
            .unwrap();
        let adapted = m.forward(&tokens).unwrap();
        assert!(plain.logits.max_abs_diff(&adapted.logits) < 1e-12);
    }

    #[test]
    fn causal() {
        let m = toy();
        let a = m.forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.forward(&[1, 2, 3, 40, 5, 6]).unwrap();
        for pos in 0..6 {
            let same = a.logits.row(pos) == b.logits.row(pos);
            assert_eq!(same, pos < 3, "position {pos}");
        }
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let d = Dropout { p: 0.5, seed: 11 };
        let a = dropout_mask(vec![4, 8], d, 2, Projection::V);
        let b = dropout_mask(vec![4, 8], d, 2, Projection::V);
        let c = dropout_mask(vec![4, 8], d, 2, Projection::K);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
