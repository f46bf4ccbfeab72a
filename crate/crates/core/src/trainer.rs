//! Two-group AdamW training of LoRA factors and GARFA scalars on a frozen
//! base, with a shared warmup-plus-cosine schedule and gradient
//! accumulation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_loss, Example};
use crate::error::{GlabError, Result};
use crate::model::{Dropout, ForwardOptions, Model};
use crate::numcore::{derive_seed, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr_lora: f64,
    pub lr_rope: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Evaluate on the held-out split every this many steps (and on the
    /// last step). Zero disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_lora: 2e-4,
            lr_rope: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.03,
            max_steps: 500,
            batch_size: 8,
            grad_accum: 2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlabError::Config(m));
        if !(self.lr_lora > 0.0) || !(self.lr_rope > 0.0) {
            return fail(format!(
                "learning rates must be positive (lora {}, rope {})",
                self.lr_lora, self.lr_rope
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail(format!("warmup_frac {} not in [0, 1)", self.warmup_frac));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.max_steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return fail("max_steps, batch_size and grad_accum must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail(format!("betas {:?} not in [0, 1)", self.betas));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps {} must be positive", self.eps));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.max_steps as f64).round() as usize
    }
}

/// Linear ramp from 0 to `peak` over the warmup steps, then a half cosine
/// from `peak` down to 0 at `max_steps`.
pub fn lr_at(step: usize, peak: f64, config: &TrainingConfig) -> f64 {
    let warmup = config.warmup_steps();
    let total = config.max_steps;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup || step >= total {
        return if step >= total { 0.0 } else { peak };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state for one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

/// One named parameter handed to the optimizer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Decoupled-weight-decay Adam over one parameter group: shrink by
/// `lr·wd`, then apply the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [ParamSlot<'_>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    config: &TrainingConfig,
    step_index: usize,
) -> Result<()> {
    for p in params.iter() {
        if p.grad.len() != p.value.len() {
            return Err(GlabError::Shape(format!(
                "gradient for {} has {} entries, parameter has {}",
                p.name,
                p.grad.len(),
                p.value.len()
            )));
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(GlabError::NonFiniteGradient {
                step: step_index,
                param: p.name.clone(),
            });
        }
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|p| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            })
            .collect();
    }
    if state.moments.len() != params.len() {
        return Err(GlabError::Contract(
            "optimizer state does not match parameter group".into(),
        ));
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (p, mo) in params.iter_mut().zip(&mut state.moments) {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            let mut w = p.value[i];
            w *= 1.0 - lr * weight_decay;
            mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g;
            mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g * g;
            let mhat = mo.m[i] / c1;
            let vhat = mo.v[i] / c2;
            w -= lr * mhat / (vhat.sqrt() + config.eps);
            p.value[i] = w;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr_lora: f64,
    pub lr_rope: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Mean loss over the whole training set before the first step,
    /// dropout off.
    pub initial_train_loss: f64,
    /// Same, after the last step.
    pub final_train_loss: f64,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr_lora,lr_rope,eval_loss\n");
        for r in &self.rows {
            let eval = r.eval_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.lr_lora, r.lr_rope, eval));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| GlabError::io(path, e))
    }
}

/// Hold out `frac` of the data (at least one example once there are 50 or
/// more; none below that). The tail of the list becomes the held-out part.
pub fn holdout_split(data: &[Example], frac: f64) -> (Vec<Example>, Vec<Example>) {
    let n = data.len();
    let k = if n >= 50 {
        ((frac * n as f64).round() as usize).max(1)
    } else {
        0
    };
    (data[..n - k].to_vec(), data[n - k..].to_vec())
}

/// Parameter layout shared between the model, the tape and the optimizer.
struct Layout {
    lora: Vec<(usize, crate::model::Projection)>,
    garfa: Vec<(usize, usize)>,
}

impl Layout {
    fn of(model: &Model) -> Self {
        Layout {
            lora: model
                .lora
                .as_ref()
                .map(|l| l.factors.keys().copied().collect())
                .unwrap_or_default(),
            garfa: model
                .garfa
                .as_ref()
                .map(|g| g.raw.keys().copied().collect())
                .unwrap_or_default(),
        }
    }

    /// Flat gradients: A and B per LoRA pair, then one per GARFA scalar.
    fn collect(&self, tape: &Tape, trace: &crate::model::TapeTrace, model: &Model) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.lora.len() + self.garfa.len());
        let lora = model.lora.as_ref();
        for key in &self.lora {
            let (a, b) = trace.lora[key];
            let f = &lora.expect("lora attached").factors[key];
            out.push(
                tape.grad(a)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; f.a.numel()]),
            );
            out.push(
                tape.grad(b)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; f.b.numel()]),
            );
        }
        for key in &self.garfa {
            out.push(
                tape.grad(trace.garfa[key])
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0]),
            );
        }
        out
    }
}

/// Loss and adapter gradients for one example.
fn example_grads(
    model: &Model,
    layout: &Layout,
    ex: &Example,
    dropout: Option<Dropout>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        dropout,
        ..ForwardOptions::default()
    };
    let trace = model.record(&mut tape, &ex.tokens, &opts)?;
    let loss = tape.cross_entropy(trace.logits, &ex.targets)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data[0];
    Ok((value, layout.collect(&tape, &trace, model)))
}

/// Gradient of the mean example loss over `grad_accum` micro-batches:
/// each micro-batch averages its examples, then the micro-batch gradients
/// are averaged. Returns the mean loss too.
pub fn accumulated_gradients(
    model: &Model,
    micro_batches: &[Vec<Example>],
    dropout_seeds: Option<(f64, &[Vec<u64>])>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let layout = Layout::of(model);
    let k = micro_batches.len() as f64;
    let mut total: Option<Vec<Vec<f64>>> = None;
    let mut loss = 0.0;
    for (j, mb) in micro_batches.iter().enumerate() {
        if mb.is_empty() {
            return Err(GlabError::Input("empty micro-batch".into()));
        }
        let per: Vec<(f64, Vec<Vec<f64>>)> = mb
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let d = dropout_seeds.map(|(p, seeds)| Dropout { p, seed: seeds[j][i] });
                example_grads(model, &layout, ex, d)
            })
            .collect::<Result<_>>()?;
        let b = mb.len() as f64;
        let mut mb_grad: Option<Vec<Vec<f64>>> = None;
        let mut mb_loss = 0.0;
        for (l, g) in per {
            mb_loss += l;
            match &mut mb_grad {
                None => mb_grad = Some(g),
                Some(acc) => add_nested(acc, &g),
            }
        }
        let mut mb_grad = mb_grad.expect("nonempty micro-batch");
        scale_nested(&mut mb_grad, 1.0 / b);
        loss += mb_loss / b;
        match &mut total {
            None => total = Some(mb_grad),
            Some(acc) => add_nested(acc, &mb_grad),
        }
    }
    let mut total = total.ok_or_else(|| GlabError::Input("no micro-batches".into()))?;
    scale_nested(&mut total, 1.0 / k);
    Ok((loss / k, total))
}

fn add_nested(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn scale_nested(acc: &mut [Vec<f64>], s: f64) {
    acc.iter_mut().flatten().for_each(|x| *x *= s);
}

/// Apply one optimizer step to both groups from flat gradients in layout
/// order.
fn apply_step(
    model: &mut Model,
    grads: &[Vec<f64>],
    states: &mut (OptimizerState, OptimizerState),
    step: usize,
    config: &TrainingConfig,
) -> Result<()> {
    let n_lora = model.lora.as_ref().map_or(0, |l| l.factors.len() * 2);
    let (lora_grads, garfa_grads) = grads.split_at(n_lora);
    if let Some(lora) = &mut model.lora {
        let mut slots = Vec::with_capacity(n_lora);
        let mut it = lora_grads.iter();
        for (&(l, p), f) in lora.factors.iter_mut() {
            slots.push(ParamSlot {
                name: format!("lora.{l}.{p}.A"),
                value: &mut f.a.data,
                grad: it.next().expect("A grad"),
            });
            slots.push(ParamSlot {
                name: format!("lora.{l}.{p}.B"),
                value: &mut f.b.data,
                grad: it.next().expect("B grad"),
            });
        }
        let lr = lr_at(step, config.lr_lora, config);
        adamw_step(&mut slots, &mut states.0, lr, config.weight_decay, config, step)?;
    }
    if let Some(garfa) = &mut model.garfa {
        let mut slots: Vec<ParamSlot> = garfa
            .raw
            .iter_mut()
            .zip(garfa_grads)
            .map(|(((l, k), t), g)| ParamSlot {
                name: format!("garfa.{l}.{k}"),
                value: &mut t.data,
                grad: g,
            })
            .collect();
        let lr = lr_at(step, config.lr_rope, config);
        // GARFA scalars are exempt from weight decay.
        adamw_step(&mut slots, &mut states.1, lr, 0.0, config, step)?;
    }
    Ok(())
}

/// Order in which training examples are visited: a fresh ChaCha8 shuffle of
/// `0..n` per epoch, concatenated.
pub fn data_stream(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut epoch = 0u64;
    while out.len() < count {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch]));
        idx.shuffle(&mut rng);
        out.extend(idx.into_iter().take(count - out.len()));
        epoch += 1;
    }
    out
}

/// Train the attached LoRA factors and GARFA scalars. Base weights are
/// never touched.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    eval_set: &[Example],
    config: &TrainingConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(GlabError::Config("training set is empty".into()));
    }
    if model.lora.is_none() && model.garfa.is_none() {
        return Err(GlabError::Config("nothing to train: no LoRA or GARFA attached".into()));
    }
    model.params.set_requires_grad(false);
    if let Some(l) = &mut model.lora {
        l.set_requires_grad(true);
    }
    if let Some(g) = &mut model.garfa {
        g.set_requires_grad(true);
    }
    let dropout_p = model.lora.as_ref().map_or(0.0, |l| l.spec.dropout);
    let per_step = config.batch_size * config.grad_accum;
    let stream = data_stream(train_set.len(), per_step * config.max_steps, config.seed);

    let initial = mean_loss(model, train_set, &ForwardOptions::default())?;
    let mut states = (OptimizerState::default(), OptimizerState::default());
    let mut rows = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        let window = &stream[step * per_step..(step + 1) * per_step];
        let micro: Vec<Vec<Example>> = window
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| train_set[i].clone()).collect())
            .collect();
        let seeds: Vec<Vec<u64>> = (0..config.grad_accum)
            .map(|j| {
                (0..config.batch_size)
                    .map(|i| {
                        let global = (step * per_step + j * config.batch_size + i) as u64;
                        derive_seed(&[config.seed, step as u64, global])
                    })
                    .collect()
            })
            .collect();
        let dropout = (dropout_p > 0.0).then_some((dropout_p, seeds.as_slice()));
        let (loss, grads) = accumulated_gradients(model, &micro, dropout)?;
        if !loss.is_finite() {
            return Err(GlabError::NonFiniteGradient {
                step,
                param: "loss".into(),
            });
        }
        apply_step(model, &grads, &mut states, step, config)?;

        let last = step + 1 == config.max_steps;
        let due = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        let eval_loss = if !eval_set.is_empty() && (due || last) {
            Some(mean_loss(model, eval_set, &ForwardOptions::default())?)
        } else {
            None
        };
        rows.push(LogRow {
            step,
            loss,
            lr_lora: lr_at(step, config.lr_lora, config),
            lr_rope: lr_at(step, config.lr_rope, config),
            eval_loss,
        });
    }
    let final_loss = mean_loss(model, train_set, &ForwardOptions::default())?;
    Ok(TrainingLog {
        rows,
        initial_train_loss: initial,
        final_train_loss: final_loss,
    })
}

/// Named snapshot of the trainable parameters, for before/after comparisons.
pub fn trainable_snapshot(model: &Model) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    if let Some(l) = &model.lora {
        for (name, t) in l.named_tensors() {
            out.insert(name, t.data.clone());
        }
    }
    if let Some(g) = &model.garfa {
        for (&(l, k), t) in &g.raw {
            out.insert(format!("garfa.{l}.{k}"), t.data.clone());
        }
    }
    out
}
