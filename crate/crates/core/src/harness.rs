//! Synthetic sequence tasks, evaluation, and the four-way layer-set
//! ablation.
//!
//! Token layout for a task vocabulary of size `V` and sequence length `S`:
//! ids `0..4` are markers (separator, query, key-value, copy), the next
//! `S - 4` ids name body positions, and everything from `S` up to `V` is
//! content.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::random_layer_set;
use crate::data::{example_nll, Example};
use crate::error::{GlabError, Result};
use crate::garfa::GarfaParams;
use crate::lslora::{LoraAdapter, LoraSpec};
use crate::model::{Model, ModelConfig};
use crate::numcore::derive_seed;
use crate::probes::{top_k, LayerProfile, PairedStimulus, RankDirection};
use crate::trainer::{train, TrainingConfig, TrainingLog};

pub const SEP: usize = 0;
pub const QUERY: usize = 1;
pub const KV: usize = 2;
pub const COPY: usize = 3;
const N_MARKERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PositionalRetrieval,
    KeyValueLookup,
    Copy,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::PositionalRetrieval, TaskKind::KeyValueLookup, TaskKind::Copy];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PositionalRetrieval => "positional-retrieval",
            TaskKind::KeyValueLookup => "key-value-lookup",
            TaskKind::Copy => "copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GlabError::Config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Minimal pairs emitted per task kind.
    pub n_stimuli: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::PositionalRetrieval,
            seq_len: 12,
            vocab_size: 32,
            n_train: 256,
            n_eval: 64,
            n_stimuli: 5,
            seed: 0,
        }
    }
}

impl TaskSpec {
    fn body_len(&self, kind: TaskKind) -> usize {
        match kind {
            // [QUERY, pos, body.., SEP, answer]
            TaskKind::PositionalRetrieval => self.seq_len - 4,
            // [KV, (k, v)*, SEP, key, answer]
            TaskKind::KeyValueLookup => (self.seq_len - 4) / 2,
            // [COPY, body.., SEP, body..]
            TaskKind::Copy => (self.seq_len - 2) / 2,
        }
    }

    fn content(&self) -> std::ops::Range<usize> {
        self.seq_len..self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlabError::Config(m));
        if self.vocab_size < 8 {
            return fail(format!("task vocabulary {} is below 8", self.vocab_size));
        }
        if self.seq_len < 6 {
            return fail(format!("seq_len {} is below 6", self.seq_len));
        }
        if self.n_train == 0 {
            return fail("n_train must be positive".into());
        }
        let content = self.content().len();
        let need = 2.max(self.body_len(TaskKind::KeyValueLookup));
        if self.vocab_size <= self.seq_len || content < need {
            return fail(format!(
                "vocabulary {} leaves {content} content tokens for seq_len {}; need at least {need}",
                self.vocab_size, self.seq_len
            ));
        }
        Ok(())
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.seq_len > config.max_seq_len {
            return Err(GlabError::Config(format!(
                "task seq_len {} exceeds model max_seq_len {}",
                self.seq_len, config.max_seq_len
            )));
        }
        if self.vocab_size > config.vocab_size {
            return Err(GlabError::Config(format!(
                "task vocabulary {} exceeds model vocabulary {}",
                self.vocab_size, config.vocab_size
            )));
        }
        Ok(())
    }
}

/// One generated instance before it is turned into an [`Example`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub kind: TaskKind,
    pub tokens: Vec<usize>,
    /// Index of the first answer token in `tokens`.
    pub answer_start: usize,
}

impl Instance {
    pub fn example(&self) -> Example {
        let targets = (self.answer_start..self.tokens.len())
            .map(|i| (i - 1, self.tokens[i]))
            .collect();
        Example {
            tokens: self.tokens.clone(),
            targets,
        }
    }

    /// Replace the first answer token with a different content token.
    pub fn corrupted(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let content = spec.content();
        let mut out = self.tokens.clone();
        let orig = out[self.answer_start];
        let shift = rng.gen_range(1..content.len());
        out[self.answer_start] = content.start + (orig - content.start + shift) % content.len();
        out
    }
}

pub fn generate_instance(kind: TaskKind, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Instance {
    let content = spec.content();
    let body_len = spec.body_len(kind);
    let draw = |rng: &mut ChaCha8Rng| rng.gen_range(content.clone());
    match kind {
        TaskKind::PositionalRetrieval => {
            let body: Vec<usize> = (0..body_len).map(|_| draw(rng)).collect();
            let p = rng.gen_range(0..body_len);
            let mut tokens = vec![QUERY, N_MARKERS + p];
            tokens.extend(&body);
            tokens.push(SEP);
            tokens.push(body[p]);
            Instance {
                kind,
                answer_start: tokens.len() - 1,
                tokens,
            }
        }
        TaskKind::KeyValueLookup => {
            let mut keys: Vec<usize> = content.clone().collect();
            keys.shuffle(rng);
            keys.truncate(body_len);
            let values: Vec<usize> = (0..body_len).map(|_| draw(rng)).collect();
            let q = rng.gen_range(0..body_len);
            let mut tokens = vec![KV];
            for (k, v) in keys.iter().zip(&values) {
                tokens.push(*k);
                tokens.push(*v);
            }
            tokens.push(SEP);
            tokens.push(keys[q]);
            tokens.push(values[q]);
            Instance {
                kind,
                answer_start: tokens.len() - 1,
                tokens,
            }
        }
        TaskKind::Copy => {
            let body: Vec<usize> = (0..body_len).map(|_| draw(rng)).collect();
            let mut tokens = vec![COPY];
            tokens.extend(&body);
            tokens.push(SEP);
            let answer_start = tokens.len();
            tokens.extend(&body);
            Instance {
                kind,
                answer_start,
                tokens,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    /// Minimal pairs for every task kind, domain = kind name.
    pub stimuli: Vec<PairedStimulus>,
}

/// Deterministic dataset for `spec.kind`, plus minimal pairs for all three
/// kinds. Train, eval and stimuli come from independent streams.
pub fn generate_tasks(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let stream = |tag: u64| ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, tag]));
    let mut rng = stream(1);
    let train = (0..spec.n_train)
        .map(|_| generate_instance(spec.kind, spec, &mut rng).example())
        .collect();
    let mut rng = stream(2);
    let eval = (0..spec.n_eval)
        .map(|_| generate_instance(spec.kind, spec, &mut rng).example())
        .collect();
    let mut stimuli = Vec::with_capacity(3 * spec.n_stimuli);
    for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
        let mut rng = stream(10 + i as u64);
        for _ in 0..spec.n_stimuli {
            let inst = generate_instance(kind, spec, &mut rng);
            let incorrect = inst.corrupted(spec, &mut rng);
            stimuli.push(PairedStimulus {
                domain: kind.name().into(),
                correct: inst.tokens,
                incorrect,
            });
        }
    }
    Ok(TaskData { train, eval, stimuli })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub n_targets: usize,
}

/// Greedy next-token accuracy (ties go to the lowest id) and mean
/// cross-entropy over every target position.
pub fn evaluate(model: &Model, dataset: &[Example]) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(GlabError::Input("evaluation set is empty".into()));
    }
    let parts: Vec<(usize, f64, usize)> = dataset
        .par_iter()
        .map(|ex| {
            let logits = model.forward(&ex.tokens)?.logits;
            let (nll, n) = example_nll(&logits, &ex.targets)?;
            let hits = ex.targets.iter().filter(|&&(r, t)| argmax(logits.row(r)) == t).count();
            Ok((hits, nll, n))
        })
        .collect::<Result<_>>()?;
    let (mut hits, mut nll, mut n) = (0, 0.0, 0);
    for (h, l, c) in parts {
        hits += h;
        nll += l;
        n += c;
    }
    if n == 0 {
        return Err(GlabError::Input("evaluation set has no targets".into()));
    }
    Ok(EvalResult {
        accuracy: hits as f64 / n as f64,
        loss: nll / n as f64,
        n_targets: n,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experiment {
    pub label: String,
    pub lora_layers: BTreeSet<usize>,
    pub garfa_layers: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub experiments: Vec<Experiment>,
    pub sensitive_set: BTreeSet<usize>,
    pub random_set: BTreeSet<usize>,
}

impl AblationPlan {
    /// A = (S, S), B = (S, R), C = (R, S), D = (R, R) for (LoRA, GARFA).
    pub fn wire(sensitive: BTreeSet<usize>, random: BTreeSet<usize>) -> Result<Self> {
        let plan = AblationPlan {
            experiments: [
                ("A", &sensitive, &sensitive),
                ("B", &sensitive, &random),
                ("C", &random, &sensitive),
                ("D", &random, &random),
            ]
            .into_iter()
            .map(|(label, l, g)| Experiment {
                label: label.into(),
                lora_layers: l.clone(),
                garfa_layers: g.clone(),
            })
            .collect(),
            sensitive_set: sensitive,
            random_set: random,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, r) = (&self.sensitive_set, &self.random_set);
        if s.is_empty() || r.is_empty() {
            return Err(GlabError::Config("ablation layer sets must be nonempty".into()));
        }
        if !s.is_disjoint(r) {
            return Err(GlabError::Config(format!(
                "sensitive set {s:?} and random set {r:?} overlap"
            )));
        }
        let expected = [("A", s, s), ("B", s, r), ("C", r, s), ("D", r, r)];
        let ok = self.experiments.len() == 4
            && self
                .experiments
                .iter()
                .zip(expected)
                .all(|(e, (lab, l, g))| e.label == lab && &e.lora_layers == l && &e.garfa_layers == g);
        if !ok {
            return Err(GlabError::Config("experiments do not follow the A/B/C/D wiring".into()));
        }
        Ok(())
    }
}

/// Sensitive set = top-k of the profile by value; random set = a seeded draw
/// of the same size from the remaining layers.
pub fn derive_plan(sensitivity: &LayerProfile, n_layers: usize, k: usize, seed: u64) -> Result<AblationPlan> {
    if sensitivity.values.len() != n_layers {
        return Err(GlabError::Config(format!(
            "profile covers {} layers, model has {n_layers}",
            sensitivity.values.len()
        )));
    }
    if k == 0 || 2 * k > n_layers {
        return Err(GlabError::Config(format!(
            "k = {k} cannot give two disjoint sets over {n_layers} layers"
        )));
    }
    let sensitive = top_k(sensitivity, k, RankDirection::ByValue)?;
    let random = random_layer_set(n_layers, k, &sensitive, seed)?;
    AblationPlan::wire(sensitive, random)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub lora_layers: BTreeSet<usize>,
    pub garfa_layers: BTreeSet<usize>,
    pub base_fingerprint: String,
    pub initial_train_loss: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub accuracy: f64,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSeeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
    pub adapters: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub plan: AblationPlan,
    pub seeds: AblationSeeds,
    pub runs: Vec<RunResult>,
}

fn join_layers(s: &BTreeSet<usize>) -> String {
    s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
}

impl AblationResult {
    /// `experiment,lora_layers,garfa_layers,train_loss,eval_loss,accuracy`;
    /// layer sets are `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,lora_layers,garfa_layers,train_loss,eval_loss,accuracy\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label,
                join_layers(&r.lora_layers),
                join_layers(&r.garfa_layers),
                r.train_loss,
                r.eval_loss,
                r.accuracy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| GlabError::io(path, e))
    }
}

/// Four training runs that share the base initialization, data and adapter
/// seeds and differ only in which layers carry LoRA and GARFA.
pub fn run_ablation(
    plan: &AblationPlan,
    task: &TaskSpec,
    train_cfg: &TrainingConfig,
    model_cfg: &ModelConfig,
    lora: &LoraSpec,
    seed: u64,
) -> Result<AblationResult> {
    plan.validate()?;
    task.validate_for(model_cfg)?;
    let seeds = AblationSeeds {
        model: derive_seed(&[seed, 1]),
        data: task.seed,
        train: train_cfg.seed,
        adapters: derive_seed(&[seed, 2]),
    };
    let data = generate_tasks(task)?;
    let base = Model::init(model_cfg, seeds.model)?;

    let runs: Vec<RunResult> = plan
        .experiments
        .par_iter()
        .map(|e| {
            let mut model = base.clone();
            let spec = LoraSpec {
                layers: e.lora_layers.clone(),
                ..lora.clone()
            };
            model.attach_lora(LoraAdapter::inject(&spec, model_cfg, seeds.adapters)?)?;
            model.attach_garfa(GarfaParams::init_identity(&e.garfa_layers, model_cfg.n_kv_heads)?)?;
            let fingerprint = model.params.fingerprint();
            let log = train(&mut model, &data.train, &data.eval, train_cfg)?;
            let eval = evaluate(&model, &data.eval)?;
            Ok(RunResult {
                label: e.label.clone(),
                lora_layers: e.lora_layers.clone(),
                garfa_layers: e.garfa_layers.clone(),
                base_fingerprint: fingerprint,
                initial_train_loss: log.initial_train_loss,
                train_loss: log.final_train_loss,
                eval_loss: eval.loss,
                accuracy: eval.accuracy,
                log,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationResult {
        plan: plan.clone(),
        seeds,
        runs,
    })
}
