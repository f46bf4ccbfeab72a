//! Layer attribution probes.
//!
//! * Sensitivity δ: how far apart the mean-pooled hidden states of a correct
//!   and an incorrect input sit at each layer, averaged within each domain
//!   and then across domains.
//! * RoPE influence ρ: how much the evaluation loss moves when one layer's
//!   rotary base is multiplied by γ.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_loss, Example};
use crate::error::{GlabError, Result};
use crate::model::{ForwardOptions, Model};
use crate::numcore::cosine_distance;

pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairedStimulus {
    pub domain: String,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Sensitivity,
    Influence,
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileKind::Sensitivity => "sensitivity",
            ProfileKind::Influence => "influence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub kind: ProfileKind,
    pub values: Vec<f64>,
}

impl LayerProfile {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    /// `# kind: <kind>` followed by a `layer,value` table.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# kind: {}\nlayer,value\n", self.kind);
        for (l, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{l},{v}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| GlabError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlabError::io(path, e))?;
        let bad = |m: String| GlabError::parse(path, m);
        let mut kind = None;
        let mut values = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(k) = c.trim().strip_prefix("kind:") {
                    kind = Some(match k.trim() {
                        "sensitivity" => ProfileKind::Sensitivity,
                        "influence" => ProfileKind::Influence,
                        other => return Err(bad(format!("unknown profile kind {other:?}"))),
                    });
                }
                continue;
            }
            if !header_seen {
                if line != "layer,value" {
                    return Err(bad(format!("line {}: expected header layer,value", i + 1)));
                }
                header_seen = true;
                continue;
            }
            let (l, v) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("line {}: expected two fields", i + 1)))?;
            let l: usize = l.parse().map_err(|_| bad(format!("line {}: bad layer {l:?}", i + 1)))?;
            let v: f64 = v.parse().map_err(|_| bad(format!("line {}: bad value {v:?}", i + 1)))?;
            if l != values.len() {
                return Err(bad(format!("line {}: layer {l} out of order", i + 1)));
            }
            values.push(v);
        }
        let kind = kind.ok_or_else(|| bad("missing '# kind:' comment".into()))?;
        Ok(LayerProfile { kind, values })
    }
}

/// Mean over domains of the per-domain mean cosine distance between the
/// mean-pooled layer outputs of each pair.
pub fn sensitivity_profile(model: &Model, stimuli: &[PairedStimulus]) -> Result<LayerProfile> {
    if stimuli.is_empty() {
        return Err(GlabError::Input("no stimuli".into()));
    }
    for s in stimuli {
        if s.domain.is_empty() {
            return Err(GlabError::Input("stimulus with an empty domain tag".into()));
        }
        if s.correct.is_empty() || s.incorrect.is_empty() {
            return Err(GlabError::Input(format!(
                "empty token sequence in a {:?} stimulus",
                s.domain
            )));
        }
    }
    // Canonical order makes the result independent of how the caller listed
    // the stimuli.
    let mut sorted: Vec<&PairedStimulus> = stimuli.iter().collect();
    sorted.sort();

    let distances: Vec<Vec<f64>> = sorted
        .par_iter()
        .map(|s| pair_distances(model, s))
        .collect::<Result<_>>()?;

    let mut by_domain: BTreeMap<&str, Vec<&Vec<f64>>> = BTreeMap::new();
    for (s, d) in sorted.iter().zip(&distances) {
        by_domain.entry(s.domain.as_str()).or_default().push(d);
    }
    let n = model.config.n_layers;
    let mut values = vec![0.0; n];
    for pairs in by_domain.values() {
        for (l, v) in values.iter_mut().enumerate() {
            let mut acc = 0.0;
            for d in pairs {
                acc += d[l];
            }
            *v += acc / pairs.len() as f64;
        }
    }
    let nd = by_domain.len() as f64;
    values.iter_mut().for_each(|v| *v /= nd);
    Ok(LayerProfile {
        kind: ProfileKind::Sensitivity,
        values,
    })
}

fn pair_distances(model: &Model, s: &PairedStimulus) -> Result<Vec<f64>> {
    let pos = model.forward(&s.correct)?;
    let neg = model.forward(&s.incorrect)?;
    pos.hidden
        .iter()
        .zip(&neg.hidden)
        .map(|(hp, hn)| cosine_distance(&hp.mean_rows()?, &hn.mean_rows()?))
        .collect()
}

/// Which layers the influence probe perturbs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InfluenceOptions {
    /// Probe only these layers. Requires `interpolate`.
    pub layers: Option<BTreeSet<usize>>,
    /// Fill unprobed layers by linear interpolation between the nearest
    /// probed neighbours (held constant beyond the ends).
    pub interpolate: bool,
}

/// ρ_ℓ = loss with layer ℓ's RoPE base scaled by γ, minus the unperturbed
/// loss. The perturbation touches one layer at a time and lives only in the
/// forward options, so the model itself is never modified.
pub fn rope_influence_profile(
    model: &Model,
    eval_batch: &[Example],
    gamma: f64,
    opts: &InfluenceOptions,
) -> Result<LayerProfile> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(GlabError::Config(format!("gamma must be positive, got {gamma}")));
    }
    if eval_batch.is_empty() {
        return Err(GlabError::Input("evaluation batch is empty".into()));
    }
    let n = model.config.n_layers;
    let probed: Vec<usize> = match &opts.layers {
        None => (0..n).collect(),
        Some(set) => {
            if !opts.interpolate && set.len() != n {
                return Err(GlabError::Config(
                    "probing a subset of layers requires interpolation".into(),
                ));
            }
            if set.is_empty() {
                return Err(GlabError::Config("empty probe layer set".into()));
            }
            if let Some(&l) = set.iter().find(|&&l| l >= n) {
                return Err(GlabError::Config(format!("probe layer {l} out of range")));
            }
            set.iter().copied().collect()
        }
    };

    let baseline = mean_loss(model, eval_batch, &ForwardOptions::default())?;
    let mut measured = Vec::with_capacity(probed.len());
    for &l in &probed {
        let loss = mean_loss(model, eval_batch, &ForwardOptions::scale_layer(l, gamma))?;
        measured.push((l, loss - baseline));
    }
    Ok(LayerProfile {
        kind: ProfileKind::Influence,
        values: fill_layers(&measured, n),
    })
}

/// Piecewise-linear fill over `0..n` from sorted `(layer, value)` samples.
pub fn fill_layers(samples: &[(usize, f64)], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let Some(&(first_l, first_v)) = samples.first() else {
        return out;
    };
    let &(last_l, last_v) = samples.last().expect("nonempty");
    for (l, v) in out.iter_mut().enumerate() {
        *v = if l <= first_l {
            first_v
        } else if l >= last_l {
            last_v
        } else {
            let i = samples.partition_point(|&(sl, _)| sl <= l);
            let (l0, v0) = samples[i - 1];
            if l0 == l {
                v0
            } else {
                let (l1, v1) = samples[i];
                v0 + (v1 - v0) * (l - l0) as f64 / (l1 - l0) as f64
            }
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankDirection {
    #[default]
    ByValue,
    ByMagnitude,
}

impl fmt::Display for RankDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankDirection::ByValue => "descending-by-value",
            RankDirection::ByMagnitude => "descending-by-magnitude",
        })
    }
}

impl FromStr for RankDirection {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" | "by-value" | "descending-by-value" => Ok(RankDirection::ByValue),
            "magnitude" | "by-magnitude" | "descending-by-magnitude" => Ok(RankDirection::ByMagnitude),
            _ => Err(GlabError::Config(format!("unknown ranking direction {s:?}"))),
        }
    }
}

/// The `k` highest-ranked layers, ties going to the lower index. Returned in
/// ascending layer order.
pub fn top_k(profile: &LayerProfile, k: usize, direction: RankDirection) -> Result<BTreeSet<usize>> {
    let n = profile.values.len();
    if k > n {
        return Err(GlabError::Config(format!("k = {k} exceeds {n} layers")));
    }
    if let Some(bad) = profile.values.iter().find(|v| v.is_nan()) {
        return Err(GlabError::NumericDomain(format!("profile contains {bad}")));
    }
    let key = |v: f64| match direction {
        RankDirection::ByValue => v,
        RankDirection::ByMagnitude => v.abs(),
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        key(profile.values[b])
            .total_cmp(&key(profile.values[a]))
            .then(a.cmp(&b))
    });
    Ok(idx.into_iter().take(k).collect())
}

/// One JSON object per line: `{"domain": .., "correct": [..], "incorrect": [..]}`.
pub fn read_stimuli(path: &Path) -> Result<Vec<PairedStimulus>> {
    let f = std::fs::File::open(path).map_err(|e| GlabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| GlabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PairedStimulus =
            serde_json::from_str(&line).map_err(|e| GlabError::parse(path, format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_stimuli(path: &Path, stimuli: &[PairedStimulus]) -> Result<()> {
    let mut buf = Vec::new();
    for s in stimuli {
        serde_json::to_writer(&mut buf, s).expect("stimulus serializes");
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| GlabError::io(path, e))
}
