//! Co-localization statistics: rank correlation with a Student-t p-value,
//! top-k overlap against its hypergeometric expectation, random control
//! layer sets, and the bundled reference profiles.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlabError, Result};
use crate::probes::{top_k, LayerProfile, ProfileKind, RankDirection};

/// Environment variable that overrides the fixture directory.
pub const FIXTURES_ENV: &str = "GLAB_FIXTURES";
pub const PROFILES_FILE: &str = "profiles_32.csv";
pub const ALPHAS_FILE: &str = "alphas_10x8.csv";

/// Published reference values for the bundled profiles.
pub mod reference {
    pub const R_S: f64 = -0.735;
    pub const R_S_TOL: f64 = 0.005;
    pub const P_VALUE: f64 = 1.66e-6;
    pub const P_RANGE: (f64, f64) = (1.0e-6, 3.0e-6);
    pub const SENSITIVE: [usize; 10] = [0, 23, 24, 25, 26, 27, 28, 29, 30, 31];
    pub const ROPE: [usize; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    pub const OVERLAP: [usize; 1] = [0];
    pub const EXPECTED_OVERLAP: f64 = 3.125;
}

/// 1-based ranks, tied values sharing the mean of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GlabError::UndefinedCorrelation(
            "one of the sequences is constant".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GlabError::Input(format!(
            "sequences differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(GlabError::Input(format!(
            "need at least 3 observations, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(GlabError::NumericDomain("NaN in rank correlation input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`, by the continued fraction
/// evaluated with the modified Lentz method.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(GlabError::NumericDomain(format!("beta parameters a={a}, b={b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(GlabError::NumericDomain(format!("incomplete beta at x={x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_cf(1.0 - x, b, a)? / b)
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(GlabError::NumericDomain(format!(
        "incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})"
    )))
}

/// Two-sided tail probability `P(|T| ≥ |t|)` of Student's t with `df`
/// degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(GlabError::NumericDomain(format!("degrees of freedom {df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub p: f64,
    /// True when `|r| = 1`: the t statistic is infinite and `p = 0` exactly.
    pub exact: bool,
}

/// Two-sided p-value for a rank correlation over `n` observations, with
/// `t = r·√((n−2)/(1−r²))` on `n − 2` degrees of freedom.
pub fn spearman_p_value(r_s: f64, n: usize) -> Result<PValue> {
    if n < 4 {
        return Err(GlabError::Input(format!("need n >= 4, got {n}")));
    }
    if !(r_s.abs() <= 1.0) {
        return Err(GlabError::NumericDomain(format!("correlation {r_s} outside [-1, 1]")));
    }
    if r_s.abs() == 1.0 {
        return Ok(PValue { p: 0.0, exact: true });
    }
    let df = (n - 2) as f64;
    let t = r_s * (df / (1.0 - r_s * r_s)).sqrt();
    Ok(PValue {
        p: student_t_two_sided(t, df)?,
        exact: false,
    })
}

/// Intersection of two layer sets and its expected size `|A|·|B|/n` under
/// independent uniform draws.
pub fn overlap_stats(a: &BTreeSet<usize>, b: &BTreeSet<usize>, n_layers: usize) -> Result<(BTreeSet<usize>, f64)> {
    if n_layers == 0 {
        return Err(GlabError::Input("zero layers".into()));
    }
    if let Some(&l) = a.iter().chain(b).find(|&&l| l >= n_layers) {
        return Err(GlabError::Input(format!("layer {l} outside 0..{n_layers}")));
    }
    let overlap = a.intersection(b).copied().collect();
    Ok((overlap, (a.len() * b.len()) as f64 / n_layers as f64))
}

/// Uniform draw of `size` layers from `0..n_layers` minus `exclude`.
///
/// Generator: ChaCha8 seeded with `seed` (`seed_from_u64`). Candidates are
/// listed in ascending order and a partial Fisher-Yates shuffle picks the
/// first `size`; each swap index in `i..len` comes from `next_u64` by
/// rejection sampling (values at or above the largest multiple of the range
/// are redrawn). The result is sorted.
pub fn random_layer_set(n_layers: usize, size: usize, exclude: &BTreeSet<usize>, seed: u64) -> Result<BTreeSet<usize>> {
    let mut pool: Vec<usize> = (0..n_layers).filter(|l| !exclude.contains(l)).collect();
    if size > pool.len() {
        return Err(GlabError::Config(format!(
            "cannot draw {size} layers from the {} left after exclusion",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..size {
        let j = i + bounded(&mut rng, (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    Ok(pool[..size].iter().copied().collect())
}

fn bounded(rng: &mut ChaCha8Rng, range: u64) -> u64 {
    let zone = (u64::MAX / range) * range;
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % range;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoLocalizationReport {
    pub r_s: f64,
    pub p_value: f64,
    pub p_exact: bool,
    pub k: usize,
    pub direction: RankDirection,
    pub top_k_sensitivity: BTreeSet<usize>,
    pub top_k_influence: BTreeSet<usize>,
    pub overlap: BTreeSet<usize>,
    pub expected_overlap: f64,
    pub n_layers: usize,
}

impl CoLocalizationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| GlabError::io(path, e))
    }
}

/// Correlate two profiles and compare their top-k sets.
pub fn co_localization(
    sensitivity: &LayerProfile,
    influence: &LayerProfile,
    k: usize,
    direction: RankDirection,
) -> Result<CoLocalizationReport> {
    let n = sensitivity.values.len();
    if influence.values.len() != n {
        return Err(GlabError::Input(format!(
            "profiles cover {n} and {} layers",
            influence.values.len()
        )));
    }
    let r_s = spearman(&sensitivity.values, &influence.values)?;
    let p = spearman_p_value(r_s, n)?;
    let top_s = top_k(sensitivity, k, RankDirection::ByValue)?;
    let top_i = top_k(influence, k, direction)?;
    let (overlap, expected) = overlap_stats(&top_s, &top_i, n)?;
    Ok(CoLocalizationReport {
        r_s,
        p_value: p.p,
        p_exact: p.exact,
        k,
        direction,
        top_k_sensitivity: top_s,
        top_k_influence: top_i,
        overlap,
        expected_overlap: expected,
        n_layers: n,
    })
}

/// `$GLAB_FIXTURES` when set, else the fixtures bundled with the crate.
pub fn fixture_dir() -> PathBuf {
    match std::env::var_os(FIXTURES_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures"),
    }
}

fn read_table(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| GlabError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(GlabError::parse(
                path,
                format!("expected header {header:?}, found {:?}", other.unwrap_or("")),
            ))
        }
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() != width {
                return Err(GlabError::parse(
                    path,
                    format!("row {}: expected {width} fields, got {}", i + 1, cells.len()),
                ));
            }
            Ok(cells)
        })
        .collect()
}

fn cell<T: std::str::FromStr>(path: &Path, row: usize, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| GlabError::parse(path, format!("row {row}: cannot parse {v:?}")))
}

/// `(δ, ρ)` profiles from a `layer,delta,rho` table with layers `0..n` in order.
pub fn load_profiles(path: &Path) -> Result<(LayerProfile, LayerProfile)> {
    let rows = read_table(path, "layer,delta,rho")?;
    let (mut delta, mut rho) = (Vec::new(), Vec::new());
    for (i, r) in rows.iter().enumerate() {
        let layer: usize = cell(path, i + 1, &r[0])?;
        if layer != i {
            return Err(GlabError::parse(
                path,
                format!("row {}: layer {layer} out of order", i + 1),
            ));
        }
        let d: f64 = cell(path, i + 1, &r[1])?;
        let p: f64 = cell(path, i + 1, &r[2])?;
        if !d.is_finite() || !p.is_finite() {
            return Err(GlabError::parse(path, format!("row {}: non-finite value", i + 1)));
        }
        delta.push(d);
        rho.push(p);
    }
    if delta.is_empty() {
        return Err(GlabError::parse(path, "no rows"));
    }
    Ok((
        LayerProfile {
            kind: ProfileKind::Sensitivity,
            values: delta,
        },
        LayerProfile {
            kind: ProfileKind::Influence,
            values: rho,
        },
    ))
}

/// `(layer, head, α)` rows of a `layer,head,alpha` table.
pub fn load_alphas(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    read_table(path, "layer,head,alpha")?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok((
                cell(path, i + 1, &r[0])?,
                cell(path, i + 1, &r[1])?,
                cell(path, i + 1, &r[2])?,
            ))
        })
        .collect()
}

/// Top-10 report over the bundled profiles, influence ranked by raw value.
pub fn paper_fixture_report() -> Result<CoLocalizationReport> {
    paper_fixture_report_from(&fixture_dir())
}

pub fn paper_fixture_report_from(dir: &Path) -> Result<CoLocalizationReport> {
    let (delta, rho) = load_profiles(&dir.join(PROFILES_FILE))?;
    co_localization(&delta, &rho, 10, RankDirection::ByValue)
}

/// One comparison of a report field against its published value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Compare a fixture report with the published numbers.
pub fn reference_checks(r: &CoLocalizationReport) -> Vec<Check> {
    use reference::*;
    let set = |s: &[usize]| s.iter().copied().collect::<BTreeSet<usize>>();
    vec![
        Check {
            name: "spearman",
            pass: (r.r_s - R_S).abs() <= R_S_TOL,
            detail: format!("r_s = {:.5} (reference {R_S} ± {R_S_TOL})", r.r_s),
        },
        Check {
            name: "p-value",
            pass: r.p_value >= P_RANGE.0 && r.p_value <= P_RANGE.1,
            detail: format!(
                "p = {:.4e} (reference {P_VALUE:e}, accepted [{:e}, {:e}])",
                r.p_value, P_RANGE.0, P_RANGE.1
            ),
        },
        Check {
            name: "top-k sensitivity",
            pass: r.top_k_sensitivity == set(&SENSITIVE),
            detail: format!("{:?}", r.top_k_sensitivity),
        },
        Check {
            name: "top-k influence",
            pass: r.top_k_influence == set(&ROPE),
            detail: format!("{:?}", r.top_k_influence),
        },
        Check {
            name: "overlap",
            pass: r.overlap == set(&OVERLAP),
            detail: format!("{:?}", r.overlap),
        },
        Check {
            name: "expected overlap",
            pass: (r.expected_overlap - EXPECTED_OVERLAP).abs() < 1e-12,
            detail: format!("{}", r.expected_overlap),
        },
    ]
}
