//! The `glab` command line: config loading, subcommand dispatch, run
//! manifests and exit codes.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    co_localization, fixture_dir, load_alphas, load_profiles, paper_fixture_report_from, reference_checks, ALPHAS_FILE,
    PROFILES_FILE,
};
use crate::error::{GlabError, Result};
use crate::garfa::{write_alpha_csv, GarfaParams};
use crate::harness::{derive_plan, evaluate, generate_tasks, run_ablation, AblationPlan, TaskSpec};
use crate::lslora::{LoraAdapter, LoraSpec};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::probes::{
    read_stimuli, rope_influence_profile, sensitivity_profile, top_k, InfluenceOptions, LayerProfile, RankDirection,
    DEFAULT_GAMMA,
};
use crate::trainer::{holdout_split, train, TrainingConfig};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const ACCEPTANCE: i32 = 5;
}

pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub gamma: f64,
    pub top_k: usize,
    /// Probe a saved model instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
    /// JSON Lines stimulus file; generated pairs are used when absent.
    pub stimuli: Option<PathBuf>,
    pub interpolate: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            gamma: DEFAULT_GAMMA,
            top_k: 2,
            checkpoint: None,
            stimuli: None,
            interpolate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Size of the sensitive and random layer sets.
    pub k: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FigureConfig {
    /// Ablation table to turn into bar-chart data.
    pub ablation_csv: Option<PathBuf>,
}

/// Everything a run needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory. Not part of the config hash.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub garfa_layers: BTreeSet<usize>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub lora: LoraSpec,
    pub task: TaskSpec,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
    pub figures: FigureConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("glab-out"),
            garfa_layers: [6, 7].into(),
            model: ModelConfig::toy(),
            training: TrainingConfig::default(),
            lora: LoraSpec {
                layers: [6, 7].into(),
                ..LoraSpec::default()
            },
            task: TaskSpec::default(),
            probe: ProbeConfig::default(),
            ablation: AblationConfig::default(),
            figures: FigureConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| GlabError::parse(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlabError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// SHA-256 of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.task.validate_for(&self.model)?;
        if !(self.probe.gamma > 0.0) || !self.probe.gamma.is_finite() {
            return Err(GlabError::Config(format!(
                "gamma must be positive, got {}",
                self.probe.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "glab",
    version,
    allow_negative_numbers = true,
    about = "Layer attribution, layer-selective LoRA and learnable RoPE scaling on a toy GQA transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model init, data, training and control sets.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// RoPE base multiplier for the influence probe.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated layers; `a-b` spans a range.
    #[arg(long, global = true)]
    layers: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Recompute the co-localization statistics of the bundled profiles.
    ReproducePaperStats,
    /// Correctness-differential sensitivity per layer.
    ProbeSensitivity,
    /// Loss change per layer when that layer's RoPE base is scaled.
    ProbeRope,
    /// Both probes plus the co-localization report.
    Analyze,
    /// Train LoRA and GARFA on the configured layers.
    Train,
    /// Four-way sensitive/random layer-set ablation.
    Ablate,
    /// Plot data for every figure.
    ExportFigures,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::ReproducePaperStats => "reproduce-paper-stats",
            Command::ProbeSensitivity => "probe-sensitivity",
            Command::ProbeRope => "probe-rope",
            Command::Analyze => "analyze",
            Command::Train => "train",
            Command::Ablate => "ablate",
            Command::ExportFigures => "export-figures",
        }
    }
}

/// Parse `0,3,5-7` into `{0, 3, 5, 6, 7}`.
pub fn parse_layers(s: &str) -> Result<BTreeSet<usize>> {
    let bad = || GlabError::Config(format!("cannot parse layer list {s:?}"));
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn fmt_set(s: &BTreeSet<usize>) -> String {
    let items: Vec<String> = s.iter().map(|l| l.to_string()).collect();
    format!("{{{}}}", items.join(","))
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    artifacts: Vec<Artifact>,
}

/// Collects what a command writes so the manifest can list it.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| GlabError::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| GlabError::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| GlabError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    fn finish(self, command: Command, config: &RunConfig) -> Result<()> {
        let mut artifacts = Vec::with_capacity(self.written.len());
        for name in &self.written {
            let path = self.dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| GlabError::io(&path, e))?;
            artifacts.push(Artifact {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let m = RunManifest {
            tool: "glab",
            version: env!("CARGO_PKG_VERSION"),
            command: command.name(),
            seed: config.seed,
            config_hash: config.hash(),
            config,
            artifacts,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| GlabError::io(&path, e))
    }
}

/// Exit code for an error.
pub fn exit_code(e: &GlabError) -> i32 {
    match e {
        GlabError::Config(_) | GlabError::Input(_) => exit::USAGE,
        GlabError::Io { .. } | GlabError::Parse { .. } => exit::IO,
        GlabError::NumericDomain(_)
        | GlabError::Degenerate(_)
        | GlabError::UndefinedCorrelation(_)
        | GlabError::NonFiniteGradient { .. } => exit::NUMERIC,
        GlabError::Shape(_) | GlabError::Contract(_) => exit::FAILURE,
    }
}

/// Run the CLI on `args` (including the program name). Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.task.seed = s;
        cfg.training.seed = s;
    }
    if let Some(g) = cli.gamma {
        cfg.probe.gamma = g;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = effective_config(cli)?;
    let layers = cli.layers.as_deref().map(parse_layers).transpose()?;
    let mut out = Outputs::new(&cfg.out)?;
    let code = match cli.command {
        Command::ReproducePaperStats => cmd_reproduce(&mut out)?,
        Command::ProbeSensitivity => {
            if layers.is_some() {
                return Err(GlabError::Config("--layers is not used by probe-sensitivity".into()));
            }
            cmd_probe_sensitivity(&cfg, &mut out)?
        }
        Command::ProbeRope => cmd_probe_rope(&cfg, layers, &mut out)?,
        Command::Analyze => cmd_analyze(&cfg, &mut out)?,
        Command::Train => cmd_train(&cfg, layers, &mut out)?,
        Command::Ablate => cmd_ablate(&cfg, layers, &mut out)?,
        Command::ExportFigures => cmd_export_figures(&cfg, &mut out)?,
    };
    out.finish(cli.command, &cfg)?;
    Ok(code)
}

fn cmd_reproduce(out: &mut Outputs) -> Result<i32> {
    let dir = fixture_dir();
    let report = paper_fixture_report_from(&dir)?;
    println!("fixtures: {}", dir.display());
    println!("spearman r_s        {:.5}", report.r_s);
    println!("p-value             {:.4e}", report.p_value);
    println!("top-10 sensitivity  {}", fmt_set(&report.top_k_sensitivity));
    println!(
        "top-10 influence    {} ({})",
        fmt_set(&report.top_k_influence),
        report.direction
    );
    println!("overlap             {}", fmt_set(&report.overlap));
    println!("expected overlap    {}", report.expected_overlap);
    out.write("paper_stats.json", report.to_json())?;
    let checks = reference_checks(&report);
    let mut all = true;
    for c in &checks {
        println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        all &= c.pass;
    }
    Ok(if all { exit::OK } else { exit::ACCEPTANCE })
}

fn base_model(cfg: &RunConfig) -> Result<Model> {
    match &cfg.probe.checkpoint {
        Some(dir) => checkpoint::load(dir),
        None => Model::init(&cfg.model, cfg.seed),
    }
}

fn stimuli(cfg: &RunConfig) -> Result<Vec<crate::probes::PairedStimulus>> {
    match &cfg.probe.stimuli {
        Some(p) => read_stimuli(p),
        None => Ok(generate_tasks(&cfg.task)?.stimuli),
    }
}

fn print_top(label: &str, p: &LayerProfile, k: usize) -> Result<()> {
    let k = k.min(p.n_layers());
    println!("top-{k} {label}: {}", fmt_set(&top_k(p, k, RankDirection::ByValue)?));
    Ok(())
}

fn cmd_probe_sensitivity(cfg: &RunConfig, out: &mut Outputs) -> Result<i32> {
    let model = base_model(cfg)?;
    let profile = sensitivity_profile(&model, &stimuli(cfg)?)?;
    out.write("sensitivity.csv", profile.to_csv())?;
    print_top("sensitivity", &profile, cfg.probe.top_k)?;
    Ok(exit::OK)
}

fn influence(cfg: &RunConfig, model: &Model, layers: Option<BTreeSet<usize>>) -> Result<LayerProfile> {
    let data = generate_tasks(&cfg.task)?;
    let batch = if data.eval.is_empty() { data.train } else { data.eval };
    let interpolate = cfg.probe.interpolate || layers.is_some();
    rope_influence_profile(
        model,
        &batch,
        cfg.probe.gamma,
        &InfluenceOptions { layers, interpolate },
    )
}

fn cmd_probe_rope(cfg: &RunConfig, layers: Option<BTreeSet<usize>>, out: &mut Outputs) -> Result<i32> {
    let model = base_model(cfg)?;
    let profile = influence(cfg, &model, layers)?;
    out.write("influence.csv", profile.to_csv())?;
    print_top("influence", &profile, cfg.probe.top_k)?;
    Ok(exit::OK)
}

fn cmd_analyze(cfg: &RunConfig, out: &mut Outputs) -> Result<i32> {
    let model = base_model(cfg)?;
    let sens = sensitivity_profile(&model, &stimuli(cfg)?)?;
    let infl = influence(cfg, &model, None)?;
    let k = cfg.probe.top_k.min(sens.n_layers());
    let report = co_localization(&sens, &infl, k, RankDirection::ByValue)?;
    out.write("sensitivity.csv", sens.to_csv())?;
    out.write("influence.csv", infl.to_csv())?;
    out.write("report.json", report.to_json())?;
    println!("spearman r_s  {:.5}", report.r_s);
    println!("p-value       {:.4e}", report.p_value);
    println!("top-{k} sensitivity {}", fmt_set(&report.top_k_sensitivity));
    println!("top-{k} influence   {}", fmt_set(&report.top_k_influence));
    println!(
        "overlap {} (expected {})",
        fmt_set(&report.overlap),
        report.expected_overlap
    );
    Ok(exit::OK)
}

fn cmd_train(cfg: &RunConfig, layers: Option<BTreeSet<usize>>, out: &mut Outputs) -> Result<i32> {
    let lora_layers = layers.clone().unwrap_or_else(|| cfg.lora.layers.clone());
    let garfa_layers = layers.unwrap_or_else(|| cfg.garfa_layers.clone());
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    if !lora_layers.is_empty() {
        let spec = LoraSpec {
            layers: lora_layers,
            ..cfg.lora.clone()
        };
        model.attach_lora(LoraAdapter::inject(
            &spec,
            &cfg.model,
            crate::numcore::derive_seed(&[cfg.seed, 2]),
        )?)?;
    }
    if !garfa_layers.is_empty() {
        model.attach_garfa(GarfaParams::init_identity(&garfa_layers, cfg.model.n_kv_heads)?)?;
    }
    let data = generate_tasks(&cfg.task)?;
    let (train_set, eval_set) = if data.eval.is_empty() {
        holdout_split(&data.train, 0.02)
    } else {
        (data.train, data.eval)
    };
    let log = train(&mut model, &train_set, &eval_set, &cfg.training)?;
    out.write("training_log.csv", log.to_csv())?;
    for name in checkpoint::save(&model, &out.path("checkpoint"))? {
        out.record(&format!("checkpoint/{name}"));
    }
    if let Some(g) = &model.garfa {
        g.write_heatmap_csv(&out.path("alphas.csv"))?;
        out.record("alphas.csv");
    }
    if !eval_set.is_empty() {
        let e = evaluate(&model, &eval_set)?;
        out.write(
            "eval.json",
            serde_json::to_string_pretty(&e).expect("serializes") + "\n",
        )?;
        println!("eval loss {:.5}, accuracy {:.4}", e.loss, e.accuracy);
    }
    println!(
        "train loss {:.5} -> {:.5} over {} steps",
        log.initial_train_loss, log.final_train_loss, cfg.training.max_steps
    );
    Ok(exit::OK)
}

fn cmd_ablate(cfg: &RunConfig, layers: Option<BTreeSet<usize>>, out: &mut Outputs) -> Result<i32> {
    let n = cfg.model.n_layers;
    let plan = match layers {
        Some(sensitive) => {
            if let Some(&l) = sensitive.iter().find(|&&l| l >= n) {
                return Err(GlabError::Config(format!("layer {l} out of range")));
            }
            let random = crate::analysis::random_layer_set(n, sensitive.len(), &sensitive, cfg.seed)?;
            AblationPlan::wire(sensitive, random)?
        }
        None => {
            let model = Model::init(&cfg.model, crate::numcore::derive_seed(&[cfg.seed, 1]))?;
            let sens = sensitivity_profile(&model, &stimuli(cfg)?)?;
            out.write("sensitivity.csv", sens.to_csv())?;
            derive_plan(&sens, n, cfg.ablation.k, cfg.seed)?
        }
    };
    let result = run_ablation(&plan, &cfg.task, &cfg.training, &cfg.model, &cfg.lora, cfg.seed)?;
    out.write(
        "plan.json",
        serde_json::to_string_pretty(&plan).expect("serializes") + "\n",
    )?;
    out.write("ablation.csv", result.to_csv())?;
    for r in &result.runs {
        out.write(&format!("logs/{}.csv", r.label), r.log.to_csv())?;
        println!(
            "{}: lora {} garfa {} train {:.4} -> {:.4} eval {:.4} acc {:.4}",
            r.label,
            fmt_set(&r.lora_layers),
            fmt_set(&r.garfa_layers),
            r.initial_train_loss,
            r.train_loss,
            r.eval_loss,
            r.accuracy
        );
    }
    Ok(exit::OK)
}

fn cmd_export_figures(cfg: &RunConfig, out: &mut Outputs) -> Result<i32> {
    let dir = fixture_dir();
    let (delta, rho) = load_profiles(&dir.join(PROFILES_FILE))?;

    let mut scatter = String::from("layer,delta,rho\n");
    for (l, (d, r)) in delta.values.iter().zip(&rho.values).enumerate() {
        scatter.push_str(&format!("{l},{d},{r}\n"));
    }
    out.write("fig1_scatter.csv", &scatter)?;

    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v.iter()
            .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
            .collect()
    };
    let (nd, nr) = (norm(&delta.values), norm(&rho.values));
    let mut dual = String::from("layer,delta,rho,delta_norm,rho_norm\n");
    for l in 0..delta.values.len() {
        dual.push_str(&format!(
            "{l},{},{},{},{}\n",
            delta.values[l], rho.values[l], nd[l], nr[l]
        ));
    }
    out.write("fig2_dual_profile.csv", &dual)?;

    if let Some(path) = &cfg.figures.ablation_csv {
        let (bars, gap) = ablation_figures(path)?;
        out.write("fig3_ablation_bars.csv", bars)?;
        out.write("fig4_gap.csv", gap)?;
    } else {
        println!("no figures.ablation_csv configured; skipping ablation bar data");
    }

    let alphas = load_alphas(&dir.join(ALPHAS_FILE))?;
    write_alpha_csv(&out.path("fig5_alpha_heatmap.csv"), &alphas)?;
    out.record("fig5_alpha_heatmap.csv");
    println!("wrote {} figure tables to {}", out.written.len(), out.dir.display());
    Ok(exit::OK)
}

/// Long-format bars (`experiment,metric,value`) and the A-minus-D gap.
fn ablation_figures(path: &Path) -> Result<(String, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| GlabError::io(path, e))?;
    let mut lines = text.lines();
    let header = "experiment,lora_layers,garfa_layers,train_loss,eval_loss,accuracy";
    if lines.next().map(str::trim) != Some(header) {
        return Err(GlabError::parse(path, format!("expected header {header}")));
    }
    let metrics = ["train_loss", "eval_loss", "accuracy"];
    let mut rows: Vec<(String, [f64; 3])> = Vec::new();
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(GlabError::parse(path, format!("row {}: expected 6 fields", i + 1)));
        }
        let mut vals = [0.0; 3];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = f[3 + j]
                .parse()
                .map_err(|_| GlabError::parse(path, format!("row {}: bad number {:?}", i + 1, f[3 + j])))?;
        }
        rows.push((f[0].to_string(), vals));
    }
    let mut bars = String::from("experiment,metric,value\n");
    for (label, vals) in &rows {
        for (m, v) in metrics.iter().zip(vals) {
            bars.push_str(&format!("{label},{m},{v}\n"));
        }
    }
    let find = |l: &str| rows.iter().find(|r| r.0 == l).map(|r| r.1);
    let mut gap = String::from("metric,a_minus_d\n");
    if let (Some(a), Some(d)) = (find("A"), find("D")) {
        for (j, m) in metrics.iter().enumerate() {
            gap.push_str(&format!("{m},{}\n", a[j] - d[j]));
        }
    }
    Ok((bars, gap))
}
