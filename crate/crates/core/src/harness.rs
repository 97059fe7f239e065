//! Config-driven experiment plans: train or reuse checkpoints, evaluate every
//! drafter, export metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, stage_hash};
use crate::corpus::{make_corpus, Corpus, CorpusSpec};
use crate::drafter::{warm_start, Drafter, DrafterConfig, DrafterMode, Injection, Projector};
use crate::error::{Error, Result};
use crate::metrics::{alphas_from_stats, read_report, write_report, AcceptanceStats, MetricsRow, REPORT_STEPS};
use crate::model::{train_target, TargetConfig, TargetModel, TargetTrainConfig};
use crate::specdec::{spec_decode, write_transcript, DrafterProposer, RoundRecord, TreeConfig};
use crate::ttt::{train_drafter, TTTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub gen_tokens: usize,
    /// Chain length used for the step-wise rates.
    pub chain_depth: usize,
    pub tree: TreeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 20,
            prompt_len: 16,
            gen_tokens: 60,
            chain_depth: REPORT_STEPS,
            tree: TreeConfig::default(),
        }
    }
}

/// One drafter in a plan. Unset training fields fall back to the plan's
/// `[ttt]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrafterSpec {
    pub name: String,
    pub mode: DrafterMode,
    #[serde(default = "one")]
    pub depth: usize,
    #[serde(default = "default_injection")]
    pub injection: Injection,
    #[serde(default = "default_projector")]
    pub projector: Projector,
    #[serde(default = "three")]
    pub n_taps: usize,
    #[serde(default)]
    pub qk_norm: bool,
    /// Name of an earlier hidden-only entry to copy shared modules from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_grad_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn default_injection() -> Injection {
    Injection::LinearProjRope
}

fn default_projector() -> Projector {
    Projector::Linear
}

impl DrafterSpec {
    pub fn new(name: &str, mode: DrafterMode) -> Self {
        Self {
            name: name.into(),
            mode,
            depth: 1,
            injection: Injection::LinearProjRope,
            projector: Projector::Linear,
            n_taps: 3,
            qk_norm: false,
            warm_start: None,
            online: None,
            kv_grad_scale: None,
            steps: None,
        }
    }

    pub fn drafter_config(&self) -> DrafterConfig {
        DrafterConfig {
            mode: self.mode,
            depth: self.depth,
            injection: self.injection,
            projector: self.projector,
            n_taps: self.n_taps,
            qk_norm: self.qk_norm,
            ..DrafterConfig::default()
        }
    }

    pub fn ttt_config(&self, base: &TTTConfig, seed: u64) -> TTTConfig {
        TTTConfig {
            online: self.online.unwrap_or(base.online),
            kv_grad_scale: self.kv_grad_scale.unwrap_or(base.kv_grad_scale),
            steps: self.steps.unwrap_or(base.steps),
            seed: base.seed.wrapping_add(seed),
            ..base.clone()
        }
    }

    /// File-system name of the entry.
    pub fn slug(&self) -> String {
        let mut s: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect();
        while s.contains("--") {
            s = s.replace("--", "-");
        }
        s.trim_matches('-').to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    /// Seeds the target and every drafter; the corpus has its own seed.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub target: TargetConfig,
    pub target_train: TargetTrainConfig,
    pub ttt: TTTConfig,
    pub eval: EvalConfig,
    pub drafters: Vec<DrafterSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            out_dir: PathBuf::from("runs/experiment"),
            seed: 0,
            corpus: CorpusSpec::default(),
            target: TargetConfig::default(),
            target_train: TargetTrainConfig::default(),
            ttt: TTTConfig::default(),
            eval: EvalConfig::default(),
            drafters: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.ttt.validate()?;
        self.eval.tree.validate()?;
        if self.eval.chain_depth == 0 || self.eval.prompt_len == 0 {
            return Err(Error::Config("evaluation needs a prompt and a chain depth".into()));
        }
        for (i, d) in self.drafters.iter().enumerate() {
            d.drafter_config().validate(&self.target)?;
            if self.drafters[..i].iter().any(|e| e.name == d.name || e.slug() == d.slug()) {
                return Err(Error::Config(format!("duplicate drafter name {:?}", d.name)));
            }
            if let Some(parent) = &d.warm_start {
                match self.drafters[..i].iter().find(|e| &e.name == parent) {
                    Some(p) if p.mode == DrafterMode::HiddenOnly && p.depth == 1 => {}
                    Some(_) => {
                        return Err(Error::Config(format!(
                            "{:?} warm-starts from {parent:?}, which is not a one-layer hidden-only drafter",
                            d.name
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "{:?} warm-starts from {parent:?}, which is not produced earlier in the plan",
                            d.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

fn baseline_spec() -> DrafterSpec {
    DrafterSpec::new("EAGLE-3", DrafterMode::HiddenOnly)
}

fn kv(name: &str, depth: usize, injection: Injection) -> DrafterSpec {
    DrafterSpec {
        depth,
        injection,
        ..DrafterSpec::new(name, DrafterMode::KvOnly)
    }
}

/// Names of the built-in plans.
pub const PLANS: [&str; 5] = ["injection", "depth", "fusion", "ablations", "findings"];

/// A built-in plan at the default desk-scale budget.
pub fn builtin_plan(name: &str) -> Result<ExperimentConfig> {
    let drafters = match name {
        "injection" => vec![
            kv("No target info", 1, Injection::NullMemory),
            kv("Head concat", 1, Injection::HeadConcat),
            kv("Linear projection", 1, Injection::LinearProj),
            kv("Proj + RoPE fix", 1, Injection::LinearProjRope),
            baseline_spec(),
        ],
        "depth" => {
            let mut v: Vec<DrafterSpec> = (1..=4)
                .map(|d| kv(&format!("Pure KV {d}-layer"), d, Injection::LinearProjRope))
                .collect();
            v.push(baseline_spec());
            v
        }
        "fusion" => {
            let warm = |s: DrafterSpec| DrafterSpec {
                warm_start: Some("EAGLE-3".into()),
                ..s
            };
            vec![
                baseline_spec(),
                DrafterSpec::new("Gated KV (scratch)", DrafterMode::Hybrid),
                warm(DrafterSpec::new("Gated KV (ckpt)", DrafterMode::Hybrid)),
                DrafterSpec::new("Cross-only (scratch)", DrafterMode::CrossOnly),
                warm(DrafterSpec::new("Cross-only (ckpt)", DrafterMode::CrossOnly)),
            ]
        }
        "ablations" => {
            let base = kv("2-layer pure KV", 2, Injection::LinearProjRope);
            vec![
                base.clone(),
                DrafterSpec {
                    name: "4 KV layers".into(),
                    n_taps: 4,
                    ..base.clone()
                },
                DrafterSpec {
                    name: "MLP projector".into(),
                    projector: Projector::Mlp,
                    ..base.clone()
                },
                DrafterSpec {
                    name: "MLP projector + LayerNorm".into(),
                    projector: Projector::MlpNorm,
                    ..base.clone()
                },
                DrafterSpec {
                    name: "Hidden-to-KV".into(),
                    injection: Injection::HiddenToKv,
                    ..base.clone()
                },
                DrafterSpec {
                    name: "QK-Norm".into(),
                    qk_norm: true,
                    ..base.clone()
                },
                DrafterSpec {
                    name: "Offline TTT".into(),
                    online: Some(false),
                    ..base.clone()
                },
                DrafterSpec {
                    name: "Offline TTT + KV grad scale 50x".into(),
                    online: Some(false),
                    kv_grad_scale: Some(50.0),
                    ..base
                },
            ]
        }
        "findings" => vec![
            baseline_spec(),
            kv("Pure KV 1-layer", 1, Injection::LinearProjRope),
            kv("Pure KV 2-layer", 2, Injection::LinearProjRope),
            DrafterSpec {
                warm_start: Some("EAGLE-3".into()),
                ..DrafterSpec::new("Gated KV (ckpt)", DrafterMode::Hybrid)
            },
        ],
        _ => return Err(Error::NotFound(format!("no built-in plan {name:?}; known: {PLANS:?}"))),
    };
    Ok(ExperimentConfig {
        name: name.into(),
        out_dir: PathBuf::from(format!("runs/{name}")),
        drafters,
        ..ExperimentConfig::default()
    })
}

fn json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

/// Stage record of the target checkpoint.
pub fn target_stage(cfg: &ExperimentConfig) -> String {
    json(&serde_json::json!({
        "corpus": cfg.corpus,
        "target": cfg.target,
        "train": TargetTrainConfig { seed: cfg.target_train.seed.wrapping_add(cfg.seed), ..cfg.target_train.clone() },
        "init_seed": cfg.seed,
    }))
}

/// Stage record of one drafter checkpoint; includes its warm-start
/// parent's record so a retrained parent invalidates its children.
pub fn drafter_stage(cfg: &ExperimentConfig, index: usize) -> String {
    let spec = &cfg.drafters[index];
    let parent = spec.warm_start.as_ref().and_then(|p| {
        cfg.drafters
            .iter()
            .position(|d| &d.name == p)
            .map(|i| drafter_stage(cfg, i))
    });
    json(&serde_json::json!({
        "target": stage_hash(&target_stage(cfg)),
        "drafter": spec.drafter_config(),
        "ttt": spec.ttt_config(&cfg.ttt, cfg.seed),
        "init_seed": drafter_seed(cfg),
        "parent": parent,
    }))
}

// Same for every entry, so scratch and warm-started variants draw the same
// fresh weights.
fn drafter_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_add(1)
}

/// Evaluation prompts: prefixes of the held-out sequences, moving to later
/// offsets once every sequence has been used.
pub fn eval_prompts(corpus: &Corpus, eval: &EvalConfig) -> Vec<Vec<usize>> {
    let need = eval.prompt_len + eval.gen_tokens;
    let pool: Vec<&Vec<usize>> = corpus.eval.iter().filter(|s| s.len() >= need).collect();
    if pool.is_empty() {
        return Vec::new();
    }
    (0..eval.prompts)
        .map(|i| {
            let seq = pool[i % pool.len()];
            let offset = (i / pool.len()) * eval.prompt_len % (seq.len() - need + 1);
            seq[offset..offset + eval.prompt_len].to_vec()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DrafterEval {
    pub chain: AcceptanceStats,
    pub tree_rounds: Vec<RoundRecord>,
    pub tree_mat: f64,
}

/// Chain and tree evaluation of one drafter. Every decode is checked against
/// greedy decoding of the target.
pub fn evaluate_drafter(
    target: &TargetModel<f64>,
    drafter: &Drafter<f64>,
    prompts: &[Vec<usize>],
    greedy: &[Vec<usize>],
    eval: &EvalConfig,
) -> Result<DrafterEval> {
    let mut chain = AcceptanceStats::new(eval.chain_depth);
    let mut rounds = Vec::new();
    let (mut tokens, mut n_rounds) = (0usize, 0usize);
    for (p, want) in prompts.iter().zip(greedy) {
        let chain_cfg = TreeConfig::chain(eval.chain_depth);
        let out = spec_decode(target, &mut DrafterProposer::new(drafter), p, eval.gen_tokens, &chain_cfg)?;
        if &out.tokens != want {
            return Err(Error::Contract("chain decode diverged from greedy decoding".into()));
        }
        chain = chain.merge(&out.stats);
        let out = spec_decode(target, &mut DrafterProposer::new(drafter), p, eval.gen_tokens, &eval.tree)?;
        if &out.tokens != want {
            return Err(Error::Contract("tree decode diverged from greedy decoding".into()));
        }
        tokens += out.rounds.iter().map(|r| r.accepted_len + 1).sum::<usize>();
        n_rounds += out.rounds.len();
        rounds.extend(out.rounds);
    }
    Ok(DrafterEval {
        chain,
        tree_rounds: rounds,
        tree_mat: if n_rounds == 0 { 0.0 } else { tokens as f64 / n_rounds as f64 },
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub rows: Vec<MetricsRow>,
    pub csv: PathBuf,
    /// Stages actually trained in this run (not reused).
    pub trained: Vec<String>,
}

/// What a run may do when a checkpoint is missing or stale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    /// Train anything missing, then evaluate.
    TrainAndEval,
    /// Train anything missing, skip evaluation.
    TrainOnly,
    /// Evaluate existing checkpoints; a missing one is an error.
    EvalOnly,
}

fn target_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("target.ckpt")
}

fn drafter_path(cfg: &ExperimentConfig, spec: &DrafterSpec) -> PathBuf {
    cfg.out_dir.join("drafters").join(format!("{}.ckpt", spec.slug()))
}

/// Loads the target checkpoint if it matches the plan, otherwise trains and
/// saves it. Returns whether training happened.
pub fn prepare_target(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    stages: Stages,
    log: &mut dyn FnMut(&str),
) -> Result<(TargetModel<f64>, bool)> {
    let path = target_path(cfg);
    let stage = target_stage(cfg);
    if checkpoint::is_current(&path, &stage)? {
        log("target: reusing checkpoint");
        return Ok((checkpoint::load_target(&path)?.0, false));
    }
    if stages == Stages::EvalOnly {
        return Err(Error::NotFound(format!("no up-to-date target checkpoint at {}", path.display())));
    }
    log("target: training");
    let mut t = TargetModel::init(cfg.target.clone(), cfg.seed)?;
    let tc = TargetTrainConfig {
        seed: cfg.target_train.seed.wrapping_add(cfg.seed),
        ..cfg.target_train.clone()
    };
    let losses = train_target(&mut t, &corpus.train, &tc)?;
    if let Some(l) = losses.last() {
        log(&format!("target: final loss {l:.4}"));
    }
    checkpoint::save_target(&path, &t, &stage)?;
    Ok((t, true))
}

/// Loads or trains drafter `index`; `earlier` holds the drafters before it.
pub fn prepare_drafter(
    cfg: &ExperimentConfig,
    index: usize,
    target: &TargetModel<f64>,
    corpus: &Corpus,
    earlier: &[Drafter<f64>],
    stages: Stages,
    log: &mut dyn FnMut(&str),
) -> Result<(Drafter<f64>, bool)> {
    let spec = &cfg.drafters[index];
    let path = drafter_path(cfg, spec);
    let stage = drafter_stage(cfg, index);
    if checkpoint::is_current(&path, &stage)? {
        log(&format!("{}: reusing checkpoint", spec.name));
        return Ok((checkpoint::load_drafter(&path)?.0, false));
    }
    if stages == Stages::EvalOnly {
        return Err(Error::NotFound(format!(
            "no up-to-date checkpoint for {:?} at {}",
            spec.name,
            path.display()
        )));
    }
    log(&format!("{}: training", spec.name));
    let dc = spec.drafter_config();
    let seed = drafter_seed(cfg);
    let mut d = match &spec.warm_start {
        Some(parent) => {
            let j = cfg.drafters.iter().position(|d| &d.name == parent).expect("validated");
            let base = earlier
                .get(j)
                .ok_or_else(|| Error::Contract(format!("{parent:?} must be prepared before {:?}", spec.name)))?;
            warm_start(dc, base, seed)?
        }
        None => Drafter::init(dc, &cfg.target, seed)?,
    };
    let trace = train_drafter(&mut d, target, &corpus.train, &spec.ttt_config(&cfg.ttt, cfg.seed))?;
    std::fs::create_dir_all(cfg.out_dir.join("drafters"))?;
    trace.write_jsonl(&path.with_extension("trace.jsonl"))?;
    checkpoint::save_drafter(&path, &d, &stage)?;
    Ok((d, true))
}

/// Runs the plan: prepares the target and every drafter in order, evaluates
/// them and writes `metrics.csv` plus one decode transcript per drafter.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentSummary> {
    run_stages(cfg, Stages::TrainAndEval, log)
}

pub fn run_stages(cfg: &ExperimentConfig, stages: Stages, log: &mut dyn FnMut(&str)) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out.join("drafters"))?;
    if stages != Stages::EvalOnly {
        std::fs::write(out.join("plan.toml"), cfg.to_toml()?)?;
    }
    let corpus = make_corpus(&cfg.corpus)?;
    let mut trained = Vec::new();
    let (target, fresh) = prepare_target(cfg, &corpus, stages, log)?;
    if fresh {
        trained.push("target".to_string());
    }

    let evaluate = stages != Stages::TrainOnly;
    let prompts = eval_prompts(&corpus, &cfg.eval);
    if evaluate && prompts.is_empty() {
        return Err(Error::Input(format!(
            "no held-out sequence has {} tokens for evaluation",
            cfg.eval.prompt_len + cfg.eval.gen_tokens
        )));
    }
    let greedy = if evaluate {
        prompts
            .iter()
            .map(|p| target.greedy_decode(p, cfg.eval.gen_tokens))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut drafters: Vec<Drafter<f64>> = Vec::new();
    let mut rows = Vec::new();
    for (i, spec) in cfg.drafters.iter().enumerate() {
        let (drafter, fresh) = prepare_drafter(cfg, i, &target, &corpus, &drafters, stages, log)?;
        if fresh {
            trained.push(spec.name.clone());
        }
        if evaluate {
            let ev = evaluate_drafter(&target, &drafter, &prompts, &greedy, &cfg.eval)?;
            write_transcript(&drafter_path(cfg, spec).with_extension("transcript.jsonl"), &ev.tree_rounds)?;
            let row = MetricsRow::from_alphas(spec.name.clone(), spec.depth, alphas_from_stats(&ev.chain), Some(ev.tree_mat));
            log(&format!(
                "{}: alpha_0 {} MAT {} tree MAT {:.3}",
                spec.name,
                row.alphas.first().copied().flatten().map_or("-".into(), |a| format!("{a:.3}")),
                row.mat.map_or("-".into(), |m| format!("{m:.3}")),
                ev.tree_mat
            ));
            rows.push(row);
        }
        drafters.push(drafter);
    }
    let csv = out.join("metrics.csv");
    if evaluate {
        write_report(&csv, &rows)?;
    }
    Ok(ExperimentSummary { rows, csv, trained })
}

/// Differences `other − baseline`.
#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub baseline: String,
    pub method: String,
    pub alphas: Vec<Option<f64>>,
    pub retention: Option<f64>,
    pub mat: Option<f64>,
    pub tree_mat: Option<f64>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

pub fn delta(baseline: &MetricsRow, other: &MetricsRow) -> Delta {
    Delta {
        baseline: baseline.method.clone(),
        method: other.method.clone(),
        alphas: (0..REPORT_STEPS)
            .map(|k| diff(baseline.alphas.get(k).copied().flatten(), other.alphas.get(k).copied().flatten()))
            .collect(),
        retention: diff(baseline.retention, other.retention),
        mat: diff(baseline.mat, other.mat),
        tree_mat: diff(baseline.tree_mat, other.tree_mat),
    }
}

fn find<'a>(rows: &'a [MetricsRow], name: &str) -> Result<&'a MetricsRow> {
    rows.iter()
        .find(|r| r.method == name)
        .ok_or_else(|| Error::NotFound(format!("no method named {name:?}")))
}

/// Compares two named methods drawn from the given reports.
pub fn compare_methods(rows: &[MetricsRow], baseline: &str, method: &str) -> Result<Delta> {
    Ok(delta(find(rows, baseline)?, find(rows, method)?))
}

/// Side-by-side comparison of reports. With two files, every method of the
/// first is compared with the same method in the second; with names, the two
/// named methods (searched across all files) are compared.
pub fn compare_report(paths: &[PathBuf], names: Option<(&str, &str)>) -> Result<Vec<Delta>> {
    let reports = paths.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    if let Some((b, m)) = names {
        let all: Vec<MetricsRow> = reports.into_iter().flatten().collect();
        return Ok(vec![compare_methods(&all, b, m)?]);
    }
    match &reports[..] {
        [a, b] => a.iter().map(|r| Ok(delta(r, find(b, &r.method)?))).collect(),
        [a] => a.iter().map(|r| Ok(delta(r, r))).collect(),
        _ => Err(Error::Input("compare one or two reports, or name two methods".into())),
    }
}

/// Plain-text table of deltas.
pub fn format_deltas(deltas: &[Delta]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:+.3}"));
    let mut s = String::new();
    let _ = write!(s, "{:<28} {:<28}", "baseline", "method");
    for k in 0..REPORT_STEPS {
        let _ = write!(s, " {:>7}", format!("dA{k}"));
    }
    let _ = writeln!(s, " {:>7} {:>7} {:>7}", "dRet", "dMAT", "dTree");
    for d in deltas {
        let _ = write!(s, "{:<28} {:<28}", d.baseline, d.method);
        for a in &d.alphas {
            let _ = write!(s, " {:>7}", f(*a));
        }
        let _ = writeln!(s, " {:>7} {:>7} {:>7}", f(d.retention), f(d.mat), f(d.tree_mat));
    }
    s
}
