//! Draft models that reuse the target's hidden states, its key/value cache, or
//! both.
//!
//! Every drafter reads a row per position. Row `j` embeds token `x_j`, mixes in
//! a feature `u_{j-1}` and predicts `x_{j+1}`. For rows on the verified prefix
//! `u` is a projection of the concatenated target taps (zero for the KV-only
//! family, which never sees hidden states); for speculative rows it is the
//! drafter's own output at the previous row.
//!
//! The cross-attention memory mixes copies derived from the target for
//! positions `< P` with entries the drafter writes for its own rows. A row at
//! position `j` sees copies at `i < min(j, P)`, its own entry, and entries of
//! earlier visible rows at positions `≥ P`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_tap_layers, KVCache, TargetConfig, TargetModel};
use crate::nn::{self, attend, linear};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrafterMode {
    HiddenOnly,
    KvOnly,
    Hybrid,
    CrossOnly,
}

impl DrafterMode {
    /// Whether prefix rows receive target hidden states.
    pub fn uses_hidden(self) -> bool {
        self != DrafterMode::KvOnly
    }

    /// Whether the self-attention output enters the residual stream.
    pub fn uses_self_attn(self) -> bool {
        matches!(self, DrafterMode::HiddenOnly | DrafterMode::Hybrid)
    }

    pub fn uses_cross(self) -> bool {
        self != DrafterMode::HiddenOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            DrafterMode::HiddenOnly => "hidden",
            DrafterMode::KvOnly => "kv",
            DrafterMode::Hybrid => "hybrid",
            DrafterMode::CrossOnly => "cross",
        }
    }
}

impl FromStr for DrafterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" | "hidden_only" => Ok(DrafterMode::HiddenOnly),
            "kv" | "kv_only" => Ok(DrafterMode::KvOnly),
            "hybrid" => Ok(DrafterMode::Hybrid),
            "cross" | "cross_only" => Ok(DrafterMode::CrossOnly),
            _ => Err(Error::Config(format!("unknown drafter mode {s:?}"))),
        }
    }
}

impl fmt::Display for DrafterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the target's key/value cache becomes cross-attention memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Each tap layer's heads become extra memory slots.
    HeadConcat,
    /// Per head, the tap layers' keys/values are concatenated and projected.
    LinearProj,
    /// As `LinearProj`, with rotary embedding re-applied to projected keys.
    LinearProjRope,
    /// Keys/values derived from normalised target hidden states.
    HiddenToKv,
    /// A single learned entry replaces all target information.
    NullMemory,
}

impl Injection {
    pub fn name(self) -> &'static str {
        match self {
            Injection::HeadConcat => "headconcat",
            Injection::LinearProj => "linproj",
            Injection::LinearProjRope => "linproj-rope",
            Injection::HiddenToKv => "hidden2kv",
            Injection::NullMemory => "none",
        }
    }
}

impl FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "headconcat" | "head_concat" => Ok(Injection::HeadConcat),
            "linproj" | "linear_proj" => Ok(Injection::LinearProj),
            "linproj-rope" | "linear_proj_rope" => Ok(Injection::LinearProjRope),
            "hidden2kv" | "hidden_to_kv" => Ok(Injection::HiddenToKv),
            "none" | "null_memory" => Ok(Injection::NullMemory),
            _ => Err(Error::Config(format!("unknown injection {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projector {
    Linear,
    /// Two layers with a SiLU in between.
    Mlp,
    /// `Mlp` followed by a layer norm with a learned gain.
    MlpNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrafterConfig {
    pub mode: DrafterMode,
    pub depth: usize,
    pub injection: Injection,
    pub projector: Projector,
    /// Number of sampled target layers.
    pub n_taps: usize,
    pub qk_norm: bool,
    pub init_std: f64,
}

impl Default for DrafterConfig {
    fn default() -> Self {
        Self {
            mode: DrafterMode::HiddenOnly,
            depth: 1,
            injection: Injection::LinearProjRope,
            projector: Projector::Linear,
            n_taps: 3,
            qk_norm: false,
            init_std: 0.02,
        }
    }
}

impl DrafterConfig {
    pub fn validate(&self, target: &TargetConfig) -> Result<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(Error::Config(format!("drafter depth {} outside 1..=4", self.depth)));
        }
        if matches!(self.mode, DrafterMode::Hybrid | DrafterMode::CrossOnly) && self.depth != 1 {
            return Err(Error::Config(format!("{} drafters have exactly one layer", self.mode)));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be non-negative".into()));
        }
        sample_tap_layers(target.n_layers, self.n_taps)?;
        Ok(())
    }

    /// The injection actually used (none for hidden-only drafters).
    pub fn effective_injection(&self) -> Option<Injection> {
        self.mode.uses_cross().then_some(self.injection)
    }
}

/// Where a cross-attention memory entry comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryTag {
    CopiedFromTarget,
    DerivedFromHidden,
    DraftGenerated,
    Null,
}

impl EntryTag {
    /// Entries whose keys/values are produced by drafter-side projections.
    pub fn draft_side(self) -> bool {
        matches!(self, EntryTag::DerivedFromHidden | EntryTag::DraftGenerated)
    }
}

/// Cross-attention memory: `keys`/`values` are `[entries, heads·d_kv]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossMemory<V> {
    pub keys: V,
    pub values: V,
    pub positions: Vec<usize>,
    pub tags: Vec<EntryTag>,
    /// Tap-layer group of each entry (0 unless head-concatenated).
    pub groups: Vec<usize>,
}

impl<V> CrossMemory<V> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

impl<T: Scalar> CrossMemory<Tensor<T>> {
    pub fn bind(&self, tape: &mut Tape<T>) -> CrossMemory<Var> {
        CrossMemory {
            keys: tape.constant(self.keys.clone()),
            values: tape.constant(self.values.clone()),
            positions: self.positions.clone(),
            tags: self.tags.clone(),
            groups: self.groups.clone(),
        }
    }
}

impl CrossMemory<Var> {
    pub fn values_of<T: Scalar>(&self, tape: &Tape<T>) -> CrossMemory<Tensor<T>> {
        CrossMemory {
            keys: tape.value(self.keys).clone(),
            values: tape.value(self.values).clone(),
            positions: self.positions.clone(),
            tags: self.tags.clone(),
            groups: self.groups.clone(),
        }
    }
}

/// Target tensors at the tap layers for positions `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetView<T> {
    pub layers: Vec<usize>,
    /// Per tap, `[len, heads·d_kv]` post-rotary keys.
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    /// Per tap, `[len, d_model]` block outputs.
    pub hidden: Vec<Tensor<T>>,
}

impl<T: Scalar> TargetView<T> {
    pub fn from_cache(cache: &KVCache<T>, layers: &[usize]) -> Self {
        Self {
            layers: layers.to_vec(),
            keys: layers.iter().map(|&l| cache.keys(l)).collect(),
            values: layers.iter().map(|&l| cache.values(l)).collect(),
            hidden: layers.iter().map(|&l| cache.hidden(l)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated tap states at `pos`.
    pub fn feature(&self, pos: usize) -> Vec<T> {
        self.hidden.iter().flat_map(|h| h.row(pos).iter().copied()).collect()
    }

    /// `[f_{j-1}]` for each `j` in `rows`, with `f_{-1} = 0`.
    pub fn shifted_features(&self, rows: std::ops::Range<usize>) -> Tensor<T> {
        let width: usize = self.hidden.iter().map(|h| h.cols()).sum();
        let mut data = Vec::with_capacity(rows.len() * width);
        for j in rows.clone() {
            if j == 0 {
                data.extend(std::iter::repeat_n(T::zero(), width));
            } else {
                data.extend(self.feature(j - 1));
            }
        }
        Tensor::new(vec![rows.len(), width], data).expect("feature shape")
    }
}

/// Head-concatenated memory from per-layer caches `[P, heads·d_kv]`.
///
/// Entries are position-major: entry `i·G + g` holds layer `g` at position
/// `i`, so the keys, read as `[P, G·heads·d_kv]`, lay out head slots
/// `(layer₀h₀, layer₀h₁, …, layer₁h₀, …)`.
pub fn inject_head_concat<T: Scalar>(
    keys: &[Tensor<T>],
    values: &[Tensor<T>],
) -> Result<CrossMemory<Tensor<T>>> {
    let groups = keys.len();
    if groups == 0 || values.len() != groups {
        return Err(Error::Input("head concat needs one key and value cache per layer".into()));
    }
    let (len, width) = (keys[0].rows(), keys[0].cols());
    for t in keys.iter().chain(values) {
        if t.rows() != len || t.cols() != width {
            return Err(Error::Input(format!(
                "cache length mismatch: {:?} vs {:?}",
                t.shape(),
                keys[0].shape()
            )));
        }
    }
    let interleave = |ts: &[Tensor<T>]| -> Vec<T> {
        (0..len)
            .flat_map(|i| ts.iter().flat_map(move |t| t.row(i).iter().copied()))
            .collect()
    };
    Ok(CrossMemory {
        keys: Tensor::new(vec![len * groups, width], interleave(keys))?,
        values: Tensor::new(vec![len * groups, width], interleave(values))?,
        positions: (0..len).flat_map(|i| std::iter::repeat_n(i, groups)).collect(),
        tags: vec![EntryTag::CopiedFromTarget; len * groups],
        groups: (0..len).flat_map(|_| 0..groups).collect(),
    })
}

/// Projector weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub enum ProjectorVars {
    Linear(Var),
    Mlp(Var, Var),
    MlpNorm(Var, Var, Var),
}

/// Applies a projector row-wise.
pub fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, p: ProjectorVars) -> Result<Var> {
    match p {
        ProjectorVars::Linear(w) => linear(tape, x, w),
        ProjectorVars::Mlp(w1, w2) => nn::mlp(tape, x, w1, w2),
        ProjectorVars::MlpNorm(w1, w2, gain) => {
            let y = nn::mlp(tape, x, w1, w2)?;
            let width = tape.value(y).cols();
            let y = tape.layer_norm(y, width, T::of(1e-5))?;
            tape.mul_row(y, gain)
        }
    }
}

/// Per-head projection of the concatenated multi-layer cache.
///
/// For each position and head, the tap layers' `d_kv` slices are concatenated
/// to `L_s·d_kv` and mapped back to `d_kv`. With `rope_base` set, rotary
/// embedding is re-applied to the projected keys at their original positions.
#[allow(clippy::too_many_arguments)]
pub fn inject_linear_proj<T: Scalar>(
    tape: &mut Tape<T>,
    keys: &[Var],
    values: &[Var],
    k_proj: ProjectorVars,
    v_proj: ProjectorVars,
    heads: usize,
    head_dim: usize,
    rope_base: Option<f64>,
) -> Result<CrossMemory<Var>> {
    if keys.is_empty() || keys.len() != values.len() {
        return Err(Error::Config("projection needs one cache per tap layer".into()));
    }
    let len = tape.value(keys[0]).rows();
    let width = heads * head_dim;
    let per_head = |tape: &mut Tape<T>, parts: &[Var]| -> Result<Var> {
        let mut split = Vec::with_capacity(parts.len());
        for &p in parts {
            if tape.shape(p) != [len, width] {
                return Err(Error::Config(format!(
                    "cache shape {:?}, expected {:?}",
                    tape.shape(p),
                    [len, width]
                )));
            }
            split.push(tape.reshape(p, &[len * heads, head_dim])?);
        }
        tape.concat_cols(&split)
    };
    let kc = per_head(tape, keys)?;
    let vc = per_head(tape, values)?;
    let proj_in = keys.len() * head_dim;
    let check = |tape: &Tape<T>, p: ProjectorVars| -> Result<()> {
        let (first, last) = match p {
            ProjectorVars::Linear(w) => (w, w),
            ProjectorVars::Mlp(a, b) | ProjectorVars::MlpNorm(a, b, _) => (a, b),
        };
        if tape.value(first).cols() != proj_in || tape.value(last).rows() != head_dim {
            return Err(Error::Config(format!(
                "projector {:?}/{:?} does not map {proj_in} to {head_dim}",
                tape.shape(first),
                tape.shape(last)
            )));
        }
        Ok(())
    };
    check(tape, k_proj)?;
    check(tape, v_proj)?;
    let k = project(tape, kc, k_proj)?;
    let v = project(tape, vc, v_proj)?;
    let mut k = tape.reshape(k, &[len, width])?;
    let v = tape.reshape(v, &[len, width])?;
    if let Some(base) = rope_base {
        let positions: Vec<usize> = (0..len).collect();
        k = tape.rope(k, &positions, head_dim, base)?;
    }
    Ok(CrossMemory {
        keys: k,
        values: v,
        positions: (0..len).collect(),
        tags: vec![EntryTag::CopiedFromTarget; len],
        groups: vec![0; len],
    })
}

/// Keys/values derived from target hidden states:
/// `K = rope(W_K'·(rms(h)⊙norm))`, `V = W_V'·(rms(h)⊙norm)`, where `h` is the
/// concatenation of the tap states.
pub fn inject_hidden_to_kv<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: &[Var],
    norm: Var,
    wk: Var,
    wv: Var,
    head_dim: usize,
    rope_base: f64,
) -> Result<CrossMemory<Var>> {
    if hidden.is_empty() {
        return Err(Error::Input("hidden-to-kv needs at least one tap".into()));
    }
    let len = tape.value(hidden[0]).rows();
    let h = if hidden.len() == 1 {
        hidden[0]
    } else {
        tape.concat_cols(hidden)?
    };
    let n = nn::rms_norm(tape, h, norm)?;
    let k = linear(tape, n, wk)?;
    let v = linear(tape, n, wv)?;
    let positions: Vec<usize> = (0..len).collect();
    let k = tape.rope(k, &positions, head_dim, rope_base)?;
    Ok(CrossMemory {
        keys: k,
        values: v,
        positions,
        tags: vec![EntryTag::DerivedFromHidden; len],
        groups: vec![0; len],
    })
}

/// Re-attention of `q` (`[n, heads·d_kv]`, already rotated) over memory
/// entries, followed by the output projection `wo`.
pub fn cross_attn_path<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    keys: Var,
    values: Var,
    wo: Var,
    heads: usize,
    head_dim: usize,
    mask: &[bool],
) -> Result<Var> {
    if tape.value(keys).rows() == 0 {
        return Err(Error::Contract("cross-attention over an empty memory".into()));
    }
    let a = attend(tape, q, keys, values, heads, head_dim, mask)?;
    linear(tape, a, wo)
}

/// Gated delta fusion. Returns `(h, g)` with `Δ = o − n`,
/// `g = σ(W_g·[n; o; Δ] + b_g)` and `h = n + g ⊙ (W_Δ·Δ)`.
pub fn gated_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    n: Var,
    o: Var,
    w_g: Var,
    b_g: Var,
    w_delta: Var,
) -> Result<(Var, Var)> {
    let delta = tape.sub(o, n)?;
    let cat = tape.concat_cols(&[n, o, delta])?;
    let z = linear(tape, cat, w_g)?;
    let z = tape.add_row(z, b_g)?;
    let g = tape.sigmoid(z)?;
    let corr = linear(tape, delta, w_delta)?;
    let gated = tape.mul(g, corr)?;
    Ok((tape.add(n, gated)?, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnIndex {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub q_norm: Option<usize>,
    pub k_norm: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateIndex {
    pub w_g: usize,
    pub b_g: usize,
    pub w_delta: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIndex {
    pub attn_norm: usize,
    pub self_attn: Option<AttnIndex>,
    pub cross: Option<AttnIndex>,
    pub gate: Option<GateIndex>,
    pub mlp_norm: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProjectorIndex {
    Linear(usize),
    Mlp(usize, usize),
    MlpNorm(usize, usize, usize),
}

impl ProjectorIndex {
    fn bind(&self, w: &ParamSet<Var>) -> ProjectorVars {
        match *self {
            ProjectorIndex::Linear(a) => ProjectorVars::Linear(w[a]),
            ProjectorIndex::Mlp(a, b) => ProjectorVars::Mlp(w[a], w[b]),
            ProjectorIndex::MlpNorm(a, b, c) => ProjectorVars::MlpNorm(w[a], w[b], w[c]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InjectionIndex {
    HeadConcat,
    Proj {
        k: ProjectorIndex,
        v: ProjectorIndex,
        rope: bool,
    },
    HiddenToKv {
        norm: usize,
        wk: usize,
        wv: usize,
    },
    Null {
        k: usize,
        v: usize,
    },
}

/// Where each weight lives in the drafter's [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct DrafterIndex {
    pub fc: Option<usize>,
    pub input: usize,
    pub layers: Vec<LayerIndex>,
    pub final_norm: usize,
    pub injection: Option<InjectionIndex>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Layout {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push((name.into(), shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, t: &TargetConfig, qk_norm: bool) -> AttnIndex {
        let (d, kw, dk) = (t.d_model, t.kv_width(), t.d_kv);
        AttnIndex {
            wq: self.add(format!("{prefix}.wq"), &[kw, d], Init::Normal),
            wk: self.add(format!("{prefix}.wk"), &[kw, d], Init::Normal),
            wv: self.add(format!("{prefix}.wv"), &[kw, d], Init::Normal),
            wo: self.add(format!("{prefix}.wo"), &[d, kw], Init::Normal),
            q_norm: qk_norm.then(|| self.add(format!("{prefix}.q_norm"), &[dk], Init::Ones)),
            k_norm: qk_norm.then(|| self.add(format!("{prefix}.k_norm"), &[dk], Init::Ones)),
        }
    }

    fn projector(&mut self, prefix: &str, kind: Projector, n_in: usize, n_out: usize) -> ProjectorIndex {
        match kind {
            Projector::Linear => ProjectorIndex::Linear(self.add(format!("{prefix}.w"), &[n_out, n_in], Init::Normal)),
            Projector::Mlp | Projector::MlpNorm => {
                let w1 = self.add(format!("{prefix}.w1"), &[n_in, n_in], Init::Normal);
                let w2 = self.add(format!("{prefix}.w2"), &[n_out, n_in], Init::Normal);
                if kind == Projector::Mlp {
                    ProjectorIndex::Mlp(w1, w2)
                } else {
                    let g = self.add(format!("{prefix}.gain"), &[n_out], Init::Ones);
                    ProjectorIndex::MlpNorm(w1, w2, g)
                }
            }
        }
    }
}

fn layout(cfg: &DrafterConfig, t: &TargetConfig) -> (DrafterIndex, Layout) {
    let mut lo = Layout { specs: Vec::new() };
    let d = t.d_model;
    let fc = cfg
        .mode
        .uses_hidden()
        .then(|| lo.add("fc", &[d, cfg.n_taps * d], Init::Normal));
    let input = lo.add("input", &[d, 2 * d], Init::Normal);
    let layers = (0..cfg.depth)
        .map(|l| {
            let p = format!("layers.{l}");
            let attn_norm = lo.add(format!("{p}.attn_norm"), &[d], Init::Ones);
            let self_attn =
                (cfg.mode != DrafterMode::KvOnly).then(|| lo.attn(&format!("{p}.self"), t, cfg.qk_norm));
            let cross = cfg
                .mode
                .uses_cross()
                .then(|| lo.attn(&format!("{p}.cross"), t, cfg.qk_norm));
            let gate = (cfg.mode == DrafterMode::Hybrid).then(|| GateIndex {
                w_g: lo.add(format!("{p}.gate.w_g"), &[d, 3 * d], Init::Zeros),
                b_g: lo.add(format!("{p}.gate.b_g"), &[d], Init::Zeros),
                w_delta: lo.add(format!("{p}.gate.w_delta"), &[d, d], Init::Normal),
            });
            LayerIndex {
                attn_norm,
                self_attn,
                cross,
                gate,
                mlp_norm: lo.add(format!("{p}.mlp_norm"), &[d], Init::Ones),
                w_up: lo.add(format!("{p}.w_up"), &[t.d_ff, d], Init::Normal),
                w_down: lo.add(format!("{p}.w_down"), &[d, t.d_ff], Init::Normal),
            }
        })
        .collect();
    let final_norm = lo.add("final_norm", &[d], Init::Ones);
    let injection = cfg.effective_injection().map(|inj| match inj {
        Injection::HeadConcat => InjectionIndex::HeadConcat,
        Injection::LinearProj | Injection::LinearProjRope => {
            let n_in = cfg.n_taps * t.d_kv;
            InjectionIndex::Proj {
                k: lo.projector("inject.k_proj", cfg.projector, n_in, t.d_kv),
                v: lo.projector("inject.v_proj", cfg.projector, n_in, t.d_kv),
                rope: inj == Injection::LinearProjRope,
            }
        }
        Injection::HiddenToKv => InjectionIndex::HiddenToKv {
            norm: lo.add("inject.norm", &[cfg.n_taps * d], Init::Ones),
            wk: lo.add("inject.wk", &[t.kv_width(), cfg.n_taps * d], Init::Normal),
            wv: lo.add("inject.wv", &[t.kv_width(), cfg.n_taps * d], Init::Normal),
        },
        Injection::NullMemory => InjectionIndex::Null {
            k: lo.add("inject.null_k", &[1, t.kv_width()], Init::Normal),
            v: lo.add("inject.null_v", &[1, t.kv_width()], Init::Normal),
        },
    });
    (
        DrafterIndex {
            fc,
            input,
            layers,
            final_norm,
            injection,
        },
        lo,
    )
}

/// Per-layer tensors of rows already processed (past) or just produced.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerRows {
    pub self_k: Option<Var>,
    pub self_v: Option<Var>,
    pub draft_k: Option<Var>,
    pub draft_v: Option<Var>,
}

/// Memory seen by one layer for a batch of rows, with the visibility mask.
#[derive(Clone, Debug)]
pub struct MemoryView {
    pub keys: Var,
    pub values: Var,
    pub positions: Vec<usize>,
    pub tags: Vec<EntryTag>,
    /// `[rows × entries]`.
    pub mask: Vec<bool>,
}

/// Inputs for a batch of drafter rows.
#[derive(Clone, Debug)]
pub struct RowBatch<'a> {
    pub tokens: &'a [usize],
    /// Absolute position of each new row.
    pub positions: &'a [usize],
    /// `[n, d]` feature mixed into each row's input.
    pub u: Var,
    /// Positions of the past rows followed by the new rows.
    pub all_positions: &'a [usize],
    /// `[n × (past + n)]` row visibility for self-attention and drafted entries.
    pub row_mask: &'a [bool],
    /// Number of verified positions with target-derived memory.
    pub prefix_len: usize,
    /// Hides every drafted entry from cross-attention (diagnostics only).
    pub hide_draft_memory: bool,
}

#[derive(Clone, Debug)]
pub struct RowOutput {
    /// `[n, d]` last-layer output, the recursive feature for child rows.
    pub out: Var,
    pub logits: Var,
    pub layers: Vec<LayerRows>,
    /// Gate activations per layer (gated drafters only).
    pub gates: Vec<Var>,
    pub memories: Vec<MemoryView>,
}

/// A drafter with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Drafter<T> {
    pub config: DrafterConfig,
    pub target: TargetConfig,
    pub taps: Vec<usize>,
    pub index: DrafterIndex,
    pub params: ParamSet<Tensor<T>>,
}

fn cat_opt<T: Scalar>(tape: &mut Tape<T>, past: Option<Var>, new: Var) -> Result<Var> {
    match past {
        Some(p) if tape.value(p).rows() > 0 => tape.concat_rows(&[p, new]),
        _ => Ok(new),
    }
}

impl<T: Scalar> Drafter<T> {
    /// Scaled-Gaussian projections, unit norm gains, zero gate.
    pub fn init(config: DrafterConfig, target: &TargetConfig, seed: u64) -> Result<Self> {
        config.validate(target)?;
        let taps = sample_tap_layers(target.n_layers, config.n_taps)?;
        let (index, lo) = layout(&config, target);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in lo.specs {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, config.init_std, &mut rng),
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::Zeros => Tensor::zeros(&shape),
            };
            params.push(name, t);
        }
        Ok(Self {
            config,
            target: target.clone(),
            taps,
            index,
            params,
        })
    }

    /// Rebuilds a drafter around a loaded parameter set.
    pub fn with_params(config: DrafterConfig, target: &TargetConfig, params: ParamSet<Tensor<T>>) -> Result<Self> {
        let mut d = Self::init(config, target, 0)?;
        d.params.load(&params)?;
        Ok(d)
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamSet<Var> {
        self.params.bind(tape, trainable)
    }

    /// Indices of the cross-attention key/value projections.
    pub fn cross_kv_params(&self) -> Vec<usize> {
        self.index
            .layers
            .iter()
            .filter_map(|l| l.cross.as_ref())
            .flat_map(|c| [c.wk, c.wv])
            .collect()
    }

    /// Sets every gate bias to `value` (no-op without a gate).
    pub fn set_gate_bias(&mut self, value: f64) {
        for l in &self.index.layers {
            if let Some(g) = &l.gate {
                let b = &mut self.params.values_mut()[g.b_g];
                b.data_mut().iter_mut().for_each(|x| *x = T::of(value));
            }
        }
    }

    /// `u` for prefix rows: `W_fc·f_{j-1}`, or zeros for KV-only drafters.
    pub fn prefix_u(&self, tape: &mut Tape<T>, w: &ParamSet<Var>, features: &Tensor<T>) -> Result<Var> {
        match self.index.fc {
            Some(fc) => {
                let f = tape.constant(features.clone());
                linear(tape, f, w[fc])
            }
            None => Ok(tape.constant(Tensor::zeros(&[features.rows(), self.target.d_model]))),
        }
    }

    /// Target-derived memory entries for positions `0..view.len()`.
    pub fn build_copies(
        &self,
        tape: &mut Tape<T>,
        w: &ParamSet<Var>,
        view: &TargetView<T>,
    ) -> Result<Option<CrossMemory<Var>>> {
        let Some(inj) = &self.index.injection else {
            return Ok(None);
        };
        if let InjectionIndex::Null { k, v } = inj {
            return Ok(Some(CrossMemory {
                keys: w[*k],
                values: w[*v],
                positions: vec![0],
                tags: vec![EntryTag::Null],
                groups: vec![0],
            }));
        }
        if view.is_empty() {
            return Ok(None);
        }
        let (h, dk) = (self.target.n_heads, self.target.d_kv);
        let mem = match inj {
            InjectionIndex::HeadConcat => inject_head_concat(&view.keys, &view.values)?.bind(tape),
            InjectionIndex::Proj { k, v, rope } => {
                let ks: Vec<Var> = view.keys.iter().map(|t| tape.constant(t.clone())).collect();
                let vs: Vec<Var> = view.values.iter().map(|t| tape.constant(t.clone())).collect();
                let base = rope.then_some(self.target.rope_base);
                inject_linear_proj(tape, &ks, &vs, k.bind(w), v.bind(w), h, dk, base)?
            }
            InjectionIndex::HiddenToKv { norm, wk, wv } => {
                let hs: Vec<Var> = view.hidden.iter().map(|t| tape.constant(t.clone())).collect();
                inject_hidden_to_kv(tape, &hs, w[*norm], w[*wk], w[*wv], dk, self.target.rope_base)?
            }
            InjectionIndex::Null { .. } => unreachable!("handled above"),
        };
        Ok(Some(mem))
    }

    /// The first `len` positions of a copy memory (entries are position-major).
    pub fn slice_copies(
        tape: &mut Tape<T>,
        mem: &CrossMemory<Var>,
        len: usize,
    ) -> Result<Option<CrossMemory<Var>>> {
        if mem.tags.iter().all(|&t| t == EntryTag::Null) {
            return Ok(Some(mem.clone()));
        }
        let n = mem.positions.iter().take_while(|&&p| p < len).count();
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(CrossMemory {
            keys: tape.slice_rows(mem.keys, 0, n)?,
            values: tape.slice_rows(mem.values, 0, n)?,
            positions: mem.positions[..n].to_vec(),
            tags: mem.tags[..n].to_vec(),
            groups: mem.groups[..n].to_vec(),
        }))
    }

    /// Runs a batch of rows through every drafter layer.
    pub fn forward_rows(
        &self,
        tape: &mut Tape<T>,
        w: &ParamSet<Var>,
        embed: Var,
        copies: Option<&CrossMemory<Var>>,
        past: &[LayerRows],
        batch: &RowBatch<'_>,
    ) -> Result<RowOutput> {
        let n = batch.tokens.len();
        let total = batch.all_positions.len();
        let n_past = total.checked_sub(n).ok_or_else(|| Error::Input("fewer positions than rows".into()))?;
        if batch.positions.len() != n || batch.row_mask.len() != n * total || past.len() != self.config.depth {
            return Err(Error::Dimension {
                op: "forward_rows",
                lhs: vec![n, batch.positions.len(), past.len()],
                rhs: vec![batch.row_mask.len(), total],
            });
        }
        let (heads, dk, base) = (self.target.n_heads, self.target.d_kv, self.target.rope_base);
        let mode = self.config.mode;
        if self.index.injection.is_some()
            && copies.is_none()
            && batch.positions.iter().any(|&p| p.min(batch.prefix_len) > 0)
        {
            return Err(Error::Config(format!("{mode} drafter needs target memory for its prefix")));
        }
        let e = tape.gather_rows(embed, batch.tokens)?;
        let eu = tape.concat_cols(&[e, batch.u])?;
        let mut x = linear(tape, eu, w[self.index.input])?;

        let cross_mask = |copies: Option<&CrossMemory<Var>>| -> Vec<bool> {
            let n_copy = copies.map_or(0, |c| c.len());
            let m = n_copy + total;
            let mut mask = vec![false; n * m];
            for r in 0..n {
                let pos = batch.positions[r];
                let row = &mut mask[r * m..(r + 1) * m];
                if let Some(c) = copies {
                    for (e, (&p, &tag)) in c.positions.iter().zip(&c.tags).enumerate() {
                        row[e] = tag == EntryTag::Null || p < pos.min(batch.prefix_len);
                    }
                }
                for c in 0..total {
                    let own = c == n_past + r;
                    row[n_copy + c] = !batch.hide_draft_memory
                        && batch.row_mask[r * total + c]
                        && (own || batch.all_positions[c] >= batch.prefix_len);
                }
            }
            mask
        };

        let mut out = RowOutput {
            out: x,
            logits: x,
            layers: Vec::with_capacity(self.config.depth),
            gates: Vec::new(),
            memories: Vec::new(),
        };
        for (l, li) in self.index.layers.iter().enumerate() {
            let xn = nn::rms_norm(tape, x, w[li.attn_norm])?;
            let mut rows = LayerRows::default();
            let qk = |tape: &mut Tape<T>, a: &AttnIndex, xn: Var| -> Result<(Var, Var)> {
                let mut q = linear(tape, xn, w[a.wq])?;
                let mut k = linear(tape, xn, w[a.wk])?;
                if let (Some(qn), Some(kn)) = (a.q_norm, a.k_norm) {
                    q = nn::head_rms_norm(tape, q, dk, w[qn])?;
                    k = nn::head_rms_norm(tape, k, dk, w[kn])?;
                }
                let q = tape.rope(q, batch.positions, dk, base)?;
                let k = tape.rope(k, batch.positions, dk, base)?;
                Ok((q, k))
            };
            let n_out = match (&li.self_attn, mode.uses_self_attn()) {
                (Some(a), true) => {
                    let (q, k) = qk(tape, a, xn)?;
                    let v = linear(tape, xn, w[a.wv])?;
                    let ka = cat_opt(tape, past[l].self_k, k)?;
                    let va = cat_opt(tape, past[l].self_v, v)?;
                    let att = attend(tape, q, ka, va, heads, dk, batch.row_mask)?;
                    rows.self_k = Some(k);
                    rows.self_v = Some(v);
                    Some(linear(tape, att, w[a.wo])?)
                }
                _ => None,
            };
            let o_out = match &li.cross {
                Some(c) => {
                    let (q, k) = qk(tape, c, xn)?;
                    let v = linear(tape, xn, w[c.wv])?;
                    let dkv = cat_opt(tape, past[l].draft_k, k)?;
                    let dvv = cat_opt(tape, past[l].draft_v, v)?;
                    let (mk, mv) = match copies {
                        Some(cm) => (
                            tape.concat_rows(&[cm.keys, dkv])?,
                            tape.concat_rows(&[cm.values, dvv])?,
                        ),
                        None => (dkv, dvv),
                    };
                    let mask = cross_mask(copies);
                    let o = cross_attn_path(tape, q, mk, mv, w[c.wo], heads, dk, &mask)?;
                    let mut positions = copies.map_or_else(Vec::new, |c| c.positions.clone());
                    positions.extend_from_slice(batch.all_positions);
                    let mut tags = copies.map_or_else(Vec::new, |c| c.tags.clone());
                    tags.extend(std::iter::repeat_n(EntryTag::DraftGenerated, total));
                    out.memories.push(MemoryView {
                        keys: mk,
                        values: mv,
                        positions,
                        tags,
                        mask,
                    });
                    rows.draft_k = Some(k);
                    rows.draft_v = Some(v);
                    Some(o)
                }
                None => None,
            };
            let a = match (mode, n_out, o_out) {
                (DrafterMode::HiddenOnly, Some(n), _) => n,
                (DrafterMode::KvOnly | DrafterMode::CrossOnly, _, Some(o)) => o,
                (DrafterMode::Hybrid, Some(n), Some(o)) => {
                    let g = li.gate.as_ref().expect("hybrid layers carry a gate");
                    let (h, gate) = gated_fuse(tape, n, o, w[g.w_g], w[g.b_g], w[g.w_delta])?;
                    out.gates.push(gate);
                    h
                }
                _ => return Err(Error::Config(format!("layer {l} is missing weights for {mode}"))),
            };
            let y = tape.add(x, a)?;
            let yn = nn::rms_norm(tape, y, w[li.mlp_norm])?;
            let m = nn::mlp(tape, yn, w[li.w_up], w[li.w_down])?;
            x = tape.add(y, m)?;
            out.layers.push(rows);
        }
        out.out = x;
        let xf = nn::rms_norm(tape, x, w[self.index.final_norm])?;
        out.logits = linear(tape, xf, embed)?;
        Ok(out)
    }

    /// Causal pass over every position of a verified sequence. Row `j` sees
    /// copies at `i < j`, which is how a verified row is computed at decode
    /// time too.
    pub fn prefix_pass(
        &self,
        tape: &mut Tape<T>,
        w: &ParamSet<Var>,
        embed: Var,
        view: &TargetView<T>,
        copies: Option<&CrossMemory<Var>>,
        tokens: &[usize],
    ) -> Result<RowOutput> {
        let n = tokens.len();
        if view.len() + 1 < n {
            return Err(Error::Input(format!(
                "target view covers {} positions, {} rows need {}",
                view.len(),
                n,
                n.saturating_sub(1)
            )));
        }
        let positions: Vec<usize> = (0..n).collect();
        let u = self.prefix_u(tape, w, &view.shifted_features(0..n))?;
        let mask = nn::causal_mask(0, n);
        let past = vec![LayerRows::default(); self.config.depth];
        let batch = RowBatch {
            tokens,
            positions: &positions,
            u,
            all_positions: &positions,
            row_mask: &mask,
            prefix_len: usize::MAX,
            hide_draft_memory: false,
        };
        self.forward_rows(tape, w, embed, copies, &past, &batch)
    }
}

/// Builds a gated or cross-only drafter whose shared modules come from a
/// trained one-layer hidden-only drafter; the cross-attention branch, the gate
/// and `W_Δ` are freshly initialised from `seed`.
pub fn warm_start<T: Scalar>(config: DrafterConfig, baseline: &Drafter<T>, seed: u64) -> Result<Drafter<T>> {
    if !matches!(config.mode, DrafterMode::Hybrid | DrafterMode::CrossOnly) {
        return Err(Error::Config(format!("cannot warm-start a {} drafter", config.mode)));
    }
    let b = &baseline.config;
    if b.mode != DrafterMode::HiddenOnly || b.depth != 1 {
        return Err(Error::Config("warm start needs a one-layer hidden-only baseline".into()));
    }
    if b.n_taps != config.n_taps || b.qk_norm != config.qk_norm {
        return Err(Error::Config("baseline taps or qk-norm differ".into()));
    }
    let mut d = Drafter::init(config, &baseline.target, seed)?;
    let names = d.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if let Some(src) = baseline.params.get(name) {
            if src.shape() != d.params[i].shape() {
                return Err(Error::Config(format!("shape of {name} differs from baseline")));
            }
            d.params.values_mut()[i] = src.clone();
        }
    }
    Ok(d)
}

/// Constant tensors of rows kept between calls at decode time.
#[derive(Clone, Debug, Default)]
struct RowStore<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    draft_k: Vec<T>,
    draft_v: Vec<T>,
}

impl<T: Scalar> RowStore<T> {
    fn push(&mut self, tape: &Tape<T>, rows: &LayerRows) {
        let grab = |dst: &mut Vec<T>, v: Option<Var>| {
            if let Some(v) = v {
                dst.extend_from_slice(tape.value(v).data());
            }
        };
        grab(&mut self.self_k, rows.self_k);
        grab(&mut self.self_v, rows.self_v);
        grab(&mut self.draft_k, rows.draft_k);
        grab(&mut self.draft_v, rows.draft_v);
    }

    fn truncate(&mut self, rows: usize, width: usize) {
        for v in [&mut self.self_k, &mut self.self_v, &mut self.draft_k, &mut self.draft_v] {
            v.truncate(rows * width);
        }
    }
}

/// Incremental drafting state for one decode.
///
/// Verified rows are computed once and kept; speculative rows live only until
/// the next [`DraftSession::sync`].
#[derive(Clone, Debug)]
pub struct DraftSession<T> {
    committed: Vec<RowStore<T>>,
    n_committed: usize,
    root_out: Vec<T>,
    prefix_len: usize,
    copies: Option<CrossMemory<Tensor<T>>>,
    spec: Vec<RowStore<T>>,
    spec_parent: Vec<Option<usize>>,
    spec_pos: Vec<usize>,
    spec_out: Vec<Vec<T>>,
}

impl<T: Scalar> DraftSession<T> {
    pub fn new(drafter: &Drafter<T>) -> Self {
        Self {
            committed: vec![RowStore::default(); drafter.config.depth],
            n_committed: 0,
            root_out: Vec::new(),
            prefix_len: 0,
            copies: None,
            spec: vec![RowStore::default(); drafter.config.depth],
            spec_parent: Vec::new(),
            spec_pos: Vec::new(),
            spec_out: Vec::new(),
        }
    }

    pub fn committed_rows(&self) -> usize {
        self.n_committed
    }

    fn past(&self, tape: &mut Tape<T>, drafter: &Drafter<T>, store: &[RowStore<T>], rows: usize) -> Vec<LayerRows> {
        let kw = drafter.target.kv_width();
        let mut bind = |v: &Vec<T>| -> Option<Var> {
            (!v.is_empty()).then(|| tape.constant(Tensor::new(vec![rows, kw], v.clone()).expect("row store shape")))
        };
        store
            .iter()
            .map(|s| LayerRows {
                self_k: bind(&s.self_k),
                self_v: bind(&s.self_v),
                draft_k: bind(&s.draft_k),
                draft_v: bind(&s.draft_v),
            })
            .collect()
    }

    fn merged(&self) -> Vec<RowStore<T>> {
        self.committed
            .iter()
            .zip(&self.spec)
            .map(|(c, s)| {
                let join = |a: &Vec<T>, b: &Vec<T>| [a.as_slice(), b.as_slice()].concat();
                RowStore {
                    self_k: join(&c.self_k, &s.self_k),
                    self_v: join(&c.self_v, &s.self_v),
                    draft_k: join(&c.draft_k, &s.draft_k),
                    draft_v: join(&c.draft_v, &s.draft_v),
                }
            })
            .collect()
    }

    /// Brings the session up to date with a target cache holding
    /// `tokens[..len-1]`; the last token is the pending root. Returns the
    /// drafter's logits for the position after the root.
    pub fn sync(
        &mut self,
        drafter: &Drafter<T>,
        target: &TargetModel<T>,
        cache: &KVCache<T>,
        tokens: &[usize],
    ) -> Result<Vec<T>> {
        let t = cache.len();
        if tokens.len() != t + 1 {
            return Err(Error::Contract(format!(
                "{} tokens for a cache of {t}: expected exactly one pending root",
                tokens.len()
            )));
        }
        if self.n_committed > t + 1 {
            let kw = drafter.target.kv_width();
            for s in &mut self.committed {
                s.truncate(t + 1, kw);
            }
            self.n_committed = t + 1;
        }
        self.spec = vec![RowStore::default(); drafter.config.depth];
        self.spec_parent.clear();
        self.spec_pos.clear();
        self.spec_out.clear();

        let view = TargetView::from_cache(cache, &drafter.taps);
        let mut tape = Tape::new();
        let w = drafter.bind(&mut tape, false);
        let embed = tape.constant(target.weights.embed.clone());
        if self.copies.is_none() || self.prefix_len != t {
            self.copies = drafter
                .build_copies(&mut tape, &w, &view)?
                .map(|m| m.values_of(&tape));
            self.prefix_len = t;
        }
        let copies = self.copies.as_ref().map(|c| c.bind(&mut tape));
        let start = self.n_committed.min(t);
        let r = start;
        // recompute the root row even when it was committed before
        for s in &mut self.committed {
            s.truncate(r, drafter.target.kv_width());
        }
        self.n_committed = r;
        let new_tokens = &tokens[start..=t];
        let n = new_tokens.len();
        let positions: Vec<usize> = (start..=t).collect();
        let all_positions: Vec<usize> = (0..=t).collect();
        let u = drafter.prefix_u(&mut tape, &w, &view.shifted_features(start..t + 1))?;
        let past = self.past(&mut tape, drafter, &self.committed.clone(), r);
        let mask = nn::causal_mask(r, n);
        let batch = RowBatch {
            tokens: new_tokens,
            positions: &positions,
            u,
            all_positions: &all_positions,
            row_mask: &mask,
            prefix_len: t,
            hide_draft_memory: false,
        };
        let out = drafter.forward_rows(&mut tape, &w, embed, copies.as_ref(), &past, &batch)?;
        for (s, rows) in self.committed.iter_mut().zip(&out.layers) {
            s.push(&tape, rows);
        }
        self.n_committed = t + 1;
        self.root_out = tape.value(out.out).row(n - 1).to_vec();
        Ok(tape.value(out.logits).row(n - 1).to_vec())
    }

    /// Scores speculative rows. Each node names its parent (`None` for the
    /// root) and carries its token; returns one handle and logits per node.
    pub fn expand(
        &mut self,
        drafter: &Drafter<T>,
        target: &TargetModel<T>,
        nodes: &[(Option<usize>, usize)],
    ) -> Result<Vec<(usize, Vec<T>)>> {
        if nodes.is_empty() {
            return Ok(Vec::new());
        }
        if self.n_committed == 0 {
            return Err(Error::Contract("expand before sync".into()));
        }
        let root_pos = self.n_committed - 1;
        let (r, s, n) = (self.n_committed, self.spec_pos.len(), nodes.len());
        let total = r + s + n;
        let mut positions = Vec::with_capacity(n);
        let mut u_data = Vec::with_capacity(n * drafter.target.d_model);
        let mut mask = vec![false; n * total];
        for (i, &(parent, _)) in nodes.iter().enumerate() {
            let row = &mut mask[i * total..(i + 1) * total];
            row[..r].fill(true);
            row[r + s + i] = true;
            let mut depth = 1;
            let mut cur = parent;
            while let Some(p) = cur {
                if p >= s {
                    return Err(Error::Contract(format!("unknown parent handle {p}")));
                }
                row[r + p] = true;
                depth += 1;
                cur = self.spec_parent[p];
            }
            positions.push(root_pos + depth);
            match parent {
                Some(p) => u_data.extend_from_slice(&self.spec_out[p]),
                None => u_data.extend_from_slice(&self.root_out),
            }
        }
        if let Some(&p) = positions.iter().max() {
            if p >= drafter.target.max_seq_len {
                return Err(Error::Capacity(format!("draft position {p} beyond max_seq_len")));
            }
        }
        let mut all_positions: Vec<usize> = (0..r).collect();
        all_positions.extend_from_slice(&self.spec_pos);
        all_positions.extend_from_slice(&positions);

        let mut tape = Tape::new();
        let w = drafter.bind(&mut tape, false);
        let embed = tape.constant(target.weights.embed.clone());
        let copies = self.copies.as_ref().map(|c| c.bind(&mut tape));
        let u = tape.constant(Tensor::new(vec![n, drafter.target.d_model], u_data)?);
        let merged = self.merged();
        let past = self.past(&mut tape, drafter, &merged, r + s);
        let tokens: Vec<usize> = nodes.iter().map(|&(_, t)| t).collect();
        let batch = RowBatch {
            tokens: &tokens,
            positions: &positions,
            u,
            all_positions: &all_positions,
            row_mask: &mask,
            prefix_len: self.prefix_len,
            hide_draft_memory: false,
        };
        let out = drafter.forward_rows(&mut tape, &w, embed, copies.as_ref(), &past, &batch)?;
        for (st, rows) in self.spec.iter_mut().zip(&out.layers) {
            st.push(&tape, rows);
        }
        let logits = tape.value(out.logits);
        let outs = tape.value(out.out);
        let mut result = Vec::with_capacity(n);
        for (i, &(parent, _)) in nodes.iter().enumerate() {
            self.spec_parent.push(parent);
            self.spec_pos.push(positions[i]);
            self.spec_out.push(outs.row(i).to_vec());
            result.push((s + i, logits.row(i).to_vec()));
        }
        Ok(result)
    }
}
