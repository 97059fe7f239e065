//! Loop-based reference implementations used as oracles. Nothing here goes
//! through the tape.
#![allow(dead_code)]

pub mod fixtures;

use kvlab_core::drafter::{Drafter, DrafterConfig, DrafterMode, Injection, Projector};
use kvlab_core::model::{TargetConfig, TargetModel};
use kvlab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;

pub fn tiny_target() -> TargetConfig {
    TargetConfig {
        vocab_size: 13,
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        d_kv: 2,
        d_ff: 12,
        max_seq_len: 128,
        ..TargetConfig::default()
    }
}

/// A target whose weights are spread enough that argmaxes vary.
pub fn random_target(cfg: TargetConfig, seed: u64) -> TargetModel<f64> {
    let mut m = TargetModel::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in m.weights.params_mut() {
        let noise = Tensor::<f64>::randn(p.shape(), 0.4, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    m
}

/// Same idea for drafters: no parameter is left at an exact zero or one.
pub fn perturb_drafter(d: &mut Drafter<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in d.params.values_mut() {
        let noise = Tensor::<f64>::randn(p.shape(), std, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn drafter_cfg(mode: DrafterMode, depth: usize, injection: Injection) -> DrafterConfig {
    DrafterConfig {
        mode,
        depth,
        injection,
        projector: Projector::Linear,
        ..DrafterConfig::default()
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- primitives ----

/// `W·x` for `W` stored `[out, in]`.
pub fn matvec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| (0..inp).map(|i| w.data()[o * inp + i] * x[i]).sum())
        .collect()
}

pub fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Rotate-half rotary embedding applied head by head.
pub fn rope(x: &[f64], pos: usize, head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for h in 0..x.len() / head_dim {
        let o = h * head_dim;
        for i in 0..half {
            let theta = pos as f64 / base.powf(2.0 * i as f64 / head_dim as f64);
            let (a, b) = (x[o + i], x[o + i + half]);
            out[o + i] = a * theta.cos() - b * theta.sin();
            out[o + i + half] = a * theta.sin() + b * theta.cos();
        }
    }
    out
}

/// Softmax attention of one query over `(key, value)` pairs, head by head.
/// An empty entry list yields zeros.
pub fn attention(q: &[f64], entries: &[(&[f64], &[f64])], heads: usize, head_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; heads * head_dim];
    if entries.is_empty() {
        return out;
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..heads {
        let r = h * head_dim..(h + 1) * head_dim;
        let scores: Vec<f64> = entries
            .iter()
            .map(|(k, _)| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, (_, v)) in entries.iter().enumerate() {
            for d in r.clone() {
                out[d] += e[j] / z * v[d];
            }
        }
    }
    out
}

pub fn mlp(x: &[f64], w_up: &Tensor<f64>, w_down: &Tensor<f64>) -> Vec<f64> {
    let h: Vec<f64> = matvec(w_up, x).into_iter().map(silu).collect();
    matvec(w_down, &h)
}

pub fn head_rms(x: &[f64], head_dim: usize, gain: &[f64]) -> Vec<f64> {
    x.chunks(head_dim).flat_map(|c| rms(c, gain)).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - lse).collect()
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

// ---- target ----

/// Per-position outputs of the reference target.
pub struct NaiveTarget {
    pub logits: Vec<Vec<f64>>,
    /// `[layer][pos]`.
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub hidden: Vec<Vec<Vec<f64>>>,
}

/// Position-by-position forward with explicit loops over every earlier key.
pub fn naive_target(m: &TargetModel<f64>, tokens: &[usize]) -> NaiveTarget {
    let c = &m.config;
    let w = &m.weights;
    let (d, dk) = (c.d_model, c.d_kv);
    let mut res = NaiveTarget {
        logits: Vec::new(),
        keys: vec![Vec::new(); c.n_layers],
        values: vec![Vec::new(); c.n_layers],
        hidden: vec![Vec::new(); c.n_layers],
    };
    for (p, &tok) in tokens.iter().enumerate() {
        let mut x = w.embed.row(tok).to_vec();
        for (l, lw) in w.layers.iter().enumerate() {
            let xn = rms(&x, lw.attn_norm.data());
            let mut q = matvec(&lw.wq, &xn);
            let mut k = matvec(&lw.wk, &xn);
            let v = matvec(&lw.wv, &xn);
            if let (Some(qn), Some(kn)) = (&lw.q_norm, &lw.k_norm) {
                q = head_rms(&q, dk, qn.data());
                k = head_rms(&k, dk, kn.data());
            }
            let q = rope(&q, p, dk, c.rope_base);
            res.keys[l].push(rope(&k, p, dk, c.rope_base));
            res.values[l].push(v);
            let entries: Vec<(&[f64], &[f64])> = (0..=p)
                .map(|i| (res.keys[l][i].as_slice(), res.values[l][i].as_slice()))
                .collect();
            let a = attention(&q, &entries, c.n_heads, dk);
            x = add(&x, &matvec(&lw.wo, &a));
            let y = rms(&x, lw.mlp_norm.data());
            x = add(&x, &mlp(&y, &lw.w_up, &lw.w_down));
            res.hidden[l].push(x.clone());
        }
        let xf = rms(&x, w.final_norm.data());
        res.logits.push((0..c.vocab_size).map(|t| (0..d).map(|i| w.embed.row(t)[i] * xf[i]).sum()).collect());
    }
    res
}

// ---- drafter ----

#[derive(Clone, Debug, PartialEq)]
pub enum Tag {
    Copy,
    Derived,
    Null,
}

/// One target-derived memory entry.
#[derive(Clone, Debug)]
pub struct Entry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub pos: usize,
    pub tag: Tag,
}

/// Memory built from the reference target's tensors for positions `0..len`.
pub fn naive_copies(d: &Drafter<f64>, t: &NaiveTarget, len: usize) -> Vec<Entry> {
    let p = |name: &str| d.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let (heads, dk, base) = (d.target.n_heads, d.target.d_kv, d.target.rope_base);
    let inj = match d.config.mode {
        DrafterMode::HiddenOnly => return Vec::new(),
        _ => d.config.injection,
    };
    let mut out = Vec::new();
    match inj {
        Injection::NullMemory => out.push(Entry {
            key: p("inject.null_k").data().to_vec(),
            value: p("inject.null_v").data().to_vec(),
            pos: 0,
            tag: Tag::Null,
        }),
        Injection::HeadConcat => {
            for i in 0..len {
                for &l in &d.taps {
                    out.push(Entry {
                        key: t.keys[l][i].clone(),
                        value: t.values[l][i].clone(),
                        pos: i,
                        tag: Tag::Copy,
                    });
                }
            }
        }
        Injection::LinearProj | Injection::LinearProjRope => {
            assert_eq!(d.config.projector, Projector::Linear, "reference covers linear projectors");
            let (wk, wv) = (p("inject.k_proj.w"), p("inject.v_proj.w"));
            for i in 0..len {
                let gather = |src: &Vec<Vec<Vec<f64>>>, h: usize| -> Vec<f64> {
                    d.taps.iter().flat_map(|&l| src[l][i][h * dk..(h + 1) * dk].to_vec()).collect()
                };
                let mut key = Vec::new();
                let mut value = Vec::new();
                for h in 0..heads {
                    key.extend(matvec(wk, &gather(&t.keys, h)));
                    value.extend(matvec(wv, &gather(&t.values, h)));
                }
                if inj == Injection::LinearProjRope {
                    key = rope(&key, i, dk, base);
                }
                out.push(Entry { key, value, pos: i, tag: Tag::Copy });
            }
        }
        Injection::HiddenToKv => {
            for i in 0..len {
                let h: Vec<f64> = d.taps.iter().flat_map(|&l| t.hidden[l][i].clone()).collect();
                let n = rms(&h, p("inject.norm").data());
                out.push(Entry {
                    key: rope(&matvec(p("inject.wk"), &n), i, dk, base),
                    value: matvec(p("inject.wv"), &n),
                    pos: i,
                    tag: Tag::Derived,
                });
            }
        }
    }
    out
}

/// Per-layer tensors of one processed drafter row.
#[derive(Clone, Debug, Default)]
pub struct RowState {
    pub pos: usize,
    pub self_kv: Vec<(Vec<f64>, Vec<f64>)>,
    pub draft_kv: Vec<(Vec<f64>, Vec<f64>)>,
    pub out: Vec<f64>,
    pub logits: Vec<f64>,
    pub gates: Vec<Vec<f64>>,
}

/// `u` of a verified row `j`: `W_fc·f_{j-1}` (zero at `j = 0`), or zeros.
pub fn naive_prefix_u(d: &Drafter<f64>, t: &NaiveTarget, j: usize) -> Vec<f64> {
    let dm = d.target.d_model;
    match d.params.get("fc") {
        Some(fc) if j > 0 => {
            let f: Vec<f64> = d.taps.iter().flat_map(|&l| t.hidden[l][j - 1].clone()).collect();
            matvec(fc, &f)
        }
        Some(_) => vec![0.0; dm],
        None => vec![0.0; dm],
    }
}

/// One drafter row. `history` holds the rows it may attend to through
/// self-attention; drafted cross entries among them are visible when their
/// position is at least `prefix_len`. Copies are visible below
/// `min(pos, prefix_len)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_row(
    d: &Drafter<f64>,
    embed: &Tensor<f64>,
    copies: &[Entry],
    history: &[&RowState],
    token: usize,
    pos: usize,
    u: &[f64],
    prefix_len: usize,
) -> RowState {
    let p = |name: &str| d.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let (heads, dk, base) = (d.target.n_heads, d.target.d_kv, d.target.rope_base);
    let mode = d.config.mode;
    let eu: Vec<f64> = embed.row(token).iter().copied().chain(u.iter().copied()).collect();
    let mut x = matvec(p("input"), &eu);
    let mut row = RowState {
        pos,
        ..RowState::default()
    };
    for l in 0..d.config.depth {
        let pre = format!("layers.{l}");
        let xn = rms(&x, p(&format!("{pre}.attn_norm")).data());
        let qkv = |branch: &str| {
            let g = |n: &str| p(&format!("{pre}.{branch}.{n}"));
            let mut q = matvec(g("wq"), &xn);
            let mut k = matvec(g("wk"), &xn);
            if d.config.qk_norm {
                q = head_rms(&q, dk, g("q_norm").data());
                k = head_rms(&k, dk, g("k_norm").data());
            }
            (rope(&q, pos, dk, base), rope(&k, pos, dk, base), matvec(g("wv"), &xn))
        };
        let n_out = matches!(mode, DrafterMode::HiddenOnly | DrafterMode::Hybrid).then(|| {
            let (q, k, v) = qkv("self");
            let mut entries: Vec<(&[f64], &[f64])> = history
                .iter()
                .map(|r| (r.self_kv[l].0.as_slice(), r.self_kv[l].1.as_slice()))
                .collect();
            entries.push((&k, &v));
            let a = attention(&q, &entries, heads, dk);
            row.self_kv.push((k.clone(), v.clone()));
            matvec(p(&format!("{pre}.self.wo")), &a)
        });
        if n_out.is_none() {
            row.self_kv.push((Vec::new(), Vec::new()));
        }
        let o_out = mode.uses_cross().then(|| {
            let (q, k, v) = qkv("cross");
            let mut entries: Vec<(&[f64], &[f64])> = copies
                .iter()
                .filter(|e| e.tag == Tag::Null || e.pos < pos.min(prefix_len))
                .map(|e| (e.key.as_slice(), e.value.as_slice()))
                .collect();
            for r in history.iter().filter(|r| r.pos >= prefix_len) {
                entries.push((r.draft_kv[l].0.as_slice(), r.draft_kv[l].1.as_slice()));
            }
            entries.push((&k, &v));
            let a = attention(&q, &entries, heads, dk);
            row.draft_kv.push((k.clone(), v.clone()));
            matvec(p(&format!("{pre}.cross.wo")), &a)
        });
        if o_out.is_none() {
            row.draft_kv.push((Vec::new(), Vec::new()));
        }
        let a = match (mode, n_out, o_out) {
            (DrafterMode::HiddenOnly, Some(n), _) => n,
            (DrafterMode::KvOnly | DrafterMode::CrossOnly, _, Some(o)) => o,
            (DrafterMode::Hybrid, Some(n), Some(o)) => {
                let delta = sub(&o, &n);
                let cat: Vec<f64> = n.iter().chain(&o).chain(&delta).copied().collect();
                let z = add(&matvec(p(&format!("{pre}.gate.w_g")), &cat), p(&format!("{pre}.gate.b_g")).data());
                let g: Vec<f64> = z.into_iter().map(sigmoid).collect();
                let corr = matvec(p(&format!("{pre}.gate.w_delta")), &delta);
                let h = n.iter().zip(&g).zip(&corr).map(|((a, g), c)| a + g * c).collect();
                row.gates.push(g);
                h
            }
            _ => unreachable!(),
        };
        let y = add(&x, &a);
        let yn = rms(&y, p(&format!("{pre}.mlp_norm")).data());
        x = add(&y, &mlp(&yn, p(&format!("{pre}.w_up")), p(&format!("{pre}.w_down"))));
    }
    let xf = rms(&x, p("final_norm").data());
    row.logits = (0..embed.rows()).map(|t| embed.row(t).iter().zip(&xf).map(|(a, b)| a * b).sum()).collect();
    row.out = x;
    row
}

/// Causal pass over a verified sequence: row `j` sees copies below `j`.
pub fn naive_prefix_rows(d: &Drafter<f64>, target: &TargetModel<f64>, nt: &NaiveTarget, tokens: &[usize]) -> Vec<RowState> {
    let copies = naive_copies(d, nt, nt.logits.len());
    let mut rows: Vec<RowState> = Vec::new();
    for (j, &tok) in tokens.iter().enumerate() {
        let u = naive_prefix_u(d, nt, j);
        let hist: Vec<&RowState> = rows.iter().collect();
        let r = naive_row(d, &target.weights.embed, &copies, &hist, tok, j, &u, usize::MAX);
        rows.push(r);
    }
    rows
}

/// Per-step logits of a `K`-step unroll at `t` in which each later step is
/// fed the previous step's output.
pub fn naive_online_unroll(
    d: &Drafter<f64>,
    target: &TargetModel<f64>,
    tokens: &[usize],
    t: usize,
    k: usize,
) -> Vec<Vec<f64>> {
    let nt = naive_target(target, &tokens[..tokens.len() - 1]);
    let full = naive_prefix_rows(d, target, &nt, &tokens[..=t]);
    let copies = naive_copies(d, &nt, t);
    let mut steps = vec![full[t].clone()];
    for s in 1..k {
        let pos = t + s;
        let hist: Vec<&RowState> = full.iter().chain(&steps[1..]).collect();
        let u = steps.last().unwrap().out.clone();
        let r = naive_row(d, &target.weights.embed, &copies, &hist, tokens[pos], pos, &u, t);
        steps.push(r);
    }
    steps.into_iter().map(|r| r.logits).collect()
}

/// Summed cross-entropy of per-step logits against `targets`.
pub fn ce_sum(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    logits.iter().zip(targets).map(|(l, &t)| -log_softmax(l)[t]).sum()
}

// ---- gradient checks ----

/// Directional finite-difference check of a drafter's TTT loss (online,
/// `K = 3`, two unrolls) in every parameter tensor. Returns the worst
/// relative error.
pub fn drafter_grad_check(cfg: DrafterConfig, seed: u64) -> f64 {
    use kvlab_core::params::ParamSet;
    use kvlab_core::tensor::check::check_directional;
    use kvlab_core::ttt::{target_view, SequencePass};

    let target = random_target(tiny_target(), seed);
    let mut d = Drafter::<f64>::init(cfg, &target.config, seed).unwrap();
    perturb_drafter(&mut d, 0.3, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let tokens = random_tokens(&mut rng, 8, target.config.vocab_size);
    let view = target_view(&target, &d, &tokens[..7]).unwrap();
    let names = d.params.names().to_vec();
    let params = d.params.values().to_vec();
    let f = |tape: &mut kvlab_core::Tape<f64>, vars: &[kvlab_core::Var]| {
        let mut w = ParamSet::new();
        for (n, &v) in names.iter().zip(vars) {
            w.push(n.clone(), v);
        }
        let embed = tape.constant(target.weights.embed.clone());
        let pass = SequencePass::new(tape, &d, &w, embed, &view, &tokens)?;
        let a = pass.unroll(tape, 1, 3, true)?;
        let b = pass.unroll(tape, 4, 3, false)?;
        tape.add(a.loss, b.loss)
    };
    let cmp = check_directional(&params, f, 1e-5, &mut rng).unwrap();
    cmp.iter().map(|c| c.rel_error()).fold(0.0, f64::max)
}

/// Every (mode, injection, depth) combination the drafters accept.
pub fn all_drafter_configs() -> Vec<DrafterConfig> {
    let modes = [DrafterMode::HiddenOnly, DrafterMode::KvOnly, DrafterMode::Hybrid, DrafterMode::CrossOnly];
    let injections = [
        Injection::HeadConcat,
        Injection::LinearProj,
        Injection::LinearProjRope,
        Injection::HiddenToKv,
        Injection::NullMemory,
    ];
    let mut out = Vec::new();
    for mode in modes {
        let max_depth = if matches!(mode, DrafterMode::HiddenOnly | DrafterMode::KvOnly) { 4 } else { 1 };
        for depth in 1..=max_depth {
            for inj in injections {
                if mode == DrafterMode::HiddenOnly && inj != Injection::LinearProjRope {
                    continue;
                }
                out.push(drafter_cfg(mode, depth, inj));
            }
        }
    }
    for projector in [Projector::Mlp, Projector::MlpNorm] {
        out.push(DrafterConfig {
            projector,
            ..drafter_cfg(DrafterMode::KvOnly, 2, Injection::LinearProjRope)
        });
    }
    out.push(DrafterConfig {
        qk_norm: true,
        ..drafter_cfg(DrafterMode::Hybrid, 1, Injection::LinearProjRope)
    });
    out
}
