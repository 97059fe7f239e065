//! Autoregressive test-time training of drafters against a frozen target.
//!
//! A training sequence is first run through the drafter causally, which gives
//! the step-0 prediction for every position. An unroll at `t` then continues
//! from row `t` for `K-1` more steps. Online, each step feeds on the previous
//! step's output and treats everything past `t` as drafted, exactly as at
//! decode time. Offline, step `k` is the teacher-forced row `t+k`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafter::{CrossMemory, Drafter, LayerRows, MemoryView, RowBatch, RowOutput, TargetView};
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TTTConfig {
    /// Draft steps per unroll.
    pub k: usize,
    pub online: bool,
    /// Multiplier on the cross-attention key/value projection gradients.
    pub kv_grad_scale: f64,
    pub lr: f64,
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip (0 disables).
    pub clip: f64,
}

impl Default for TTTConfig {
    fn default() -> Self {
        Self {
            k: 7,
            online: true,
            kv_grad_scale: 1.0,
            lr: 3e-3,
            steps: 300,
            batch: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip: 1.0,
        }
    }
}

impl TTTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("unroll length K must be at least 1".into()));
        }
        if !(self.kv_grad_scale >= 1.0) {
            return Err(Error::Config(format!("kv_grad_scale {} below 1", self.kv_grad_scale)));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("lr must be positive and batch non-zero".into()));
        }
        Ok(())
    }
}

/// One optimizer step of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub gate_mean: Option<f64>,
    pub gate_ema: Option<f64>,
    pub kv_grad_fraction: Option<f64>,
}

/// Smoothing weight of the gate trajectory.
pub const GATE_EMA_ALPHA: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    ema: Option<f64>,
}

impl TrainTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Folds a step's mean gate into the moving average; returns the average.
    pub fn record_gate(&mut self, mean: f64) -> f64 {
        let ema = match self.ema {
            None => mean,
            Some(e) => GATE_EMA_ALPHA * mean + (1.0 - GATE_EMA_ALPHA) * e,
        };
        self.ema = Some(ema);
        ema
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut trace = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: TraceRecord = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
            if let Some(e) = r.gate_ema {
                trace.ema = Some(e);
            }
            trace.records.push(r);
        }
        Ok(trace)
    }
}

/// Mean of every gate activation in `gates`.
pub fn gate_mean<T: Scalar>(tape: &Tape<T>, gates: &[Var]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for &g in gates {
        for &x in tape.value(g).data() {
            sum += x.as_f64();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Multiplies the cross-attention key/value projection gradients by the
/// configured factor.
pub fn apply_kv_grad_scale<T: Scalar>(drafter: &Drafter<T>, grads: &mut ParamSet<Tensor<T>>, scale: f64) {
    if scale == 1.0 {
        return;
    }
    let s = T::of(scale);
    for i in drafter.cross_kv_params() {
        grads.values_mut()[i].data_mut().iter_mut().for_each(|g| *g *= s);
    }
}

/// Everything an unroll leaves on the tape.
#[derive(Clone, Debug)]
pub struct Unroll {
    /// Sum of the per-step cross-entropies.
    pub loss: Var,
    pub step_logits: Vec<Var>,
    pub gates: Vec<Var>,
    /// Cross-attention memory of the last step, with retained gradients.
    pub probe: Vec<MemoryView>,
}

/// Shared per-sequence context for unrolls on one tape.
pub struct SequencePass<'a, T> {
    pub drafter: &'a Drafter<T>,
    pub w: &'a ParamSet<Var>,
    pub embed: Var,
    pub tokens: &'a [usize],
    pub copies: Option<CrossMemory<Var>>,
    pub full: RowOutput,
}

impl<'a, T: Scalar> SequencePass<'a, T> {
    /// Runs the causal pass; `view` must cover at least `tokens.len() - 1`
    /// positions.
    pub fn new(
        tape: &mut Tape<T>,
        drafter: &'a Drafter<T>,
        w: &'a ParamSet<Var>,
        embed: Var,
        view: &TargetView<T>,
        tokens: &'a [usize],
    ) -> Result<Self> {
        let copies = drafter.build_copies(tape, w, view)?;
        let full = drafter.prefix_pass(tape, w, embed, view, copies.as_ref(), tokens)?;
        Ok(Self {
            drafter,
            w,
            embed,
            tokens,
            copies,
            full,
        })
    }

    /// `K`-step unroll from row `t`.
    pub fn unroll(&self, tape: &mut Tape<T>, t: usize, k: usize, online: bool) -> Result<Unroll> {
        let n = self.tokens.len();
        if k == 0 || t + k >= n {
            return Err(Error::Input(format!(
                "unroll at {t} with K={k} overruns a sequence of {n} tokens"
            )));
        }
        let targets = &self.tokens[t + 1..t + 1 + k];
        if !online {
            let logits = tape.slice_rows(self.full.logits, t, k)?;
            let loss = tape.cross_entropy(logits, targets)?;
            let probe = self.retain_full_row(tape, t + k - 1);
            return Ok(Unroll {
                loss,
                step_logits: vec![logits],
                gates: self.full.gates.clone(),
                probe,
            });
        }
        let drafter = self.drafter;
        let l0 = tape.slice_rows(self.full.logits, t, 1)?;
        let mut step_logits = vec![l0];
        let mut gates = self.full.gates.clone();
        let mut prev = tape.slice_rows(self.full.out, t, 1)?;
        let mut probe = if k == 1 { self.retain_full_row(tape, t) } else { Vec::new() };
        let copies = match &self.copies {
            Some(c) => crate::drafter::Drafter::<T>::slice_copies(tape, c, t)?,
            None => None,
        };
        let slice = |tape: &mut Tape<T>, v: Option<Var>| -> Result<Option<Var>> {
            v.map(|v| tape.slice_rows(v, 0, t + 1)).transpose()
        };
        let mut past = Vec::with_capacity(self.full.layers.len());
        for rows in &self.full.layers {
            past.push(LayerRows {
                self_k: slice(tape, rows.self_k)?,
                self_v: slice(tape, rows.self_v)?,
                draft_k: slice(tape, rows.draft_k)?,
                draft_v: slice(tape, rows.draft_v)?,
            });
        }
        let mut all_positions: Vec<usize> = (0..=t).collect();
        for step in 1..k {
            let pos = t + step;
            all_positions.push(pos);
            let mask = vec![true; all_positions.len()];
            let batch = RowBatch {
                tokens: &self.tokens[pos..=pos],
                positions: &[pos],
                u: prev,
                all_positions: &all_positions,
                row_mask: &mask,
                prefix_len: t,
                hide_draft_memory: false,
            };
            let out = drafter.forward_rows(tape, self.w, self.embed, copies.as_ref(), &past, &batch)?;
            for (p, new) in past.iter_mut().zip(&out.layers) {
                let join = |tape: &mut Tape<T>, a: Option<Var>, b: Option<Var>| -> Result<Option<Var>> {
                    match (a, b) {
                        (Some(a), Some(b)) => Ok(Some(tape.concat_rows(&[a, b])?)),
                        (a, b) => Ok(a.or(b)),
                    }
                };
                p.self_k = join(tape, p.self_k, new.self_k)?;
                p.self_v = join(tape, p.self_v, new.self_v)?;
                p.draft_k = join(tape, p.draft_k, new.draft_k)?;
                p.draft_v = join(tape, p.draft_v, new.draft_v)?;
            }
            gates.extend_from_slice(&out.gates);
            if step == k - 1 {
                for m in &out.memories {
                    tape.retain_grad(m.keys);
                    tape.retain_grad(m.values);
                }
                probe = out.memories;
            }
            step_logits.push(out.logits);
            prev = out.out;
        }
        let all = tape.concat_rows(&step_logits)?;
        let loss = tape.cross_entropy(all, targets)?;
        Ok(Unroll {
            loss,
            step_logits,
            gates,
            probe,
        })
    }

    /// Memory of one row of the causal pass, restricted to that row.
    fn retain_full_row(&self, tape: &mut Tape<T>, row: usize) -> Vec<MemoryView> {
        self.full
            .memories
            .iter()
            .map(|m| {
                tape.retain_grad(m.keys);
                tape.retain_grad(m.values);
                let e = m.positions.len();
                MemoryView {
                    keys: m.keys,
                    values: m.values,
                    positions: m.positions.clone(),
                    tags: m.tags.clone(),
                    mask: m.mask[row * e..(row + 1) * e].to_vec(),
                }
            })
            .collect()
    }
}

/// Loss of a single unroll at `t`, computed from scratch.
pub fn ttt_unroll<T: Scalar>(
    drafter: &Drafter<T>,
    target: &TargetModel<T>,
    tokens: &[usize],
    t: usize,
    k: usize,
    online: bool,
) -> Result<f64> {
    if k == 0 || t + k >= tokens.len() {
        return Err(Error::Input(format!(
            "unroll at {t} with K={k} overruns a sequence of {} tokens",
            tokens.len()
        )));
    }
    let mut tape = Tape::new();
    let w = drafter.bind(&mut tape, false);
    let embed = tape.constant(target.weights.embed.clone());
    let view = target_view(target, drafter, &tokens[..tokens.len() - 1])?;
    let pass = SequencePass::new(&mut tape, drafter, &w, embed, &view, tokens)?;
    let u = pass.unroll(&mut tape, t, k, online)?;
    Ok(tape.value(u.loss).item()?.as_f64())
}

/// Tap-layer target state for `tokens`.
pub fn target_view<T: Scalar>(target: &TargetModel<T>, drafter: &Drafter<T>, tokens: &[usize]) -> Result<TargetView<T>> {
    let mut cache = target.new_cache();
    if !tokens.is_empty() {
        target.prefill(&mut cache, tokens)?;
    }
    Ok(TargetView::from_cache(&cache, &drafter.taps))
}

/// Unroll starts for a sequence of `n` tokens: a random offset below `K`,
/// then every `K` positions.
pub fn unroll_starts<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n <= k {
        return Vec::new();
    }
    let offset = rng.random_range(0..k);
    (offset..n - k).step_by(k).collect()
}

/// Fraction of visible memory positions whose entries received gradient
/// through drafter-side key/value projections.
///
/// Positions are counted once however many layers or head groups carry them.
pub fn grad_sparsity_report<T: Scalar>(tape: &Tape<T>, probe: &[MemoryView]) -> Result<f64> {
    if tape.backward_passes() == 0 {
        return Err(Error::Contract("sparsity report needs a completed backward pass".into()));
    }
    use std::collections::BTreeSet;
    let mut visible = BTreeSet::new();
    let mut active = BTreeSet::new();
    for m in probe {
        let (gk, gv) = match (tape.grad(m.keys), tape.grad(m.values)) {
            (Some(k), Some(v)) => (k, v),
            _ => return Err(Error::Contract("memory gradients were not retained".into())),
        };
        for (e, &seen) in m.mask.iter().enumerate() {
            if !seen {
                continue;
            }
            let key = (m.positions[e], m.tags[e] == crate::drafter::EntryTag::Null);
            visible.insert(key);
            let flows = gk.row(e).iter().chain(gv.row(e)).any(|&g| g != T::zero());
            if m.tags[e].draft_side() && flows {
                active.insert(key);
            }
        }
    }
    if visible.is_empty() {
        return Err(Error::Contract("no visible memory entries".into()));
    }
    Ok(active.len() as f64 / visible.len() as f64)
}

/// Share of squared gradient mass on visible memory entries that lands on
/// drafter-side entries.
pub fn kv_grad_fraction<T: Scalar>(tape: &Tape<T>, probe: &[MemoryView]) -> Option<f64> {
    let (mut draft, mut total) = (0.0, 0.0);
    for m in probe {
        let (Some(gk), Some(gv)) = (tape.grad(m.keys), tape.grad(m.values)) else {
            continue;
        };
        for (e, &seen) in m.mask.iter().enumerate() {
            if !seen {
                continue;
            }
            let s: f64 = gk.row(e).iter().chain(gv.row(e)).map(|g| g.as_f64().powi(2)).sum();
            total += s;
            if m.tags[e].draft_side() {
                draft += s;
            }
        }
    }
    (total > 0.0).then(|| draft / total)
}

/// Loss of one sequence: the mean over its unrolls, recorded on `tape`.
pub struct SequenceLoss {
    pub loss: Var,
    pub gates: Vec<Var>,
    pub probe: Vec<MemoryView>,
}

pub fn sequence_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    drafter: &Drafter<T>,
    w: &ParamSet<Var>,
    target: &TargetModel<T>,
    tokens: &[usize],
    cfg: &TTTConfig,
    rng: &mut R,
) -> Result<Option<SequenceLoss>> {
    let starts = unroll_starts(tokens.len(), cfg.k, rng);
    if starts.is_empty() {
        return Ok(None);
    }
    let embed = tape.constant(target.weights.embed.clone());
    let view = target_view(target, drafter, &tokens[..tokens.len() - 1])?;
    let pass = SequencePass::new(tape, drafter, w, embed, &view, tokens)?;
    let mut losses = Vec::with_capacity(starts.len());
    let mut gates = Vec::new();
    let mut probe = Vec::new();
    for &t in &starts {
        let u = pass.unroll(tape, t, cfg.k, cfg.online)?;
        losses.push(u.loss);
        gates = u.gates;
        probe = u.probe;
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, T::one() / T::of(starts.len() as f64))?;
    Ok(Some(SequenceLoss { loss, gates, probe }))
}

/// Trains `drafter` in place. The target is only read.
pub fn train_drafter<T: Scalar>(
    drafter: &mut Drafter<T>,
    target: &TargetModel<T>,
    corpus: &[Vec<usize>],
    cfg: &TTTConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let mut trace = TrainTrace::new();
    if cfg.steps == 0 {
        return Ok(trace);
    }
    let usable: Vec<&Vec<usize>> = corpus.iter().filter(|s| s.len() > cfg.k).collect();
    if usable.is_empty() {
        return Err(Error::Input(format!("no training sequence longer than K={}", cfg.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clip = (cfg.clip > 0.0).then_some(cfg.clip);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, clip);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut grads: Option<ParamSet<Tensor<T>>> = None;
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut gate_values = Vec::new();
        let mut kv_fraction = None;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = usable[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let w = drafter.bind(&mut tape, true);
            let Some(sl) = sequence_loss(&mut tape, drafter, &w, target, seq, cfg, &mut rng)? else {
                continue;
            };
            let value = tape.value(sl.loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {value}"),
                });
            }
            tape.backward(sl.loss)?;
            if let Some(g) = gate_mean(&tape, &sl.gates) {
                gate_values.push(g);
            }
            if let Some(f) = kv_grad_fraction(&tape, &sl.probe) {
                kv_fraction = Some(f);
            }
            let g = w.grads(&tape);
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                    acc
                }
            });
            loss_sum += value;
            count += 1;
        }
        let Some(mut grads) = grads else {
            return Err(Error::Training {
                step,
                reason: "batch produced no unrolls".into(),
            });
        };
        let inv = T::one() / T::of(count as f64);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        apply_kv_grad_scale(drafter, &mut grads, cfg.kv_grad_scale);
        if grads.values().iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Training {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let mut params: Vec<&mut Tensor<T>> = drafter.params.values_mut().iter_mut().collect();
        opt.update(&mut params, grads.values());
        let gate = (!gate_values.is_empty()).then(|| gate_values.iter().sum::<f64>() / gate_values.len() as f64);
        let ema = gate.map(|g| trace.record_gate(g));
        trace.push(TraceRecord {
            step,
            loss: loss_sum / count as f64,
            gate_mean: gate,
            gate_ema: ema,
            kv_grad_fraction: kv_fraction,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let mut t = TrainTrace::new();
        assert_eq!(t.record_gate(0.5), 0.5);
        assert!((t.record_gate(0.0) - 0.49).abs() < 1e-15);
        let mut c = TrainTrace::new();
        for _ in 0..50 {
            assert_eq!(c.record_gate(0.3), 0.3);
        }
    }

    #[test]
    fn starts_are_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = unroll_starts(40, 7, &mut rng);
            assert!(s[0] < 7);
            assert!(s.windows(2).all(|w| w[1] - w[0] == 7));
            assert!(s.iter().all(|&t| t + 7 < 40));
        }
        assert!(unroll_starts(7, 7, &mut rng).is_empty());
    }

    #[test]
    fn config_rules() {
        assert!(TTTConfig::default().validate().is_ok());
        assert!(TTTConfig { k: 0, ..TTTConfig::default() }.validate().is_err());
        assert!(TTTConfig { kv_grad_scale: 0.5, ..TTTConfig::default() }.validate().is_err());
    }
}
