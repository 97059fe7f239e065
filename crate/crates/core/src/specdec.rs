//! Draft trees, greedy tree verification and the lossless decode loop.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafter::{DraftSession, Drafter};
use crate::error::{Error, Result};
use crate::metrics::AcceptanceStats;
use crate::model::{KVCache, TargetModel};
use crate::nn::{argmax, log_softmax};
use crate::scalar::Scalar;

/// Shape of a draft tree: maximum depth, children per node, total nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub depth: usize,
    pub topk: usize,
    pub budget: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            topk: 4,
            budget: 16,
        }
    }
}

impl TreeConfig {
    pub fn new(depth: usize, topk: usize, budget: usize) -> Result<Self> {
        let c = Self { depth, topk, budget };
        c.validate()?;
        Ok(c)
    }

    /// A single greedy chain of `depth` tokens.
    pub fn chain(depth: usize) -> Self {
        Self {
            depth,
            topk: 1,
            budget: depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.topk == 0 || self.budget < self.depth {
            return Err(Error::Config(format!(
                "tree ({}, {}, {}) needs depth ≥ 1, topk ≥ 1, budget ≥ depth",
                self.depth, self.topk, self.budget
            )));
        }
        Ok(())
    }
}

impl FromStr for TreeConfig {
    type Err = Error;

    /// Parses `D,K,B`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| Error::Config(format!("bad tree shape {s:?}"))))
            .collect::<Result<_>>()?;
        match nums[..] {
            [d, k, b] => Self::new(d, k, b),
            _ => Err(Error::Config(format!("tree shape {s:?} is not D,K,B"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    pub token: usize,
    /// Index of the parent node; `None` for children of the root.
    pub parent: Option<usize>,
    /// 1 for children of the root.
    pub depth: usize,
    /// Sum of draft log-probabilities along the path.
    pub logprob: f64,
}

/// Candidate continuations of the last verified token. Nodes are stored so
/// that every parent precedes its children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    pub root_token: usize,
    pub root_position: usize,
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn children(&self, parent: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == parent)
            .map(|(i, _)| i)
    }

    /// Node indices from the root's child down to `node`.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut p = vec![node];
        while let Some(parent) = self.nodes[*p.last().unwrap()].parent {
            p.push(parent);
        }
        p.reverse();
        p
    }
}

/// Something that proposes draft tokens.
///
/// `begin_round` sees the verified state (cache without the pending root,
/// `tokens` including it) and returns logits for the root's successor.
/// `expand` adds one speculative row per `(parent handle, token)` and returns
/// a handle and successor logits for each; root children have no parent.
pub trait Proposer<T: Scalar> {
    fn begin_round(&mut self, target: &TargetModel<T>, cache: &KVCache<T>, tokens: &[usize]) -> Result<Vec<T>>;

    fn expand(&mut self, target: &TargetModel<T>, nodes: &[(Option<usize>, usize)]) -> Result<Vec<(usize, Vec<T>)>>;

    /// The `k` best next tokens with their log-probabilities, best first.
    fn top_candidates(&mut self, logits: &[T], k: usize) -> Vec<(usize, f64)> {
        top_k_logprobs(logits, k)
    }
}

/// Highest log-probabilities first, ties to the lower token id.
pub fn top_k_logprobs<T: Scalar>(logits: &[T], k: usize) -> Vec<(usize, f64)> {
    let lp = log_softmax(logits);
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, lp[i].as_f64())).collect()
}

/// A trained drafter driven through an incremental session.
pub struct DrafterProposer<'a, T> {
    pub drafter: &'a Drafter<T>,
    session: DraftSession<T>,
}

impl<'a, T: Scalar> DrafterProposer<'a, T> {
    pub fn new(drafter: &'a Drafter<T>) -> Self {
        Self {
            drafter,
            session: DraftSession::new(drafter),
        }
    }
}

impl<T: Scalar> Proposer<T> for DrafterProposer<'_, T> {
    fn begin_round(&mut self, target: &TargetModel<T>, cache: &KVCache<T>, tokens: &[usize]) -> Result<Vec<T>> {
        self.session.sync(self.drafter, target, cache, tokens)
    }

    fn expand(&mut self, target: &TargetModel<T>, nodes: &[(Option<usize>, usize)]) -> Result<Vec<(usize, Vec<T>)>> {
        self.session.expand(self.drafter, target, nodes)
    }
}

/// Constant logits; ranking ties are broken by a seeded shuffle, so the top
/// token is uniform over the vocabulary.
pub struct UniformProposer {
    vocab: usize,
    rng: ChaCha8Rng,
    handles: usize,
}

impl UniformProposer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            rng: ChaCha8Rng::seed_from_u64(seed),
            handles: 0,
        }
    }
}

impl<T: Scalar> Proposer<T> for UniformProposer {
    fn begin_round(&mut self, _: &TargetModel<T>, _: &KVCache<T>, _: &[usize]) -> Result<Vec<T>> {
        self.handles = 0;
        Ok(vec![T::zero(); self.vocab])
    }

    fn expand(&mut self, _: &TargetModel<T>, nodes: &[(Option<usize>, usize)]) -> Result<Vec<(usize, Vec<T>)>> {
        let out = (0..nodes.len()).map(|i| (self.handles + i, vec![T::zero(); self.vocab])).collect();
        self.handles += nodes.len();
        Ok(out)
    }

    fn top_candidates(&mut self, logits: &[T], k: usize) -> Vec<(usize, f64)> {
        let lp = log_softmax(logits);
        let mut idx: Vec<usize> = (0..lp.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal));
        idx.into_iter().take(k).map(|i| (i, lp[i].as_f64())).collect()
    }
}

/// Proposes with the target itself, recomputing every path from the cache.
pub struct OracleProposer<T> {
    base: Option<KVCache<T>>,
    paths: Vec<Vec<usize>>,
}

impl<T: Scalar> Default for OracleProposer<T> {
    fn default() -> Self {
        Self {
            base: None,
            paths: Vec::new(),
        }
    }
}

impl<T: Scalar> Proposer<T> for OracleProposer<T> {
    fn begin_round(&mut self, target: &TargetModel<T>, cache: &KVCache<T>, tokens: &[usize]) -> Result<Vec<T>> {
        let root = *tokens.last().ok_or_else(|| Error::Input("empty context".into()))?;
        let mut base = cache.clone();
        let step = target.forward_step(root, &mut base)?;
        self.base = Some(base);
        self.paths.clear();
        Ok(step.logits)
    }

    fn expand(&mut self, target: &TargetModel<T>, nodes: &[(Option<usize>, usize)]) -> Result<Vec<(usize, Vec<T>)>> {
        let base = self.base.as_ref().ok_or_else(|| Error::Contract("expand before begin_round".into()))?;
        let mut out = Vec::with_capacity(nodes.len());
        for &(parent, token) in nodes {
            let mut path = match parent {
                Some(p) => self.paths.get(p).cloned().ok_or_else(|| Error::Contract(format!("unknown handle {p}")))?,
                None => Vec::new(),
            };
            path.push(token);
            let mut cache = base.clone();
            let ext = target.prefill(&mut cache, &path)?;
            out.push((self.paths.len(), ext.logits.row(path.len() - 1).to_vec()));
            self.paths.push(path);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    logprob: f64,
    depth: usize,
    token: usize,
    order: usize,
    parent: Option<usize>,
}

/// Best candidate first: higher cumulative log-prob, then shallower, then
/// lower token id, then earlier creation.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then(a.depth.cmp(&b.depth))
        .then(a.token.cmp(&b.token))
        .then(a.order.cmp(&b.order))
}

/// Grows a tree best-first: each accepted node offers its top-k children as
/// candidates, and the best open candidate is added until the budget is
/// spent. `cache` holds every verified token except the last (`tokens` ends
/// with the pending root).
pub fn build_draft_tree<T: Scalar, P: Proposer<T> + ?Sized>(
    proposer: &mut P,
    target: &TargetModel<T>,
    cache: &KVCache<T>,
    tokens: &[usize],
    cfg: &TreeConfig,
) -> Result<DraftTree> {
    cfg.validate()?;
    let root_token = *tokens.last().ok_or_else(|| Error::Input("empty context".into()))?;
    let root_logits = proposer.begin_round(target, cache, tokens)?;
    let mut tree = DraftTree {
        root_token,
        root_position: cache.len(),
        nodes: Vec::new(),
    };
    let mut open: Vec<Candidate> = Vec::new();
    let mut order = 0;
    let mut offer = |open: &mut Vec<Candidate>, cands: Vec<(usize, f64)>, parent: Option<usize>, base: f64, depth: usize| {
        for (token, lp) in cands {
            open.push(Candidate {
                logprob: base + lp,
                depth,
                token,
                order,
                parent,
            });
            order += 1;
        }
    };
    let first = proposer.top_candidates(&root_logits, cfg.topk);
    offer(&mut open, first, None, 0.0, 1);
    let mut handles: Vec<Option<usize>> = Vec::new();
    while tree.nodes.len() < cfg.budget && !open.is_empty() {
        let best = (0..open.len())
            .min_by(|&a, &b| rank(&open[a], &open[b]))
            .expect("non-empty");
        let c = open.swap_remove(best);
        let id = tree.nodes.len();
        tree.nodes.push(DraftNode {
            token: c.token,
            parent: c.parent,
            depth: c.depth,
            logprob: c.logprob,
        });
        handles.push(None);
        if c.depth < cfg.depth && tree.nodes.len() < cfg.budget {
            let parent_handle = match c.parent {
                Some(p) => Some(handles[p].ok_or_else(|| Error::Contract("parent row missing".into()))?),
                None => None,
            };
            let (h, logits) = proposer
                .expand(target, &[(parent_handle, c.token)])?
                .pop()
                .ok_or_else(|| Error::Contract("proposer returned no row".into()))?;
            handles[id] = Some(h);
            let cands = proposer.top_candidates(&logits, cfg.topk);
            offer(&mut open, cands, Some(id), c.logprob, c.depth + 1);
        }
    }
    Ok(tree)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// Accepted draft tokens, root side first.
    pub accepted: Vec<usize>,
    pub accepted_nodes: Vec<usize>,
    /// The target's argmax after the accepted path.
    pub bonus: usize,
}

/// Tree-structured causal mask for `[root, nodes…]` on top of `past` cached
/// positions.
pub fn tree_mask(tree: &DraftTree, past: usize) -> Vec<bool> {
    let n = tree.nodes.len() + 1;
    let total = past + n;
    let mut mask = vec![false; n * total];
    for r in 0..n {
        let row = &mut mask[r * total..(r + 1) * total];
        row[..=past].fill(true);
        if r > 0 {
            for i in tree.path(r - 1) {
                row[past + 1 + i] = true;
            }
        }
    }
    mask
}

/// Scores the root and every node in one batched target pass, accepts the
/// longest path whose tokens match the target's argmax, and commits the root
/// and that path to the cache.
pub fn verify_tree<T: Scalar>(target: &TargetModel<T>, tree: &DraftTree, cache: &mut KVCache<T>) -> Result<VerificationResult> {
    if tree.root_position != cache.len() {
        return Err(Error::Contract(format!(
            "tree rooted at {} but cache holds {}",
            tree.root_position,
            cache.len()
        )));
    }
    let t = cache.len();
    let mut tokens = vec![tree.root_token];
    tokens.extend(tree.nodes.iter().map(|n| n.token));
    let mut positions = vec![t];
    positions.extend(tree.nodes.iter().map(|n| t + n.depth));
    let out = target.extend(cache, &tokens, &positions, &tree_mask(tree, t))?;
    let mut rows = vec![0];
    let mut accepted = Vec::new();
    let mut accepted_nodes = Vec::new();
    let mut cur: Option<usize> = None;
    loop {
        let row = cur.map_or(0, |c| c + 1);
        let want = argmax(out.logits.row(row));
        match tree.children(cur).find(|&c| tree.nodes[c].token == want) {
            Some(c) => {
                accepted.push(want);
                accepted_nodes.push(c);
                rows.push(c + 1);
                cur = Some(c);
            }
            None => {
                cache.append(&out, &rows)?;
                return Ok(VerificationResult {
                    accepted,
                    accepted_nodes,
                    bonus: want,
                });
            }
        }
    }
}

/// One verification round of a decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub proposed: Vec<usize>,
    pub accepted_len: usize,
    pub bonus_token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// The `n` generated tokens (prompt excluded).
    pub tokens: Vec<usize>,
    pub stats: AcceptanceStats,
    pub rounds: Vec<RoundRecord>,
}

impl DecodeOutput {
    /// Mean tokens gained per verification round.
    pub fn tokens_per_round(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        let total: usize = self.rounds.iter().map(|r| r.accepted_len + 1).sum();
        total as f64 / self.rounds.len() as f64
    }
}

/// Generates `n` tokens after `prompt`; the output equals greedy decoding.
pub fn spec_decode<T: Scalar, P: Proposer<T> + ?Sized>(
    target: &TargetModel<T>,
    proposer: &mut P,
    prompt: &[usize],
    n: usize,
    cfg: &TreeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if prompt.len() + n > target.config.max_seq_len {
        return Err(Error::Capacity(format!(
            "prompt {} + {n} tokens exceeds max_seq_len {}",
            prompt.len(),
            target.config.max_seq_len
        )));
    }
    let mut cache = target.new_cache();
    if prompt.len() > 1 {
        target.prefill(&mut cache, &prompt[..prompt.len() - 1])?;
    }
    let mut seq = prompt.to_vec();
    let mut stats = AcceptanceStats::new(cfg.depth);
    let mut rounds = Vec::new();
    while seq.len() - prompt.len() < n {
        let remaining = n - (seq.len() - prompt.len());
        let depth = cfg.depth.min(remaining - 1);
        let tree = if depth == 0 {
            DraftTree {
                root_token: *seq.last().unwrap(),
                root_position: cache.len(),
                nodes: Vec::new(),
            }
        } else {
            let round_cfg = TreeConfig {
                depth,
                topk: cfg.topk,
                budget: cfg.budget.max(depth),
            };
            build_draft_tree(proposer, target, &cache, &seq, &round_cfg)?
        };
        let v = verify_tree(target, &tree, &mut cache)?;
        if depth > 0 {
            stats.record(v.accepted.len(), tree.max_depth());
        }
        rounds.push(RoundRecord {
            round: rounds.len(),
            proposed: tree.nodes.iter().map(|n| n.token).collect(),
            accepted_len: v.accepted.len(),
            bonus_token: v.bonus,
        });
        seq.extend_from_slice(&v.accepted);
        seq.push(v.bonus);
    }
    Ok(DecodeOutput {
        tokens: seq[prompt.len()..].to_vec(),
        stats,
        rounds,
    })
}

pub fn write_transcript(path: &Path, rounds: &[RoundRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rounds {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
