//! Decoder-only target transformer with a key/value cache and hidden taps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, attend, causal_mask, linear};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of each key/value (and query) head.
    pub d_kv: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub max_seq_len: usize,
    pub qk_norm: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_kv: 8,
            d_ff: 128,
            rope_base: 10000.0,
            max_seq_len: 256,
            qk_norm: false,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_kv", self.d_kv),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_kv * self.n_heads > self.d_model {
            return Err(Error::Config(format!(
                "kv width {}x{} exceeds d_model {}",
                self.n_heads, self.d_kv, self.d_model
            )));
        }
        if self.d_kv % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head dim, got {}", self.d_kv)));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    /// Total key (or value) width of one layer: `n_heads · d_kv`.
    pub fn kv_width(&self) -> usize {
        self.n_heads * self.d_kv
    }
}

/// Uniformly spaced tap layers: `round_half_up(i·(L−1)/(L_s−1))`, or the
/// middle layer when a single tap is requested.
pub fn sample_tap_layers(n_layers: usize, n_taps: usize) -> Result<Vec<usize>> {
    if n_taps == 0 || n_taps > n_layers {
        return Err(Error::Config(format!(
            "cannot sample {n_taps} tap layers from {n_layers}"
        )));
    }
    if n_taps == 1 {
        return Ok(vec![n_layers / 2]);
    }
    let (num, den) = (n_layers - 1, n_taps - 1);
    Ok((0..n_taps).map(|i| (2 * i * num + den) / (2 * den)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<P> {
    pub attn_norm: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub q_norm: Option<P>,
    pub k_norm: Option<P>,
    pub mlp_norm: P,
    pub w_up: P,
    pub w_down: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetWeights<P> {
    pub embed: P,
    pub layers: Vec<LayerWeights<P>>,
    pub final_norm: P,
}

impl<P> LayerWeights<P> {
    fn params(&self) -> Vec<&P> {
        let mut v = vec![&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo];
        v.extend(self.q_norm.iter());
        v.extend(self.k_norm.iter());
        v.extend([&self.mlp_norm, &self.w_up, &self.w_down]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut P> {
        let mut v = vec![
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
        ];
        v.extend(self.q_norm.iter_mut());
        v.extend(self.k_norm.iter_mut());
        v.extend([&mut self.mlp_norm, &mut self.w_up, &mut self.w_down]);
        v
    }

    fn try_map<Q>(&self, f: &mut impl FnMut(&P) -> Result<Q>) -> Result<LayerWeights<Q>> {
        Ok(LayerWeights {
            attn_norm: f(&self.attn_norm)?,
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            q_norm: self.q_norm.as_ref().map(&mut *f).transpose()?,
            k_norm: self.k_norm.as_ref().map(&mut *f).transpose()?,
            mlp_norm: f(&self.mlp_norm)?,
            w_up: f(&self.w_up)?,
            w_down: f(&self.w_down)?,
        })
    }
}

impl<P> TargetWeights<P> {
    /// Parameters in declaration order.
    pub fn params(&self) -> Vec<&P> {
        let mut v = vec![&self.embed];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(&self.final_norm);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut v = vec![&mut self.embed];
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.push(&mut self.final_norm);
        v
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&P) -> Result<Q>) -> Result<TargetWeights<Q>> {
        Ok(TargetWeights {
            embed: f(&self.embed)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(&mut f))
                .collect::<Result<_>>()?,
            final_norm: f(&self.final_norm)?,
        })
    }
}

impl<T: Scalar> TargetWeights<Tensor<T>> {
    /// Puts every weight on the tape, tracked or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> TargetWeights<Var> {
        self.try_map(|p| Ok(tape.leaf(p.clone(), trainable)))
            .expect("binding cannot fail")
    }

    /// Rebuilds a weight set from a flat list in declaration order.
    pub fn from_flat(config: &TargetConfig, flat: Vec<Tensor<T>>) -> Result<Self> {
        let template = TargetWeights::<Tensor<T>>::zeros(config);
        let shapes: Vec<Vec<usize>> = template.params().iter().map(|p| p.shape().to_vec()).collect();
        if shapes.len() != flat.len() {
            return Err(Error::Format(format!(
                "expected {} target tensors, found {}",
                shapes.len(),
                flat.len()
            )));
        }
        for (s, t) in shapes.iter().zip(&flat) {
            if s.as_slice() != t.shape() {
                return Err(Error::Format(format!("tensor shape {:?}, expected {s:?}", t.shape())));
            }
        }
        let mut it = flat.into_iter();
        template.try_map(|_| Ok(it.next().expect("length checked")))
    }

    fn zeros(c: &TargetConfig) -> Self {
        let z = |s: &[usize]| Tensor::zeros(s);
        let (d, kw) = (c.d_model, c.kv_width());
        TargetWeights {
            embed: z(&[c.vocab_size, d]),
            layers: (0..c.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: z(&[d]),
                    wq: z(&[kw, d]),
                    wk: z(&[kw, d]),
                    wv: z(&[kw, d]),
                    wo: z(&[d, kw]),
                    q_norm: c.qk_norm.then(|| z(&[c.d_kv])),
                    k_norm: c.qk_norm.then(|| z(&[c.d_kv])),
                    mlp_norm: z(&[d]),
                    w_up: z(&[c.d_ff, d]),
                    w_down: z(&[d, c.d_ff]),
                })
                .collect(),
            final_norm: z(&[d]),
        }
    }
}

/// Per-layer, per-position keys (post-rotary), values and block outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    kv_width: usize,
    d_model: usize,
    len: usize,
    capacity: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(config: &TargetConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            hidden: vec![Vec::new(); config.n_layers],
            kv_width: config.kv_width(),
            d_model: config.d_model,
            len: 0,
            capacity: config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> Tensor<T> {
        Tensor::new(vec![self.len, self.kv_width], self.keys[layer].clone()).expect("cache shape")
    }

    pub fn values(&self, layer: usize) -> Tensor<T> {
        Tensor::new(vec![self.len, self.kv_width], self.values[layer].clone()).expect("cache shape")
    }

    /// Block outputs of `layer` for every cached position.
    pub fn hidden(&self, layer: usize) -> Tensor<T> {
        Tensor::new(vec![self.len, self.d_model], self.hidden[layer].clone()).expect("cache shape")
    }

    pub fn key_row(&self, layer: usize, pos: usize) -> &[T] {
        &self.keys[layer][pos * self.kv_width..(pos + 1) * self.kv_width]
    }

    pub fn value_row(&self, layer: usize, pos: usize) -> &[T] {
        &self.values[layer][pos * self.kv_width..(pos + 1) * self.kv_width]
    }

    pub fn hidden_row(&self, layer: usize, pos: usize) -> &[T] {
        &self.hidden[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Appends the given rows of a batched forward, in order.
    pub fn append(&mut self, out: &ExtendOutput<T>, rows: &[usize]) -> Result<()> {
        if self.len + rows.len() > self.capacity {
            return Err(Error::Capacity(format!(
                "cache holds {} of {} positions, cannot add {}",
                self.len,
                self.capacity,
                rows.len()
            )));
        }
        for l in 0..self.keys.len() {
            for &r in rows {
                self.keys[l].extend_from_slice(out.keys[l].row(r));
                self.values[l].extend_from_slice(out.values[l].row(r));
                self.hidden[l].extend_from_slice(out.hidden[l].row(r));
            }
        }
        self.len += rows.len();
        Ok(())
    }

    /// Truncates every layer to `len` positions.
    pub fn rollback(&mut self, len: usize) -> Result<()> {
        if len > self.len {
            return Err(Error::Contract(format!(
                "rollback to {len} beyond cache length {}",
                self.len
            )));
        }
        for l in 0..self.keys.len() {
            self.keys[l].truncate(len * self.kv_width);
            self.values[l].truncate(len * self.kv_width);
            self.hidden[l].truncate(len * self.d_model);
        }
        self.len = len;
        Ok(())
    }
}

/// Results of running a block of new tokens against a cache.
#[derive(Clone, Debug)]
pub struct ExtendOutput<T> {
    /// `[n, vocab]`.
    pub logits: Tensor<T>,
    /// Per layer `[n, kv_width]`.
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    /// Per layer `[n, d_model]`.
    pub hidden: Vec<Tensor<T>>,
}

/// Hidden states of the sampled layers at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTap<T> {
    pub layers: Vec<usize>,
    pub states: Vec<Vec<T>>,
}

/// One incremental decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub logits: Vec<T>,
    /// Block output of every layer.
    pub hidden: Vec<Vec<T>>,
}

impl<T: Scalar> StepOutput<T> {
    pub fn tap(&self, layers: &[usize]) -> HiddenTap<T> {
        HiddenTap {
            layers: layers.to_vec(),
            states: layers.iter().map(|&l| self.hidden[l].clone()).collect(),
        }
    }
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub hidden: Vec<Var>,
}

/// Runs `tokens` (at `positions`) through the stack.
///
/// `past` holds per-layer cached `(keys, values)`; `mask` is `[n × (past+n)]`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &TargetConfig,
    w: &TargetWeights<Var>,
    past: Option<&[(Var, Var)]>,
    tokens: &[usize],
    positions: &[usize],
    mask: &[bool],
) -> Result<TapeForward> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let (heads, dk) = (config.n_heads, config.d_kv);
    let mut x = tape.gather_rows(w.embed, tokens)?;
    let mut out = TapeForward {
        logits: x,
        keys: Vec::new(),
        values: Vec::new(),
        hidden: Vec::new(),
    };
    for (l, lw) in w.layers.iter().enumerate() {
        let xn = nn::rms_norm(tape, x, lw.attn_norm)?;
        let mut q = linear(tape, xn, lw.wq)?;
        let mut k = linear(tape, xn, lw.wk)?;
        let v = linear(tape, xn, lw.wv)?;
        if let (Some(qn), Some(kn)) = (lw.q_norm, lw.k_norm) {
            q = nn::head_rms_norm(tape, q, dk, qn)?;
            k = nn::head_rms_norm(tape, k, dk, kn)?;
        }
        let q = tape.rope(q, positions, dk, config.rope_base)?;
        let k = tape.rope(k, positions, dk, config.rope_base)?;
        let (ka, va) = match past {
            Some(p) if tape.value(p[l].0).len() > 0 => {
                (tape.concat_rows(&[p[l].0, k])?, tape.concat_rows(&[p[l].1, v])?)
            }
            _ => (k, v),
        };
        let a = attend(tape, q, ka, va, heads, dk, mask)?;
        let a = linear(tape, a, lw.wo)?;
        x = tape.add(x, a)?;
        let y = nn::rms_norm(tape, x, lw.mlp_norm)?;
        let m = nn::mlp(tape, y, lw.w_up, lw.w_down)?;
        x = tape.add(x, m)?;
        out.keys.push(k);
        out.values.push(v);
        out.hidden.push(x);
    }
    let xf = nn::rms_norm(tape, x, w.final_norm)?;
    out.logits = linear(tape, xf, w.embed)?;
    Ok(out)
}

/// A trained or freshly initialised target model.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel<T> {
    pub config: TargetConfig,
    pub weights: TargetWeights<Tensor<T>>,
}

impl<T: Scalar> TargetModel<T> {
    /// Gaussian projections (std 0.02, embeddings 0.1), unit norm gains.
    pub fn init(config: TargetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = TargetWeights::<Tensor<T>>::zeros(&config);
        let ones = |t: &Tensor<T>| Tensor::full(t.shape(), T::one());
        weights.embed = Tensor::randn(weights.embed.shape(), 0.1, &mut rng);
        for l in &mut weights.layers {
            l.attn_norm = ones(&l.attn_norm);
            l.mlp_norm = ones(&l.mlp_norm);
            if let Some(g) = l.q_norm.as_mut() {
                *g = ones(g);
            }
            if let Some(g) = l.k_norm.as_mut() {
                *g = ones(g);
            }
            for p in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w_up, &mut l.w_down] {
                *p = Tensor::randn(p.shape(), 0.02, &mut rng);
            }
        }
        weights.final_norm = ones(&weights.final_norm);
        Ok(Self { config, weights })
    }

    pub fn new_cache(&self) -> KVCache<T> {
        KVCache::new(&self.config)
    }

    /// Scores `tokens` at `positions` against the cache without modifying it.
    /// `mask` is `[n × (cache.len() + n)]`.
    pub fn extend(
        &self,
        cache: &KVCache<T>,
        tokens: &[usize],
        positions: &[usize],
        mask: &[bool],
    ) -> Result<ExtendOutput<T>> {
        let n = tokens.len();
        if positions.len() != n || mask.len() != n * (cache.len() + n) {
            return Err(Error::Dimension {
                op: "extend",
                lhs: vec![n, positions.len()],
                rhs: vec![mask.len()],
            });
        }
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.max_seq_len {
                return Err(Error::Capacity(format!(
                    "position {p} beyond max_seq_len {}",
                    self.config.max_seq_len
                )));
            }
        }
        let mut tape = Tape::new();
        let w = self.weights.bind(&mut tape, false);
        let past: Vec<(Var, Var)> = (0..cache.n_layers())
            .map(|l| (tape.constant(cache.keys(l)), tape.constant(cache.values(l))))
            .collect();
        let f = forward_on_tape(&mut tape, &self.config, &w, Some(&past), tokens, positions, mask)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(ExtendOutput {
            logits: tape.value(f.logits).clone(),
            keys: grab(&f.keys),
            values: grab(&f.values),
            hidden: grab(&f.hidden),
        })
    }

    /// Appends `tokens` causally to the cache and returns their outputs.
    pub fn prefill(&self, cache: &mut KVCache<T>, tokens: &[usize]) -> Result<ExtendOutput<T>> {
        let start = cache.len();
        if start + tokens.len() > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "{} cached + {} new exceeds max_seq_len {}",
                start,
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let out = self.extend(cache, tokens, &positions, &causal_mask(start, tokens.len()))?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        cache.append(&out, &rows)?;
        Ok(out)
    }

    /// Feeds one token and extends the cache by one position.
    pub fn forward_step(&self, token: usize, cache: &mut KVCache<T>) -> Result<StepOutput<T>> {
        if token >= self.config.vocab_size {
            return Err(Error::Input(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if cache.len() >= self.config.max_seq_len {
            return Err(Error::Capacity(format!("cache full at {}", cache.len())));
        }
        let out = self.prefill(cache, &[token])?;
        Ok(StepOutput {
            logits: out.logits.row(0).to_vec(),
            hidden: out.hidden.iter().map(|h| h.row(0).to_vec()).collect(),
        })
    }

    /// Cache-free logits for every position of `tokens`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut cache = self.new_cache();
        Ok(self.prefill(&mut cache, tokens)?.logits)
    }

    /// `n` argmax continuations of `prompt` (ties to the lowest id).
    pub fn greedy_decode(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        if prompt.len() + n > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "prompt {} + {n} tokens exceeds max_seq_len {}",
                prompt.len(),
                self.config.max_seq_len
            )));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut cache = self.new_cache();
        let out = self.prefill(&mut cache, prompt)?;
        let mut next = nn::argmax(out.logits.row(prompt.len() - 1));
        let mut generated = vec![next];
        while generated.len() < n {
            let step = self.forward_step(next, &mut cache)?;
            next = nn::argmax(&step.logits);
            generated.push(next);
        }
        Ok(generated)
    }
}

/// Optimisation settings for the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip: f64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 3e-3,
            batch: 8,
            seed: 0,
            clip: 1.0,
        }
    }
}

/// Mean next-token cross-entropy of one batch, recorded on `tape`.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &TargetConfig,
    w: &TargetWeights<Var>,
    batch: &[&[usize]],
) -> Result<Var> {
    let mut losses = Vec::with_capacity(batch.len());
    let mut count = 0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let inputs = &seq[..seq.len() - 1];
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let mask = causal_mask(0, inputs.len());
        let f = forward_on_tape(tape, config, w, None, inputs, &positions, &mask)?;
        losses.push(tape.cross_entropy(f.logits, &seq[1..])?);
        count += inputs.len();
    }
    if losses.is_empty() {
        return Err(Error::Input("batch has no sequence of length ≥ 2".into()));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    tape.scale(total, T::one() / T::of(count as f64))
}

/// Trains `model` with Adam on shuffled mini-batches. Returns the per-step
/// losses.
pub fn train_target<T: Scalar>(
    model: &mut TargetModel<T>,
    corpus: &[Vec<usize>],
    cfg: &TargetTrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > model.config.max_seq_len + 1) {
        return Err(Error::Capacity(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            s.len(),
            model.config.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, Some(cfg.clip));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].as_slice());
            cursor += 1;
        }
        let mut tape = Tape::new();
        let w = model.weights.bind(&mut tape, true);
        let loss = batch_loss(&mut tape, &model.config, &w, &batch)?;
        let value = tape.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor<T>> = w.params().iter().map(|&&v| tape.grad_or_zeros(v)).collect();
        opt.update(&mut model.weights.params_mut(), &grads);
        losses.push(value);
    }
    Ok(losses)
}
