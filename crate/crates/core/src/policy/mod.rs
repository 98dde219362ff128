//! Windowed feed-forward autoregressive policy.
//!
//! The next-token distribution at every position is computed from the `k` most
//! recent tokens (left-padded with BOS): their embeddings are concatenated, passed
//! through one tanh hidden layer and a linear read-out over the vocabulary.
//!
//! Parameters live in one flat `Vec<f64>` laid out as
//! `[embedding (V×d) | w1 (h×k·d) | b1 (h) | w2 (V×h) | b2 (V)]`, all row-major.
//! By convention token 0 is BOS and token 1 is EOS.

mod checkpoint;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pretrain::{mean_nll, pretrain, PretrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::rng::rng_from_seed;
use crate::vocab::{TokenId, TokenSequence};

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub vocab: usize,
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            vocab: 16,
            context: 4,
            embed: 16,
            hidden: 32,
        }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub embedding: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub total: usize,
}

impl Arch {
    pub fn new(vocab: usize, context: usize, embed: usize, hidden: usize) -> Result<Self> {
        let arch = Self { vocab, context, embed, hidden };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(AplError::invalid("vocabulary size must be at least 2"));
        }
        if self.context == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(AplError::invalid("context, embed and hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.context * self.embed
    }

    pub fn layout(&self) -> Layout {
        let embedding = 0;
        let w1 = embedding + self.vocab * self.embed;
        let b1 = w1 + self.hidden * self.input_width();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.vocab * self.hidden;
        let total = b2 + self.vocab;
        Layout { embedding, w1, b1, w2, b2, total }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Immutable parameter vector plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Arch,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(AplError::invalid(format!(
                "expected {} parameters for {:?}, got {}",
                arch.param_count(),
                arch,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AplError::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arch) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    /// Seeded uniform(−0.08, 0.08) initialization.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let values = (0..arch.param_count())
            .map(|_| rng.gen_range(-0.08..0.08))
            .collect();
        Self { arch, values }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_arch(&self, other: &PolicyParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(AplError::invalid(format!(
                "architecture mismatch: {:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(AplError::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(())
    }

    fn check_inputs(&self, prompt: &TokenSequence, completion: &TokenSequence) -> Result<()> {
        if completion.is_empty() {
            return Err(AplError::invalid("completion must be nonempty"));
        }
        prompt.check(self.arch.vocab)?;
        completion.check(self.arch.vocab)?;
        self.check_finite()
    }

    /// Total log-probability of `completion` given `prompt`: the sum of per-token
    /// log-probabilities, including the EOS emission when the completion carries one.
    pub fn logprob(&self, prompt: &TokenSequence, completion: &TokenSequence) -> Result<f64> {
        self.check_inputs(prompt, completion)?;
        let mut ws = Workspace::new(&self.arch);
        let full = concat(prompt, completion);
        let start = prompt.len();
        let mut total = 0.0;
        for pos in start..full.len() {
            self.forward(&full, pos, &mut ws);
            total += log_softmax_at(&ws.logits, full[pos] as usize);
        }
        Ok(total)
    }

    pub fn grad_logprob(&self, prompt: &TokenSequence, completion: &TokenSequence) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.values.len()];
        self.accumulate_grad_logprob(prompt, completion, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale · ∂logprob/∂θ` into `grad` and returns the log-probability.
    pub fn accumulate_grad_logprob(
        &self,
        prompt: &TokenSequence,
        completion: &TokenSequence,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_inputs(prompt, completion)?;
        assert_eq!(grad.len(), self.values.len());
        let mut ws = Workspace::new(&self.arch);
        let full = concat(prompt, completion);
        let mut total = 0.0;
        for pos in prompt.len()..full.len() {
            self.forward(&full, pos, &mut ws);
            let target = full[pos] as usize;
            total += log_softmax_at(&ws.logits, target);
            softmax_into(&ws.logits, 1.0, &mut ws.probs);
            // d log p[target] / d logits = onehot(target) - p
            for (j, g) in ws.dlogits.iter_mut().enumerate() {
                *g = scale * ((j == target) as u8 as f64 - ws.probs[j]);
            }
            self.backward(&mut ws, grad);
        }
        Ok(total)
    }

    /// Next-token logits at `pos` of `full` (the context is `full[pos-k..pos]`).
    pub fn next_logits(&self, full: &[TokenId], pos: usize) -> Vec<f64> {
        let mut ws = Workspace::new(&self.arch);
        self.forward(full, pos, &mut ws);
        ws.logits
    }

    /// Next-token distribution at `pos` of `full`.
    pub fn next_probs(&self, full: &[TokenId], pos: usize) -> Vec<f64> {
        let logits = self.next_logits(full, pos);
        let mut p = vec![0.0; logits.len()];
        softmax_into(&logits, 1.0, &mut p);
        p
    }

    pub fn sample(&self, prompt: &TokenSequence, cfg: &SamplingConfig) -> Result<TokenSequence> {
        let mut rng = rng_from_seed(cfg.seed);
        self.sample_with(prompt, cfg.temperature, cfg.max_tokens, &mut rng)
    }

    /// Ancestral sampling from softmax(logits / temperature); temperature 0 is greedy
    /// (lowest index on ties). Stops at EOS or after `max_tokens` tokens.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        prompt: &TokenSequence,
        temperature: f64,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(AplError::invalid("temperature must be finite and nonnegative"));
        }
        if max_tokens == 0 {
            return Err(AplError::invalid("max_tokens must be positive"));
        }
        prompt.check(self.arch.vocab)?;
        self.check_finite()?;
        let mut ws = Workspace::new(&self.arch);
        let mut full = prompt.tokens.clone();
        let start = full.len();
        for _ in 0..max_tokens {
            let pos = full.len();
            self.forward(&full, pos, &mut ws);
            let next = if temperature == 0.0 {
                argmax(&ws.logits)
            } else {
                softmax_into(&ws.logits, temperature, &mut ws.probs);
                draw(&ws.probs, rng.gen::<f64>())
            };
            full.push(next as TokenId);
            if next as TokenId == EOS {
                break;
            }
        }
        Ok(TokenSequence::terminated(full.split_off(start)))
    }

    fn forward(&self, full: &[TokenId], pos: usize, ws: &mut Workspace) {
        let a = &self.arch;
        let l = a.layout();
        let p = &self.values;
        let (k, d, h, v) = (a.context, a.embed, a.hidden, a.vocab);
        for j in 0..k {
            let tok = context_token(full, pos, k, j) as usize;
            let row = &p[l.embedding + tok * d..l.embedding + (tok + 1) * d];
            ws.ctx[j] = tok as TokenId;
            ws.x[j * d..(j + 1) * d].copy_from_slice(row);
        }
        let kd = k * d;
        for u in 0..h {
            let w = &p[l.w1 + u * kd..l.w1 + (u + 1) * kd];
            let s: f64 = w.iter().zip(&ws.x).map(|(a, b)| a * b).sum();
            ws.z[u] = (s + p[l.b1 + u]).tanh();
        }
        for o in 0..v {
            let w = &p[l.w2 + o * h..l.w2 + (o + 1) * h];
            let s: f64 = w.iter().zip(&ws.z).map(|(a, b)| a * b).sum();
            ws.logits[o] = s + p[l.b2 + o];
        }
    }

    // Consumes ws.dlogits (upstream gradient on the logits of the last forward).
    fn backward(&self, ws: &mut Workspace, grad: &mut [f64]) {
        let a = &self.arch;
        let l = a.layout();
        let p = &self.values;
        let (k, d, h, v) = (a.context, a.embed, a.hidden, a.vocab);
        let kd = k * d;
        ws.dz.iter_mut().for_each(|x| *x = 0.0);
        for o in 0..v {
            let g = ws.dlogits[o];
            if g == 0.0 {
                continue;
            }
            grad[l.b2 + o] += g;
            let row = l.w2 + o * h;
            for u in 0..h {
                grad[row + u] += g * ws.z[u];
                ws.dz[u] += g * p[row + u];
            }
        }
        ws.dx.iter_mut().for_each(|x| *x = 0.0);
        for u in 0..h {
            let da = ws.dz[u] * (1.0 - ws.z[u] * ws.z[u]);
            if da == 0.0 {
                continue;
            }
            grad[l.b1 + u] += da;
            let row = l.w1 + u * kd;
            for i in 0..kd {
                grad[row + i] += da * ws.x[i];
                ws.dx[i] += da * p[row + i];
            }
        }
        for j in 0..k {
            let tok = ws.ctx[j] as usize;
            let dst = l.embedding + tok * d;
            for e in 0..d {
                grad[dst + e] += ws.dx[j * d + e];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

struct Workspace {
    ctx: Vec<TokenId>,
    x: Vec<f64>,
    z: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    dz: Vec<f64>,
    dx: Vec<f64>,
}

impl Workspace {
    fn new(a: &Arch) -> Self {
        Self {
            ctx: vec![BOS; a.context],
            x: vec![0.0; a.input_width()],
            z: vec![0.0; a.hidden],
            logits: vec![0.0; a.vocab],
            probs: vec![0.0; a.vocab],
            dlogits: vec![0.0; a.vocab],
            dz: vec![0.0; a.hidden],
            dx: vec![0.0; a.input_width()],
        }
    }
}

fn concat(prompt: &TokenSequence, completion: &TokenSequence) -> Vec<TokenId> {
    let mut full = Vec::with_capacity(prompt.len() + completion.len());
    full.extend_from_slice(&prompt.tokens);
    full.extend_from_slice(&completion.tokens);
    full
}

/// Token in slot `j` (oldest first) of the window preceding `pos`, BOS-padded.
fn context_token(full: &[TokenId], pos: usize, k: usize, j: usize) -> TokenId {
    let offset = pos as isize - k as isize + j as isize;
    if offset < 0 {
        BOS
    } else {
        full[offset as usize]
    }
}

pub(crate) fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
