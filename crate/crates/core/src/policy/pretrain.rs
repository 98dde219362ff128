use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Arch, PolicyParams, EOS};
use crate::error::{AplError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream_rng, Stream};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::default(),
            epochs: 20,
            lr: 1e-2,
            minibatch: 32,
            seed: 0,
        }
    }
}

fn with_eos(seq: &TokenSequence) -> TokenSequence {
    let mut tokens = seq.tokens.clone();
    if tokens.last() != Some(&EOS) {
        tokens.push(EOS);
    }
    TokenSequence::terminated(tokens)
}

/// Mean per-token negative log-likelihood of the corpus (each line scored as a
/// completion of the empty prompt, EOS appended).
pub fn mean_nll(params: &PolicyParams, corpus: &[TokenSequence]) -> Result<f64> {
    let empty = TokenSequence::default();
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in corpus {
        let s = with_eos(s);
        nll -= params.logprob(&empty, &s)?;
        n += s.len();
    }
    Ok(nll / n.max(1) as f64)
}

/// Maximum-likelihood next-token training from a seeded initialization.
pub fn pretrain(corpus: &[TokenSequence], cfg: &PretrainConfig) -> Result<PolicyParams> {
    if corpus.is_empty() {
        return Err(AplError::invalid("pretraining corpus is empty"));
    }
    if cfg.minibatch == 0 {
        return Err(AplError::invalid("minibatch must be positive"));
    }
    let init = PolicyParams::init(cfg.arch, cfg.seed);
    let seqs: Vec<TokenSequence> = corpus.iter().map(with_eos).collect();
    for s in &seqs {
        s.check(cfg.arch.vocab)?;
    }
    let empty = TokenSequence::default();
    let mut values = init.into_values();
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..Default::default() },
        values.len(),
    );
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, Stream::Shuffling, epoch as u64, 0);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let params = PolicyParams::from_values(cfg.arch, values.clone())?;
            let tokens: usize = chunk.iter().map(|&i| seqs[i].len()).sum();
            let mut grad = vec![0.0; values.len()];
            // minimize per-token NLL: gradient of -Σ logprob / tokens
            let scale = -1.0 / tokens as f64;
            for &i in chunk {
                params.accumulate_grad_logprob(&empty, &seqs[i], scale, &mut grad)?;
            }
            adam.step(&mut values, &grad);
        }
        log::debug!("pretrain epoch {epoch} done");
    }
    PolicyParams::from_values(cfg.arch, values)
}
