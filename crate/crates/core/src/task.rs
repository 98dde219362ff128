//! A synthetic sentiment task small enough to train in seconds: short "reviews"
//! over a 16-token vocabulary whose mood drifts along a two-state Markov chain,
//! scored by a per-token valence table.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::oracle::{truncate_prompt, ValenceTable, DESK_TRUNCATION};
use crate::rng::{stream_rng, Stream};
use crate::vocab::{read_corpus, write_corpus, TokenSequence, Vocabulary};

pub const POSITIVE: [&str; 5] = ["good", "great", "fine", "love", "best"];
pub const NEGATIVE: [&str; 5] = ["bad", "awful", "poor", "hate", "worst"];
pub const NEUTRAL: [&str; 4] = ["the", "film", "plot", "acting"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub corpus_size: usize,
    pub pool_size: usize,
    pub eval_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the mood flips before each token.
    pub flip: f64,
    /// Probability that a token is neutral rather than carrying the mood.
    pub neutral: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            corpus_size: 4000,
            pool_size: 2048,
            eval_size: 512,
            min_len: 10,
            max_len: 20,
            flip: 0.15,
            neutral: 0.45,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(AplError::config("min_len", "need 1 <= min_len <= max_len"));
        }
        for (name, p) in [("flip", self.flip), ("neutral", self.neutral)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AplError::config(name, "must be a probability"));
            }
        }
        if self.pool_size == 0 || self.eval_size == 0 {
            return Err(AplError::config("pool_size", "pool and eval sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub vocab: Vocabulary,
    pub valence: ValenceTable,
    pub corpus: Vec<TokenSequence>,
    pub pool: Vec<TokenSequence>,
    pub eval: Vec<TokenSequence>,
}

/// `<bos> <eos>`, five positive (+1), five negative (−1) and four neutral (0) words.
pub fn valence_vocabulary() -> (Vocabulary, ValenceTable) {
    let mut tokens = vec!["<bos>".to_string(), "<eos>".to_string()];
    let mut values = vec![0.0, 0.0];
    for (words, v) in [(&POSITIVE[..], 1.0), (&NEGATIVE[..], -1.0), (&NEUTRAL[..], 0.0)] {
        for w in words {
            tokens.push(w.to_string());
            values.push(v);
        }
    }
    let vocab = Vocabulary::new(tokens, 0, 1).expect("static vocabulary is valid");
    let table = ValenceTable::new(values).expect("static valence table is valid");
    (vocab, table)
}

fn review<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskConfig, vocab: &Vocabulary) -> TokenSequence {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let mut positive = rng.gen::<bool>();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.gen::<f64>() < cfg.flip {
            positive = !positive;
        }
        let word = if rng.gen::<f64>() < cfg.neutral {
            NEUTRAL[rng.gen_range(0..NEUTRAL.len())]
        } else if positive {
            POSITIVE[rng.gen_range(0..POSITIVE.len())]
        } else {
            NEGATIVE[rng.gen_range(0..NEGATIVE.len())]
        };
        out.push(vocab.id(word).unwrap());
    }
    TokenSequence::new(out)
}

/// Pretraining corpus, a training prompt pool and held-out evaluation prompts.
/// Prompts are review prefixes of 4 to 8 tokens; evaluation prompts are unique
/// and never occur in the pool.
pub fn generate(cfg: &TaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let (vocab, valence) = valence_vocabulary();
    let mut rng = stream_rng(cfg.seed, Stream::Data, 0, 0);
    let corpus: Vec<TokenSequence> = (0..cfg.corpus_size).map(|_| review(&mut rng, cfg, &vocab)).collect();

    let mut rng = stream_rng(cfg.seed, Stream::Data, 1, 0);
    let mut pool = Vec::with_capacity(cfg.pool_size);
    for _ in 0..cfg.pool_size {
        let r = review(&mut rng, cfg, &vocab);
        pool.push(truncate_prompt(&r, &mut rng, DESK_TRUNCATION)?);
    }

    let mut rng = stream_rng(cfg.seed, Stream::Data, 2, 0);
    let mut seen: HashSet<TokenSequence> = pool.iter().cloned().collect();
    let mut eval = Vec::with_capacity(cfg.eval_size);
    let mut attempts = 0usize;
    while eval.len() < cfg.eval_size {
        attempts += 1;
        if attempts > 1000 * cfg.eval_size {
            return Err(AplError::invalid("could not draw enough distinct evaluation prompts"));
        }
        let r = review(&mut rng, cfg, &vocab);
        let p = truncate_prompt(&r, &mut rng, DESK_TRUNCATION)?;
        if seen.insert(p.clone()) {
            eval.push(p);
        }
    }
    Ok(SyntheticTask { vocab, valence, corpus, pool, eval })
}

impl SyntheticTask {
    /// Writes vocab.json, valence.json, corpus.txt, pool.txt and eval.txt.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        self.valence.save(&dir.join("valence.json"))?;
        write_corpus(&dir.join("corpus.txt"), &self.vocab, &self.corpus)?;
        write_corpus(&dir.join("pool.txt"), &self.vocab, &self.pool)?;
        write_corpus(&dir.join("eval.txt"), &self.vocab, &self.eval)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let valence = ValenceTable::load(&dir.join("valence.json"))?;
        if !valence.covers(vocab.len()) {
            return Err(AplError::invalid("valence table does not match the vocabulary"));
        }
        Ok(Self {
            corpus: read_corpus(&dir.join("corpus.txt"), &vocab)?,
            pool: read_corpus(&dir.join("pool.txt"), &vocab)?,
            eval: read_corpus(&dir.join("eval.txt"), &vocab)?,
            vocab,
            valence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskConfig {
        TaskConfig {
            corpus_size: 200,
            pool_size: 300,
            eval_size: 100,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn vocabulary_shape() {
        let (v, t) = valence_vocabulary();
        assert_eq!(v.len(), 16);
        assert_eq!(t.values.iter().filter(|&&x| x == 1.0).count(), 5);
        assert_eq!(t.values.iter().filter(|&&x| x == -1.0).count(), 5);
        assert_eq!(v.eos(), 1);
    }

    #[test]
    fn prompts_have_desk_lengths_and_eval_is_disjoint() {
        let task = generate(&small()).unwrap();
        assert_eq!(task.pool.len(), 300);
        assert_eq!(task.eval.len(), 100);
        for p in task.pool.iter().chain(&task.eval) {
            assert!((4..=8).contains(&p.len()), "{}", p.len());
        }
        let pool: HashSet<_> = task.pool.iter().collect();
        let eval: HashSet<_> = task.eval.iter().collect();
        assert!(pool.is_disjoint(&eval));
        assert_eq!(eval.len(), task.eval.len());
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&TaskConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.corpus, generate(&small()).unwrap().corpus);
    }

    #[test]
    fn mood_persists_between_neighbours() {
        let task = generate(&TaskConfig { corpus_size: 2000, ..small() }).unwrap();
        let sign = |t: u32| task.valence.values[t as usize];
        let (mut same, mut total) = (0usize, 0usize);
        for r in &task.corpus {
            let signed: Vec<f64> = r.tokens.iter().map(|&t| sign(t)).filter(|&v| v != 0.0).collect();
            for w in signed.windows(2) {
                total += 1;
                same += (w[0] == w[1]) as usize;
            }
        }
        assert!(same as f64 / total as f64 > 0.7);
    }

    #[test]
    fn save_load_round_trip() {
        let task = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        task.save(dir.path()).unwrap();
        assert_eq!(SyntheticTask::load(dir.path()).unwrap(), task);
    }
}
