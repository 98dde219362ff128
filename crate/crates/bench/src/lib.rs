//! Shared fixtures for the benches.

use apl_core::dpo::PreferencePair;
use apl_core::policy::{pretrain, PretrainConfig};
use apl_core::task::{generate, SyntheticTask, TaskConfig};
use apl_core::{PolicyParams, SamplingConfig, TokenSequence};

pub struct Fixture {
    pub task: SyntheticTask,
    pub theta0: PolicyParams,
}

/// Default vocabulary and architecture, trained briefly on a small corpus.
pub fn fixture() -> Fixture {
    let task = generate(&TaskConfig {
        corpus_size: 500,
        pool_size: 512,
        eval_size: 64,
        ..TaskConfig::default()
    })
    .expect("task");
    let theta0 = pretrain(
        &task.corpus,
        &PretrainConfig {
            epochs: 2,
            ..PretrainConfig::default()
        },
    )
    .expect("pretrain");
    Fixture { task, theta0 }
}

/// `n` pairs built from sampled completions of pool prompts.
pub fn pairs(f: &Fixture, n: usize) -> Vec<PreferencePair> {
    let sample = |prompt: &TokenSequence, seed: u64| {
        f.theta0
            .sample(
                prompt,
                &SamplingConfig {
                    temperature: 1.0,
                    max_tokens: 8,
                    seed,
                },
            )
            .expect("sample")
    };
    f.task
        .pool
        .iter()
        .cycle()
        .take(n)
        .enumerate()
        .map(|(i, p)| PreferencePair::new(p.clone(), sample(p, 2 * i as u64), sample(p, 2 * i as u64 + 1)))
        .collect()
}
