#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::policy::{Arch, EOS};

fn seq(t: &[u32]) -> TokenSequence {
    TokenSequence::new(t.to_vec())
}

fn random_params(arch: Arch, seed: u64, scale: f64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PolicyParams::from_values(arch, (0..arch.param_count()).map(|_| rng.gen_range(-scale..scale)).collect())
        .unwrap()
}

/// Exact entropy of completions of length ≤ 2 by exhaustive enumeration.
fn exact_entropy_len2(p: &PolicyParams, prompt: &[u32]) -> f64 {
    let v = p.arch().vocab;
    let mut h = 0.0;
    let first = p.next_probs(prompt, prompt.len());
    for t in 0..v {
        if t as u32 == EOS {
            h -= first[t] * first[t].ln();
            continue;
        }
        let mut ctx = prompt.to_vec();
        ctx.push(t as u32);
        let second = p.next_probs(&ctx, ctx.len());
        for u in 0..v {
            let pr = first[t] * second[u];
            if pr > 0.0 {
                h -= pr * pr.ln();
            }
        }
    }
    h
}

#[test]
fn uniform_single_token_entropy() {
    let p = PolicyParams::zeros(Arch::new(8, 2, 2, 2).unwrap());
    let h = predictive_entropy(&p, &seq(&[3]), 10_000, 1.0, 1, 1).unwrap();
    assert!((h - 8f64.ln()).abs() <= 0.05);
    assert!((h - 2.079442).abs() <= 0.05);
}

#[test]
fn deterministic_model_has_zero_entropy() {
    let a = Arch::new(6, 2, 2, 2).unwrap();
    let mut v = vec![0.0; a.param_count()];
    v[a.layout().b2 + EOS as usize] = 1000.0;
    let p = PolicyParams::from_values(a, v).unwrap();
    for n in [1, 7, 100] {
        let h = predictive_entropy(&p, &seq(&[2]), n, 1.0, 4, 3).unwrap();
        assert_eq!(h, 0.0);
        assert!(h.is_sign_positive());
    }
}

#[test]
fn entropy_additive_over_independent_positions() {
    // four live tokens, EOS suppressed: two independent uniform positions
    let a = Arch::new(5, 2, 2, 2).unwrap();
    let mut v = vec![0.0; a.param_count()];
    v[a.layout().b2 + EOS as usize] = -1000.0;
    let p = PolicyParams::from_values(a, v).unwrap();
    let h = predictive_entropy(&p, &seq(&[2]), 10_000, 1.0, 2, 5).unwrap();
    assert!((h - 2.0 * 4f64.ln()).abs() <= 0.05);
    assert!((h - 2.772589).abs() <= 0.05);
}

#[test]
fn entropy_estimator_is_calibrated_on_enumerable_models() {
    for (vocab, seed) in [(4usize, 1u64), (6, 2), (8, 3)] {
        let p = random_params(Arch::new(vocab, 2, 3, 4).unwrap(), seed, 1.5);
        let prompt = [2u32, 3];
        let exact = exact_entropy_len2(&p, &prompt);
        let est = predictive_entropy(&p, &seq(&prompt), 10_000, 1.0, 2, seed).unwrap();
        assert!((est - exact).abs() <= 0.05, "V={vocab}: {est} vs {exact}");

        // 100 independent small-N estimates: sample mean within 3 standard errors
        let runs: Vec<f64> = (0..100)
            .map(|s| predictive_entropy(&p, &seq(&prompt), 20, 1.0, 2, 1000 + s).unwrap())
            .collect();
        let mean = runs.iter().sum::<f64>() / 100.0;
        let var = runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0;
        let se = (var / 100.0).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "V={vocab}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn entropy_is_seed_reproducible() {
    let p = random_params(Arch::new(8, 2, 3, 4).unwrap(), 9, 1.0);
    let a = predictive_entropy(&p, &seq(&[2]), 8, 1.0, 6, 42).unwrap();
    let b = predictive_entropy(&p, &seq(&[2]), 8, 1.0, 6, 42).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(predictive_entropy(&p, &seq(&[2]), 0, 1.0, 6, 42).is_err());
}

#[test]
fn certainty_identities() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 1, 1.0);
    let q = random_params(a, 2, 1.0);
    let (x, y1, y2) = (seq(&[2, 3]), seq(&[4, 1]), seq(&[5, 6, 1]));
    assert_eq!(preference_certainty(&p, &p, 0.2, &x, &y1, &y2).unwrap(), 0.0);
    assert_eq!(preference_certainty(&p, &q, 0.2, &x, &y1, &y1).unwrap(), 0.0);
    let c12 = preference_certainty(&p, &q, 0.2, &x, &y1, &y2).unwrap();
    let c21 = preference_certainty(&p, &q, 0.2, &x, &y2, &y1).unwrap();
    assert_eq!(c12.to_bits(), c21.to_bits());
    assert!(c12 >= 0.0);
}

#[test]
fn certainty_arithmetic() {
    // reference uniform over 3 tokens, current tilted so that r̂ = 0.35 and -0.15 (β = 1)
    let a = Arch::new(3, 1, 1, 1).unwrap();
    let b2 = a.layout().b2;
    let reference = PolicyParams::zeros(a);
    let p1 = 0.35f64.exp() / 3.0;
    let p2 = (-0.15f64).exp() / 3.0;
    let mut v = vec![0.0; a.param_count()];
    v[b2] = p1.ln();
    v[b2 + 1] = p2.ln();
    v[b2 + 2] = (1.0 - p1 - p2).ln();
    let cur = PolicyParams::from_values(a, v).unwrap();
    let c = preference_certainty(&cur, &reference, 1.0, &seq(&[]), &seq(&[0]), &seq(&[1])).unwrap();
    assert!((c - 0.50).abs() < 1e-12);
}

fn pool_of(n: usize, vocab: u32, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenSequence::new((0..4).map(|_| rng.gen_range(2..vocab)).collect()))
        .collect()
}

fn cfg(strategy: Strategy, s: usize, m: usize) -> AcquisitionConfig {
    AcquisitionConfig {
        strategy,
        pool_size: s,
        batch_size: m,
        oversample: 2,
        mc_samples: 4,
        max_tokens: 5,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn certainty_with_m_equal_s_returns_whole_sorted_sample() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 1, 1.0);
    let r = random_params(a, 2, 1.0);
    let pool = pool_of(20, 8, 1);
    let out = acquire_batch_detailed(&p, &r, &pool, &cfg(Strategy::Certainty, 12, 12)).unwrap();
    assert_eq!(out.selected.len(), 12);
    assert!(out.scored.iter().all(|r| r.selected));
    let scores: Vec<f64> = out.selected.iter().map(|c| c.certainty_score.unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    // each score is the certainty of the returned completions
    for c in &out.selected {
        let want = preference_certainty(&p, &r, 0.2, &c.prompt, &c.y1, &c.y2).unwrap();
        assert_eq!(c.certainty_score.unwrap(), want);
    }
}

#[test]
fn identical_policies_fall_back_to_index_order() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 1, 1.0);
    let pool = pool_of(30, 8, 2);
    let out = acquire_batch_detailed(&p, &p, &pool, &cfg(Strategy::Certainty, 16, 5)).unwrap();
    assert!(out.selected.iter().all(|c| c.certainty_score == Some(0.0)));
    let mut sampled: Vec<usize> = out.scored.iter().map(|r| r.prompt_index).collect();
    sampled.sort_unstable();
    let got: Vec<usize> = out.selected.iter().map(|c| c.prompt_index).collect();
    assert_eq!(got, sampled[..5].to_vec());
}

/// Prompt token c_i (i = 0..8) → completions {a, b} equally likely under θ, then
/// EOS. The reference tilts a over b after c_i by i·0.1/tanh(3), so the certainty
/// of any pair {[a,EOS],[b,EOS]} after c_i is exactly 0.1·i (β = 1).
fn saturated_pair(beta: f64) -> (PolicyParams, PolicyParams, Vec<TokenSequence>) {
    let v = 12usize;
    let (tok_a, tok_b) = (10usize, 11usize);
    let a = Arch::new(v, 1, v, v).unwrap();
    let l = a.layout();
    let mut base = vec![0.0; a.param_count()];
    for i in 0..v {
        base[l.embedding + i * v + i] = 3.0;
        base[l.w1 + i * v + i] = 1.0;
    }
    let z = 3.0f64.tanh();
    for c in 2..10 {
        base[l.w2 + tok_a * v + c] = 40.0;
        base[l.w2 + tok_b * v + c] = 40.0;
    }
    for t in [tok_a, tok_b] {
        base[l.w2 + EOS as usize * v + t] = 40.0;
    }
    let mut reference = base.clone();
    for (i, c) in (2..10).enumerate() {
        reference[l.w2 + tok_a * v + c] += i as f64 * 0.1 / (beta * z);
    }
    let pool = (2..10u32).map(|c| TokenSequence::new(vec![c])).collect();
    (
        PolicyParams::from_values(a, base).unwrap(),
        PolicyParams::from_values(a, reference).unwrap(),
        pool,
    )
}

#[test]
fn top_m_matches_exhaustive_scoring_on_hand_built_models() {
    let (theta, reference, pool) = saturated_pair(1.0);
    let c = AcquisitionConfig {
        strategy: Strategy::Certainty,
        pool_size: 8,
        batch_size: 3,
        beta: 1.0,
        gen_temperature: 1.0,
        max_tokens: 4,
        seed: 5,
        ..Default::default()
    };
    // exhaustive oracle: certainty of the only possible distinct pair for each prompt
    let mut oracle: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let s = preference_certainty(&theta, &reference, 1.0, x, &seq(&[10, EOS]), &seq(&[11, EOS])).unwrap();
            assert!((s - 0.1 * i as f64).abs() < 1e-9);
            (i, s)
        })
        .collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
    let out = acquire_batch(&theta, &reference, &pool, &c).unwrap();
    assert!(out.iter().all(|c| !c.identical()));
    let got: Vec<usize> = out.iter().map(|c| c.prompt_index).collect();
    let want: Vec<usize> = oracle[..3].iter().map(|x| x.0).collect();
    assert_eq!(got, want);
    assert_eq!(got, vec![7, 6, 5]);
}

#[test]
fn top_m_property_for_every_scored_strategy() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 3, 1.0);
    let r = random_params(a, 4, 1.0);
    let pool = pool_of(64, 8, 3);
    for strategy in [Strategy::Entropy, Strategy::Certainty, Strategy::Hybrid] {
        let c = cfg(strategy, 16, 6);
        let out = acquire_batch_detailed(&p, &r, &pool, &c).unwrap();
        assert_eq!(out.selected.len(), 6);
        let key = |e: Option<f64>, cert: Option<f64>| match strategy {
            Strategy::Entropy => e.unwrap(),
            _ => cert.unwrap(),
        };
        let rows: Vec<&ScoreRow> = out
            .scored
            .iter()
            .filter(|r| strategy != Strategy::Hybrid || r.certainty.is_some())
            .collect();
        let min_sel = rows.iter().filter(|r| r.selected).map(|r| key(r.entropy, r.certainty)).fold(f64::INFINITY, f64::min);
        let max_rest = rows.iter().filter(|r| !r.selected).map(|r| key(r.entropy, r.certainty)).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_sel >= max_rest, "{strategy}: {min_sel} < {max_rest}");
        assert_eq!(out.selected.iter().filter(|c| c.certainty_score.is_some()).count(),
            if strategy == Strategy::Entropy { 0 } else { 6 });
        if strategy == Strategy::Hybrid {
            // J·S prompts were entropy-scored, S kept for pair generation
            assert_eq!(out.scored.len(), 32);
            assert_eq!(rows.len(), 16);
            let min_kept = rows.iter().map(|r| r.entropy.unwrap()).fold(f64::INFINITY, f64::min);
            let max_dropped = out.scored.iter().filter(|r| r.certainty.is_none()).map(|r| r.entropy.unwrap()).fold(f64::NEG_INFINITY, f64::max);
            assert!(min_kept >= max_dropped);
        }
    }
}

#[test]
fn strategies_share_pool_sample_prefix() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 3, 1.0);
    let pool = pool_of(64, 8, 3);
    let rnd = acquire_batch_detailed(&p, &p, &pool, &cfg(Strategy::Random, 16, 4)).unwrap();
    let hyb = acquire_batch_detailed(&p, &p, &pool, &cfg(Strategy::Hybrid, 16, 4)).unwrap();
    let mut a_idx: Vec<usize> = rnd.scored.iter().map(|r| r.prompt_index).collect();
    let mut rng = stream_rng(11, Stream::PoolSampling, 0, 0);
    let prefix = sample_pool_indices(&mut rng, 64, 32);
    assert_eq!(a_idx, prefix[..16].to_vec());
    a_idx.sort_unstable();
    let mut h_idx: Vec<usize> = hyb.scored.iter().map(|r| r.prompt_index).collect();
    h_idx.sort_unstable();
    assert!(a_idx.iter().all(|i| h_idx.contains(i)));
    assert!(rnd.selected.iter().all(|c| c.entropy_score.is_none() && c.certainty_score.is_none()));
}

#[test]
fn random_selection_is_uniform() {
    let a = Arch::new(6, 1, 2, 2).unwrap();
    let p = random_params(a, 1, 0.5);
    let pool = pool_of(16, 6, 4);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let draws = 10_000;
    for s in 0..draws {
        let c = AcquisitionConfig {
            strategy: Strategy::Random,
            pool_size: 4,
            batch_size: 1,
            max_tokens: 1,
            seed: s,
            ..Default::default()
        };
        let out = acquire_batch(&p, &p, &pool, &c).unwrap();
        *counts.entry(out[0].prompt_index).or_default() += 1;
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = (0..16)
        .map(|i| (counts.get(&i).copied().unwrap_or(0) as f64 - expected).powi(2) / expected)
        .sum();
    // χ²(15) critical value at p = 0.01
    assert!(chi2 < 30.578, "chi2 {chi2}");
}

#[test]
fn pool_and_config_validation() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 1, 1.0);
    let pool = pool_of(10, 8, 1);
    assert!(matches!(
        acquire_batch(&p, &p, &pool, &cfg(Strategy::Certainty, 12, 4)),
        Err(AplError::InvalidInput(_))
    ));
    // hybrid needs J·S = 20 prompts
    assert!(acquire_batch(&p, &p, &pool, &cfg(Strategy::Hybrid, 10, 4)).is_err());
    assert!(matches!(
        acquire_batch(&p, &p, &pool, &cfg(Strategy::Certainty, 4, 5)),
        Err(AplError::Config { .. })
    ));
}

#[test]
fn acquisition_is_reproducible() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 5, 1.0);
    let r = random_params(a, 6, 1.0);
    let pool = pool_of(64, 8, 7);
    for s in [Strategy::Random, Strategy::Entropy, Strategy::Certainty, Strategy::Hybrid] {
        let c = cfg(s, 16, 4);
        assert_eq!(acquire_batch(&p, &r, &pool, &c).unwrap(), acquire_batch(&p, &r, &pool, &c).unwrap());
    }
}

#[test]
fn length_normalized_scores_differ_but_stay_consistent() {
    let a = Arch::new(8, 2, 3, 4).unwrap();
    let p = random_params(a, 5, 1.0);
    let r = random_params(a, 6, 1.0);
    let pool = pool_of(64, 8, 7);
    let mut c = cfg(Strategy::Hybrid, 16, 4);
    c.length_normalized = true;
    let out = acquire_batch(&p, &r, &pool, &c).unwrap();
    for cand in &out {
        let norm = |m: &PolicyParams, y: &TokenSequence| m.logprob(&cand.prompt, y).unwrap() / y.len() as f64;
        let want = (0.2 * (norm(&p, &cand.y1) - norm(&r, &cand.y1)) - 0.2 * (norm(&p, &cand.y2) - norm(&r, &cand.y2))).abs();
        assert!((cand.certainty_score.unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn scores_csv_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    write_scores_csv(
        &path,
        &[ScoreRow { prompt_index: 3, entropy: Some(1.5), certainty: None, selected: true }],
    )
    .unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text, "prompt_index,entropy,certainty,selected\n3,1.5,,true\n");
}
