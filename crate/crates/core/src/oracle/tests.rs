use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use proptest::prelude::*;
use rand::Rng;
use serde_json::Value;

use super::*;
use crate::rng::rng_from_seed;

fn seq(t: &[u32]) -> TokenSequence {
    TokenSequence::new(t.to_vec())
}

fn vocab() -> Vocabulary {
    let toks = ["<bos>", "<eos>", "good", "bad", "the", "film"];
    Vocabulary::new(toks.iter().map(|s| s.to_string()).collect(), 0, 1).unwrap()
}

fn table() -> ValenceTable {
    ValenceTable::new(vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0]).unwrap()
}

fn pair(id: &str, y1: &[u32], y2: &[u32]) -> PairInput {
    PairInput {
        pair_id: id.into(),
        prompt: seq(&[4, 5]),
        y1: seq(y1),
        y2: seq(y2),
    }
}

#[test]
fn valence_prefers_higher_sum() {
    let t = ValenceTable::new(vec![0.0, 0.0, 1.0, -1.0, 0.5, 2.0]).unwrap();
    // 2 + 1 = 3.0 vs 1.0
    let j = valence_judge(&t, &seq(&[4]), &seq(&[5, 2]), &seq(&[2]));
    assert_eq!(j.winner_index, 0);
    let j = valence_judge(&t, &seq(&[4]), &seq(&[2]), &seq(&[5, 2]));
    assert_eq!(j.winner_index, 1);
}

#[test]
fn valence_tie_goes_to_shorter() {
    let t = table();
    let j = valence_judge(&t, &seq(&[4]), &seq(&[4, 4, 4, 4, 4]), &seq(&[4, 4, 4]));
    assert_eq!(j.winner_index, 1);
    assert!(!j.degenerate);
}

#[test]
fn valence_identical_is_degenerate() {
    let j = valence_judge(&table(), &seq(&[4]), &seq(&[2, 3]), &seq(&[2, 3]));
    assert!(j.degenerate);
    assert_eq!(j.winner_index, 0);
}

#[test]
fn repetition_penalty_applies_to_adjacent_repeats() {
    let t = table().with_repetition_penalty(0.5);
    assert!((t.score(&seq(&[2, 2, 2])) - 2.0).abs() < 1e-12);
    assert!((t.score(&seq(&[2, 4, 2])) - 2.0).abs() < 1e-12);
}

#[test]
fn valence_table_rejects_nonzero_eos() {
    assert!(ValenceTable::new(vec![0.0, 1.0]).is_err());
    assert!(ValenceTable::new(vec![0.0, 0.0, f64::NAN]).is_err());
}

#[test]
fn slot_assignment_is_fair() {
    let p = pair("p", &[2], &[3]);
    let n = 10_000;
    let a_is_y1 = (0..n)
        .filter(|&i| present_randomized(&p, crate::rng::derive_seed(11, crate::rng::Stream::OrderRandomization, 0, i)).1 == OrderMap::IDENTITY)
        .count();
    let frac = a_is_y1 as f64 / n as f64;
    assert!((0.49..=0.51).contains(&frac), "{frac}");
}

#[test]
fn demap_round_trips() {
    let p = pair("p", &[2], &[3]);
    for seed in 0..50 {
        let (shown, order) = present_randomized(&p, seed);
        for choice in [Slot::A, Slot::B] {
            let w = order.demap(choice);
            let shown_seq = if choice == Slot::A { &shown.slot_a } else { &shown.slot_b };
            let original = if w == 0 { &p.y1 } else { &p.y2 };
            assert_eq!(shown_seq, original);
            assert_eq!(order.slot_of(w), choice);
        }
    }
}

#[test]
fn presentation_is_deterministic() {
    let p = pair("p", &[2], &[3]);
    for seed in 0..20 {
        assert_eq!(present_randomized(&p, seed), present_randomized(&p, seed));
    }
}

#[test]
fn label_batch_demaps_to_true_preference() {
    let oracle = ValenceOracle::new(table());
    let pairs: Vec<PairInput> = (0..40).map(|i| pair(&format!("p{i}"), &[3, 4], &[2, 4])).collect();
    let seeds: Vec<u64> = (0..40).collect();
    let js = label_batch(&oracle, &pairs, &seeds);
    let mut orders = std::collections::HashSet::new();
    for j in js {
        let j = j.unwrap();
        assert_eq!(j.winner_index, 1);
        assert_eq!(j.oracle_id, "valence");
        orders.insert(j.presented_order);
    }
    assert_eq!(orders.len(), 2);
}

#[test]
fn valence_oracle_is_fully_consistent() {
    let oracle = ValenceOracle::new(table());
    let mut rng = rng_from_seed(3);
    let pairs: Vec<PairInput> = (0..200)
        .map(|i| {
            let a: Vec<u32> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(2..6)).collect();
            let b: Vec<u32> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(2..6)).collect();
            pair(&format!("p{i}"), &a, &b)
        })
        .filter(|p| p.y1 != p.y2)
        .collect();
    let r = consistency_check(&oracle, &pairs, 3, 9).unwrap();
    assert_eq!(r.consistency, 1.0);
    assert_eq!(r.failed, 0);
    assert_eq!(r.evaluated, pairs.len());
}

struct CoinOracle(Mutex<crate::rng::StreamRng>);

impl Oracle for CoinOracle {
    fn id(&self) -> &str {
        "coin"
    }
    fn choose(&self, _: &PresentedPair) -> Result<RawJudgement> {
        let a = self.0.lock().unwrap().gen::<bool>();
        Ok(RawJudgement {
            choice: if a { Slot::A } else { Slot::B },
            rationale: None,
            latency_ms: 0,
        })
    }
}

#[test]
fn random_oracle_consistency_near_half() {
    let oracle = CoinOracle(Mutex::new(rng_from_seed(5)));
    let pairs: Vec<PairInput> = (0..1000).map(|i| pair(&format!("p{i}"), &[2], &[3])).collect();
    let r = consistency_check(&oracle, &pairs, 2, 1).unwrap();
    assert!((r.consistency - 0.5).abs() <= 0.05, "{}", r.consistency);
}

struct FailingOracle;

impl Oracle for FailingOracle {
    fn id(&self) -> &str {
        "down"
    }
    fn choose(&self, _: &PresentedPair) -> Result<RawJudgement> {
        Err(AplError::OracleUnavailable("down".into()))
    }
}

#[test]
fn consistency_counts_failures_separately() {
    let pairs: Vec<PairInput> = (0..10).map(|i| pair(&format!("p{i}"), &[2], &[3])).collect();
    let r = consistency_check(&FailingOracle, &pairs, 2, 1).unwrap();
    assert_eq!(r.failed, 10);
    assert_eq!(r.evaluated, 0);
    assert!(consistency_check(&FailingOracle, &pairs, 1, 1).is_err());
}

#[test]
fn truncation_range_and_short_prompts() {
    let long = TokenSequence::new((0..30).map(|i| 2 + i % 4).collect());
    let mut rng = rng_from_seed(1);
    for _ in 0..500 {
        let t = truncate_prompt(&long, &mut rng, REVIEW_TRUNCATION).unwrap();
        assert!((8..=16).contains(&t.len()));
        assert_eq!(&long.tokens[..t.len()], &t.tokens[..]);
    }
    let short = seq(&[2, 3, 4, 5, 2]);
    assert_eq!(truncate_prompt(&short, &mut rng, REVIEW_TRUNCATION).unwrap(), short);
    let a = truncate_prompt(&long, &mut rng_from_seed(7), REVIEW_TRUNCATION).unwrap();
    let b = truncate_prompt(&long, &mut rng_from_seed(7), REVIEW_TRUNCATION).unwrap();
    assert_eq!(a, b);
    assert!(truncate_prompt(&seq(&[]), &mut rng, REVIEW_TRUNCATION).is_err());
}

#[test]
fn judgement_jsonl_round_trip() {
    let oracle = ValenceOracle::new(table());
    let pairs = vec![pair("t1-0", &[2], &[3]), pair("t1-1", &[3], &[3])];
    let js: Vec<OracleJudgement> = label_batch(&oracle, &pairs, &[1, 2]).into_iter().map(|r| r.unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.jsonl");
    write_judgements_jsonl(&path, &js).unwrap();
    assert_eq!(read_judgements_jsonl(&path).unwrap(), js);
    let text = std::fs::read_to_string(&path).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["presented_order"].is_array());
    assert!(first.get("degenerate").is_none());
    assert!(text.lines().nth(1).unwrap().contains("\"degenerate\":true"));
}

#[test]
fn parses_plain_and_quoted_choices() {
    let (c, r) = parse_judge_response("Comparison: A is better.\nPreferred: A").unwrap();
    assert_eq!(c, Slot::A);
    assert_eq!(r.as_deref(), Some("A is better."));
    let (c, _) = parse_judge_response("Comparison: meh\nPreferred: \"B\"").unwrap();
    assert_eq!(c, Slot::B);
    let (c, _) = parse_judge_response("Preferred: A\nactually\nPreferred: B").unwrap();
    assert_eq!(c, Slot::B);
    match parse_judge_response("I like both") {
        Err(AplError::ParseFailure { raw, .. }) => assert_eq!(raw, "I like both"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn render_fills_both_templates() {
    let r = render_template(TemplateId::Sentiment, "the film", "good", "bad");
    assert!(r.user.contains("the film"));
    assert!(!r.user.contains("{{"));
    assert!(!r.system.is_empty());
    let r = render_template(TemplateId::Summarization, "post body", "tl1", "tl2");
    assert!(r.user.contains("post body") && r.user.contains("tl1") && r.user.contains("tl2"));
    assert!(!r.user.contains("{PROMPT}"));
    // placeholder-like text inside a completion is left alone
    let r = render_template(TemplateId::Sentiment, "{{COMPLETION-B}}", "a", "b");
    assert!(r.user.contains("{{COMPLETION-B}}"));
}

struct Scripted {
    replies: Mutex<Vec<std::result::Result<String, TransportError>>>,
    calls: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
}

impl Scripted {
    fn new(replies: Vec<std::result::Result<String, TransportError>>) -> Arc<Self> {
        Arc::new(Self {
            replies: Mutex::new(replies.into_iter().rev().collect()),
            calls: AtomicUsize::new(0),
            bodies: Mutex::new(Vec::new()),
        })
    }
}

impl ChatTransport for Arc<Scripted> {
    fn complete(&self, body: &Value) -> std::result::Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.bodies.lock().unwrap().push(body.clone());
        self.replies
            .lock()
            .unwrap()
            .pop()
            .unwrap_or_else(|| Err(TransportError::Network("script exhausted".into())))
    }
}

fn judge(t: &Arc<Scripted>) -> LlmJudge {
    LlmJudge::new(Box::new(t.clone()), "m", TemplateId::Sentiment, 0.0, vocab()).with_backoff(Duration::from_millis(1))
}

fn presented() -> PresentedPair {
    present_randomized(&pair("x", &[2], &[3]), 0).0
}

#[test]
fn llm_reasks_once_on_parse_failure() {
    let t = Scripted::new(vec![Ok("no idea".into()), Ok("Comparison: fine\nPreferred: B".into())]);
    let r = judge(&t).choose(&presented()).unwrap();
    assert_eq!(r.choice, Slot::B);
    assert_eq!(t.calls.load(Ordering::SeqCst), 2);

    let t = Scripted::new(vec![Ok("no idea".into()), Ok("still none".into())]);
    match judge(&t).choose(&presented()) {
        Err(AplError::ParseFailure { raw, .. }) => assert_eq!(raw, "still none"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn llm_retries_transport_then_gives_up() {
    let t = Scripted::new(vec![
        Err(TransportError::Status(500, "x".into())),
        Ok("Preferred: A".into()),
    ]);
    assert_eq!(judge(&t).choose(&presented()).unwrap().choice, Slot::A);

    let t = Scripted::new(vec![]);
    assert!(matches!(judge(&t).choose(&presented()), Err(AplError::OracleUnavailable(_))));
    assert_eq!(t.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn llm_request_body_shape() {
    let t = Scripted::new(vec![Ok("Preferred: A".into())]);
    let j = judge(&t);
    let item = presented();
    j.choose(&item).unwrap();
    let body = t.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "m");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    let user = body["messages"][1]["content"].as_str().unwrap();
    assert!(user.contains("the film"));
}

#[test]
fn llm_batch_preserves_order() {
    let replies = (0..9).map(|i| Ok(if i % 3 == 0 { "Preferred: A" } else { "Preferred: B" }.to_string())).collect();
    let t = Scripted::new(replies);
    let items: Vec<PresentedPair> = (0..9).map(|i| present_randomized(&pair(&format!("p{i}"), &[2], &[3]), i).0).collect();
    let out = judge(&t).choose_batch(&items);
    assert_eq!(out.len(), 9);
    assert!(out.iter().all(|r| r.is_ok()));
}

#[test]
fn human_queue_post_semantics() {
    let q = HumanQueue::new();
    q.enqueue(vec![PendingItem {
        id: "t1-0".into(),
        prompt: "the".into(),
        slot_a: "good".into(),
        slot_b: "bad".into(),
        issued_at: 0,
    }])
    .unwrap();
    assert_eq!(q.pending(None).len(), 1);
    assert_eq!(q.post("nope", Slot::A, None), Err(PostError::NotFound));
    assert_eq!(q.post("t1-0", Slot::B, Some("why".into())), Ok(()));
    assert_eq!(q.post("t1-0", Slot::A, None), Err(PostError::Conflict));
    assert!(q.pending(None).is_empty());
    assert_eq!(q.progress(), QueueProgress { labeled: 1, batch: 1 });
    let r = q.wait_all(&["t1-0".into()]).unwrap();
    assert_eq!(r[0].choice, Slot::B);
}

#[test]
fn human_oracle_blocks_until_labelled() {
    let q = Arc::new(HumanQueue::new());
    let oracle = HumanOracle::new(q.clone(), vocab());
    let pairs: Vec<PairInput> = (0..3).map(|i| pair(&format!("t1-{i}"), &[2], &[3])).collect();
    let labeller = {
        let q = q.clone();
        std::thread::spawn(move || {
            let mut done = 0;
            while done < 3 {
                for item in q.pending(Some(10)) {
                    let choice = if item.slot_a == "good" { Slot::A } else { Slot::B };
                    q.post(&item.id, choice, None).unwrap();
                    done += 1;
                }
                std::thread::sleep(Duration::from_millis(2));
            }
        })
    };
    let js = label_batch(&oracle, &pairs, &[1, 2, 3]);
    labeller.join().unwrap();
    for j in js {
        assert_eq!(j.unwrap().winner_index, 0);
    }
}

#[test]
fn human_abort_cancels_waiters() {
    let q = Arc::new(HumanQueue::new());
    let oracle = HumanOracle::new(q.clone(), vocab());
    let q2 = q.clone();
    let h = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(20));
        q2.abort();
    });
    let out = label_batch(&oracle, &[pair("t1-0", &[2], &[3])], &[0]);
    h.join().unwrap();
    assert!(matches!(out[0], Err(AplError::Cancelled(_))));
}

proptest! {
    #[test]
    fn valence_swap_invariant(a in proptest::collection::vec(2u32..6, 1..6), b in proptest::collection::vec(2u32..6, 1..6)) {
        prop_assume!(a != b);
        let t = table().with_repetition_penalty(0.5);
        let fwd = valence_judge(&t, &seq(&[4]), &seq(&a), &seq(&b));
        let rev = valence_judge(&t, &seq(&[4]), &seq(&b), &seq(&a));
        prop_assert_eq!(fwd.winner_index, 1 - rev.winner_index);
    }

    #[test]
    fn order_map_json_round_trip(swap in any::<bool>()) {
        let o = if swap { OrderMap::SWAPPED } else { OrderMap::IDENTITY };
        let s = serde_json::to_string(&o).unwrap();
        prop_assert_eq!(serde_json::from_str::<OrderMap>(&s).unwrap(), o);
    }
}
