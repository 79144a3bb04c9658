//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{fixture, image, Mocks, ROW1_PROFILE, ROW2_PROFILE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use userllm_core::bench::{chat_digests, generate_answers};
use userllm_core::domain::{
    provenance_monotone, AgeRange, Attribute, ConversationTurn, EmbeddingVector, GenerationConfig, ProfileFields, Role,
    UserProfile,
};
use userllm_core::encoder::{
    contrastive_loss, enroll, resolve_identity, ContrastiveBatch, Resolution, DEFAULT_CONTRASTIVE_TEMPERATURE,
    DEFAULT_MATCH_THRESHOLD,
};
use userllm_core::gateway::{
    Backend, Backends, ChatBackend, ChatMessage, GatewayError, MockBackend, MockScript, TextEmbedder,
};
use userllm_core::memory::{index_turn, retrieve_context};
use userllm_core::orchestrator::{PipelineSettings, TurnInput};
use userllm_core::parallel::ExecMode;
use userllm_core::persistence::{Store, StoreOptions, PROFILES_FILE};
use userllm_core::profile_init::{parse_profile_text, RAW_PROFILE_TRAIT};
use userllm_core::rouge::{
    aggregate, format_table, load_dataset, rouge_l_tokens, rouge_n_tokens, run_benchmark, write_item_scores,
    MetricScores,
};
use userllm_core::trace::{parse_trace, serialize_trace, TraceError};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // negated so that a NaN comparison fails the criterion
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs()));
    }
    Ok(())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// ROUGE

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(0..=30);
    (0..len).map(|_| format!("w{}", rng.gen_range(0..20))).collect()
}

fn prf(matched: usize, cand: usize, refs: usize) -> [f64; 3] {
    let p = if cand == 0 { 0.0 } else { matched as f64 / cand as f64 };
    let r = if refs == 0 { 0.0 } else { matched as f64 / refs as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    [p, r, f]
}

/// Multiset intersection by sorting both gram lists and merging.
fn oracle_rouge_n(c: &[String], r: &[String], n: usize) -> [f64; 3] {
    let grams = |t: &[String]| {
        let mut g: Vec<Vec<String>> =
            if t.len() >= n { t.windows(n).map(<[String]>::to_vec).collect() } else { vec![] };
        g.sort();
        g
    };
    let (gc, gr) = (grams(c), grams(r));
    let (mut i, mut j, mut matched) = (0, 0, 0);
    while i < gc.len() && j < gr.len() {
        match gc[i].cmp(&gr[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                matched += 1;
                i += 1;
                j += 1;
            }
        }
    }
    prf(matched, gc.len(), gr.len())
}

/// Full-table LCS.
fn oracle_rouge_l(c: &[String], r: &[String]) -> [f64; 3] {
    let mut t = vec![vec![0usize; r.len() + 1]; c.len() + 1];
    for i in 1..=c.len() {
        for j in 1..=r.len() {
            t[i][j] = if c[i - 1] == r[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    prf(t[c.len()][r.len()], c.len(), r.len())
}

fn arr(s: userllm_core::domain::RougeScore) -> [f64; 3] {
    [s.precision, s.recall, s.f1]
}

fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn rouge_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (c, r) = (random_tokens(&mut rng), random_tokens(&mut rng));
        for n in [1, 2] {
            mismatches += usize::from(!close(arr(rouge_n_tokens(&c, &r, n)), oracle_rouge_n(&c, &r, n), 1e-12));
        }
        mismatches += usize::from(!close(arr(rouge_l_tokens(&c, &r)), oracle_rouge_l(&c, &r), 1e-12));
    }
    ensure!(mismatches == 0, "{mismatches} oracle mismatches");

    let same = toks("a b c d e");
    for s in [rouge_n_tokens(&same, &same, 1), rouge_n_tokens(&same, &same, 2), rouge_l_tokens(&same, &same)] {
        ensure!(arr(s) == [1.0; 3], "identity gave {s:?}");
    }
    let (x, y) = (toks("a b c"), toks("d e f g"));
    for s in [rouge_n_tokens(&x, &y, 1), rouge_n_tokens(&x, &y, 2), rouge_l_tokens(&x, &y)] {
        ensure!(arr(s) == [0.0; 3], "disjoint gave {s:?}");
    }
    let bigram = rouge_n_tokens(&toks("the cat sat"), &toks("the cat is here"), 2);
    ensure!(close(arr(bigram), [0.5, 1.0 / 3.0, 0.4], 1e-12), "bigram case gave {bigram:?}");
    within(Duration::from_secs(10), start)?;
    Ok("1000 random pairs, 0 mismatches".into())
}

fn swap_symmetry() -> Outcome {
    let mut rng = rng(2);
    for _ in 0..200 {
        let (c, r) = (random_tokens(&mut rng), random_tokens(&mut rng));
        let pairs = [
            (rouge_n_tokens(&c, &r, 1), rouge_n_tokens(&r, &c, 1)),
            (rouge_n_tokens(&c, &r, 2), rouge_n_tokens(&r, &c, 2)),
            (rouge_l_tokens(&c, &r), rouge_l_tokens(&r, &c)),
        ];
        for (ab, ba) in pairs {
            ensure!(ab.precision == ba.recall && ab.recall == ba.precision, "P/R not swapped: {ab:?} vs {ba:?}");
            ensure!((ab.f1 - ba.f1).abs() <= 1e-12, "F1 changed: {ab:?} vs {ba:?}");
        }
    }
    Ok("200 pairs x 3 metrics".into())
}

fn report_fixture() -> Outcome {
    let row = [0.4294, 0.5167, 0.4531, 0.1424, 0.1677, 0.1485, 0.2376, 0.2799, 0.2478];
    // offsets per item sum to zero in every column
    let offsets = [0.12, -0.05, -0.04, -0.03];
    let items: Vec<MetricScores> = offsets
        .iter()
        .map(|d| {
            let mut v = row;
            for (c, x) in v.iter_mut().enumerate() {
                *x += d * if c % 2 == 0 { 1.0 } else { 0.5 };
            }
            MetricScores::from_array(v)
        })
        .collect();
    let mean = aggregate(&items).ok_or("empty aggregate")?;
    let table = format_table(&[("User-LLM R1".to_string(), mean)]);
    let golden = fs::read_to_string(fixture("golden_report.txt")).map_err(|e| e.to_string())?;
    ensure!(table == golden, "table differs from golden:\n{table}");
    Ok("4 items, byte-identical".into())
}

// ---------------------------------------------------------------------------
// Retrieval and identity

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    EmbeddingVector(v.into_iter().map(|x| x / n).collect())
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Text embedder backed by a fixed table, optionally scaling its output.
struct TableEmbedder {
    table: HashMap<String, EmbeddingVector>,
    scale: f64,
}

impl Backend for TableEmbedder {
    fn backend_id(&self) -> &str {
        "table"
    }
    fn ping(&self) -> bool {
        true
    }
}

impl TextEmbedder for TableEmbedder {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.table
            .get(text)
            .map(|v| v.scaled(self.scale))
            .ok_or_else(|| GatewayError::InvalidRequest(format!("no vector for {text}")))
    }
}

fn identity_exactness(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let store = Store::in_memory();
    for i in 0..1000 {
        enroll(&format!("u{i}"), &unit(rng, 64), store.identities()).map_err(|e| e.to_string())?;
    }
    let stored = store.identities().entries();
    let mut mismatches = 0;
    for p in 0..100 {
        // half the probes are noisy copies of enrolled faces, so both outcomes occur
        let probe = if p % 2 == 0 {
            let base = &stored[rng.gen_range(0..stored.len())].vector;
            let noise = unit(rng, 64);
            EmbeddingVector(base.0.iter().zip(&noise.0).map(|(b, n)| b + 0.2 * n).collect())
        } else {
            unit(rng, 64)
        };
        let (best_i, best) = stored
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cos(&probe.0, &e.vector.0)))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let want = &stored[best_i].key;

        let open = resolve_identity(&probe, store.identities(), -1.0).map_err(|e| e.to_string())?;
        match &open {
            Resolution::Match(m) if &m.user_id == want && (m.score - best).abs() < 1e-12 => {}
            other => {
                mismatches += 1;
                eprintln!("identity probe {p}: expected {want} ({best}), got {other:?}");
            }
        }
        let gated = resolve_identity(&probe, store.identities(), DEFAULT_MATCH_THRESHOLD).map_err(|e| e.to_string())?;
        let expect_match = best >= DEFAULT_MATCH_THRESHOLD;
        if gated.user_id().is_some() != expect_match || (expect_match && gated.user_id() != Some(want)) {
            mismatches += 1;
        }
        for alpha in [1e-3, 0.5, 42.0, 1e4] {
            let scaled = resolve_identity(&probe.scaled(alpha), store.identities(), -1.0).map_err(|e| e.to_string())?;
            mismatches += usize::from(scaled.user_id() != Some(want));
        }
    }
    Ok(mismatches)
}

fn retrieval_exactness(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    const SESSIONS: usize = 4;
    let store = Store::in_memory();
    let mut table = HashMap::new();
    for s in 0..SESSIONS {
        store.create_session(&format!("s{s}")).map_err(|e| e.to_string())?;
    }
    for i in 0..1000 {
        table.insert(format!("t{i}"), unit(rng, 64));
    }
    for p in 0..100 {
        table.insert(format!("p{p}"), unit(rng, 64));
    }
    let mut embedder = TableEmbedder { table, scale: 1.0 };
    for i in 0..1000u64 {
        let s = i as usize % SESSIONS;
        let turn_id = i / SESSIONS as u64;
        let turn = ConversationTurn {
            turn_id,
            session_id: format!("s{s}"),
            role: if turn_id.is_multiple_of(2) { Role::User } else { Role::Agent },
            text: format!("t{i}"),
            timestamp: i as i64,
            image_ref: None,
            embedding: None,
            trace: None,
        };
        index_turn(&store, turn, &format!("user-s{s}"), &embedder).map_err(|e| e.to_string())?;
    }

    let mut mismatches = 0;
    for p in 0..100 {
        let s = p % SESSIONS;
        let probe = embedder.table[&format!("p{p}")].clone();
        // oracle: scan the session's stored turns; newer turns win ties
        let mut scored: Vec<(f64, u64)> = store
            .turns(&format!("s{s}"))
            .iter()
            .map(|t| (cos(&probe.0, &t.embedding.as_ref().expect("embedded").0), t.turn_id))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
        let want: Vec<u64> = scored.iter().take(4).map(|x| x.1).collect();

        for scale in [1.0, 1e-3, 37.0] {
            embedder.scale = scale;
            let got = retrieve_context(&store, &format!("p{p}"), &format!("user-s{s}"), 4, &embedder)
                .map_err(|e| e.to_string())?;
            let ids: Vec<u64> = got.iter().map(|h| h.turn.turn_id).collect();
            let right_session = got.iter().all(|h| h.turn.session_id == format!("s{s}"));
            if ids != want || !right_session {
                mismatches += 1;
                eprintln!("retrieval probe {p} scale {scale}: expected {want:?}, got {ids:?}");
            }
        }
        embedder.scale = 1.0;
    }
    Ok(mismatches)
}

fn retrieval_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(4);
    let id = identity_exactness(&mut rng)?;
    let rt = retrieval_exactness(&mut rng)?;
    ensure!(id == 0 && rt == 0, "{id} identity and {rt} retrieval mismatches");
    within(Duration::from_secs(30), start)?;
    Ok("1000 vectors, 100 probes, scaled probes, 0 mismatches".into())
}

// ---------------------------------------------------------------------------
// Contrastive objective

fn contrastive() -> Outcome {
    let start = Instant::now();
    let e = |k: usize, dim: usize| {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        EmbeddingVector(v)
    };
    let orth =
        ContrastiveBatch { anchors: vec![e(0, 2), e(1, 2)], positives: vec![e(0, 2), e(1, 2)], temperature: 1.0 };
    let loss = contrastive_loss(&orth).map_err(|e| e.to_string())?.loss;
    let want = (1.0 + (-1.0f64).exp()).ln();
    ensure!((loss - want).abs() <= 1e-9, "orthogonal loss {loss}, expected {want}");

    for b in [2usize, 4, 8] {
        let same = EmbeddingVector(vec![0.3, -0.4, 0.5]);
        let batch = ContrastiveBatch {
            anchors: vec![same.clone(); b],
            positives: vec![same.clone(); b],
            temperature: DEFAULT_CONTRASTIVE_TEMPERATURE,
        };
        let loss = contrastive_loss(&batch).map_err(|e| e.to_string())?.loss;
        ensure!((loss - (b as f64).ln()).abs() <= 1e-9, "degenerate B={b} loss {loss}");
    }

    let mut rng = rng(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let gen = |rng: &mut ChaCha8Rng| EmbeddingVector((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let anchors: Vec<EmbeddingVector> = (0..8).map(|_| gen(&mut rng)).collect();
        let positives: Vec<EmbeddingVector> = (0..8).map(|_| gen(&mut rng)).collect();
        let batch = ContrastiveBatch { anchors, positives, temperature: DEFAULT_CONTRASTIVE_TEMPERATURE };
        let analytic = contrastive_loss(&batch).map_err(|e| e.to_string())?.anchor_gradients;
        let (mut diff, mut norm) = (0.0, 0.0);
        #[allow(clippy::needless_range_loop)]
        for i in 0..8 {
            for d in 0..16 {
                let mut plus = batch.clone();
                plus.anchors[i].0[d] += h;
                let mut minus = batch.clone();
                minus.anchors[i].0[d] -= h;
                let lp = contrastive_loss(&plus).map_err(|e| e.to_string())?.loss;
                let lm = contrastive_loss(&minus).map_err(|e| e.to_string())?.loss;
                let numeric = (lp - lm) / (2.0 * h);
                diff += (analytic[i].0[d] - numeric).powi(2);
                norm += numeric.powi(2);
            }
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-300));
    }
    ensure!(worst <= 1e-4, "gradient relative error {worst:e}");
    within(Duration::from_secs(10), start)?;
    Ok(format!("closed forms exact, worst gradient rel. error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Profile text parser

fn fields(age: Option<(u32, u32)>, gender: Option<&str>, eth: Option<&str>, emotion: Option<&str>) -> ProfileFields {
    ProfileFields {
        age_range: age.map(|(l, h)| AgeRange::new(l, h).unwrap()),
        gender: gender.map(str::to_string),
        ethnicity: eth.map(str::to_string),
        emotion: emotion.map(str::to_string),
        extra_traits: vec![],
    }
}

fn raw(text: &str) -> ProfileFields {
    ProfileFields { extra_traits: vec![(RAW_PROFILE_TRAIT.to_string(), text.to_string())], ..Default::default() }
}

fn parser_goldens() -> Outcome {
    let row1 = parse_profile_text(ROW1_PROFILE);
    ensure!(row1 == fields(Some((60, 69)), Some("female"), Some("southeast Asian"), None), "row 1 parsed to {row1:?}");
    let row2 = parse_profile_text(ROW2_PROFILE);
    ensure!(row2 == fields(Some((60, 69)), Some("male"), Some("Indian"), None), "row 2 parsed to {row2:?}");

    let cases: Vec<(&str, ProfileFields)> = vec![
        (
            "The person appears to be an East Asian man, approximately 30-39 years old.",
            fields(Some((30, 39)), Some("man"), Some("East Asian"), None),
        ),
        ("A Hispanic woman, about 45 years old.", fields(Some((45, 45)), Some("woman"), Some("Hispanic"), None)),
        ("The person looks happy.", fields(None, None, None, Some("happy"))),
        (
            "The person appears to be a middle-aged white male who looks tired.",
            fields(None, Some("male"), Some("white"), Some("tired")),
        ),
        ("Approximately 20 to 29 years old.", fields(Some((20, 29)), None, None, None)),
        ("The person seems calm and is about 70 years old.", fields(Some((70, 70)), None, None, Some("calm"))),
        ("An elderly Black female, 80-89 yrs.", fields(Some((80, 89)), Some("female"), Some("Black"), None)),
        (
            "The person appears to be a girl, approximately 5 to 9 years old.",
            fields(Some((5, 9)), Some("girl"), None, None),
        ),
        ("A landscape photo with no people.", raw("A landscape photo with no people.")),
        ("   ", ProfileFields::default()),
        (
            "The person appears to be approximately 150 to 160 years old.",
            raw("The person appears to be approximately 150 to 160 years old."),
        ),
        ("The person is 69 to 60 years old.", raw("The person is 69 to 60 years old.")),
        (
            "The person appears to be a Middle Eastern man in his 40s, looking content.",
            fields(None, Some("man"), Some("Middle Eastern"), Some("content")),
        ),
        (
            "The person appears Indian male, approximately 60 to 69 years old.",
            fields(Some((60, 69)), Some("male"), Some("Indian"), None),
        ),
        (
            "She is a South Asian woman aged 50 and 59 years.",
            fields(Some((50, 59)), Some("woman"), Some("South Asian"), None),
        ),
        ("The person appears to feel anxious.", fields(None, None, None, Some("anxious"))),
        (
            "The individual seems to be a young Caucasian boy aged 10-12 years old.",
            fields(Some((10, 12)), Some("boy"), Some("Caucasian"), None),
        ),
        (
            "The person is approximately 60 to 69 years old and appears sad.",
            fields(Some((60, 69)), None, None, Some("sad")),
        ),
        (
            "THE PERSON APPEARS TO BE A LATINA FEMALE, 25 TO 34 YEARS OLD.",
            fields(Some((25, 34)), Some("female"), Some("LATINA"), None),
        ),
        (
            "The person appears to be a female, 62-year-old, and looks Happy.",
            fields(Some((62, 62)), Some("female"), None, Some("happy")),
        ),
    ];
    ensure!(cases.len() == 20, "expected 20 derived cases");
    for (text, want) in &cases {
        let got = parse_profile_text(text);
        ensure!(&got == want, "{text:?} parsed to {got:?}");
    }

    let mut rng = rng(6);
    let pieces = [
        "male",
        "female",
        "Asian",
        "years",
        "old",
        "to",
        "-",
        "appears",
        "looks",
        "to be",
        "60",
        "999",
        "a",
        "an",
        "\u{130}",
        "\u{0}",
        "😀",
        "é",
        "’",
        "<think>",
        "\n",
        "  ",
        "seems",
        "approximately",
    ];
    for _ in 0..10_000 {
        let n = rng.gen_range(0..20);
        let text: String = (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    char::from_u32(rng.gen_range(0..0x3_0000)).map(String::from).unwrap_or_default()
                } else {
                    format!("{} ", pieces.choose(&mut rng).unwrap())
                }
            })
            .collect();
        let parsed = parse_profile_text(&text);
        ensure!(parsed.is_empty() == text.trim().is_empty(), "{text:?} gave {parsed:?}");
        if let Some(a) = parsed.age_range {
            ensure!(a.is_valid(), "{text:?} gave invalid age {a:?}");
        }
        let profile = UserProfile::from_prior_fields("fuzz", parsed, true);
        ensure!(profile.validate().is_ok(), "{text:?} gave an invalid profile");
    }
    Ok("2 table rows, 20 derived cases, 10000 fuzz inputs".into())
}

// ---------------------------------------------------------------------------
// Reasoning traces

fn sentence(rng: &mut ChaCha8Rng) -> String {
    const WORDS: &[&str] = &[
        "the",
        "user",
        "is",
        "older",
        "keep",
        "steps",
        "short",
        "mention",
        "transport",
        "email",
        "bank",
        "report",
        "scam",
        "help",
        "she",
        "prefers",
        "simple",
        "answers",
        "60",
        "years",
        "=",
        ":",
        "(prior)",
        "→",
        "ünï",
    ];
    let n = rng.gen_range(1..12);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn generated_trace(rng: &mut ChaCha8Rng, k: usize, deltas: usize) -> String {
    let mut lines: Vec<String> = (0..k).map(|_| sentence(rng)).collect();
    for d in 0..deltas {
        let field = ["gender", "age", "hobby", "city", "emotion"][d % 5];
        let value = sentence(rng).replace('=', "eq");
        let line = if rng.gen_bool(0.5) {
            format!("PROFILE_UPDATE: {field}={value}")
        } else {
            format!("  PROFILE_UPDATE:{field} = {value}  ")
        };
        let at = rng.gen_range(0..=lines.len());
        lines.insert(at, line);
    }
    let answer = sentence(rng);
    if lines.is_empty() && rng.gen_bool(0.5) {
        return answer;
    }
    let mut out = String::new();
    if rng.gen_bool(0.8) {
        out.push_str("<think>");
    }
    for l in lines {
        out.push('\n');
        if rng.gen_bool(0.2) {
            out.push('\n');
        }
        out.push_str(&l);
    }
    out.push_str("\n</think>\n\n");
    out.push_str(&answer);
    out
}

fn trace_round_trip() -> Outcome {
    let mut rng = rng(7);
    for n in 0..500 {
        let k = rng.gen_range(0..=10);
        let deltas = if n % 2 == 0 { 0 } else { rng.gen_range(1..4) };
        let raw = generated_trace(&mut rng, k, deltas);
        let first = parse_trace(&raw).map_err(|e| format!("{raw:?}: {e}"))?;
        ensure!(first.k() == k && first.profile_deltas.len() == deltas, "{raw:?} parsed to {first:?}");
        let text = serialize_trace(&first);
        let second = parse_trace(&text).map_err(|e| format!("{text:?}: {e}"))?;
        ensure!(
            second.steps == first.steps
                && second.profile_deltas == first.profile_deltas
                && second.final_answer == first.final_answer,
            "not a fixed point: {first:?} vs {second:?}"
        );
        ensure!(serialize_trace(&second) == text, "serialization drifted for {raw:?}");
    }
    for degenerate in ["<think>\nonly thinking\n</think>\n  ", "<think>\nnever closed", "</think>"] {
        ensure!(parse_trace(degenerate) == Err(TraceError::EmptyAnswer), "{degenerate:?} did not raise EmptyAnswer");
    }
    Ok("500 traces, k in 0..=10, half with deltas".into())
}

// ---------------------------------------------------------------------------
// End to end

fn bench_once(dir: &std::path::Path, jobs: usize) -> Result<(Vec<u8>, String), String> {
    let dataset_path = fixture("dataset.jsonl");
    let dataset = load_dataset(&dataset_path).map_err(|e| e.to_string())?;
    let base = dataset_path.parent().unwrap();
    let settings = PipelineSettings::default();
    let embed = Arc::new(MockBackend::new("embed", MockScript::default()));
    let placeholder = Arc::new(MockBackend::new("unused", MockScript::default()));
    let mut backends =
        Backends { chat: placeholder.clone(), vision: placeholder, text_embed: embed.clone(), image_embed: embed };

    // answer each item with a trace whose final answer is half its reference
    let digests = chat_digests(&dataset, base, &backends, &settings).map_err(|e| e.to_string())?;
    let mut script = MockScript::default();
    for ((_, digest), item) in digests.iter().zip(&dataset) {
        let words: Vec<&str> = item.reference_answer.split_whitespace().collect();
        let half = words[..words.len().div_ceil(2)].join(" ");
        script.insert(
            digest.clone(),
            format!("<think>\nThe user is older.\nPROFILE_UPDATE: tone=gentle\n</think>\n{half} Hope this helps."),
        );
    }
    backends.chat = Arc::new(MockBackend::new("chat", script));

    let answers = generate_answers(&dataset, base, &backends, &settings, jobs).map_err(|e| e.to_string())?;
    let answers: HashMap<String, String> = answers.into_iter().collect();
    let outcome = run_benchmark(&dataset, &answers, ExecMode::Parallel).map_err(|e| e.to_string())?;
    ensure!(outcome.is_complete(), "missing answers: {:?}", outcome.missing);
    let scores = dir.join(format!("scores-{jobs}.jsonl"));
    write_item_scores(&scores, &outcome.items).map_err(|e| e.to_string())?;
    let report = format_table(&[("User-LLM R1".to_string(), outcome.aggregate.unwrap())]);
    Ok((fs::read(&scores).map_err(|e| e.to_string())?, report))
}

/// Chat backend emitting random profile updates from a seeded generator.
struct RandomDeltaChat {
    rng: Mutex<ChaCha8Rng>,
}

impl Backend for RandomDeltaChat {
    fn backend_id(&self) -> &str {
        "random-deltas"
    }
    fn ping(&self) -> bool {
        true
    }
}

impl ChatBackend for RandomDeltaChat {
    fn chat_complete(&self, _messages: &[ChatMessage], _config: &GenerationConfig) -> Result<String, GatewayError> {
        let mut rng = self.rng.lock().unwrap();
        let fields = ["age", "gender", "ethnicity", "emotion", "hobby", "city", "diet"];
        let values = ["60-69", "45", "female", "male", "calm", "Lyon", "chess", "vegetarian", "", "200"];
        let mut out = String::from("<think>\nConsider the profile.\n");
        for _ in 0..rng.gen_range(0..3) {
            out.push_str(&format!(
                "PROFILE_UPDATE: {}={}\n",
                fields.choose(&mut *rng).unwrap(),
                values.choose(&mut *rng).unwrap()
            ));
        }
        out.push_str("</think>\nHere is a short answer.");
        Ok(out)
    }
}

fn simulated_session() -> Result<(), String> {
    let mocks = Mocks::answering("unused", ROW1_PROFILE);
    let store = Arc::new(Store::in_memory());
    let pipeline = mocks.pipeline(store.clone());
    let pipeline = userllm_core::orchestrator::Pipeline::new(
        store.clone(),
        Backends { chat: Arc::new(RandomDeltaChat { rng: Mutex::new(rng(8)) }), ..mocks.backends() },
        pipeline.settings().clone(),
    );
    pipeline.create_session("sim").map_err(|e| e.to_string())?;
    let mut previous: Option<UserProfile> = None;
    for t in 0..100 {
        let input =
            TurnInput { text: format!("question {t}"), image: (t % 10 == 0).then(|| image(1)), consent: Some(true) };
        let out = pipeline.run_turn("sim", input).map_err(|e| format!("turn {t}: {e}"))?;
        if let Some(prev) = &previous {
            let expected = prev.revision + u64::from(!out.trace.profile_deltas.is_empty());
            ensure!(
                out.profile.revision == expected,
                "turn {t}: revision {} expected {expected}",
                out.profile.revision
            );
            ensure!(provenance_monotone(prev, &out.profile), "turn {t}: posterior field reverted");
        }
        previous = Some(out.profile);
    }
    let user = previous.ok_or("no turns ran")?.user_id;
    let history = store.profile_history(&user);
    for w in history.windows(2) {
        ensure!(w[1].revision == w[0].revision + 1, "history skips from {} to {}", w[0].revision, w[1].revision);
        ensure!(provenance_monotone(&w[0], &w[1]), "history reverts at revision {}", w[1].revision);
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = bench_once(dir.path(), 4)?;
    let second = bench_once(dir.path(), 4)?;
    let sequential = bench_once(dir.path(), 1)?;
    ensure!(first == second, "two runs differ");
    ensure!(first == sequential, "parallel and sequential runs differ");
    simulated_session()?;
    Ok("5-item bench byte-identical x3, 100-turn session monotone".into())
}

// ---------------------------------------------------------------------------
// Consent

fn consent_gate() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reply = "<think>\nPROFILE_UPDATE: gender=female\nPROFILE_UPDATE: age=60-69\nPROFILE_UPDATE: ethnicity=Indian\nPROFILE_UPDATE: emotion=calm\nPROFILE_UPDATE: hobby=chess\n</think>\nSure.";
    let mocks = Mocks::answering(reply, ROW2_PROFILE);
    {
        let store = Arc::new(Store::open(dir.path(), StoreOptions { fsync: false }).map_err(|e| e.to_string())?);
        let pipeline = mocks.pipeline(store);
        for s in 0..3 {
            let sid = format!("s{s}");
            pipeline.create_session(&sid).map_err(|e| e.to_string())?;
            for t in 0..5u32 {
                let consent = if t % 2 == 0 { Some(false) } else { None };
                let input = TurnInput { text: format!("hello {t}"), image: Some(image(t % 5 + 1)), consent };
                let out = pipeline.run_turn(&sid, input).map_err(|e| e.to_string())?;
                ensure!(out.user_turn.image_ref.is_none(), "image stored without consent");
                ensure!(!out.profile.has_visual_fields(), "visual field in live profile");
            }
        }
    }
    ensure!(mocks.vision.vision_calls() == 0, "VLM called {} times", mocks.vision.vision_calls());
    ensure!(mocks.image_embed.embed_calls() == 0, "face embedder called {} times", mocks.image_embed.embed_calls());

    let text = fs::read_to_string(dir.path().join(PROFILES_FILE)).map_err(|e| e.to_string())?;
    let mut revisions = 0;
    for line in text.lines() {
        let p: UserProfile = serde_json::from_str(line).map_err(|e| e.to_string())?;
        ensure!(!p.has_visual_fields(), "persisted revision {} of {} has visual fields", p.revision, p.user_id);
        revisions += 1;
    }
    ensure!(revisions > 0, "no profile revisions persisted");
    Ok(format!("0 VLM calls, {revisions} persisted revisions without visual fields"))
}

// ---------------------------------------------------------------------------
// Persistence

fn fault_injection() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = StoreOptions { fsync: false };
    let mut p = UserProfile::empty("user-a", true);
    p.age_range = Some(Attribute::prior(AgeRange::new(60, 69).unwrap()));
    let mut revs = vec![p.clone()];
    for r in 1..3 {
        p.revision = r;
        p.gender = Some(Attribute::posterior(format!("value {r}")));
        revs.push(p.clone());
    }
    {
        let store = Store::open(dir.path(), opts).map_err(|e| e.to_string())?;
        for r in &revs {
            store.put_profile(r).map_err(|e| e.to_string())?;
        }
    }
    let path = dir.path().join(PROFILES_FILE);
    let full = fs::read(&path).map_err(|e| e.to_string())?;
    let last_start = full[..full.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
    for cut in last_start..full.len() {
        fs::write(&path, &full[..cut]).map_err(|e| e.to_string())?;
        let store = Store::open(dir.path(), opts).map_err(|e| format!("cut {cut}: {e}"))?;
        ensure!(store.get_profile("user-a").as_ref() == Some(&revs[1]), "cut {cut}: wrong revision served");
        ensure!(store.profile_history("user-a") == revs[..2], "cut {cut}: history damaged");
    }
    Ok(format!("{} truncation offsets, previous revision served", full.len() - last_start))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("ROUGE oracle equivalence", rouge_oracle),
        ("swap symmetry", swap_symmetry),
        ("report fixture", report_fixture),
        ("retrieval/identity exactness", retrieval_identity),
        ("contrastive loss", contrastive),
        ("profile parser goldens", parser_goldens),
        ("trace parsing round-trip", trace_round_trip),
        ("end-to-end determinism", end_to_end),
        ("consent gate", consent_gate),
        ("persistence fault injection", fault_injection),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {:>2}  {name}: {detail} ({secs:.2}s)", n + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {:>2}  {name}: {reason} ({secs:.2}s)", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
