//! Verdict parsing and scoring: detection metrics (Acc, F1, AUC) and
//! explanation metrics (ROUGE_L, CSS).
//!
//! Scoring policy for replies that parse to no verdict: they count as wrong
//! for accuracy and as a predicted-real for F1 (an unparseable reply on a fake
//! image is a missed positive), but they are tallied separately from the
//! tp/fp/tn/fn cells so the confusion counts plus the unparseable count always
//! sum to the number of evaluated records.

use crate::datamodel::{Authenticity, ConfusionCounts, EvalPrediction, Verdict};
use crate::error::{Error, Result};
use crate::gateway::Embedder;

const REAL_PHRASE: &str = "this is a real image";
const FAKE_PHRASE: &str = "this is a fake image";
const SCAN_WINDOW: usize = 200;

/// Words that indicate a verdict when no verdict sentence is present.
/// "real" maps to real; the rest map to fake.
const FAKE_KEYWORDS: [&str; 4] = ["fake", "synthetic", "generated", "ai-generated"];

/// Parse a raw model reply into (verdict, explanation).
///
/// The first 200 characters are scanned case-insensitively for the two verdict
/// sentences. On a unique hit the explanation is the remainder after the
/// sentence. Otherwise a keyword fallback inspects the first sentence; when it
/// indicates exactly one class that verdict is used with the raw text as
/// explanation. Anything else is unparseable, never an error.
pub fn parse_verdict(record_id: &str, raw: &str) -> EvalPrediction {
    let (verdict, explanation) = classify(raw);
    EvalPrediction {
        record_id: record_id.to_string(),
        raw_response: raw.to_string(),
        parsed_verdict: verdict,
        explanation,
        score: None,
    }
}

fn classify(raw: &str) -> (Verdict, String) {
    let window_end = raw
        .char_indices()
        .nth(SCAN_WINDOW)
        .map(|(i, _)| i)
        .unwrap_or(raw.len());
    let window = raw[..window_end].to_lowercase();
    let real_at = window.find(REAL_PHRASE);
    let fake_at = window.find(FAKE_PHRASE);

    match (real_at, fake_at) {
        (Some(at), None) => (Verdict::Real, after_sentence(raw, at, REAL_PHRASE.len())),
        (None, Some(at)) => (Verdict::Fake, after_sentence(raw, at, FAKE_PHRASE.len())),
        // both verdict sentences present: a contradiction, not a verdict
        (Some(_), Some(_)) => (Verdict::Unparseable, raw.to_string()),
        (None, None) => keyword_fallback(raw),
    }
}

/// Remainder after the matched verdict sentence: skip one trailing punctuation
/// mark if present, then leading whitespace.
fn after_sentence(raw: &str, phrase_start: usize, phrase_len: usize) -> String {
    let mut rest = &raw[phrase_start + phrase_len..];
    let mut chars = rest.chars();
    if let Some(c) = chars.next() {
        if matches!(c, '.' | ',' | '!' | '?' | ':' | ';') {
            rest = chars.as_str();
        }
    }
    rest.trim().to_string()
}

fn keyword_fallback(raw: &str) -> (Verdict, String) {
    let first_sentence = raw
        .split_inclusive(['.', '!', '?'])
        .next()
        .unwrap_or(raw)
        .to_lowercase();
    let mut saw_real = false;
    let mut saw_fake = false;
    for token in first_sentence
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
    {
        let token = token.trim_matches('-');
        if token == "real" {
            saw_real = true;
        } else if FAKE_KEYWORDS.contains(&token) {
            saw_fake = true;
        }
    }
    match (saw_real, saw_fake) {
        (true, false) => (Verdict::Real, raw.to_string()),
        (false, true) => (Verdict::Fake, raw.to_string()),
        _ => (Verdict::Unparseable, raw.to_string()),
    }
}

/// Detection metrics over (prediction, ground truth) pairs. Positive class is
/// fake. Returns (accuracy, f1, counts).
pub fn detection_metrics(preds: &[(Verdict, Authenticity)]) -> Result<(f64, f64, ConfusionCounts)> {
    if preds.is_empty() {
        return Err(Error::Precondition("no predictions to score".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut unparseable_on_fake = 0usize;
    for (verdict, truth) in preds {
        match (verdict, truth) {
            (Verdict::Fake, Authenticity::Fake) => counts.tp += 1,
            (Verdict::Fake, Authenticity::Real) => counts.fp += 1,
            (Verdict::Real, Authenticity::Real) => counts.tn += 1,
            (Verdict::Real, Authenticity::Fake) => counts.fn_ += 1,
            (Verdict::Unparseable, truth) => {
                counts.unparseable += 1;
                if *truth == Authenticity::Fake {
                    unparseable_on_fake += 1;
                }
            }
        }
    }
    let total = preds.len() as f64;
    let acc = (counts.tp + counts.tn) as f64 / total;
    // unparseable replies act as predicted-real: on fakes they are misses
    let denom = 2 * counts.tp + counts.fp + counts.fn_ + unparseable_on_fake;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * counts.tp as f64 / denom as f64
    };
    Ok((acc, f1, counts))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; ties
/// contribute one half. Scores are probability-of-fake.
pub fn auc(scores: &[(f64, Authenticity)]) -> Result<f64> {
    let n_fake = scores
        .iter()
        .filter(|(_, a)| *a == Authenticity::Fake)
        .count();
    let n_real = scores.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::Precondition(
            "auc needs both classes present".into(),
        ));
    }
    let mut indexed: Vec<(f64, Authenticity)> = scores.to_vec();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be comparable"));

    // average ranks over tie groups, 1-based
    let mut rank_sum_fake = 0.0f64;
    let mut i = 0;
    while i < indexed.len() {
        let mut j = i;
        while j < indexed.len() && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = ((i + 1 + j) as f64) / 2.0; // mean of ranks i+1 ..= j
        for item in &indexed[i..j] {
            if item.1 == Authenticity::Fake {
                rank_sum_fake += avg_rank;
            }
        }
        i = j;
    }
    let n_fake_f = n_fake as f64;
    Ok((rank_sum_fake - n_fake_f * (n_fake_f + 1.0) / 2.0) / (n_fake_f * n_real as f64))
}

/// Lowercased alphanumeric tokens; any non-alphanumeric run separates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            curr[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                curr[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE_L F-measure (beta = 1) over token sequences; 0 when
/// either side has no tokens.
pub fn rouge_l(hypothesis: &str, reference: &str) -> f64 {
    let hyp = tokenize(hypothesis);
    let reference = tokenize(reference);
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&hyp, &reference) as f64;
    let precision = lcs / hyp.len() as f64;
    let recall = lcs / reference.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Cosine similarity of two embedding vectors, clamped into [0, 1]
/// (negative cosine scores as 0).
pub fn css(hyp_embedding: &[f64], ref_embedding: &[f64]) -> Result<f64> {
    if hyp_embedding.len() != ref_embedding.len() {
        return Err(Error::Precondition(format!(
            "embedding dimensions differ: {} vs {}",
            hyp_embedding.len(),
            ref_embedding.len()
        )));
    }
    let dot: f64 = hyp_embedding
        .iter()
        .zip(ref_embedding)
        .map(|(a, b)| a * b)
        .sum();
    let norm_h: f64 = hyp_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_r: f64 = ref_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_h == 0.0 || norm_r == 0.0 {
        return Err(Error::Precondition("zero-norm embedding".into()));
    }
    Ok((dot / (norm_h * norm_r)).clamp(0.0, 1.0))
}

/// Mean ROUGE_L and mean CSS over (hypothesis, reference) text pairs.
/// Embeddings for both sides are fetched through the embedder in one batch
/// each.
pub async fn explanation_score<E: Embedder>(
    pairs: &[(String, String)],
    embedder: &E,
) -> Result<(f64, f64)> {
    let mean_rouge = mean_rouge_l(pairs)?;
    let hyps: Vec<String> = pairs.iter().map(|(h, _)| placeholder_if_empty(h)).collect();
    let refs: Vec<String> = pairs.iter().map(|(_, r)| placeholder_if_empty(r)).collect();
    let hyp_embeddings = embedder.embed(&hyps).await?;
    let ref_embeddings = embedder.embed(&refs).await?;
    let mut total = 0.0;
    for (h, r) in hyp_embeddings.iter().zip(&ref_embeddings) {
        total += css(h, r)?;
    }
    Ok((mean_rouge, total / pairs.len() as f64))
}

/// Mean ROUGE_L only, for runs without an embedder.
pub fn mean_rouge_l(pairs: &[(String, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no explanation pairs to score".into()));
    }
    let total: f64 = pairs.iter().map(|(h, r)| rouge_l(h, r)).sum();
    Ok(total / pairs.len() as f64)
}

// embedding services reject empty inputs; an empty explanation is maximally
// uninformative, which a fixed placeholder preserves
fn placeholder_if_empty(text: &str) -> String {
    if text.trim().is_empty() {
        "(empty)".to_string()
    } else {
        text.to_string()
    }
}
