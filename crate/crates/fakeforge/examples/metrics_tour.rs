//! Walk through the scoring toolbox: verdict parsing, detection metrics,
//! AUC, ROUGE_L, and embedding cosine similarity.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example metrics_tour
//! ```

use fakeforge::datamodel::{Authenticity, Verdict};
use fakeforge::metrics::{auc, css, detection_metrics, parse_verdict, rouge_l};
use fakeforge::mock::hash_embedding;

fn main() -> anyhow::Result<()> {
    println!("-- verdict parsing --");
    for raw in [
        "This is a fake image. The fur texture blends unnaturally.",
        "this is a REAL image, because the shadows line up.",
        "Looks generated to me, the text is gibberish.",
        "I cannot determine authenticity.",
    ] {
        let p = parse_verdict("demo", raw);
        println!("  {:?}\n    -> {:?}, explanation {:?}", raw, p.parsed_verdict, p.explanation);
    }

    println!("\n-- detection metrics (fake = positive class) --");
    let preds = vec![
        (Verdict::Fake, Authenticity::Fake),
        (Verdict::Fake, Authenticity::Fake),
        (Verdict::Fake, Authenticity::Fake),
        (Verdict::Fake, Authenticity::Real),
        (Verdict::Real, Authenticity::Fake),
        (Verdict::Real, Authenticity::Fake),
        (Verdict::Real, Authenticity::Real),
        (Verdict::Real, Authenticity::Real),
        (Verdict::Real, Authenticity::Real),
        (Verdict::Real, Authenticity::Real),
    ];
    let (acc, f1, counts) = detection_metrics(&preds)?;
    println!("  tp={} fp={} tn={} fn={} -> acc {acc:.4}, f1 {f1:.4}", counts.tp, counts.fp, counts.tn, counts.fn_);

    println!("\n-- auc over probability-of-fake scores --");
    let scores = vec![
        (0.9, Authenticity::Fake),
        (0.6, Authenticity::Fake),
        (0.7, Authenticity::Real),
        (0.2, Authenticity::Real),
    ];
    println!("  fakes {{0.9, 0.6}}, reals {{0.7, 0.2}} -> auc {}", auc(&scores)?);

    println!("\n-- rouge_l --");
    for (hyp, reference) in [
        ("the cat ran", "the cat sat"),
        ("blurry outlines and broken shadows", "broken shadows; blurry outlines"),
    ] {
        println!("  {hyp:?} vs {reference:?} -> {:.4}", rouge_l(hyp, reference));
    }

    println!("\n-- css over deterministic embeddings --");
    let a = hash_embedding("misaligned roads and blurry outlines", 32);
    let b = hash_embedding("the roads are misaligned, outlines blurry", 32);
    let c = hash_embedding("a cheerful dog on a beach", 32);
    println!("  near-paraphrase: {:.4}", css(&a, &b)?);
    println!("  unrelated:       {:.4}", css(&a, &c)?);
    Ok(())
}
