//! Balance an unbalanced corpus to a 1:1 fake/real ratio, split it
//! stratified by (category, authenticity), and export QA pairs.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example build_dataset
//! ```

use std::collections::BTreeMap;

use fakeforge::datamodel::{
    write_jsonl, AggregatedAnnotation, AnnotationBundle, Authenticity, BundleStatus,
    CandidateAnnotation, Category, Split,
};
use fakeforge::dataset::{balance_and_split, build_qa_pairs, with_split_assignments};
use fakeforge::fixture::build_corpus;

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fakeforge_examples/build_dataset");
    let _ = std::fs::remove_dir_all(&dir);

    // deliberately unbalanced: 60 fake vs 40 real
    let layout = vec![
        (Category::Animal, Authenticity::Fake, 30),
        (Category::Animal, Authenticity::Real, 20),
        (Category::Scene, Authenticity::Fake, 30),
        (Category::Scene, Authenticity::Real, 20),
    ];
    let records = build_corpus(&dir.join("corpus"), &layout, 11)?;
    println!("raw corpus: {} records (60 fake / 40 real)", records.len());

    let (train, test) = balance_and_split(&records, 1.0, 0.2, 7)?;
    println!(
        "after balancing at ratio 1.0 and splitting at 0.2: train {} / test {}",
        train.len(),
        test.len()
    );

    // stand-in bundles, as run_annotation would produce
    let bundles: BTreeMap<String, AnnotationBundle> = records
        .iter()
        .map(|r| {
            let sentence = r.authenticity.verdict_sentence();
            let text = format!("{sentence} Merged evidence: consistent findings for {}.", r.id);
            (
                r.id.clone(),
                AnnotationBundle {
                    record_id: r.id.clone(),
                    status: BundleStatus::Complete,
                    candidates: ["model-a", "model-b"]
                        .iter()
                        .map(|m| CandidateAnnotation {
                            annotator_id: m.to_string(),
                            text: text.clone(),
                            verdict_ok: true,
                        })
                        .collect(),
                    aggregated: Some(AggregatedAnnotation {
                        aggregator_id: "aggregator".into(),
                        text,
                    }),
                    failure_reason: None,
                },
            )
        })
        .collect();

    let assigned = with_split_assignments(&records, &train, &test);
    let (pairs, summary) = build_qa_pairs(&assigned, &bundles);
    println!("qa pairs: {} built, {} skipped", summary.pairs, summary.skipped);

    let dataset = dir.join("dataset.jsonl");
    write_jsonl(&dataset, &pairs)?;
    let test_rows = pairs.iter().filter(|p| p.split == Split::Test).count();
    println!("wrote {} ({} test rows)", dataset.display(), test_rows);
    println!("\nfirst pair:\n{}", serde_json::to_string_pretty(&pairs[0])?);
    Ok(())
}
