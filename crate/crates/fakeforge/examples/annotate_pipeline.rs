//! Run the multi-model annotation pipeline against the bundled mock server:
//! three annotators caption every image, contradictions are dropped, and an
//! aggregator merges the survivors. A second pass demonstrates resume.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example annotate_pipeline
//! ```

use fakeforge::annotation::{run_annotation, AnnotationOptions};
use fakeforge::datamodel::load_annotation_store;
use fakeforge::fixture::{balanced_layout, build_corpus, manifest_path};
use fakeforge::gateway::{EndpointConfig, Gateway};
use fakeforge::mock::{scripted_aggregator, scripted_annotator, HashEmbed, MockServer, ModelRouter};
use fakeforge::prompts::PromptCatalog;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fakeforge_examples/annotate_pipeline");
    let _ = std::fs::remove_dir_all(&dir);
    let records = build_corpus(&dir.join("corpus"), &balanced_layout(1), 7)?;
    println!("corpus: {} records across 7 categories", records.len());

    let server = MockServer::spawn(
        ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", scripted_annotator("annotator-c"))
            .route("aggregator", scripted_aggregator()),
        HashEmbed::default(),
    )
    .await;
    let annotators = vec![
        EndpointConfig::local("annotator-a", server.base_url(), "annotator-a"),
        EndpointConfig::local("annotator-b", server.base_url(), "annotator-b"),
        EndpointConfig::local("annotator-c", server.base_url(), "annotator-c"),
    ];
    let aggregator = EndpointConfig::local("aggregator", server.base_url(), "aggregator");
    let gateway = Gateway::new();
    let catalog = PromptCatalog::builtin()?;
    let store = dir.join("annotations.jsonl");

    // interrupted run: stop after 5 records
    let partial = AnnotationOptions {
        workers: 4,
        max_records: Some(5),
    };
    let summary = run_annotation(
        &gateway,
        &catalog,
        manifest_path(&dir.join("corpus")),
        &annotators,
        &aggregator,
        &store,
        &partial,
    )
    .await?;
    println!(
        "partial run:  complete {}  failed {}  (simulating an interruption)",
        summary.complete, summary.failed
    );
    println!("chat calls so far: {}", server.chat_calls());

    // resume: only the remaining records are queried
    let summary = run_annotation(
        &gateway,
        &catalog,
        manifest_path(&dir.join("corpus")),
        &annotators,
        &aggregator,
        &store,
        &AnnotationOptions::default(),
    )
    .await?;
    println!(
        "resumed run:  complete {}  resumed-from-journal {}  total chat calls {}",
        summary.complete,
        summary.skipped,
        server.chat_calls()
    );

    let bundles = load_annotation_store(&store)?;
    let first = &bundles[0];
    println!("\nfirst bundle ({}):", first.record_id);
    for candidate in &first.candidates {
        println!("  [{}] verdict_ok={} {}", candidate.annotator_id, candidate.verdict_ok, candidate.text);
    }
    println!("  aggregated: {}", first.aggregated.as_ref().unwrap().text);
    println!("\nstore: {}", store.display());
    Ok(())
}
