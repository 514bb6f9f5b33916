//! The whole pipeline in one pass: synthetic corpus -> multi-model annotation
//! with aggregation -> balanced/stratified dataset -> evaluation of a model
//! under test, all against the bundled mock server.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example end_to_end
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use fakeforge::annotation::{run_annotation, AnnotationOptions};
use fakeforge::datamodel::{load_annotation_store, load_manifest, write_jsonl, Split};
use fakeforge::dataset::{balance_and_split, build_qa_pairs, with_split_assignments};
use fakeforge::eval::{evaluate, render_report, EvalOptions};
use fakeforge::fixture::{balanced_layout, build_corpus, manifest_path};
use fakeforge::gateway::{EndpointConfig, Gateway};
use fakeforge::mock::{
    image_reply_key, scripted_aggregator, scripted_annotator, ChatOutcome, HashEmbed,
    ImageKeyedReplies, MockServer, ModelRouter,
};
use fakeforge::prompts::PromptCatalog;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fakeforge_examples/end_to_end");
    let _ = std::fs::remove_dir_all(&dir);

    // 1. corpus
    let corpus = dir.join("corpus");
    build_corpus(&corpus, &balanced_layout(2), 99)?;
    let manifest = manifest_path(&corpus);
    println!("[1/4] corpus: 28 records, 7 categories");

    // 2. annotation + aggregation
    let annotation_server = MockServer::spawn(
        ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", scripted_annotator("annotator-c"))
            .route("aggregator", scripted_aggregator()),
        HashEmbed::default(),
    )
    .await;
    let annotators: Vec<EndpointConfig> = ["annotator-a", "annotator-b", "annotator-c"]
        .iter()
        .map(|n| EndpointConfig::local(n, annotation_server.base_url(), n))
        .collect();
    let aggregator = EndpointConfig::local("aggregator", annotation_server.base_url(), "aggregator");
    let gateway = Gateway::new();
    let catalog = PromptCatalog::builtin()?;
    let store = dir.join("annotations.jsonl");
    let summary = run_annotation(
        &gateway,
        &catalog,
        &manifest,
        &annotators,
        &aggregator,
        &store,
        &AnnotationOptions::default(),
    )
    .await?;
    println!(
        "[2/4] annotation: {} complete, {} failed ({} chat calls)",
        summary.complete,
        summary.failed,
        annotation_server.chat_calls()
    );

    // 3. dataset
    let records = load_manifest(&manifest)?;
    let bundles: BTreeMap<String, _> = load_annotation_store(&store)?
        .into_iter()
        .map(|b| (b.record_id.clone(), b))
        .collect();
    let (train, test) = balance_and_split(&records, 1.0, 0.5, 7)?;
    let assigned = with_split_assignments(&records, &train, &test);
    let (pairs, _) = build_qa_pairs(&assigned, &bundles);
    let dataset = dir.join("dataset.jsonl");
    write_jsonl(&dataset, &pairs)?;
    println!(
        "[3/4] dataset: {} pairs ({} test)",
        pairs.len(),
        pairs.iter().filter(|p| p.split == Split::Test).count()
    );

    // 4. evaluate an echo model (replies with each row's reference answer)
    let mut replies = HashMap::new();
    for pair in pairs.iter().filter(|p| p.split == Split::Test) {
        replies.insert(
            image_reply_key(&gateway, Path::new(&pair.image_path))?,
            pair.answer.clone(),
        );
    }
    let eval_server = MockServer::spawn(
        ImageKeyedReplies {
            by_image_digest: replies,
            fallback: ChatOutcome::Status(404, "unknown image".into()),
        },
        HashEmbed::default(),
    )
    .await;
    let model = EndpointConfig::local("echo-model", eval_server.base_url(), "echo-model");
    let embedder = EndpointConfig::local("embedder", eval_server.base_url(), "embedder");
    let outcome = evaluate(&gateway, &model, &dataset, Some(&embedder), &EvalOptions::default()).await?;
    println!("[4/4] evaluation:\n");
    println!("{}", render_report(&[(outcome.model.clone(), outcome.report.clone())]));
    println!("artifacts under {}", dir.display());
    Ok(())
}
