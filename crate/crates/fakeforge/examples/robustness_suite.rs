//! Run the thirteen-cell robustness grid: every test image is perturbed
//! (JPEG, resize, noise, flip, rotate, sharpen, contrast, blur, identity)
//! and the model is re-evaluated per cell.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example robustness_suite
//! ```

use fakeforge::datamodel::{write_jsonl, Authenticity, Category, QAPair, Split};
use fakeforge::eval::{evaluate_robustness, render_report, EvalOptions};
use fakeforge::fixture::build_corpus;
use fakeforge::gateway::{EndpointConfig, Gateway};
use fakeforge::mock::{ChatOutcome, ChatView, HashEmbed, MockServer};
use fakeforge::prompts::eval_prompt;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fakeforge_examples/robustness_suite");
    let _ = std::fs::remove_dir_all(&dir);
    let layout = vec![
        (Category::Animal, Authenticity::Fake, 3),
        (Category::Animal, Authenticity::Real, 3),
    ];
    let records = build_corpus(&dir.join("corpus"), &layout, 17)?;
    let rows: Vec<QAPair> = records
        .iter()
        .map(|r| QAPair {
            record_id: r.id.clone(),
            image_path: r.image_path.clone(),
            question: eval_prompt().to_string(),
            answer: format!("{} Notes.", r.authenticity.verdict_sentence()),
            split: Split::Test,
            category: r.category.unwrap(),
            authenticity: r.authenticity,
        })
        .collect();
    let dataset = dir.join("dataset.jsonl");
    write_jsonl(&dataset, &rows)?;

    // a pixel-blind stand-in model; a real endpoint would show per-cell drops
    let server = MockServer::spawn(
        |_: &ChatView| ChatOutcome::Reply("This is a fake image. Constant artifact note.".into()),
        HashEmbed::default(),
    )
    .await;
    let model = EndpointConfig::local("stand-in", server.base_url(), "stand-in");
    let gateway = Gateway::new();

    println!("evaluating {} rows under 13 perturbation cells...", rows.len());
    let outcomes = evaluate_robustness(&gateway, &model, &dataset, 42, None, &EvalOptions::default()).await?;
    let reports: Vec<_> = outcomes
        .iter()
        .map(|o| (o.model.clone(), o.report.clone()))
        .collect();
    println!("{}", render_report(&reports));
    println!("total requests served: {}", server.chat_calls());
    Ok(())
}
