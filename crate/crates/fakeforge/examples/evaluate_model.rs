//! Evaluate models against a test split: a cooperative echo model that
//! reproduces every reference answer, and a verdict-inverting one. Prints the
//! overall and per-category tables.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example evaluate_model
//! ```

use std::collections::HashMap;
use std::path::Path;

use fakeforge::datamodel::{write_jsonl, QAPair, Split};
use fakeforge::eval::{evaluate, render_per_category, render_report, EvalOptions};
use fakeforge::fixture::{balanced_layout, build_corpus};
use fakeforge::gateway::{EndpointConfig, Gateway};
use fakeforge::mock::{image_reply_key, ChatOutcome, HashEmbed, ImageKeyedReplies, MockServer};
use fakeforge::prompts::eval_prompt;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fakeforge_examples/evaluate_model");
    let _ = std::fs::remove_dir_all(&dir);
    let records = build_corpus(&dir.join("corpus"), &balanced_layout(2), 13)?;

    let rows: Vec<QAPair> = records
        .iter()
        .map(|r| QAPair {
            record_id: r.id.clone(),
            image_path: r.image_path.clone(),
            question: eval_prompt().to_string(),
            answer: format!(
                "{} Merged evidence: texture and structure notes for {}.",
                r.authenticity.verdict_sentence(),
                r.id
            ),
            split: Split::Test,
            category: r.category.unwrap(),
            authenticity: r.authenticity,
        })
        .collect();
    let dataset = dir.join("dataset.jsonl");
    write_jsonl(&dataset, &rows)?;

    let gateway = Gateway::new();
    let mut echo = HashMap::new();
    let mut inverted = HashMap::new();
    for row in &rows {
        let key = image_reply_key(&gateway, Path::new(&row.image_path))?;
        echo.insert(key.clone(), row.answer.clone());
        let flipped = if let Some(rest) = row.answer.strip_prefix("This is a fake image.") {
            format!("This is a real image.{rest}")
        } else {
            format!(
                "This is a fake image.{}",
                row.answer.trim_start_matches("This is a real image.")
            )
        };
        inverted.insert(key, flipped);
    }

    let mut reports = Vec::new();
    for (name, map) in [("echo-model", echo), ("inverted-model", inverted)] {
        let server = MockServer::spawn(
            ImageKeyedReplies {
                by_image_digest: map,
                fallback: ChatOutcome::Status(404, "unknown image".into()),
            },
            HashEmbed::default(),
        )
        .await;
        let model = EndpointConfig::local(name, server.base_url(), name);
        let embedder = EndpointConfig::local("embedder", server.base_url(), "embedder");
        let outcome = evaluate(&gateway, &model, &dataset, Some(&embedder), &EvalOptions::default()).await?;
        if name == "echo-model" {
            println!("per-category, echo model:\n{}", render_per_category(&outcome.report));
        }
        reports.push((outcome.model.clone(), outcome.report.clone()));
    }

    println!("{}", render_report(&reports));
    Ok(())
}
