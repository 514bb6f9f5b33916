//! Stand up the bundled mock model server for CLI experiments: scripted
//! annotators, an aggregator, a classifier, a constant model under test, and
//! a deterministic embedder, all behind one OpenAI-compatible base URL.
//!
//! Run (leave running, then use the printed config with `fakeforge ...`):
//! ```bash
//! cargo run -p fakeforge --example mock_server
//! ```

use fakeforge::mock::{
    scripted_aggregator, scripted_annotator, ChatOutcome, ChatView, HashEmbed, MockServer,
    ModelRouter,
};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let router = ModelRouter::new()
        .route("annotator-a", scripted_annotator("annotator-a"))
        .route("annotator-b", scripted_annotator("annotator-b"))
        .route("annotator-c", scripted_annotator("annotator-c"))
        .route("aggregator", scripted_aggregator())
        .route("classifier", |_: &ChatView| ChatOutcome::Reply("animal".into()))
        .route("candidate", |_: &ChatView| {
            ChatOutcome::Reply("This is a fake image. Constant artifact note.".into())
        });
    let server = MockServer::spawn(router, HashEmbed::default()).await;
    let base_url = server.base_url().to_string();

    println!("mock server listening on {base_url}");
    println!("\nwrite this to config.toml and point the CLI at it:\n");
    for name in [
        "annotator-a",
        "annotator-b",
        "annotator-c",
        "aggregator",
        "classifier",
        "candidate",
        "embedder",
        "encoder",
    ] {
        println!("[endpoints.{name}]\nbase_url = \"{base_url}\"\nmodel_name = \"{name}\"\n");
    }
    println!("[roles]");
    println!("annotators = [\"annotator-a\", \"annotator-b\", \"annotator-c\"]");
    println!("aggregator = \"aggregator\"");
    println!("classifier = \"classifier\"");
    println!("embedder = \"embedder\"");
    println!("models_under_test = [\"candidate\"]");
    println!("\npress Ctrl-C to stop");

    tokio::signal::ctrl_c().await?;
    println!("\nserved {} chat and {} embedding requests", server.chat_calls(), server.embed_calls());
    Ok(())
}
