//! Browse the built-in annotation prompt catalog: the 14 category x
//! authenticity templates, the merging instruction, and the standardized
//! evaluation question.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example prompt_catalog
//! ```

use fakeforge::datamodel::{Authenticity, CandidateAnnotation, Category};
use fakeforge::prompts::{eval_prompt, render_aggregation_request, PromptCatalog};

fn main() -> anyhow::Result<()> {
    let catalog = PromptCatalog::builtin()?;

    println!("templates ({} assets, digest-checked):", catalog.digests().len());
    for template in catalog.templates() {
        println!(
            "  {:<24} opens with {:?}",
            template.template_id, template.output_sentence
        );
    }

    let satellite_fake = catalog.select_prompt(Category::Satellite, Authenticity::Fake, false);
    println!("\n--- {} ---\n{}", satellite_fake.template_id, satellite_fake.body);

    println!("--- merge instruction ---\n{}", catalog.merge_instruction().body);

    let candidates = vec![
        CandidateAnnotation {
            annotator_id: "model-a".into(),
            text: "This is a fake image. Blurry building outlines; broken shadows.".into(),
            verdict_ok: true,
        },
        CandidateAnnotation {
            annotator_id: "model-b".into(),
            text: "This is a fake image. Misaligned roads; blurry outlines.".into(),
            verdict_ok: true,
        },
    ];
    let request = render_aggregation_request(&candidates, catalog.merge_instruction())?;
    println!("--- rendered aggregation request (tail) ---");
    if let fakeforge::gateway::MessagePart::Text(text) = &request.messages()[0].parts[0] {
        let tail: String = text.lines().rev().take(4).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
        println!("{tail}");
    }

    println!("\nstandardized evaluation question: {:?}", eval_prompt());
    Ok(())
}
