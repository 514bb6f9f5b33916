//! Frozen-feature baseline: embed every image through an encoder endpoint,
//! train a linear probe on the train split, score the test split, and compare
//! against a chat-model evaluation over the same records.
//!
//! The mock encoder embeds real pixel statistics (channel means and spreads),
//! and the demo corpus gives fake images a brightness shift, so the probe has
//! genuine signal to find. A production run points `encoder` at a
//! vision-backbone embedding service instead.
//!
//! Run:
//! ```bash
//! cargo run -p fakeforge --example linear_probe
//! ```

use base64::Engine as _;

use fakeforge::datamodel::{Authenticity, Category, MetricBlock, MetricReport};
use fakeforge::fixture::build_corpus;
use fakeforge::gateway::{EndpointConfig, Gateway};
use fakeforge::metrics::{auc, detection_metrics};
use fakeforge::mock::{ChatOutcome, ChatView, EmbedOutcome, MockServer};
use fakeforge::probe::{
    compare_paradigms, extract_features, predict, train, LabeledOutcome, TrainHyper,
};

/// Mock image-embedding endpoint: decodes each attached image and returns its
/// per-channel means and spreads as the feature vector.
fn pixel_stats_encoder(_model: &str, inputs: &[String]) -> EmbedOutcome {
    let mut vectors = Vec::with_capacity(inputs.len());
    for input in inputs {
        let b64 = input.rsplit("base64,").next().unwrap_or("");
        let Ok(bytes) = base64::engine::general_purpose::STANDARD.decode(b64) else {
            return EmbedOutcome::Status(400, "not a data url".into());
        };
        let Ok(decoded) = image::load_from_memory(&bytes) else {
            return EmbedOutcome::Status(400, "not an image".into());
        };
        let rgb = decoded.to_rgb8();
        let n = (rgb.width() * rgb.height()) as f64;
        let mut mean = [0.0f64; 3];
        for p in rgb.pixels() {
            for (m, v) in mean.iter_mut().zip(p.0) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut spread = [0.0f64; 3];
        for p in rgb.pixels() {
            for (s, (v, m)) in spread.iter_mut().zip(p.0.iter().zip(&mean)) {
                *s += (*v as f64 - m).powi(2);
            }
        }
        vectors.push(vec![
            mean[0] / 255.0,
            mean[1] / 255.0,
            mean[2] / 255.0,
            (spread[0] / n).sqrt() / 255.0,
            (spread[1] / n).sqrt() / 255.0,
            (spread[2] / n).sqrt() / 255.0,
        ]);
    }
    EmbedOutcome::Vectors(vectors)
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("fakeforge_examples/linear_probe");
    let _ = std::fs::remove_dir_all(&dir);

    let layout = vec![
        (Category::Object, Authenticity::Fake, 30),
        (Category::Object, Authenticity::Real, 30),
    ];
    let records = build_corpus(&dir.join("corpus"), &layout, 23)?;
    // paint the top half dark for reals and bright for fakes, so the
    // encoder's mean-brightness features separate the classes cleanly
    for record in &records {
        let mut image = fakeforge::perturb::load_rgb(&record.image_path)?;
        let fill = match record.authenticity {
            Authenticity::Fake => image::Rgb([235, 235, 235]),
            Authenticity::Real => image::Rgb([20, 20, 20]),
        };
        let half = image.height() / 2;
        for y in 0..half {
            for x in 0..image.width() {
                image.put_pixel(x, y, fill);
            }
        }
        image.save(&record.image_path)?;
    }

    let server = MockServer::spawn(
        |_: &ChatView| ChatOutcome::Reply("This is a fake image. Stand-in.".into()),
        pixel_stats_encoder,
    )
    .await;
    let encoder = EndpointConfig::local("encoder", server.base_url(), "encoder");
    let gateway = Gateway::new();

    // interleaved split keeps both classes on both sides
    let train_records: Vec<_> = records.iter().enumerate().filter(|(i, _)| i % 3 != 0).map(|(_, r)| r.clone()).collect();
    let test_records: Vec<_> = records.iter().enumerate().filter(|(i, _)| i % 3 == 0).map(|(_, r)| r.clone()).collect();
    let cache = dir.join("feature_cache");

    let train_features = extract_features(&gateway, &train_records, &encoder, &cache).await?;
    println!(
        "extracted {}x{} training features ({} embedding calls)",
        train_features.rows(),
        train_features.dim,
        server.embed_calls()
    );

    let (model, final_loss) = train(&train_features, &TrainHyper::default())?;
    println!("trained probe, final loss {final_loss:.6}");

    let test_features = extract_features(&gateway, &test_records, &encoder, &cache).await?;
    let predictions = predict(&model, &test_features)?;
    let verdicts: Vec<_> = predictions
        .iter()
        .zip(&test_features.labels)
        .map(|((_, v), l)| (*v, *l))
        .collect();
    let (acc, f1, counts) = detection_metrics(&verdicts)?;
    let scored: Vec<_> = predictions
        .iter()
        .zip(&test_features.labels)
        .map(|((s, _), l)| (*s, *l))
        .collect();
    let probe_auc = auc(&scored)?;
    println!("probe on test split: acc {acc:.3}, f1 {f1:.3}, auc {probe_auc:.3}");

    let record_ids: std::collections::BTreeSet<String> =
        test_records.iter().map(|r| r.id.clone()).collect();
    let probe_outcome = LabeledOutcome {
        name: "frozen features + linear probe".into(),
        record_ids: record_ids.clone(),
        report: MetricReport {
            overall: MetricBlock {
                counts,
                acc,
                f1,
                auc: Some(probe_auc),
                rouge_l: 0.0,
                css: None,
            },
            ..Default::default()
        },
    };

    // stand-in chat model over the same split: always answers "fake"
    let chat_verdicts: Vec<_> = test_records
        .iter()
        .map(|r| (fakeforge::datamodel::Verdict::Fake, r.authenticity))
        .collect();
    let (chat_acc, chat_f1, chat_counts) = detection_metrics(&chat_verdicts)?;
    let chat_outcome = LabeledOutcome {
        name: "chat model (always fake)".into(),
        record_ids,
        report: MetricReport {
            overall: MetricBlock {
                counts: chat_counts,
                acc: chat_acc,
                f1: chat_f1,
                auc: None,
                rouge_l: 0.0,
                css: None,
            },
            ..Default::default()
        },
    };

    println!("\n{}", compare_paradigms(&probe_outcome, &chat_outcome)?.render());
    Ok(())
}
