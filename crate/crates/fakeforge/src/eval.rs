//! End-to-end evaluation of a model under test: question every test image
//! with the standardized prompt, parse and score the replies, slice per
//! category, and run the robustness grid.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_qa_dataset, Authenticity, EvalPrediction, MetricBlock, MetricReport, QAPair, Split,
    Verdict,
};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::{
    Embedder, EndpointConfig, EndpointEmbedder, Gateway, Message, MessagePart, MessageSequence,
    Role,
};
use crate::metrics;
use crate::perturb::{self, PerturbationSpec};
use crate::prompts::eval_prompt;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Record-level parallelism; per-endpoint admission still applies.
    pub workers: usize,
    /// Abort when more than this fraction of records fail terminally.
    pub failure_abort_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            workers: 4,
            failure_abort_fraction: 0.2,
        }
    }
}

/// Everything one evaluation run produced: the report, plus the raw
/// predictions in dataset order for persistence and rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: String,
    pub report: MetricReport,
    pub predictions: Vec<EvalPrediction>,
}

impl EvalOutcome {
    pub fn record_ids(&self) -> BTreeSet<String> {
        self.predictions.iter().map(|p| p.record_id.clone()).collect()
    }
}

fn test_rows(dataset_path: &Path) -> Result<Vec<QAPair>> {
    let rows: Vec<QAPair> = load_qa_dataset(dataset_path)?
        .into_iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    if rows.is_empty() {
        return Err(Error::Precondition(format!(
            "dataset {} has no test rows",
            dataset_path.display()
        )));
    }
    Ok(rows)
}

/// Build the request for one row. The request carries only the image and the
/// standardized question; ground truth never leaves the harness.
fn eval_request(attachment: MessagePart) -> MessageSequence {
    MessageSequence::new(vec![Message {
        role: Role::User,
        parts: vec![attachment, MessagePart::Text(eval_prompt().to_string())],
    }])
}

async fn query_rows<F>(
    gateway: &Gateway,
    model: &EndpointConfig,
    rows: &[QAPair],
    options: &EvalOptions,
    attachment_for: F,
) -> Result<Vec<EvalPrediction>>
where
    F: Fn(&QAPair) -> Result<MessagePart> + Sync,
{
    let predictions: Vec<(usize, EvalPrediction, bool)> =
        futures::stream::iter(rows.iter().enumerate().map(|(i, row)| {
            let attachment_for = &attachment_for;
            async move {
                let outcome = match attachment_for(row) {
                    Ok(attachment) => gateway.chat(model, &eval_request(attachment)).await,
                    Err(e) => Err(e),
                };
                match outcome {
                    Ok(reply) => (i, metrics::parse_verdict(&row.record_id, &reply), false),
                    Err(e) => {
                        let reason = format!("[endpoint failure] {e}");
                        (
                            i,
                            EvalPrediction {
                                record_id: row.record_id.clone(),
                                raw_response: reason.clone(),
                                parsed_verdict: Verdict::Unparseable,
                                explanation: reason,
                                score: None,
                            },
                            true,
                        )
                    }
                }
            }
        }))
        .buffer_unordered(options.workers.max(1))
        .collect()
        .await;

    let failures = predictions.iter().filter(|(_, _, failed)| *failed).count();
    if failures as f64 > options.failure_abort_fraction * rows.len() as f64 {
        return Err(Error::Other(format!(
            "aborting evaluation: {failures} of {} records failed terminally",
            rows.len()
        )));
    }

    let mut ordered: Vec<(usize, EvalPrediction, bool)> = predictions;
    ordered.sort_by_key(|(i, _, _)| *i);
    Ok(ordered.into_iter().map(|(_, p, _)| p).collect())
}

fn block_from(
    pairs: &[(&QAPair, &EvalPrediction)],
    rouge_by_record: &BTreeMap<String, f64>,
    css_by_record: Option<&BTreeMap<String, f64>>,
) -> Result<MetricBlock> {
    let verdicts: Vec<(Verdict, Authenticity)> = pairs
        .iter()
        .map(|(row, pred)| (pred.parsed_verdict, row.authenticity))
        .collect();
    let (acc, f1, counts) = metrics::detection_metrics(&verdicts)?;

    let scored: Vec<(f64, Authenticity)> = pairs
        .iter()
        .filter_map(|(row, pred)| pred.score.map(|s| (s, row.authenticity)))
        .collect();
    let auc = if scored.len() == pairs.len() && !scored.is_empty() {
        metrics::auc(&scored).ok()
    } else {
        None
    };

    let fake_ids: Vec<&String> = pairs
        .iter()
        .filter(|(row, _)| row.authenticity == Authenticity::Fake)
        .map(|(row, _)| &row.record_id)
        .collect();
    let rouge_l = if fake_ids.is_empty() {
        0.0
    } else {
        fake_ids.iter().map(|id| rouge_by_record[*id]).sum::<f64>() / fake_ids.len() as f64
    };
    let css = css_by_record.and_then(|by_record| {
        if fake_ids.is_empty() {
            None
        } else {
            Some(fake_ids.iter().map(|id| by_record[*id]).sum::<f64>() / fake_ids.len() as f64)
        }
    });

    Ok(MetricBlock {
        counts,
        acc,
        f1,
        auc,
        rouge_l,
        css,
    })
}

/// Score joined (row, prediction) pairs into a full report. Explanation
/// metrics are computed over fake-labeled references: the hypothesis is the
/// parsed explanation (raw text when unparseable), the reference is the
/// aggregated answer minus its verdict sentence.
pub async fn score_predictions<E: Embedder>(
    rows: &[QAPair],
    predictions: &[EvalPrediction],
    embedder: Option<&E>,
) -> Result<MetricReport> {
    if rows.len() != predictions.len() {
        return Err(Error::Precondition(format!(
            "{} rows but {} predictions",
            rows.len(),
            predictions.len()
        )));
    }
    let by_id: BTreeMap<&str, &EvalPrediction> = predictions
        .iter()
        .map(|p| (p.record_id.as_str(), p))
        .collect();
    let pairs: Vec<(&QAPair, &EvalPrediction)> = rows
        .iter()
        .map(|row| {
            by_id
                .get(row.record_id.as_str())
                .map(|p| (row, *p))
                .ok_or_else(|| {
                    Error::Precondition(format!("no prediction for record {:?}", row.record_id))
                })
        })
        .collect::<Result<_>>()?;

    // per-record explanation scores over fake-labeled references
    let fake_pairs: Vec<(&QAPair, &EvalPrediction)> = pairs
        .iter()
        .filter(|(row, _)| row.authenticity == Authenticity::Fake)
        .copied()
        .collect();
    let mut rouge_by_record = BTreeMap::new();
    let mut texts: Vec<(String, String)> = Vec::new();
    for (row, pred) in &fake_pairs {
        let reference = metrics::parse_verdict(&row.record_id, &row.answer).explanation;
        let hypothesis = pred.explanation.clone();
        rouge_by_record.insert(
            row.record_id.clone(),
            metrics::rouge_l(&hypothesis, &reference),
        );
        texts.push((hypothesis, reference));
    }
    let css_by_record = match embedder {
        Some(embedder) if !texts.is_empty() => {
            let hyps: Vec<String> = texts.iter().map(|(h, _)| nonempty(h)).collect();
            let refs: Vec<String> = texts.iter().map(|(_, r)| nonempty(r)).collect();
            let hyp_embeddings = embedder.embed(&hyps).await?;
            let ref_embeddings = embedder.embed(&refs).await?;
            let mut map = BTreeMap::new();
            for (i, (row, _)) in fake_pairs.iter().enumerate() {
                map.insert(
                    row.record_id.clone(),
                    metrics::css(&hyp_embeddings[i], &ref_embeddings[i])?,
                );
            }
            Some(map)
        }
        _ => None,
    };

    let overall = block_from(&pairs, &rouge_by_record, css_by_record.as_ref())?;
    let mut per_category = BTreeMap::new();
    let mut grouped: BTreeMap<crate::datamodel::Category, Vec<(&QAPair, &EvalPrediction)>> =
        BTreeMap::new();
    for pair in &pairs {
        grouped.entry(pair.0.category).or_default().push(*pair);
    }
    for (category, members) in grouped {
        per_category.insert(
            category,
            block_from(&members, &rouge_by_record, css_by_record.as_ref())?,
        );
    }

    let report = MetricReport {
        overall,
        per_category,
        perturbation_tag: None,
    };
    report.validate()?;
    Ok(report)
}

fn nonempty(text: &str) -> String {
    if text.trim().is_empty() {
        "(empty)".into()
    } else {
        text.to_string()
    }
}

async fn evaluate_with_attachments<F>(
    gateway: &Gateway,
    model: &EndpointConfig,
    rows: &[QAPair],
    embedder: Option<&EndpointConfig>,
    options: &EvalOptions,
    attachment_for: F,
) -> Result<EvalOutcome>
where
    F: Fn(&QAPair) -> Result<MessagePart> + Sync,
{
    let predictions = query_rows(gateway, model, rows, options, attachment_for).await?;
    let report = match embedder {
        Some(endpoint) => {
            let embedder = EndpointEmbedder { gateway, endpoint };
            score_predictions(rows, &predictions, Some(&embedder)).await?
        }
        None => score_predictions::<EndpointEmbedder>(rows, &predictions, None).await?,
    };
    Ok(EvalOutcome {
        model: model.name.clone(),
        report,
        predictions,
    })
}

/// Evaluate a model on the dataset's test rows.
pub async fn evaluate(
    gateway: &Gateway,
    model: &EndpointConfig,
    dataset_path: impl AsRef<Path>,
    embedder: Option<&EndpointConfig>,
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    let rows = test_rows(dataset_path.as_ref())?;
    evaluate_with_attachments(gateway, model, &rows, embedder, options, |row| {
        Ok(MessagePart::image_file(&row.image_path))
    })
    .await
}

/// Evaluate under every suite perturbation (seeded per record), one tagged
/// report per spec, identity last. The identity pass attaches the original
/// file bytes, so it is request-identical to a plain [`evaluate`].
pub async fn evaluate_robustness(
    gateway: &Gateway,
    model: &EndpointConfig,
    dataset_path: impl AsRef<Path>,
    seed: u64,
    embedder: Option<&EndpointConfig>,
    options: &EvalOptions,
) -> Result<Vec<EvalOutcome>> {
    let rows = test_rows(dataset_path.as_ref())?;
    let mut outcomes = Vec::new();
    for spec in perturb::suite() {
        let outcome = evaluate_one_spec(gateway, model, &rows, &spec, seed, embedder, options).await?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// One robustness cell: evaluate the test rows under a single perturbation.
pub async fn evaluate_one_spec(
    gateway: &Gateway,
    model: &EndpointConfig,
    rows: &[QAPair],
    spec: &PerturbationSpec,
    seed: u64,
    embedder: Option<&EndpointConfig>,
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    let mut outcome = if spec.kind == perturb::PerturbationKind::Identity {
        evaluate_with_attachments(gateway, model, rows, embedder, options, |row| {
            Ok(MessagePart::image_file(&row.image_path))
        })
        .await?
    } else {
        evaluate_with_attachments(gateway, model, rows, embedder, options, |row| {
            perturbed_attachment(row, spec, seed)
        })
        .await?
    };
    outcome.report.perturbation_tag = Some(spec.tag.clone());
    Ok(outcome)
}

/// The exact attachment a robustness request carries for one row: the
/// perturbed raster, PNG-encoded.
pub fn perturbed_attachment(
    row: &QAPair,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<MessagePart> {
    let raster = perturb::load_rgb(&row.image_path)?;
    let perturbed = perturb::apply(&raster, spec, perturb::record_seed(seed, &row.record_id))?;
    Ok(MessagePart::ImageBytes {
        media_type: "image/png".into(),
        data: perturb::png_bytes(&perturbed)?,
    })
}

// ---- persistence and rescoring ----

/// Sidecar linking a responses file to the dataset and run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsesMeta {
    pub model: String,
    pub dataset_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_meta_digest: Option<String>,
}

pub fn dataset_digest(dataset_path: impl AsRef<Path>) -> Result<String> {
    let path = dataset_path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Persist raw responses beside the report so scoring can be repeated without
/// any traffic to the model.
pub fn persist_outcome(
    dir: impl AsRef<Path>,
    outcome: &EvalOutcome,
    dataset_path: impl AsRef<Path>,
    run_meta_digest: Option<String>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let responses = dir.join("responses.jsonl");
    crate::datamodel::write_jsonl(&responses, &outcome.predictions)?;
    let meta = ResponsesMeta {
        model: outcome.model.clone(),
        dataset_digest: dataset_digest(&dataset_path)?,
        run_meta_digest,
    };
    let meta_path = dir.join("responses.meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Other(e.to_string()))? + "\n",
    )
    .map_err(|e| Error::io(&meta_path, e))?;
    write_report_file(
        dir.join("report.json"),
        &[(outcome.model.clone(), outcome.report.clone())],
    )?;
    Ok(responses)
}

/// Recompute metrics from persisted responses, optionally with a different
/// embedder. Refuses to score against a dataset whose digest no longer
/// matches the one the responses were produced from.
pub async fn rescore(
    gateway: &Gateway,
    responses_path: impl AsRef<Path>,
    dataset_path: impl AsRef<Path>,
    embedder: Option<&EndpointConfig>,
) -> Result<EvalOutcome> {
    let responses_path = responses_path.as_ref();
    let meta_path = responses_path.with_file_name("responses.meta.json");
    let meta: ResponsesMeta = {
        let raw = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Other(format!("bad meta file: {e}")))?
    };
    let current = dataset_digest(dataset_path.as_ref())?;
    if current != meta.dataset_digest {
        return Err(Error::DigestMismatch(format!(
            "dataset digest {current} does not match the digest {} the responses were produced from",
            meta.dataset_digest
        )));
    }

    let rows = test_rows(dataset_path.as_ref())?;
    let stored: Vec<EvalPrediction> = crate::datamodel::read_jsonl(responses_path)?;
    // re-parse from raw text so parser fixes apply without requerying
    let predictions: Vec<EvalPrediction> = stored
        .iter()
        .map(|p| {
            let mut parsed = metrics::parse_verdict(&p.record_id, &p.raw_response);
            parsed.score = p.score;
            parsed
        })
        .collect();
    let report = match embedder {
        Some(endpoint) => {
            let embedder = EndpointEmbedder { gateway, endpoint };
            score_predictions(&rows, &predictions, Some(&embedder)).await?
        }
        None => score_predictions::<EndpointEmbedder>(&rows, &predictions, None).await?,
    };
    Ok(EvalOutcome {
        model: meta.model,
        report,
        predictions,
    })
}

// ---- report rendering ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub model: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub reports: Vec<LabeledReport>,
}

pub fn write_report_file(
    path: impl AsRef<Path>,
    reports: &[(String, MetricReport)],
) -> Result<()> {
    let path = path.as_ref();
    let file = ReportFile {
        reports: reports
            .iter()
            .map(|(model, report)| LabeledReport {
                model: model.clone(),
                report: report.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Other(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_report_file(path: impl AsRef<Path>) -> Result<ReportFile> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Other(format!("bad report file: {e}")))
}

/// Percentage with one decimal, the table convention (0.986 -> "98.6").
pub fn fmt_pct(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(fmt_pct).unwrap_or_else(|| "-".into())
}

/// Human-readable table, one row per (model, perturbation tag), values x100 to
/// one decimal, stable column order.
pub fn render_report(reports: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:<16} {:>6} {:>6} {:>8} {:>6} {:>6} {:>8} {:>12}\n",
        "model", "perturbation", "acc", "f1", "rouge_l", "css", "auc", "records", "unparseable"
    ));
    for (model, report) in reports {
        let block = &report.overall;
        out.push_str(&format!(
            "{:<20} {:<16} {:>6} {:>6} {:>8} {:>6} {:>6} {:>8} {:>12}\n",
            model,
            report.perturbation_tag.as_deref().unwrap_or("(none)"),
            fmt_pct(block.acc),
            fmt_pct(block.f1),
            fmt_pct(block.rouge_l),
            fmt_opt(block.css),
            fmt_opt(block.auc),
            block.counts.total(),
            block.counts.unparseable,
        ));
    }
    out
}

/// Per-category table for one report.
pub fn render_per_category(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>6} {:>6} {:>8} {:>6} {:>8}\n",
        "category", "acc", "f1", "rouge_l", "css", "records"
    ));
    for (category, block) in &report.per_category {
        out.push_str(&format!(
            "{:<20} {:>6} {:>6} {:>8} {:>6} {:>8}\n",
            category.name(),
            fmt_pct(block.acc),
            fmt_pct(block.f1),
            fmt_pct(block.rouge_l),
            fmt_opt(block.css),
            block.counts.total(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Category;
    use crate::fixture;
    use crate::gateway::MemoryJournal;
    use crate::mock::{
        image_reply_key, ChatOutcome, ChatView, HashEmbed, ImageKeyedReplies, MockServer,
    };
    use std::sync::Arc;

    /// Dataset over a fixture corpus where every row is a test row and the
    /// answer embeds the record id.
    fn dataset_rows(dir: &Path, per_cell: usize, seed: u64) -> Vec<QAPair> {
        let records =
            fixture::build_corpus(dir, &fixture::balanced_layout(per_cell), seed).unwrap();
        records
            .iter()
            .map(|r| QAPair {
                record_id: r.id.clone(),
                image_path: r.image_path.clone(),
                question: eval_prompt().to_string(),
                answer: format!(
                    "{} Evidence for record {} includes texture and structure notes.",
                    r.authenticity.verdict_sentence(),
                    r.id
                ),
                split: Split::Test,
                category: r.category.unwrap(),
                authenticity: r.authenticity,
            })
            .collect()
    }

    fn write_dataset(dir: &Path, rows: &[QAPair]) -> PathBuf {
        let path = dir.join("dataset.jsonl");
        crate::datamodel::write_jsonl(&path, rows).unwrap();
        path
    }

    fn echo_map(gateway: &Gateway, rows: &[QAPair], invert: bool) -> ImageKeyedReplies {
        let mut map = std::collections::HashMap::new();
        for row in rows {
            let key = image_reply_key(gateway, Path::new(&row.image_path)).unwrap();
            let reply = if invert {
                flip_sentence(&row.answer)
            } else {
                row.answer.clone()
            };
            map.insert(key, reply);
        }
        ImageKeyedReplies {
            by_image_digest: map,
            fallback: ChatOutcome::Status(404, "unknown image".into()),
        }
    }

    fn flip_sentence(answer: &str) -> String {
        if let Some(rest) = answer.strip_prefix("This is a fake image.") {
            format!("This is a real image.{rest}")
        } else if let Some(rest) = answer.strip_prefix("This is a real image.") {
            format!("This is a fake image.{rest}")
        } else {
            answer.to_string()
        }
    }

    #[tokio::test]
    async fn echo_model_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let rows = dataset_rows(dir.path(), 1, 41);
        let dataset = write_dataset(dir.path(), &rows);
        let gateway = Gateway::new();
        let server = MockServer::spawn(echo_map(&gateway, &rows, false), HashEmbed::default()).await;
        let model = EndpointConfig::local("candidate", server.base_url(), "candidate");
        let embedder = EndpointConfig::local("embedder", server.base_url(), "embedder");

        let outcome = evaluate(
            &gateway,
            &model,
            &dataset,
            Some(&embedder),
            &EvalOptions::default(),
        )
        .await
        .unwrap();
        let block = &outcome.report.overall;
        assert_eq!(block.acc, 1.0);
        assert_eq!(block.f1, 1.0);
        assert_eq!(block.rouge_l, 1.0);
        assert!((block.css.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(outcome.report.per_category.len(), 7);
        for (category, cat_block) in &outcome.report.per_category {
            assert_eq!(cat_block.acc, 1.0, "category {category}");
            assert_eq!(cat_block.counts.total(), 2);
        }
    }

    #[tokio::test]
    async fn inverted_model_scores_zero_acc_with_unchanged_rouge() {
        let dir = tempfile::tempdir().unwrap();
        let rows = dataset_rows(dir.path(), 1, 43);
        let dataset = write_dataset(dir.path(), &rows);
        let gateway = Gateway::new();
        let server = MockServer::spawn(echo_map(&gateway, &rows, true), HashEmbed::default()).await;
        let model = EndpointConfig::local("candidate", server.base_url(), "candidate");

        let outcome = evaluate(&gateway, &model, &dataset, None, &EvalOptions::default())
            .await
            .unwrap();
        assert_eq!(outcome.report.overall.acc, 0.0);
        // verdict flipped but explanation text untouched
        assert_eq!(outcome.report.overall.rouge_l, 1.0);
        assert_eq!(outcome.report.overall.css, None);
    }

    #[tokio::test]
    async fn requests_never_carry_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let rows = dataset_rows(dir.path(), 1, 47);
        let dataset = write_dataset(dir.path(), &rows);
        let journal = Arc::new(MemoryJournal::default());
        let gateway = Gateway::with_journal(journal.clone());
        let server = MockServer::spawn(echo_map(&gateway, &rows, false), HashEmbed::default()).await;
        let model = EndpointConfig::local("candidate", server.base_url(), "candidate");

        evaluate(&gateway, &model, &dataset, None, &EvalOptions::default())
            .await
            .unwrap();
        let entries = journal.entries();
        assert_eq!(entries.len(), rows.len());
        for entry in entries {
            assert!(!entry.request_body.contains("authenticity"));
            assert!(!entry.request_body.contains("Evidence for record"));
            assert!(entry.request_body.contains(eval_prompt()));
        }
    }

    #[tokio::test]
    async fn failures_become_unparseable_until_the_abort_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let rows = dataset_rows(dir.path(), 1, 53);
        let dataset = write_dataset(dir.path(), &rows);
        let gateway = Gateway::new();

        // every request fails: far beyond 20%
        let server = MockServer::spawn(
            |_: &ChatView| ChatOutcome::Status(400, "nope".into()),
            HashEmbed::default(),
        )
        .await;
        let mut model = EndpointConfig::local("candidate", server.base_url(), "candidate");
        model.retry.max_attempts = 1;
        let err = evaluate(&gateway, &model, &dataset, None, &EvalOptions::default())
            .await
            .unwrap_err();
        assert!(err.to_string().contains("aborting evaluation"), "{err}");

        // a single bad image (1/14 = 7%) degrades to unparseable
        let map = echo_map(&gateway, &rows, false);
        std::fs::write(&rows[3].image_path, b"garbage").unwrap();
        let dataset2 = write_dataset(&dir.path().join("two"), &rows);
        let server2 = MockServer::spawn(map, HashEmbed::default()).await;
        let model2 = EndpointConfig::local("candidate2", server2.base_url(), "candidate");
        let outcome = evaluate(&gateway, &model2, &dataset2, None, &EvalOptions::default())
            .await
            .unwrap();
        assert_eq!(outcome.report.overall.counts.unparseable, 1);
        let failed = outcome
            .predictions
            .iter()
            .find(|p| p.parsed_verdict == Verdict::Unparseable)
            .unwrap();
        assert!(failed.raw_response.starts_with("[endpoint failure]"));
        assert_eq!(failed.explanation, failed.raw_response);
    }

    #[tokio::test]
    async fn robustness_grid_is_tagged_in_suite_order() {
        let dir = tempfile::tempdir().unwrap();
        // one category keeps the grid quick: 13 specs x 4 records
        let records = fixture::build_corpus(
            dir.path(),
            &vec![
                (Category::Animal, Authenticity::Fake, 2),
                (Category::Animal, Authenticity::Real, 2),
            ],
            59,
        )
        .unwrap();
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
        let dataset = write_dataset(dir.path(), &rows);
        let gateway = Gateway::new();

        // constant-reply model: ignores pixels entirely
        let server = MockServer::spawn(
            |_: &ChatView| ChatOutcome::Reply("This is a fake image. Constant note.".into()),
            HashEmbed::default(),
        )
        .await;
        let model = EndpointConfig::local("candidate", server.base_url(), "candidate");

        let outcomes = evaluate_robustness(&gateway, &model, &dataset, 7, None, &EvalOptions::default())
            .await
            .unwrap();
        assert_eq!(outcomes.len(), 13);
        let tags: Vec<&str> = outcomes
            .iter()
            .map(|o| o.report.perturbation_tag.as_deref().unwrap())
            .collect();
        let expected: Vec<String> = perturb::suite().iter().map(|s| s.tag.clone()).collect();
        assert_eq!(tags, expected.iter().map(|s| s.as_str()).collect::<Vec<_>>());

        // pixel-blind model: every cell scores identically
        let plain = evaluate(&gateway, &model, &dataset, None, &EvalOptions::default())
            .await
            .unwrap();
        for outcome in &outcomes {
            assert_eq!(outcome.report.overall.acc, plain.report.overall.acc);
            assert_eq!(outcome.report.overall.f1, plain.report.overall.f1);
        }

        // the identity cell is request-identical to the plain run
        let identity = &outcomes[12];
        assert_eq!(identity.report.overall, plain.report.overall);
    }

    #[tokio::test]
    async fn rescore_reuses_responses_and_refuses_stale_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let rows = dataset_rows(dir.path(), 1, 61);
        let dataset = write_dataset(dir.path(), &rows);
        let gateway = Gateway::new();
        let server = MockServer::spawn(echo_map(&gateway, &rows, false), HashEmbed::default()).await;
        let model = EndpointConfig::local("candidate", server.base_url(), "candidate");
        let embedder = EndpointConfig::local("embedder", server.base_url(), "embedder");

        let outcome = evaluate(&gateway, &model, &dataset, None, &EvalOptions::default())
            .await
            .unwrap();
        let out_dir = dir.path().join("run");
        let responses = persist_outcome(&out_dir, &outcome, &dataset, None).unwrap();
        let model_calls = server.chat_calls();

        // rescoring with an embedder adds css without model traffic
        let rescored = rescore(&gateway, &responses, &dataset, Some(&embedder))
            .await
            .unwrap();
        assert_eq!(server.chat_calls(), model_calls);
        assert_eq!(rescored.report.overall.acc, 1.0);
        assert!((rescored.report.overall.css.unwrap() - 1.0).abs() < 1e-12);

        // mutating the dataset invalidates the responses
        let mut tampered = rows.clone();
        tampered[0].answer.push_str(" tampered");
        let dataset2 = write_dataset(&dir.path().join("tampered"), &tampered);
        let err = rescore(&gateway, &responses, &dataset2, None)
            .await
            .unwrap_err();
        assert!(matches!(err, Error::DigestMismatch(_)));
    }

    #[test]
    fn report_rendering_and_round_trip() {
        let mut report = MetricReport::default();
        report.overall.acc = 0.986;
        report.overall.f1 = 0.981;
        report.overall.rouge_l = 0.58;
        report.overall.css = Some(0.877);
        report.overall.counts.tp = 10;
        report.per_category.insert(
            Category::Animal,
            MetricBlock {
                counts: crate::datamodel::ConfusionCounts {
                    tp: 10,
                    ..Default::default()
                },
                acc: 0.986,
                f1: 0.981,
                auc: None,
                rouge_l: 0.58,
                css: Some(0.877),
            },
        );

        let rendered = render_report(&[("candidate".into(), report.clone())]);
        assert!(rendered.contains("98.6"), "{rendered}");
        assert!(rendered.contains("98.1"));
        assert!(rendered.contains("58.0"));
        assert!(rendered.contains("87.7"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let reports = vec![
            ("candidate".to_string(), report.clone()),
            ("other".to_string(), {
                let mut r = report.clone();
                r.perturbation_tag = Some("JPEG 70".into());
                r
            }),
        ];
        write_report_file(&path, &reports).unwrap();
        let loaded = load_report_file(&path).unwrap();
        assert_eq!(loaded.reports.len(), 2);
        assert_eq!(loaded.reports[0].report, report);
        assert_eq!(loaded.reports[1].report.perturbation_tag.as_deref(), Some("JPEG 70"));

        let two_rows = render_report(
            &loaded
                .reports
                .iter()
                .map(|r| (r.model.clone(), r.report.clone()))
                .collect::<Vec<_>>(),
        );
        assert_eq!(two_rows.lines().count(), 3);
    }
}
