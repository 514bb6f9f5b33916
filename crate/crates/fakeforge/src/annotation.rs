//! Multi-endpoint annotation with aggregation: candidate captions from N
//! annotator models, verdict validation against ground truth, merging through
//! an aggregator model, and a resumable journal.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_manifest, AggregatedAnnotation, AnnotationBundle, BundleStatus, CandidateAnnotation,
    ImageRecord,
};
use crate::digest::sha256_hex_parts;
use crate::error::{Error, Result};
use crate::gateway::{EndpointConfig, Gateway, Message, MessagePart, Role};
use crate::prompts::{render_aggregation_request, render_annotation_request, PromptCatalog};

/// How far ahead verdict checking looks for the opening sentence.
const VERDICT_WINDOW: usize = 40;

#[derive(Debug, Clone)]
pub struct AnnotationOptions {
    /// Record-level parallelism; per-endpoint admission still applies.
    pub workers: usize,
    /// Process at most this many pending records this run, leaving the rest
    /// for a later resume.
    pub max_records: Option<usize>,
}

impl Default for AnnotationOptions {
    fn default() -> Self {
        AnnotationOptions {
            workers: 4,
            max_records: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub complete: usize,
    pub failed: usize,
    /// Records reused from the journal without any network traffic.
    pub skipped: usize,
    pub annotator_errors: BTreeMap<String, usize>,
}

/// Does the reply's opening agree with ground truth? Case-insensitive match of
/// the verdict phrase within the first few characters.
pub fn verdict_ok(text: &str, truth: crate::datamodel::Authenticity) -> bool {
    let window_end = text
        .char_indices()
        .nth(VERDICT_WINDOW)
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    let head = text[..window_end].to_lowercase();
    let phrase = match truth {
        crate::datamodel::Authenticity::Real => "this is a real image",
        crate::datamodel::Authenticity::Fake => "this is a fake image",
    };
    head.contains(phrase)
}

struct CandidateRound {
    candidates: Vec<CandidateAnnotation>,
    errors: Vec<(String, String)>,
}

async fn query_annotators(
    gateway: &Gateway,
    catalog: &PromptCatalog,
    record: &ImageRecord,
    annotators: &[EndpointConfig],
) -> Result<CandidateRound> {
    let category = record.require_category()?;
    let template = catalog.select_prompt(category, record.authenticity, record.hard_sample);
    let request = render_annotation_request(template, record)?;

    let futures = annotators.iter().map(|endpoint| {
        let request = request.clone();
        async move {
            match gateway.chat(endpoint, &request).await {
                Ok(text) => Ok(CandidateAnnotation {
                    annotator_id: endpoint.name.clone(),
                    verdict_ok: verdict_ok(&text, record.authenticity),
                    text,
                }),
                Err(e) => Err((endpoint.name.clone(), e.to_string())),
            }
        }
    });
    let results = futures::future::join_all(futures).await;

    let mut round = CandidateRound {
        candidates: Vec::new(),
        errors: Vec::new(),
    };
    for result in results {
        match result {
            Ok(candidate) => round.candidates.push(candidate),
            Err(err) => round.errors.push(err),
        }
    }
    Ok(round)
}

/// One candidate per annotator that responded; a single annotator's terminal
/// failure drops its candidate rather than aborting the record.
pub async fn annotate_record(
    gateway: &Gateway,
    catalog: &PromptCatalog,
    record: &ImageRecord,
    annotators: &[EndpointConfig],
) -> Result<Vec<CandidateAnnotation>> {
    if annotators.is_empty() {
        return Err(Error::Precondition("no annotator endpoints configured".into()));
    }
    Ok(query_annotators(gateway, catalog, record, annotators)
        .await?
        .candidates)
}

/// Merge agreeing candidates through the aggregator endpoint. Contradicting
/// candidates are dropped first; a reply that does not open with the required
/// verdict sentence is retried once with the complaint appended.
pub async fn aggregate_record(
    gateway: &Gateway,
    catalog: &PromptCatalog,
    record: &ImageRecord,
    candidates: &[CandidateAnnotation],
    aggregator: &EndpointConfig,
) -> Result<AggregatedAnnotation> {
    let surviving: Vec<CandidateAnnotation> = candidates
        .iter()
        .filter(|c| c.verdict_ok)
        .cloned()
        .collect();
    if surviving.len() < 2 {
        return Err(Error::Precondition(format!(
            "only {} agreeing candidate(s) for record {:?}",
            surviving.len(),
            record.id
        )));
    }
    let sentence = record.authenticity.verdict_sentence();
    let request = render_aggregation_request(&surviving, catalog.merge_instruction())?;

    let first = gateway.chat(aggregator, &request).await?;
    let text = first.trim().to_string();
    if text.starts_with(sentence) {
        return Ok(AggregatedAnnotation {
            aggregator_id: aggregator.name.clone(),
            text,
        });
    }

    // one corrective retry carrying the validation complaint
    let mut messages = request.messages().to_vec();
    messages.push(Message {
        role: Role::Assistant,
        parts: vec![MessagePart::Text(first)],
    });
    messages.push(Message {
        role: Role::User,
        parts: vec![MessagePart::Text(format!(
            "Your answer was rejected: it must begin with the exact sentence \"{sentence}\". \
             Rewrite the merged answer accordingly."
        ))],
    });
    let second = gateway
        .chat(aggregator, &crate::gateway::MessageSequence::new(messages))
        .await?;
    let text = second.trim().to_string();
    if text.starts_with(sentence) {
        Ok(AggregatedAnnotation {
            aggregator_id: aggregator.name.clone(),
            text,
        })
    } else {
        Err(Error::FormatViolation("aggregation format violation".into()))
    }
}

async fn process_record(
    gateway: &Gateway,
    catalog: &PromptCatalog,
    record: &ImageRecord,
    annotators: &[EndpointConfig],
    aggregator: &EndpointConfig,
) -> (AnnotationBundle, Vec<(String, String)>) {
    let mut bundle = AnnotationBundle {
        record_id: record.id.clone(),
        status: BundleStatus::Pending,
        candidates: Vec::new(),
        aggregated: None,
        failure_reason: None,
    };
    let mut errors = Vec::new();

    // validate the image up front so one unreadable file does not burn one
    // terminal failure per annotator; the reason names the file, not the full
    // path, so stores stay byte-stable across working directories
    if gateway
        .encode_image_file(Path::new(&record.image_path))
        .is_err()
    {
        let name = Path::new(&record.image_path)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| record.image_path.clone());
        bundle.status = BundleStatus::Failed;
        bundle.failure_reason = Some(format!("image unreadable: {name}"));
        return (bundle, errors);
    }

    let mut round = match query_annotators(gateway, catalog, record, annotators).await {
        Ok(r) => r,
        Err(e) => {
            bundle.status = BundleStatus::Failed;
            bundle.failure_reason = Some(e.to_string());
            return (bundle, errors);
        }
    };
    errors.append(&mut round.errors.clone());

    if round.candidates.is_empty() {
        bundle.candidates = round.candidates;
        bundle.status = BundleStatus::Failed;
        bundle.failure_reason = Some("all annotators failed".into());
        return (bundle, errors);
    }

    // retry once the annotators that produced no agreeing candidate
    if round.candidates.iter().filter(|c| c.verdict_ok).count() < 2 {
        let have_ok: Vec<String> = round
            .candidates
            .iter()
            .filter(|c| c.verdict_ok)
            .map(|c| c.annotator_id.clone())
            .collect();
        let retry_endpoints: Vec<EndpointConfig> = annotators
            .iter()
            .filter(|e| !have_ok.contains(&e.name))
            .cloned()
            .collect();
        if let Ok(mut retry_round) =
            query_annotators(gateway, catalog, record, &retry_endpoints).await
        {
            errors.append(&mut retry_round.errors.clone());
            round.candidates.retain(|c| have_ok.contains(&c.annotator_id));
            round.candidates.append(&mut retry_round.candidates);
            round
                .candidates
                .sort_by_key(|c| annotators.iter().position(|e| e.name == c.annotator_id));
        }
    }

    bundle.candidates = round.candidates.clone();
    if round.candidates.iter().filter(|c| c.verdict_ok).count() < 2 {
        bundle.status = BundleStatus::Failed;
        bundle.failure_reason = Some("fewer than 2 agreeing candidates".into());
        return (bundle, errors);
    }

    match aggregate_record(gateway, catalog, record, &round.candidates, aggregator).await {
        Ok(aggregated) => {
            bundle.aggregated = Some(aggregated);
            bundle.status = BundleStatus::Complete;
        }
        Err(e) => {
            bundle.status = BundleStatus::Failed;
            bundle.failure_reason = Some(match e {
                Error::FormatViolation(m) => m,
                other => other.to_string(),
            });
        }
    }
    (bundle, errors)
}

#[derive(Serialize, Deserialize, Clone)]
struct JournalLine {
    record_id: String,
    digest: String,
    bundle: AnnotationBundle,
}

/// Digest of everything that determines a record's annotation result: the
/// record itself, the model identities and sampling parameters, and the prompt
/// texts in play. Config changes invalidate resume.
fn input_digest(
    record: &ImageRecord,
    annotators: &[EndpointConfig],
    aggregator: &EndpointConfig,
    catalog: &PromptCatalog,
) -> String {
    let mut parts: Vec<String> = Vec::new();
    parts.push(serde_json::to_string(record).unwrap_or_default());
    for e in annotators.iter().chain(std::iter::once(aggregator)) {
        parts.push(format!(
            "{}|{}|{}|{}",
            e.name, e.model_name, e.temperature, e.max_tokens
        ));
    }
    for (id, digest) in catalog.digests() {
        parts.push(format!("{id}={digest}"));
    }
    sha256_hex_parts(parts)
}

/// Path of the resume journal sitting beside a store file.
pub fn journal_path(store_path: &Path) -> PathBuf {
    let mut name = store_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".journal");
    store_path.with_file_name(name)
}

fn load_journal(path: &Path) -> Result<BTreeMap<String, JournalLine>> {
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let lines: Vec<JournalLine> = crate::datamodel::read_jsonl(path)?;
    for line in lines {
        map.insert(line.record_id.clone(), line); // last entry wins
    }
    Ok(map)
}

/// Run annotation + aggregation over a manifest, writing one bundle line per
/// record in manifest order. Already-complete records (same input digest in
/// the journal) are skipped without network traffic; reruns after an
/// interruption pick up where the journal left off.
pub async fn run_annotation(
    gateway: &Gateway,
    catalog: &PromptCatalog,
    manifest_path: impl AsRef<Path>,
    annotators: &[EndpointConfig],
    aggregator: &EndpointConfig,
    out_path: impl AsRef<Path>,
    options: &AnnotationOptions,
) -> Result<PipelineSummary> {
    if annotators.is_empty() {
        return Err(Error::Precondition("no annotator endpoints configured".into()));
    }
    let out_path = out_path.as_ref();
    let records = load_manifest(manifest_path)?;
    let journal_file = journal_path(out_path);
    let journal = load_journal(&journal_file)?;

    let mut summary = PipelineSummary::default();
    let mut results: BTreeMap<String, AnnotationBundle> = BTreeMap::new();
    let mut pending: Vec<(&ImageRecord, String)> = Vec::new();

    for record in &records {
        let digest = input_digest(record, annotators, aggregator, catalog);
        match journal.get(&record.id) {
            Some(line)
                if line.digest == digest && line.bundle.status == BundleStatus::Complete =>
            {
                summary.skipped += 1;
                results.insert(record.id.clone(), line.bundle.clone());
            }
            _ => pending.push((record, digest)),
        }
    }

    if let Some(limit) = options.max_records {
        pending.truncate(limit);
    }

    if let Some(parent) = journal_file.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let journal_writer = Mutex::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_file)
            .map_err(|e| Error::io(&journal_file, e))?,
    );

    let journal_writer = &journal_writer;
    let processed: Vec<(AnnotationBundle, Vec<(String, String)>)> =
        futures::stream::iter(pending.iter().map(|(record, digest)| {
            let digest = digest.clone();
            async move {
                let (bundle, errors) =
                    process_record(gateway, catalog, record, annotators, aggregator).await;
                let line = JournalLine {
                    record_id: bundle.record_id.clone(),
                    digest,
                    bundle: bundle.clone(),
                };
                let serialized = serde_json::to_string(&line).expect("journal line serializes");
                {
                    let mut writer = journal_writer.lock().unwrap();
                    writeln!(writer, "{serialized}").ok();
                    writer.flush().ok();
                }
                (bundle, errors)
            }
        }))
        .buffer_unordered(options.workers.max(1))
        .collect()
        .await;

    for (bundle, errors) in processed {
        for (annotator, _) in errors {
            *summary.annotator_errors.entry(annotator).or_default() += 1;
        }
        results.insert(bundle.record_id.clone(), bundle);
    }

    // store in manifest order; records left for a later resume are omitted
    let mut store = Vec::new();
    for record in &records {
        if let Some(bundle) = results.get(&record.id) {
            match bundle.status {
                BundleStatus::Complete => summary.complete += 1,
                BundleStatus::Failed => summary.failed += 1,
                BundleStatus::Pending => {}
            }
            store.push(bundle.clone());
        }
    }
    crate::datamodel::write_jsonl(out_path, &store)?;

    tracing::info!(
        complete = summary.complete,
        failed = summary.failed,
        skipped = summary.skipped,
        "annotation run finished"
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Authenticity;
    use crate::fixture;
    use crate::mock::{
        contrarian_annotator, scripted_aggregator, scripted_annotator, ChatOutcome, ChatView,
        HashEmbed, MockServer, ModelRouter,
    };

    fn endpoints(base_url: &str) -> (Vec<EndpointConfig>, EndpointConfig) {
        let annotators = vec![
            EndpointConfig::local("annotator-a", base_url, "annotator-a"),
            EndpointConfig::local("annotator-b", base_url, "annotator-b"),
            EndpointConfig::local("annotator-c", base_url, "annotator-c"),
        ];
        let aggregator = EndpointConfig::local("aggregator", base_url, "aggregator");
        (annotators, aggregator)
    }

    fn standard_router() -> ModelRouter {
        ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", scripted_annotator("annotator-c"))
            .route("aggregator", scripted_aggregator())
    }

    #[test]
    fn verdict_window_is_checked_case_insensitively() {
        assert!(verdict_ok(
            "THIS IS A FAKE IMAGE. blah",
            Authenticity::Fake
        ));
        assert!(!verdict_ok(
            "This is a real image. blah",
            Authenticity::Fake
        ));
        let buried = format!("{} this is a fake image", "x".repeat(50));
        assert!(!verdict_ok(&buried, Authenticity::Fake));
    }

    #[tokio::test]
    async fn three_agreeing_annotators_yield_three_ok_candidates() {
        let server = MockServer::spawn(standard_router(), HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let records = fixture::build_corpus(
            dir.path(),
            &vec![(crate::datamodel::Category::Animal, Authenticity::Fake, 1)],
            3,
        )
        .unwrap();
        let (annotators, _) = endpoints(server.base_url());
        let gateway = Gateway::new();
        let catalog = PromptCatalog::builtin().unwrap();

        let candidates = annotate_record(&gateway, &catalog, &records[0], &annotators)
            .await
            .unwrap();
        assert_eq!(candidates.len(), 3);
        assert!(candidates.iter().all(|c| c.verdict_ok));
        assert!(candidates
            .iter()
            .all(|c| c.text.starts_with("This is a fake image.")));
    }

    #[tokio::test]
    async fn contradicting_candidate_is_flagged_and_excluded() {
        let router = ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", contrarian_annotator("annotator-c"))
            .route("aggregator", scripted_aggregator());
        let server = MockServer::spawn(router, HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let records = fixture::build_corpus(
            dir.path(),
            &vec![(crate::datamodel::Category::Scene, Authenticity::Fake, 1)],
            5,
        )
        .unwrap();
        let (annotators, aggregator) = endpoints(server.base_url());
        let journal = std::sync::Arc::new(crate::gateway::MemoryJournal::default());
        let gateway = Gateway::with_journal(journal.clone());
        let catalog = PromptCatalog::builtin().unwrap();

        let candidates = annotate_record(&gateway, &catalog, &records[0], &annotators)
            .await
            .unwrap();
        assert_eq!(candidates.len(), 3);
        assert_eq!(candidates.iter().filter(|c| c.verdict_ok).count(), 2);

        let aggregated = aggregate_record(&gateway, &catalog, &records[0], &candidates, &aggregator)
            .await
            .unwrap();
        assert!(aggregated.text.starts_with("This is a fake image."));

        // the aggregation request carried exactly the two agreeing candidates
        let agg_requests: Vec<_> = journal
            .entries()
            .into_iter()
            .filter(|e| e.endpoint == "aggregator")
            .collect();
        assert_eq!(agg_requests.len(), 1);
        let body = &agg_requests[0].request_body;
        assert!(body.contains("Response 1:"));
        assert!(body.contains("Response 2:"));
        assert!(!body.contains("Response 3:"));
        assert!(!body.contains("Contrarian take"));
    }

    #[tokio::test]
    async fn one_timed_out_annotator_still_yields_two_candidates() {
        let router = ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", |_: &ChatView| {
                ChatOutcome::Status(400, "permanently broken".into())
            })
            .route("aggregator", scripted_aggregator());
        let server = MockServer::spawn(router, HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let records = fixture::build_corpus(
            dir.path(),
            &vec![(crate::datamodel::Category::Object, Authenticity::Real, 1)],
            9,
        )
        .unwrap();
        let (annotators, _) = endpoints(server.base_url());
        let gateway = Gateway::new();
        let catalog = PromptCatalog::builtin().unwrap();

        let candidates = annotate_record(&gateway, &catalog, &records[0], &annotators)
            .await
            .unwrap();
        assert_eq!(candidates.len(), 2);
    }

    #[tokio::test]
    async fn misformatted_aggregation_is_retried_once_then_fails() {
        let attempts = std::sync::Arc::new(AtomicUsizeWrapper::default());
        let attempts_in = attempts.clone();
        let router = ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", scripted_annotator("annotator-c"))
            .route("aggregator", move |_: &ChatView| {
                attempts_in.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                ChatOutcome::Reply("A merged answer without the required opening.".into())
            });
        let server = MockServer::spawn(router, HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let records = fixture::build_corpus(
            dir.path(),
            &vec![(crate::datamodel::Category::Human, Authenticity::Fake, 1)],
            11,
        )
        .unwrap();
        let (annotators, aggregator) = endpoints(server.base_url());
        let gateway = Gateway::new();
        let catalog = PromptCatalog::builtin().unwrap();

        let candidates = annotate_record(&gateway, &catalog, &records[0], &annotators)
            .await
            .unwrap();
        let err = aggregate_record(&gateway, &catalog, &records[0], &candidates, &aggregator)
            .await
            .unwrap_err();
        assert!(matches!(err, Error::FormatViolation(_)));
        assert_eq!(attempts.0.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[derive(Default)]
    struct AtomicUsizeWrapper(std::sync::atomic::AtomicUsize);

    #[tokio::test]
    async fn correction_retry_can_succeed() {
        let router = ModelRouter::new()
            .route("annotator-a", scripted_annotator("annotator-a"))
            .route("annotator-b", scripted_annotator("annotator-b"))
            .route("annotator-c", scripted_annotator("annotator-c"))
            .route("aggregator", |view: &ChatView| {
                if view.text.contains("Your answer was rejected") {
                    ChatOutcome::Reply("This is a fake image. Corrected merge.".into())
                } else {
                    ChatOutcome::Reply("Sorry, here is a merged answer.".into())
                }
            });
        let server = MockServer::spawn(router, HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let records = fixture::build_corpus(
            dir.path(),
            &vec![(crate::datamodel::Category::Satellite, Authenticity::Fake, 1)],
            13,
        )
        .unwrap();
        let (annotators, aggregator) = endpoints(server.base_url());
        let gateway = Gateway::new();
        let catalog = PromptCatalog::builtin().unwrap();

        let candidates = annotate_record(&gateway, &catalog, &records[0], &annotators)
            .await
            .unwrap();
        let merged = aggregate_record(&gateway, &catalog, &records[0], &candidates, &aggregator)
            .await
            .unwrap();
        assert_eq!(merged.text, "This is a fake image. Corrected merge.");
    }

    #[tokio::test]
    async fn full_run_is_deterministic_and_resumable() {
        let server = MockServer::spawn(standard_router(), HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let layout = fixture::balanced_layout(1); // 14 records
        fixture::build_corpus(dir.path(), &layout, 21).unwrap();
        let manifest = fixture::manifest_path(dir.path());
        let (annotators, aggregator) = endpoints(server.base_url());
        let gateway = Gateway::new();
        let catalog = PromptCatalog::builtin().unwrap();

        let out_a = dir.path().join("a/store.jsonl");
        let out_b = dir.path().join("b/store.jsonl");
        let options = AnnotationOptions::default();

        let summary_a = run_annotation(
            &gateway, &catalog, &manifest, &annotators, &aggregator, &out_a, &options,
        )
        .await
        .unwrap();
        assert_eq!(summary_a.complete, 14);
        assert_eq!(summary_a.failed, 0);

        run_annotation(
            &gateway, &catalog, &manifest, &annotators, &aggregator, &out_b, &options,
        )
        .await
        .unwrap();
        assert_eq!(
            std::fs::read(&out_a).unwrap(),
            std::fs::read(&out_b).unwrap(),
            "fresh runs must be byte-identical"
        );

        // interrupted run: 6 records, then resume; resumed run must only query
        // the remaining 8 per annotator
        let out_c = dir.path().join("c/store.jsonl");
        let partial = AnnotationOptions {
            workers: 4,
            max_records: Some(6),
        };
        run_annotation(
            &gateway, &catalog, &manifest, &annotators, &aggregator, &out_c, &partial,
        )
        .await
        .unwrap();
        server.reset_counters();
        let resumed = run_annotation(
            &gateway, &catalog, &manifest, &annotators, &aggregator, &out_c, &options,
        )
        .await
        .unwrap();
        assert_eq!(resumed.skipped, 6);
        assert_eq!(resumed.complete, 14);
        for annotator in ["annotator-a", "annotator-b", "annotator-c"] {
            assert_eq!(
                server.chat_calls_for_model(annotator),
                8,
                "{annotator} must only be asked about the remaining records"
            );
        }
        assert_eq!(
            std::fs::read(&out_a).unwrap(),
            std::fs::read(&out_c).unwrap(),
            "resumed store must equal a straight-through store"
        );

        // every complete bundle opens with the ground-truth sentence
        let bundles = crate::datamodel::load_annotation_store(&out_c).unwrap();
        let records = load_manifest(&manifest).unwrap();
        for (bundle, record) in bundles.iter().zip(&records) {
            assert_eq!(bundle.record_id, record.id);
            let text = &bundle.aggregated.as_ref().unwrap().text;
            assert!(text.starts_with(record.authenticity.verdict_sentence()));
        }
    }

    #[tokio::test]
    async fn unreadable_image_fails_only_that_record() {
        let server = MockServer::spawn(standard_router(), HashEmbed::default()).await;
        let dir = tempfile::tempdir().unwrap();
        let layout = vec![(crate::datamodel::Category::Animal, Authenticity::Fake, 3)];
        let records = fixture::build_corpus(dir.path(), &layout, 31).unwrap();
        std::fs::write(&records[1].image_path, b"not an image at all").unwrap();
        let manifest = fixture::manifest_path(dir.path());
        let (annotators, aggregator) = endpoints(server.base_url());
        let gateway = Gateway::new();
        let catalog = PromptCatalog::builtin().unwrap();

        let out = dir.path().join("store.jsonl");
        let summary = run_annotation(
            &gateway,
            &catalog,
            &manifest,
            &annotators,
            &aggregator,
            &out,
            &AnnotationOptions::default(),
        )
        .await
        .unwrap();
        assert_eq!(summary.complete, 2);
        assert_eq!(summary.failed, 1);

        let bundles: Vec<AnnotationBundle> = crate::datamodel::read_jsonl(&out).unwrap();
        let failed = bundles
            .iter()
            .find(|b| b.status == BundleStatus::Failed)
            .unwrap();
        assert!(failed
            .failure_reason
            .as_ref()
            .unwrap()
            .contains("image unreadable"));
    }
}
