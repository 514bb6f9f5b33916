//! Shared domain types and the line-oriented manifest/annotation/dataset formats.
//!
//! Every on-disk artifact in this crate is UTF-8 with one JSON object per line,
//! so 100k-scale corpora can be streamed and resumed without loading everything
//! into memory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven image categories a record can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Animal,
    Human,
    Object,
    Scene,
    Satellite,
    Document,
    FaceManipulation,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Animal,
        Category::Human,
        Category::Object,
        Category::Scene,
        Category::Satellite,
        Category::Document,
        Category::FaceManipulation,
    ];

    /// The four open-set categories the classifier endpoint may assign.
    pub const CLASSIFIABLE: [Category; 4] = [
        Category::Animal,
        Category::Object,
        Category::Human,
        Category::Scene,
    ];

    /// Lowercase snake_case name, identical to the serialized form.
    pub fn name(&self) -> &'static str {
        match self {
            Category::Animal => "animal",
            Category::Human => "human",
            Category::Object => "object",
            Category::Scene => "scene",
            Category::Satellite => "satellite",
            Category::Document => "document",
            Category::FaceManipulation => "face_manipulation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Parse {
                    path: String::new(),
                    line: 0,
                    message: format!(
                        "unknown category {s:?}, expected one of: {}",
                        Category::ALL.map(|c| c.name()).join(", ")
                    ),
                }
            })
    }
}

/// Ground-truth authenticity of an image. Binary on purpose: unparseable model
/// outputs live in [`Verdict`], not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authenticity {
    Real,
    Fake,
}

impl Authenticity {
    pub fn name(&self) -> &'static str {
        match self {
            Authenticity::Real => "real",
            Authenticity::Fake => "fake",
        }
    }

    /// The fixed opening sentence every annotation and well-formed model reply
    /// must start with.
    pub fn verdict_sentence(&self) -> &'static str {
        match self {
            Authenticity::Real => "This is a real image.",
            Authenticity::Fake => "This is a fake image.",
        }
    }
}

impl fmt::Display for Authenticity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One image with ground truth and provenance; the unit of work for every
/// pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: String,
    pub authenticity: Authenticity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// High-quality fake with no visible artifacts; gets the cautious prompt.
    #[serde(default, skip_serializing_if = "is_false")]
    pub hard_sample: bool,
    /// Unknown manifest fields, preserved opaquely for round-trip.
    #[serde(flatten, default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ImageRecord {
    /// Category, or an error for stages that run after categorization.
    pub fn require_category(&self) -> Result<Category> {
        self.category.ok_or_else(|| {
            Error::Precondition(format!("record {:?} has no category", self.id))
        })
    }
}

/// Lifecycle of a record inside the annotation store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleStatus {
    Pending,
    Complete,
    Failed,
}

/// One annotator model's caption for a record, plus whether its opening
/// sentence agrees with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnnotation {
    pub annotator_id: String,
    pub text: String,
    pub verdict_ok: bool,
}

/// The merged caption produced by the aggregator endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAnnotation {
    pub aggregator_id: String,
    pub text: String,
}

/// Per-record candidate captions plus the aggregated final caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBundle {
    pub record_id: String,
    pub status: BundleStatus,
    pub candidates: Vec<CandidateAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregated: Option<AggregatedAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl AnnotationBundle {
    /// Count of candidates whose opening sentence matched ground truth.
    pub fn surviving_candidates(&self) -> usize {
        self.candidates.iter().filter(|c| c.verdict_ok).count()
    }

    /// Structural invariant: complete implies an aggregation over >= 2
    /// agreeing candidates.
    pub fn validate(&self) -> Result<()> {
        if self.status == BundleStatus::Complete {
            if self.aggregated.is_none() {
                return Err(Error::FormatViolation(format!(
                    "bundle {:?} is complete but has no aggregated caption",
                    self.record_id
                )));
            }
            if self.surviving_candidates() < 2 {
                return Err(Error::FormatViolation(format!(
                    "bundle {:?} is complete with fewer than 2 surviving candidates",
                    self.record_id
                )));
            }
        }
        for c in &self.candidates {
            if c.verdict_ok && c.text.is_empty() {
                return Err(Error::FormatViolation(format!(
                    "bundle {:?}: candidate {:?} has verdict_ok with empty text",
                    self.record_id, c.annotator_id
                )));
            }
        }
        Ok(())
    }
}

/// Train/test membership of a QA pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One training/evaluation sample: image, standardized question, target answer.
///
/// `category` and `authenticity` are carried so evaluation can join back to
/// ground truth without trusting the answer text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub record_id: String,
    pub image_path: String,
    pub question: String,
    pub answer: String,
    pub split: Split,
    pub category: Category,
    pub authenticity: Authenticity,
}

/// What the verdict parser made of a model reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Real,
    Fake,
    Unparseable,
}

impl Verdict {
    /// The verdict a correct model should produce for this ground truth.
    pub fn expected(truth: Authenticity) -> Verdict {
        match truth {
            Authenticity::Real => Verdict::Real,
            Authenticity::Fake => Verdict::Fake,
        }
    }
}

/// A model-under-test's raw response plus the parsed verdict and explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrediction {
    pub record_id: String,
    pub raw_response: String,
    pub parsed_verdict: Verdict,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Confusion counts with unparseable replies tracked separately, so
/// `tp + fp + tn + fn + unparseable` equals the number of evaluated records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unparseable: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.unparseable
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.unparseable += other.unparseable;
    }
}

/// One scored slice: detection metrics plus explanation metrics.
///
/// `rouge_l` and `css` are averaged over fake-labeled references and stored in
/// [0,1]; rendered tables show them x100. `css` is absent when no embedder was
/// configured, `auc` when the model produced no scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricBlock {
    pub counts: ConfusionCounts,
    pub acc: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub css: Option<f64>,
}

/// Full evaluation report: overall block, per-category blocks, and the
/// perturbation tag when produced by the robustness grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub overall: MetricBlock,
    pub per_category: BTreeMap<Category, MetricBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_tag: Option<String>,
}

impl MetricReport {
    /// Overall counts must equal the sum of per-category counts.
    pub fn validate(&self) -> Result<()> {
        let mut summed = ConfusionCounts::default();
        for block in self.per_category.values() {
            summed.add(&block.counts);
        }
        if summed != self.overall.counts {
            return Err(Error::Other(format!(
                "per-category counts {summed:?} do not sum to overall {:?}",
                self.overall.counts
            )));
        }
        Ok(())
    }
}

/// Per-manifest tallies logged at load time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestStats {
    pub total: usize,
    pub by_category: BTreeMap<Category, usize>,
    pub uncategorized: usize,
    pub by_authenticity: BTreeMap<Authenticity, usize>,
    pub hard_samples: usize,
}

impl ManifestStats {
    pub fn collect(records: &[ImageRecord]) -> Self {
        let mut stats = ManifestStats {
            total: records.len(),
            ..Default::default()
        };
        for r in records {
            match r.category {
                Some(c) => *stats.by_category.entry(c).or_default() += 1,
                None => stats.uncategorized += 1,
            }
            *stats.by_authenticity.entry(r.authenticity).or_default() += 1;
            if r.hard_sample {
                stats.hard_samples += 1;
            }
        }
        stats
    }
}

/// Parse one manifest line into a validated record.
pub fn parse_manifest_line(line: &str) -> Result<ImageRecord> {
    let record: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: String::new(),
        line: 0,
        message: e.to_string(),
    })?;
    if record.id.is_empty() {
        return Err(Error::Parse {
            path: String::new(),
            line: 0,
            message: "field id must be non-empty".into(),
        });
    }
    if record.image_path.is_empty() {
        return Err(Error::Parse {
            path: String::new(),
            line: 0,
            message: "field image_path must be non-empty".into(),
        });
    }
    Ok(record)
}

/// Load a manifest, enforcing unique ids. Counts and per-category /
/// per-authenticity tallies are logged.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_manifest_line(&line).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message,
            },
            other => other,
        })?;
        if let Some(first) = seen.insert(record.id.clone(), line_no) {
            return Err(Error::DuplicateId {
                id: record.id,
                first_line: first,
                second_line: line_no,
            });
        }
        records.push(record);
    }

    let stats = ManifestStats::collect(&records);
    tracing::info!(
        path = %path.display(),
        total = stats.total,
        by_category = ?stats.by_category,
        uncategorized = stats.uncategorized,
        by_authenticity = ?stats.by_authenticity,
        "loaded manifest"
    );
    Ok(records)
}

/// Write records back out, one JSON object per line.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Generic JSONL reader used by every line-oriented artifact.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Generic JSONL writer; one serialized object per line, trailing newline.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for item in items {
        let json = serde_json::to_string(item).map_err(|e| Error::Other(e.to_string()))?;
        writeln!(writer, "{json}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load an annotation store and check every bundle's structural invariants.
pub fn load_annotation_store(path: impl AsRef<Path>) -> Result<Vec<AnnotationBundle>> {
    let bundles: Vec<AnnotationBundle> = read_jsonl(&path)?;
    for b in &bundles {
        b.validate()?;
    }
    Ok(bundles)
}

/// Load a QA dataset file.
pub fn load_qa_dataset(path: impl AsRef<Path>) -> Result<Vec<QAPair>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_serialization_is_a_bijection() {
        for c in Category::ALL {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.name()));
            let back: Category = serde_json::from_str(&json).unwrap();
            assert_eq!(back, c);
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
        }
        let names: std::collections::BTreeSet<_> =
            Category::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), 7);
    }

    #[test]
    fn authenticity_round_trips() {
        for a in [Authenticity::Real, Authenticity::Fake] {
            let json = serde_json::to_string(&a).unwrap();
            let back: Authenticity = serde_json::from_str(&json).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn parse_line_maps_fields() {
        let line = r#"{"id":"img_7","image_path":"sat/7.png","authenticity":"fake","category":"satellite"}"#;
        let record = parse_manifest_line(line).unwrap();
        assert_eq!(record.authenticity, Authenticity::Fake);
        assert_eq!(record.category, Some(Category::Satellite));
        assert!(!record.hard_sample);
    }

    #[test]
    fn missing_authenticity_is_named() {
        let line = r#"{"id":"img_7","image_path":"sat/7.png"}"#;
        let err = parse_manifest_line(line).unwrap_err();
        assert!(err.to_string().contains("authenticity"), "{err}");
    }

    #[test]
    fn bad_category_lists_legal_names() {
        let line = r#"{"id":"a","image_path":"p","authenticity":"fake","category":"Face M"}"#;
        let err = parse_manifest_line(line).unwrap_err();
        let msg = err.to_string();
        for name in Category::ALL.map(|c| c.name()) {
            assert!(msg.contains(name), "error should list {name}: {msg}");
        }
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"a","image_path":"p","authenticity":"real","note":"from batch 3","rank":7}"#;
        let record = parse_manifest_line(line).unwrap();
        assert_eq!(record.extra.len(), 2);
        let json = serde_json::to_string(&record).unwrap();
        let back = parse_manifest_line(&json).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn load_manifest_counts_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");

        let mut lines = Vec::new();
        for (i, c) in Category::ALL.iter().enumerate() {
            lines.push(format!(
                r#"{{"id":"img_{i:03}","image_path":"x.png","authenticity":"fake","category":"{c}"}}"#
            ));
        }
        for i in 7..10 {
            lines.push(format!(
                r#"{{"id":"img_{i:03}","image_path":"x.png","authenticity":"real","category":"animal"}}"#
            ));
        }
        fs::write(&path, lines.join("\n")).unwrap();

        let records = load_manifest(&path).unwrap();
        assert_eq!(records.len(), 10);
        let stats = ManifestStats::collect(&records);
        assert_eq!(stats.by_authenticity[&Authenticity::Fake], 7);
        assert_eq!(stats.by_authenticity[&Authenticity::Real], 3);
        assert_eq!(stats.by_category.len(), 7);
        assert!(stats.by_category.values().all(|&n| n > 0));

        lines.push(r#"{"id":"img_001","image_path":"y.png","authenticity":"real"}"#.into());
        fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::DuplicateId {
                id,
                first_line,
                second_line,
            } => {
                assert_eq!(id, "img_001");
                assert_eq!(first_line, 2);
                assert_eq!(second_line, 11);
            }
            other => panic!("expected duplicate-id error, got {other}"),
        }
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"image_path\":\"p\",\"authenticity\":\"real\"}\nnot json\n",
        )
        .unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn complete_bundle_requires_aggregation_and_survivors() {
        let bundle = AnnotationBundle {
            record_id: "r".into(),
            status: BundleStatus::Complete,
            candidates: vec![CandidateAnnotation {
                annotator_id: "a".into(),
                text: "This is a fake image. x".into(),
                verdict_ok: true,
            }],
            aggregated: Some(AggregatedAnnotation {
                aggregator_id: "agg".into(),
                text: "This is a fake image. y".into(),
            }),
            failure_reason: None,
        };
        assert!(bundle.validate().is_err());
    }

    #[test]
    fn confusion_counts_sum() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            tn: 4,
            fn_: 2,
            unparseable: 5,
        };
        assert_eq!(c.total(), 15);
    }

    mod round_trip {
        use super::*;
        use proptest::prelude::*;

        fn arb_category() -> impl Strategy<Value = Option<Category>> {
            prop::sample::select(vec![
                None,
                Some(Category::Animal),
                Some(Category::Human),
                Some(Category::Object),
                Some(Category::Scene),
                Some(Category::Satellite),
                Some(Category::Document),
                Some(Category::FaceManipulation),
            ])
        }

        fn arb_record(i: usize) -> impl Strategy<Value = ImageRecord> {
            (
                arb_category(),
                prop::bool::ANY,
                prop::bool::ANY,
                "[a-z0-9/_.]{1,24}",
            )
                .prop_map(move |(category, fake, hard_sample, path)| ImageRecord {
                    id: format!("rec_{i}"),
                    image_path: path,
                    authenticity: if fake {
                        Authenticity::Fake
                    } else {
                        Authenticity::Real
                    },
                    category,
                    source: None,
                    hard_sample,
                    extra: serde_json::Map::new(),
                })
        }

        proptest! {
            #[test]
            fn write_then_load_is_identity(records in prop::collection::vec(arb_record(0), 1..20)) {
                let records: Vec<ImageRecord> = records
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut r)| { r.id = format!("rec_{i}"); r })
                    .collect();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("m.jsonl");
                write_manifest(&path, &records).unwrap();
                let loaded = load_manifest(&path).unwrap();
                prop_assert_eq!(loaded, records);
            }
        }
    }
}
