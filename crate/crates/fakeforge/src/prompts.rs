//! The annotation prompt catalog: 14 category x authenticity instruction
//! templates, the response-merging instruction, the optional hard-sample
//! overrides, and the standardized evaluation question.
//!
//! Prompt texts are the scientific payload of the pipeline, so they ship as
//! asset files whose digests are pinned here. A builtin catalog that fails the
//! digest check refuses to load; user-supplied asset directories are allowed
//! to differ, but their digests are recorded so runs stay comparable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datamodel::{Authenticity, Category, CandidateAnnotation, ImageRecord};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::{Message, MessagePart, MessageSequence, Role};

/// The standardized evaluation question sent to every model under test.
pub const EVAL_PROMPT: &str = "Does the image look real/fake?";

/// Placeholder line in asset bodies where configured few-shot pairs expand.
pub const FEW_SHOT_PLACEHOLDER: &str = "<Few-shot Examples>";

/// Exact question string for QA pairs; constant by construction.
pub fn eval_prompt() -> &'static str {
    EVAL_PROMPT
}

/// One worked example that can be spliced into a template's few-shot slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPair {
    pub request: String,
    pub response: String,
}

/// A single annotation instruction template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub category: Category,
    pub authenticity: Authenticity,
    /// Full instruction text; the image attachment is structural and precedes
    /// it in the rendered request.
    pub body: String,
    /// Required opening sentence of a well-formed answer.
    pub output_sentence: String,
    pub few_shot: Vec<FewShotPair>,
}

/// The response-merging instruction handed to the aggregator endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationInstruction {
    pub body: String,
}

const MERGE_ASSET: (&str, &str, &str) = (
    "merge_instruction.txt",
    include_str!("assets/prompts/merge_instruction.txt"),
    "9b59251ec03eacf1fd9daf9ac1c19f12223af727b90e37164ddb9b35ac04d961",
);

const TEMPLATE_ASSETS: [(Category, Authenticity, &str, &str); 14] = [
    (
        Category::Animal,
        Authenticity::Real,
        include_str!("assets/prompts/animal_real.txt"),
        "b5ee45abd483083213ad2b6d701833ba92685b761a053a1cce7aa72808160e62",
    ),
    (
        Category::Animal,
        Authenticity::Fake,
        include_str!("assets/prompts/animal_fake.txt"),
        "69881ff9c9cf2ece24cf00b626ffc01725924c32031657d68d1da1971f732104",
    ),
    (
        Category::Scene,
        Authenticity::Real,
        include_str!("assets/prompts/scene_real.txt"),
        "0091eac3344d691f0319d4fc48281f2ed967541d962d7e753c8ace1e11f9ecc0",
    ),
    (
        Category::Scene,
        Authenticity::Fake,
        include_str!("assets/prompts/scene_fake.txt"),
        "f61f0f3053f00e290fc7655f94981795b857886cc789b892c7b2dddaf1e6c030",
    ),
    (
        Category::Object,
        Authenticity::Real,
        include_str!("assets/prompts/object_real.txt"),
        "5b2d9bc8122024523718642d09cb56f0af316a7d8b5c5f698e68d4a130c8d5c8",
    ),
    (
        Category::Object,
        Authenticity::Fake,
        include_str!("assets/prompts/object_fake.txt"),
        "68f8ce5ab41a9d2deab8602fe8c3294193c3ce306a4aa671b74d00edbafc9670",
    ),
    (
        Category::Human,
        Authenticity::Real,
        include_str!("assets/prompts/human_real.txt"),
        "022ab2a811d4d8c56d8fe986397d863d5bcf43a9b910e45e341cab9eaa74fadd",
    ),
    (
        Category::Human,
        Authenticity::Fake,
        include_str!("assets/prompts/human_fake.txt"),
        "996a6720030f929b39b1a713dc9496e88f557ecfbe20aa918c91d51e40761452",
    ),
    (
        Category::Satellite,
        Authenticity::Real,
        include_str!("assets/prompts/satellite_real.txt"),
        "3f3738603ed7ee9d6b8086492652cf723bd475ec45a354f4b85e429c9a982dc3",
    ),
    (
        Category::Satellite,
        Authenticity::Fake,
        include_str!("assets/prompts/satellite_fake.txt"),
        "f016b024cf4b02916b244e280a77a0c5c1eaff612dd1c31edb21344e2b09cb38",
    ),
    (
        Category::Document,
        Authenticity::Real,
        include_str!("assets/prompts/document_real.txt"),
        "24b98e364c1e7cbe511bcc6caaa63425ab60cbf252f3b13959c28abd4f8875d8",
    ),
    (
        Category::Document,
        Authenticity::Fake,
        include_str!("assets/prompts/document_fake.txt"),
        "ea564272b549570b3712e1b4e4a15518816124748b39e760caa5170dcdf53739",
    ),
    (
        Category::FaceManipulation,
        Authenticity::Real,
        include_str!("assets/prompts/face_manipulation_real.txt"),
        "b0305f338a419a77f7d5a493cc3ffbe8df5c74dcb269fb42d3d581f9584455cc",
    ),
    (
        Category::FaceManipulation,
        Authenticity::Fake,
        include_str!("assets/prompts/face_manipulation_fake.txt"),
        "8ebdababd61695e242ce4388aa6edd31913abd43e84e83947a22f22a377d5fdf",
    ),
];

fn template_id(category: Category, authenticity: Authenticity) -> String {
    format!("{}_{}", category.name(), authenticity.name())
}

/// Immutable catalog of all prompt texts; safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct PromptCatalog {
    templates: BTreeMap<(Category, Authenticity), PromptTemplate>,
    hard_sample_overrides: BTreeMap<(Category, Authenticity), PromptTemplate>,
    merge_instruction: AggregationInstruction,
    /// template_id (or "merge_instruction") -> content digest, for run metadata.
    digests: BTreeMap<String, String>,
}

impl PromptCatalog {
    /// Load the builtin catalog and verify every asset against its pinned
    /// digest, so silent edits of the shipped texts are detectable.
    pub fn builtin() -> Result<Self> {
        let mut templates = BTreeMap::new();
        let mut digests = BTreeMap::new();
        for (category, authenticity, body, expected) in TEMPLATE_ASSETS {
            let id = template_id(category, authenticity);
            let actual = sha256_hex(body.as_bytes());
            if actual != expected {
                return Err(Error::DigestMismatch(format!(
                    "builtin prompt asset {id}: expected {expected}, found {actual}"
                )));
            }
            digests.insert(id.clone(), actual);
            templates.insert(
                (category, authenticity),
                PromptTemplate {
                    template_id: id,
                    category,
                    authenticity,
                    body: body.to_string(),
                    output_sentence: authenticity.verdict_sentence().to_string(),
                    few_shot: Vec::new(),
                },
            );
        }
        let (merge_name, merge_body, merge_expected) = MERGE_ASSET;
        let actual = sha256_hex(merge_body.as_bytes());
        if actual != merge_expected {
            return Err(Error::DigestMismatch(format!(
                "builtin prompt asset {merge_name}: expected {merge_expected}, found {actual}"
            )));
        }
        digests.insert("merge_instruction".into(), actual);
        Ok(PromptCatalog {
            templates,
            hard_sample_overrides: BTreeMap::new(),
            merge_instruction: AggregationInstruction {
                body: merge_body.to_string(),
            },
            digests,
        })
    }

    /// Load templates from an alternative asset directory. Files must be named
    /// `<category>_<authenticity>.txt` plus `merge_instruction.txt`; optional
    /// `<category>_<authenticity>_hard.txt` files register hard-sample
    /// overrides. Digests of every loaded file are recorded; differences from
    /// the builtin texts are logged, not rejected.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let builtin_digests: BTreeMap<String, &str> = TEMPLATE_ASSETS
            .iter()
            .map(|(c, a, _, d)| (template_id(*c, *a), *d))
            .collect();

        let mut templates = BTreeMap::new();
        let mut hard_sample_overrides = BTreeMap::new();
        let mut digests = BTreeMap::new();

        for category in Category::ALL {
            for authenticity in [Authenticity::Real, Authenticity::Fake] {
                let id = template_id(category, authenticity);
                let path = dir.join(format!("{id}.txt"));
                let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let actual = sha256_hex(body.as_bytes());
                if builtin_digests.get(&id).copied() != Some(actual.as_str()) {
                    tracing::warn!(template = %id, digest = %actual, "prompt asset differs from builtin");
                }
                digests.insert(id.clone(), actual);
                templates.insert(
                    (category, authenticity),
                    PromptTemplate {
                        template_id: id.clone(),
                        category,
                        authenticity,
                        body,
                        output_sentence: authenticity.verdict_sentence().to_string(),
                        few_shot: Vec::new(),
                    },
                );

                let hard_path = dir.join(format!("{id}_hard.txt"));
                if hard_path.exists() {
                    let body = fs::read_to_string(&hard_path).map_err(|e| Error::io(&hard_path, e))?;
                    let hard_id = format!("{id}_hard");
                    digests.insert(hard_id.clone(), sha256_hex(body.as_bytes()));
                    hard_sample_overrides.insert(
                        (category, authenticity),
                        PromptTemplate {
                            template_id: hard_id,
                            category,
                            authenticity,
                            body,
                            output_sentence: authenticity.verdict_sentence().to_string(),
                            few_shot: Vec::new(),
                        },
                    );
                }
            }
        }

        let merge_path = dir.join("merge_instruction.txt");
        let merge_body = fs::read_to_string(&merge_path).map_err(|e| Error::io(&merge_path, e))?;
        digests.insert("merge_instruction".into(), sha256_hex(merge_body.as_bytes()));

        Ok(PromptCatalog {
            templates,
            hard_sample_overrides,
            merge_instruction: AggregationInstruction { body: merge_body },
            digests,
        })
    }

    /// Deterministic template selection. Total over the enum domain: when
    /// `hard_sample` is set but no override is configured, the standard
    /// template is returned with a logged warning.
    pub fn select_prompt(
        &self,
        category: Category,
        authenticity: Authenticity,
        hard_sample: bool,
    ) -> &PromptTemplate {
        if hard_sample {
            if let Some(t) = self.hard_sample_overrides.get(&(category, authenticity)) {
                return t;
            }
            tracing::warn!(
                category = %category,
                authenticity = %authenticity,
                "hard_sample set but no override configured; using standard template"
            );
        }
        &self.templates[&(category, authenticity)]
    }

    pub fn merge_instruction(&self) -> &AggregationInstruction {
        &self.merge_instruction
    }

    /// Asset digests, keyed by template id, for run metadata.
    pub fn digests(&self) -> &BTreeMap<String, String> {
        &self.digests
    }

    /// All standard templates in catalog order.
    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Configure few-shot pairs for one template.
    pub fn set_few_shot(
        &mut self,
        category: Category,
        authenticity: Authenticity,
        pairs: Vec<FewShotPair>,
    ) {
        if let Some(t) = self.templates.get_mut(&(category, authenticity)) {
            t.few_shot = pairs;
        }
    }
}

/// Expand the few-shot placeholder: configured pairs are spliced in where the
/// placeholder line sits; with no pairs the placeholder line is dropped.
fn expand_body(template: &PromptTemplate) -> String {
    let mut out = String::with_capacity(template.body.len());
    for line in template.body.lines() {
        if line.trim() == FEW_SHOT_PLACEHOLDER {
            for pair in &template.few_shot {
                let _ = writeln!(out, "{}", pair.request);
                let _ = writeln!(out, "{}", pair.response);
            }
        } else {
            let _ = writeln!(out, "{line}");
        }
    }
    // body files end with a newline; keep the expansion identical in shape
    while out.ends_with("\n\n") {
        out.pop();
    }
    out
}

/// Build the annotation request for one record: a single user message with the
/// image attachment first and the expanded instruction text second. Pure and
/// byte-deterministic for equal inputs.
pub fn render_annotation_request(
    template: &PromptTemplate,
    record: &ImageRecord,
) -> Result<MessageSequence> {
    let category = record.require_category()?;
    if category != template.category {
        return Err(Error::Precondition(format!(
            "record {:?} has category {} but template {:?} expects {}",
            record.id, category, template.template_id, template.category
        )));
    }
    Ok(MessageSequence::new(vec![Message {
        role: Role::User,
        parts: vec![
            MessagePart::image_file(&record.image_path),
            MessagePart::Text(expand_body(template)),
        ],
    }]))
}

/// Build the aggregation request: instruction body followed by the candidate
/// texts labeled `Response 1..k` in annotator order.
pub fn render_aggregation_request(
    candidates: &[CandidateAnnotation],
    instruction: &AggregationInstruction,
) -> Result<MessageSequence> {
    if candidates.len() < 2 {
        return Err(Error::Precondition(format!(
            "aggregation needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    if let Some(bad) = candidates.iter().find(|c| !c.verdict_ok) {
        return Err(Error::Precondition(format!(
            "candidate from {:?} contradicts ground truth and cannot be aggregated",
            bad.annotator_id
        )));
    }
    let mut text = instruction.body.trim_end().to_string();
    for (i, candidate) in candidates.iter().enumerate() {
        let _ = write!(text, "\n\nResponse {}: {}", i + 1, candidate.text);
    }
    Ok(MessageSequence::new(vec![Message {
        role: Role::User,
        parts: vec![MessagePart::Text(text)],
    }]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(category: Category, authenticity: Authenticity) -> ImageRecord {
        ImageRecord {
            id: "rec_1".into(),
            image_path: "img.png".into(),
            authenticity,
            category: Some(category),
            source: None,
            hard_sample: false,
            extra: serde_json::Map::new(),
        }
    }

    #[test]
    fn builtin_catalog_passes_digest_check() {
        let catalog = PromptCatalog::builtin().unwrap();
        assert_eq!(catalog.digests().len(), 15);
    }

    #[test]
    fn fourteen_distinct_templates() {
        let catalog = PromptCatalog::builtin().unwrap();
        let mut ids = std::collections::BTreeSet::new();
        for category in Category::ALL {
            for authenticity in [Authenticity::Real, Authenticity::Fake] {
                let t = catalog.select_prompt(category, authenticity, false);
                assert_eq!(t.category, category);
                assert_eq!(t.authenticity, authenticity);
                ids.insert(t.template_id.clone());
            }
        }
        assert_eq!(ids.len(), 14);
    }

    #[test]
    fn category_knowledge_lands_in_the_right_template() {
        let catalog = PromptCatalog::builtin().unwrap();
        let animal_fake = catalog.select_prompt(Category::Animal, Authenticity::Fake, false);
        assert!(animal_fake
            .body
            .contains("Animal structure and physical feature anomalies"));
        let satellite_real = catalog.select_prompt(Category::Satellite, Authenticity::Real, false);
        assert!(satellite_real
            .body
            .contains("Clear outlines of buildings and vehicles"));
    }

    #[test]
    fn bodies_end_with_output_format_and_verdict_sentence() {
        let catalog = PromptCatalog::builtin().unwrap();
        for t in catalog.templates() {
            let pos = t
                .body
                .rfind("Output format:")
                .unwrap_or_else(|| panic!("{} lacks an output format section", t.template_id));
            let tail = &t.body[pos..];
            assert!(
                tail.contains(&t.output_sentence),
                "{} output section lacks {:?}",
                t.template_id,
                t.output_sentence
            );
            assert_eq!(
                t.output_sentence,
                t.authenticity.verdict_sentence(),
                "{}",
                t.template_id
            );
        }
    }

    #[test]
    fn merge_instruction_contains_six_numbered_steps() {
        let catalog = PromptCatalog::builtin().unwrap();
        let body = &catalog.merge_instruction().body;
        for step in [
            "1. Extract Common Ground",
            "2. Filter Minority Claims",
            "3. Structure Hierarchically",
            "4. Maintain Original Format",
            "5. Avoid Redundancy",
            "6. Ensure Logical Consistency",
        ] {
            assert!(body.contains(step), "missing step {step:?}");
        }
    }

    #[test]
    fn hard_sample_falls_back_to_standard_template() {
        let catalog = PromptCatalog::builtin().unwrap();
        let standard = catalog.select_prompt(Category::Object, Authenticity::Fake, false);
        let hard = catalog.select_prompt(Category::Object, Authenticity::Fake, true);
        assert_eq!(standard, hard);
    }

    #[test]
    fn annotation_request_is_image_then_body_and_deterministic() {
        let catalog = PromptCatalog::builtin().unwrap();
        let template = catalog.select_prompt(Category::Animal, Authenticity::Fake, false);
        let rec = record(Category::Animal, Authenticity::Fake);
        let a = render_annotation_request(template, &rec).unwrap();
        let b = render_annotation_request(template, &rec).unwrap();
        assert_eq!(a, b);
        let msg = &a.messages()[0];
        assert_eq!(a.messages().len(), 1);
        assert_eq!(msg.role, Role::User);
        assert!(matches!(msg.parts[0], MessagePart::ImageFile(_)));
        match &msg.parts[1] {
            MessagePart::Text(body) => {
                assert!(body.contains("synthetic animal imagery"));
                assert!(!body.contains(FEW_SHOT_PLACEHOLDER));
            }
            other => panic!("expected text part, got {other:?}"),
        }
    }

    #[test]
    fn category_mismatch_is_rejected() {
        let catalog = PromptCatalog::builtin().unwrap();
        let template = catalog.select_prompt(Category::Animal, Authenticity::Fake, false);
        let rec = record(Category::Scene, Authenticity::Fake);
        assert!(render_annotation_request(template, &rec).is_err());
    }

    #[test]
    fn few_shot_pair_expands_at_placeholder() {
        let mut catalog = PromptCatalog::builtin().unwrap();
        catalog.set_few_shot(
            Category::Animal,
            Authenticity::Fake,
            vec![FewShotPair {
                request: "Example request: describe the artifacts.".into(),
                response: "This is a fake image. The paw merges into the grass.".into(),
            }],
        );
        let template = catalog.select_prompt(Category::Animal, Authenticity::Fake, false);
        let rec = record(Category::Animal, Authenticity::Fake);
        let rendered = render_annotation_request(template, &rec).unwrap();
        let body = match &rendered.messages()[0].parts[1] {
            MessagePart::Text(t) => t.clone(),
            _ => unreachable!(),
        };

        // the pair must sit exactly where the placeholder line sat
        let raw = &template.body;
        let placeholder_at = raw.find(FEW_SHOT_PLACEHOLDER).unwrap();
        let expected = format!(
            "{}Example request: describe the artifacts.\nThis is a fake image. The paw merges into the grass.\n{}",
            &raw[..placeholder_at],
            &raw[placeholder_at + FEW_SHOT_PLACEHOLDER.len() + 1..]
        );
        assert_eq!(body, expected);
    }

    #[test]
    fn eval_prompt_is_constant() {
        assert_eq!(eval_prompt(), "Does the image look real/fake?");
        assert_eq!(eval_prompt(), eval_prompt());
    }

    #[test]
    fn aggregation_request_labels_responses_in_order() {
        let catalog = PromptCatalog::builtin().unwrap();
        let candidates = vec![
            CandidateAnnotation {
                annotator_id: "a".into(),
                text: "This is a fake image. Blurry outlines.".into(),
                verdict_ok: true,
            },
            CandidateAnnotation {
                annotator_id: "b".into(),
                text: "This is a fake image. Misaligned roads.".into(),
                verdict_ok: true,
            },
        ];
        let seq = render_aggregation_request(&candidates, catalog.merge_instruction()).unwrap();
        let text = match &seq.messages()[0].parts[0] {
            MessagePart::Text(t) => t.clone(),
            _ => unreachable!(),
        };
        assert!(text.contains("Response 1: This is a fake image. Blurry outlines."));
        assert!(text.contains("Response 2: This is a fake image. Misaligned roads."));
        assert!(!text.contains("Response 3:"));
        assert!(text.contains("1. Extract Common Ground"));
        assert!(text.find("Response 1").unwrap() < text.find("Response 2").unwrap());
    }

    #[test]
    fn aggregation_needs_two_candidates() {
        let catalog = PromptCatalog::builtin().unwrap();
        let one = vec![CandidateAnnotation {
            annotator_id: "a".into(),
            text: "This is a fake image. x".into(),
            verdict_ok: true,
        }];
        assert!(render_aggregation_request(&one, catalog.merge_instruction()).is_err());
    }

    #[test]
    fn from_dir_round_trips_builtin_assets() {
        let dir = tempfile::tempdir().unwrap();
        let builtin = PromptCatalog::builtin().unwrap();
        for t in builtin.templates() {
            fs::write(dir.path().join(format!("{}.txt", t.template_id)), &t.body).unwrap();
        }
        fs::write(
            dir.path().join("merge_instruction.txt"),
            &builtin.merge_instruction().body,
        )
        .unwrap();
        fs::write(
            dir.path().join("object_fake_hard.txt"),
            "Describe only artifacts you are confident about; it is acceptable to find none.\nOutput format:\n\"This is a fake image. [Only well-supported artifacts]\"\n",
        )
        .unwrap();

        let catalog = PromptCatalog::from_dir(dir.path()).unwrap();
        assert_eq!(catalog.digests()["animal_fake"], builtin.digests()["animal_fake"]);
        let hard = catalog.select_prompt(Category::Object, Authenticity::Fake, true);
        assert_eq!(hard.template_id, "object_fake_hard");
        let standard = catalog.select_prompt(Category::Object, Authenticity::Fake, false);
        assert_eq!(standard.template_id, "object_fake");
    }
}
