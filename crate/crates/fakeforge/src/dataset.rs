//! Pre-processing and QA-pair assembly: category assignment, fake/real
//! balancing, stratified train/test splitting, and dataset export.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    AnnotationBundle, Authenticity, BundleStatus, Category, ImageRecord, QAPair, Split,
};
use crate::digest::sha256_hex_parts;
use crate::error::{Error, Result};
use crate::gateway::{EndpointConfig, Gateway, MessageSequence};
use crate::prompts::eval_prompt;

/// Fixed single-choice prompt for the open-set categories.
pub const CLASSIFIER_PROMPT: &str = "Classify the main subject of this image into exactly one of \
the following categories: animal, object, human, scene. Reply with only the category name.";

/// Category for one record: a manifest-supplied category always wins;
/// otherwise the classifier endpoint picks one of the four open-set names.
pub async fn categorize(
    gateway: &Gateway,
    record: &ImageRecord,
    classifier: Option<&EndpointConfig>,
) -> Result<Category> {
    if let Some(category) = record.category {
        return Ok(category);
    }
    let classifier = classifier.ok_or_else(|| {
        Error::Precondition(format!(
            "record {:?} has no category and no classifier endpoint is configured",
            record.id
        ))
    })?;
    let request = MessageSequence::user_image_question(&record.image_path, CLASSIFIER_PROMPT);
    let reply = gateway.chat(classifier, &request).await?;
    match_open_set_category(&reply)
}

/// Case-insensitive match of a classifier reply against the four open-set
/// category names: exact after trimming punctuation, else a unique standalone
/// word hit.
pub fn match_open_set_category(reply: &str) -> Result<Category> {
    let normalized = reply
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    for category in Category::CLASSIFIABLE {
        if normalized == category.name() {
            return Ok(category);
        }
    }
    let mut hits = Vec::new();
    for token in normalized.split(|c: char| !c.is_alphanumeric()) {
        for category in Category::CLASSIFIABLE {
            if token == category.name() && !hits.contains(&category) {
                hits.push(category);
            }
        }
    }
    if hits.len() == 1 {
        return Ok(hits[0]);
    }
    Err(Error::Unclassifiable {
        reply: reply.to_string(),
        expected: Category::CLASSIFIABLE
            .iter()
            .map(|c| c.name().to_string())
            .collect(),
    })
}

fn cell_seed(seed: u64, stage: &str, category: Category, authenticity: Authenticity) -> u64 {
    let digest = sha256_hex_parts([
        &seed.to_le_bytes()[..],
        stage.as_bytes(),
        category.name().as_bytes(),
        authenticity.name().as_bytes(),
    ]);
    u64::from_str_radix(&digest[..16], 16).unwrap_or(seed)
}

/// Seeded uniform subsample of `keep` indices out of `n`, returned sorted so
/// manifest order is preserved downstream.
fn subsample_indices(n: usize, keep: usize, seed: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(keep);
    indices.sort_unstable();
    indices
}

/// Enforce the fake:real ratio per category by discarding excess records, then
/// split stratified by (category, authenticity). Deterministic given the seed;
/// no record lands in both splits.
pub fn balance_and_split(
    records: &[ImageRecord],
    fake_to_real_ratio: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    if fake_to_real_ratio <= 0.0 {
        return Err(Error::Precondition(format!(
            "fake_to_real_ratio must be positive, got {fake_to_real_ratio}"
        )));
    }
    let has_fake = records.iter().any(|r| r.authenticity == Authenticity::Fake);
    let has_real = records.iter().any(|r| r.authenticity == Authenticity::Real);
    if !has_fake || !has_real {
        return Err(Error::Precondition(
            "balancing needs both real and fake records".into(),
        ));
    }

    // group record indices by (category, authenticity)
    let mut cells: BTreeMap<(Category, Authenticity), Vec<usize>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        let category = record.require_category()?;
        cells
            .entry((category, record.authenticity))
            .or_default()
            .push(i);
    }

    // per-category ratio enforcement by uniform subsampling
    let categories: Vec<Category> = cells.keys().map(|(c, _)| *c).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut retained: Vec<usize> = Vec::new();
    for category in categories {
        let fakes = cells
            .get(&(category, Authenticity::Fake))
            .cloned()
            .unwrap_or_default();
        let reals = cells
            .get(&(category, Authenticity::Real))
            .cloned()
            .unwrap_or_default();
        let (nf, nr) = (fakes.len(), reals.len());
        let (keep_f, keep_r) = if nf as f64 > fake_to_real_ratio * nr as f64 {
            ((fake_to_real_ratio * nr as f64).round() as usize, nr)
        } else if (nr as f64) > nf as f64 / fake_to_real_ratio {
            (nf, (nf as f64 / fake_to_real_ratio).round() as usize)
        } else {
            (nf, nr)
        };
        for &idx in subsample_indices(nf, keep_f, cell_seed(seed, "balance", category, Authenticity::Fake))
            .iter()
            .map(|i| &fakes[*i])
        {
            retained.push(idx);
        }
        for &idx in subsample_indices(nr, keep_r, cell_seed(seed, "balance", category, Authenticity::Real))
            .iter()
            .map(|i| &reals[*i])
        {
            retained.push(idx);
        }
    }
    retained.sort_unstable();

    // stratified split per retained cell
    let mut retained_cells: BTreeMap<(Category, Authenticity), Vec<usize>> = BTreeMap::new();
    for &idx in &retained {
        let record = &records[idx];
        retained_cells
            .entry((record.category.unwrap(), record.authenticity))
            .or_default()
            .push(idx);
    }
    let mut is_test = vec![false; records.len()];
    for ((category, authenticity), members) in &retained_cells {
        let test_n = (test_fraction * members.len() as f64).round() as usize;
        if members.len() > 1 && (test_n == 0 || test_n == members.len()) {
            tracing::warn!(
                category = %category,
                authenticity = %authenticity,
                size = members.len(),
                "cell too small to stratify at test_fraction; best-effort assignment"
            );
        }
        let picks = subsample_indices(
            members.len(),
            test_n.min(members.len()),
            cell_seed(seed, "split", *category, *authenticity),
        );
        for p in picks {
            is_test[members[p]] = true;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for &idx in &retained {
        if is_test[idx] {
            test.push(records[idx].clone());
        } else {
            train.push(records[idx].clone());
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QaBuildSummary {
    pub pairs: usize,
    pub skipped: usize,
}

/// One QA pair per complete bundle: the standardized question and the
/// aggregated caption verbatim. Records without a complete bundle are skipped
/// with a logged reason.
pub fn build_qa_pairs(
    records_with_split: &[(ImageRecord, Split)],
    bundles: &BTreeMap<String, AnnotationBundle>,
) -> (Vec<QAPair>, QaBuildSummary) {
    let mut pairs = Vec::new();
    let mut summary = QaBuildSummary::default();
    for (record, split) in records_with_split {
        let bundle = match bundles.get(&record.id) {
            Some(b) if b.status == BundleStatus::Complete => b,
            Some(b) => {
                tracing::warn!(record = %record.id, status = ?b.status, "skipping record without complete bundle");
                summary.skipped += 1;
                continue;
            }
            None => {
                tracing::warn!(record = %record.id, "skipping record with no bundle");
                summary.skipped += 1;
                continue;
            }
        };
        let aggregated = bundle.aggregated.as_ref().expect("complete implies aggregated");
        pairs.push(QAPair {
            record_id: record.id.clone(),
            image_path: record.image_path.clone(),
            question: eval_prompt().to_string(),
            answer: aggregated.text.clone(),
            split: *split,
            category: record.category.expect("downstream records are categorized"),
            authenticity: record.authenticity,
        });
        summary.pairs += 1;
    }
    (pairs, summary)
}

/// Merge train/test splits back into manifest order, tagged with membership.
pub fn with_split_assignments(
    records: &[ImageRecord],
    train: &[ImageRecord],
    test: &[ImageRecord],
) -> Vec<(ImageRecord, Split)> {
    let train_ids: std::collections::BTreeSet<&str> =
        train.iter().map(|r| r.id.as_str()).collect();
    let test_ids: std::collections::BTreeSet<&str> = test.iter().map(|r| r.id.as_str()).collect();
    records
        .iter()
        .filter_map(|r| {
            if train_ids.contains(r.id.as_str()) {
                Some((r.clone(), Split::Train))
            } else if test_ids.contains(r.id.as_str()) {
                Some((r.clone(), Split::Test))
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::AggregatedAnnotation;
    use crate::mock::{ChatOutcome, ChatView, HashEmbed, MockServer};

    fn record(i: usize, category: Category, authenticity: Authenticity) -> ImageRecord {
        ImageRecord {
            id: format!("rec_{i:03}"),
            image_path: format!("images/{i}.png"),
            authenticity,
            category: Some(category),
            source: None,
            hard_sample: false,
            extra: serde_json::Map::new(),
        }
    }

    fn corpus(fakes: usize, reals: usize) -> Vec<ImageRecord> {
        let mut records = Vec::new();
        for i in 0..fakes {
            records.push(record(i, Category::Animal, Authenticity::Fake));
        }
        for i in 0..reals {
            records.push(record(fakes + i, Category::Animal, Authenticity::Real));
        }
        records
    }

    #[tokio::test]
    async fn manifest_category_wins_without_calling_classifier() {
        let server = MockServer::spawn(
            |_: &ChatView| ChatOutcome::Reply("scene".into()),
            HashEmbed::default(),
        )
        .await;
        let classifier = EndpointConfig::local("clf", server.base_url(), "clf");
        let gateway = Gateway::new();
        let r = record(0, Category::Satellite, Authenticity::Fake);
        let got = categorize(&gateway, &r, Some(&classifier)).await.unwrap();
        assert_eq!(got, Category::Satellite);
        assert_eq!(server.chat_calls(), 0);
    }

    #[tokio::test]
    async fn classifier_reply_is_matched_case_insensitively() {
        let dir = tempfile::tempdir().unwrap();
        let records = crate::fixture::build_corpus(
            dir.path(),
            &vec![(Category::Animal, Authenticity::Fake, 1)],
            1,
        )
        .unwrap();
        let mut uncategorized = records[0].clone();
        uncategorized.category = None;

        let server = MockServer::spawn(
            |_: &ChatView| ChatOutcome::Reply("Animal.".into()),
            HashEmbed::default(),
        )
        .await;
        let classifier = EndpointConfig::local("clf", server.base_url(), "clf");
        let gateway = Gateway::new();
        let got = categorize(&gateway, &uncategorized, Some(&classifier))
            .await
            .unwrap();
        assert_eq!(got, Category::Animal);
    }

    #[test]
    fn open_set_matching() {
        assert_eq!(match_open_set_category("animal").unwrap(), Category::Animal);
        assert_eq!(match_open_set_category("  Human  ").unwrap(), Category::Human);
        assert_eq!(
            match_open_set_category("I would say it is a scene").unwrap(),
            Category::Scene
        );
        // closed set: satellite is not an open-set choice
        assert!(match_open_set_category("satellite").is_err());
        match match_open_set_category("vehicle") {
            Err(Error::Unclassifiable { reply, expected }) => {
                assert_eq!(reply, "vehicle");
                assert_eq!(expected.len(), 4);
            }
            other => panic!("expected unclassifiable, got {other:?}"),
        }
        // two category words: ambiguous
        assert!(match_open_set_category("animal or human").is_err());
    }

    #[test]
    fn no_category_and_no_classifier_is_an_error() {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let gateway = Gateway::new();
        let mut r = record(0, Category::Animal, Authenticity::Fake);
        r.category = None;
        let err = rt.block_on(categorize(&gateway, &r, None)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn ratio_enforced_by_discarding_excess() {
        let records = corpus(60, 40);
        let (train, test) = balance_and_split(&records, 1.0, 0.2, 7).unwrap();
        let all: Vec<&ImageRecord> = train.iter().chain(&test).collect();
        let fakes = all
            .iter()
            .filter(|r| r.authenticity == Authenticity::Fake)
            .count();
        let reals = all.len() - fakes;
        assert_eq!(fakes, 40);
        assert_eq!(reals, 40);
        assert_eq!(test.len(), 16);
        let train_ids: std::collections::BTreeSet<_> = train.iter().map(|r| &r.id).collect();
        assert!(test.iter().all(|r| !train_ids.contains(&r.id)));
    }

    #[test]
    fn split_arithmetic_on_retained_hundred() {
        let records = corpus(50, 50);
        let (train, test) = balance_and_split(&records, 1.0, 0.2, 3).unwrap();
        assert_eq!(train.len() + test.len(), 100);
        assert_eq!(test.len(), 20);
    }

    #[test]
    fn same_seed_reproduces_identical_splits() {
        let records = corpus(37, 53);
        let a = balance_and_split(&records, 1.0, 0.25, 11).unwrap();
        let b = balance_and_split(&records, 1.0, 0.25, 11).unwrap();
        assert_eq!(a, b);
        let c = balance_and_split(&records, 1.0, 0.25, 12).unwrap();
        assert_ne!(a, c, "different seeds should differ on this corpus");
    }

    #[test]
    fn single_class_is_rejected() {
        let records = corpus(10, 0);
        assert!(balance_and_split(&records, 1.0, 0.2, 1).is_err());
        assert!(balance_and_split(&corpus(5, 5), 1.0, 0.0, 1).is_err());
        assert!(balance_and_split(&corpus(5, 5), 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn stratification_deviation_is_at_most_one_record_per_cell() {
        let mut records = Vec::new();
        let mut i = 0;
        for category in [Category::Animal, Category::Scene, Category::Document] {
            for authenticity in [Authenticity::Real, Authenticity::Fake] {
                for _ in 0..23 {
                    records.push(record(i, category, authenticity));
                    i += 1;
                }
            }
        }
        let tf = 0.2;
        let (train, test) = balance_and_split(&records, 1.0, tf, 5).unwrap();
        let mut per_cell: BTreeMap<(Category, Authenticity), (usize, usize)> = BTreeMap::new();
        for r in &train {
            per_cell.entry((r.category.unwrap(), r.authenticity)).or_default().0 += 1;
        }
        for r in &test {
            per_cell.entry((r.category.unwrap(), r.authenticity)).or_default().1 += 1;
        }
        for ((category, authenticity), (n_train, n_test)) in per_cell {
            let cell = n_train + n_test;
            let expected = tf * cell as f64;
            assert!(
                (n_test as f64 - expected).abs() <= 1.0,
                "{category}/{authenticity}: test {n_test} vs expected {expected}"
            );
        }
    }

    fn complete_bundle(record_id: &str, text: &str) -> AnnotationBundle {
        AnnotationBundle {
            record_id: record_id.into(),
            status: BundleStatus::Complete,
            candidates: vec![
                crate::datamodel::CandidateAnnotation {
                    annotator_id: "a".into(),
                    text: text.into(),
                    verdict_ok: true,
                },
                crate::datamodel::CandidateAnnotation {
                    annotator_id: "b".into(),
                    text: text.into(),
                    verdict_ok: true,
                },
            ],
            aggregated: Some(AggregatedAnnotation {
                aggregator_id: "agg".into(),
                text: text.into(),
            }),
            failure_reason: None,
        }
    }

    #[test]
    fn qa_pairs_carry_answers_verbatim_and_count_skips() {
        let records: Vec<(ImageRecord, Split)> = (0..100)
            .map(|i| {
                let authenticity = if i % 2 == 0 {
                    Authenticity::Fake
                } else {
                    Authenticity::Real
                };
                (
                    record(i, Category::Object, authenticity),
                    if i < 80 { Split::Train } else { Split::Test },
                )
            })
            .collect();
        let mut bundles = BTreeMap::new();
        for (r, _) in &records {
            let sentence = r.authenticity.verdict_sentence();
            bundles.insert(
                r.id.clone(),
                complete_bundle(&r.id, &format!("{sentence} Details for {}.", r.id)),
            );
        }
        // three bundles become unusable
        bundles.remove("rec_003");
        bundles.get_mut("rec_004").unwrap().status = BundleStatus::Failed;
        bundles.get_mut("rec_005").unwrap().status = BundleStatus::Pending;

        let (pairs, summary) = build_qa_pairs(&records, &bundles);
        assert_eq!(summary.pairs, 97);
        assert_eq!(summary.skipped, 3);
        assert_eq!(pairs.len(), 97);
        for pair in &pairs {
            assert_eq!(pair.question, "Does the image look real/fake?");
            let bundle = &bundles[&pair.record_id];
            assert_eq!(pair.answer, bundle.aggregated.as_ref().unwrap().text);
            if pair.authenticity == Authenticity::Fake {
                assert!(pair.answer.starts_with("This is a fake image."));
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ratio_within_one_record_per_category(
                nf in 1usize..80,
                nr in 1usize..80,
                seed in 0u64..50,
            ) {
                let records = corpus(nf, nr);
                let (train, test) = balance_and_split(&records, 1.0, 0.2, seed).unwrap();
                let fakes = train.iter().chain(&test).filter(|r| r.authenticity == Authenticity::Fake).count() as f64;
                let reals = train.iter().chain(&test).filter(|r| r.authenticity == Authenticity::Real).count() as f64;
                prop_assert!((fakes - reals).abs() <= 1.0, "fakes {fakes} reals {reals}");
                // subsampling never duplicates or invents records
                prop_assert!(fakes as usize <= nf && reals as usize <= nr);
                let mut ids: Vec<&String> = train.iter().chain(&test).map(|r| &r.id).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), train.len() + test.len());
            }
        }
    }
}
