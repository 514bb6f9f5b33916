//! Command-line pipeline: each subcommand is a thin wrapper over the library,
//! reading/writing line-oriented artifacts under the caller's paths.
//!
//! Flag values win over environment variables, which win over the config
//! file, which wins over defaults. Every artifact-producing run writes a
//! `run_meta.json` capturing the config digest, prompt digests, endpoint
//! names, and seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::annotation::{run_annotation, AnnotationOptions};
use crate::config::{HarnessConfig, RunMetadata};
use crate::datamodel::{
    load_annotation_store, load_manifest, write_jsonl, write_manifest, ManifestStats,
};
use crate::dataset::{balance_and_split, build_qa_pairs, categorize, with_split_assignments};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, evaluate_robustness, load_report_file, persist_outcome, render_per_category,
    render_report, rescore, write_report_file, EvalOptions,
};
use crate::gateway::Gateway;
use crate::perturb;
use crate::probe::{compare_paradigms, extract_features, predict, train, LabeledOutcome, TrainHyper};

#[derive(Parser)]
#[command(
    name = "fakeforge",
    version,
    about = "Dataset construction and evaluation harness for synthetic-image detection"
)]
struct Cli {
    /// Config file declaring endpoints and roles.
    #[arg(long, global = true, env = "FAKEFORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Record-level worker bound (overrides the config file).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest: parse, check id uniqueness, decode images, tally.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the image decode check.
        #[arg(long)]
        skip_image_check: bool,
    },
    /// Fill missing categories via the classifier endpoint.
    Categorize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Classifier endpoint name (default: roles.classifier).
        #[arg(long)]
        classifier: Option<String>,
    },
    /// Annotate and aggregate every manifest record into a store file.
    Annotate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated annotator endpoint names (default: roles.annotators).
        #[arg(long)]
        annotators: Option<String>,
        /// Aggregator endpoint name (default: roles.aggregator).
        #[arg(long)]
        aggregator: Option<String>,
        /// Stop after this many newly processed records (resume later).
        #[arg(long)]
        max_records: Option<usize>,
    },
    /// Balance, split, and export QA pairs from a manifest plus its store.
    BuildDataset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fake-to-real ratio enforced per category.
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long, default_value_t = 0.05)]
        test_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write perturbed copies of every manifest image plus derived manifests.
    Perturb {
        /// Apply the whole built-in suite.
        #[arg(long, conflicts_with = "spec")]
        suite: bool,
        /// Apply one spec by tag (e.g. "jpeg_70", "Rotate 15").
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Question a model on every test row and score the replies.
    Evaluate {
        /// Model-under-test endpoint name.
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Embedder endpoint name for CSS (default: roles.embedder).
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate under all thirteen perturbation cells.
    Robustness {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from persisted responses, no model traffic.
    Rescore {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the frozen-feature linear probe.
    Probe {
        /// Encoder endpoint name serving image embeddings.
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feature cache directory (default: <out>/feature_cache).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Render machine report files; optionally compare two outcome files.
    Report {
        /// report.json files to render.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Two outcome.json files to compare side by side.
        #[arg(long, num_args = 2)]
        compare: Option<Vec<PathBuf>>,
    },
}

/// Entry point used by the binary; returns the process exit code.
/// 0 = success, 1 = operational failure, 2 = usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut config = match &cli.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    Ok(config)
}

fn require_config_path(cli: &Cli) -> Result<()> {
    if cli.config.is_none() {
        return Err(Error::Config(
            "this command needs endpoints; pass --config or set FAKEFORGE_CONFIG".into(),
        ));
    }
    Ok(())
}

fn slug(tag: &str) -> String {
    let mut out = String::new();
    for c in tag.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '.' {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

fn write_meta(command: &str, config: &HarnessConfig, seed: u64, dir: &Path) -> Result<String> {
    let catalog = config.catalog()?;
    let mut meta = RunMetadata::new(command, config, &catalog);
    meta.seed = seed;
    meta.write(dir)
}

fn execute(cli: Cli) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| Error::Other(format!("tokio runtime: {e}")))?;
    let config = load_config(&cli)?;

    match &cli.command {
        Command::Ingest {
            manifest,
            out,
            skip_image_check,
        } => {
            let records = load_manifest(manifest)?;
            if !skip_image_check {
                for record in &records {
                    perturb::load_rgb(&record.image_path).map_err(|e| match e {
                        Error::ImageUnreadable { path, message, .. } => Error::ImageUnreadable {
                            record_id: record.id.clone(),
                            path,
                            message,
                        },
                        other => other,
                    })?;
                }
            }
            write_manifest(out, &records)?;
            let stats = ManifestStats::collect(&records);
            println!("records: {}", stats.total);
            for (authenticity, n) in &stats.by_authenticity {
                println!("  {authenticity}: {n}");
            }
            for (category, n) in &stats.by_category {
                println!("  {category}: {n}");
            }
            if stats.uncategorized > 0 {
                println!("  (uncategorized): {}", stats.uncategorized);
            }
            Ok(())
        }

        Command::Categorize {
            manifest,
            out,
            classifier,
        } => {
            require_config_path(&cli)?;
            let name = classifier
                .clone()
                .or_else(|| config.roles.classifier.clone())
                .ok_or_else(|| Error::Config("no classifier endpoint configured".into()))?;
            let endpoint = config.endpoint(&name)?.clone();
            let gateway = Gateway::new();
            let mut records = load_manifest(manifest)?;
            let mut filled = 0usize;
            runtime.block_on(async {
                for record in &mut records {
                    if record.category.is_none() {
                        record.category = Some(categorize(&gateway, record, Some(&endpoint)).await?);
                        filled += 1;
                    }
                }
                Ok::<(), Error>(())
            })?;
            write_manifest(out, &records)?;
            if let Some(parent) = out.parent() {
                write_meta("categorize", &config, config.seed, parent)?;
            }
            println!("categorized {filled} of {} records", records.len());
            Ok(())
        }

        Command::Annotate {
            manifest,
            out,
            annotators,
            aggregator,
            max_records,
        } => {
            require_config_path(&cli)?;
            let annotator_endpoints = match annotators {
                Some(csv) => csv
                    .split(',')
                    .map(|n| config.endpoint(n.trim()).cloned())
                    .collect::<Result<Vec<_>>>()?,
                None => config.annotator_endpoints()?,
            };
            let aggregator_name = aggregator
                .clone()
                .or_else(|| config.roles.aggregator.clone())
                .ok_or_else(|| Error::Config("no aggregator endpoint configured".into()))?;
            let aggregator_endpoint = config.endpoint(&aggregator_name)?.clone();
            let catalog = config.catalog()?;
            let gateway = Gateway::new();
            let options = AnnotationOptions {
                workers: config.workers,
                max_records: *max_records,
            };
            let summary = runtime.block_on(run_annotation(
                &gateway,
                &catalog,
                manifest,
                &annotator_endpoints,
                &aggregator_endpoint,
                out,
                &options,
            ))?;
            if let Some(parent) = out.parent() {
                write_meta("annotate", &config, config.seed, parent)?;
            }
            println!(
                "complete: {}  failed: {}  resumed: {}",
                summary.complete, summary.failed, summary.skipped
            );
            for (annotator, errors) in &summary.annotator_errors {
                println!("  {annotator}: {errors} error(s)");
            }
            Ok(())
        }

        Command::BuildDataset {
            manifest,
            annotations,
            out,
            ratio,
            test_fraction,
            seed,
        } => {
            let seed = seed.unwrap_or(config.seed);
            let records = load_manifest(manifest)?;
            let bundles: BTreeMap<String, crate::datamodel::AnnotationBundle> =
                load_annotation_store(annotations)?
                    .into_iter()
                    .map(|b| (b.record_id.clone(), b))
                    .collect();
            let (train_split, test_split) = balance_and_split(&records, *ratio, *test_fraction, seed)?;
            let assigned = with_split_assignments(&records, &train_split, &test_split);
            let (pairs, summary) = build_qa_pairs(&assigned, &bundles);
            write_jsonl(out, &pairs)?;
            if let Some(parent) = out.parent() {
                write_meta("build-dataset", &config, seed, parent)?;
            }
            println!(
                "pairs: {} (train {}, test {}), skipped: {}",
                summary.pairs,
                pairs.iter().filter(|p| p.split == crate::datamodel::Split::Train).count(),
                pairs.iter().filter(|p| p.split == crate::datamodel::Split::Test).count(),
                summary.skipped
            );
            Ok(())
        }

        Command::Perturb {
            suite,
            spec,
            seed,
            input,
            out,
        } => {
            let seed = seed.unwrap_or(config.seed);
            let specs = if *suite {
                perturb::suite()
            } else {
                let tag = spec
                    .as_deref()
                    .ok_or_else(|| Error::Precondition("pass --suite or --spec <tag>".into()))?;
                vec![perturb::find_spec(tag).ok_or_else(|| {
                    Error::Precondition(format!(
                        "unknown spec {tag:?}; known: {}",
                        perturb::suite()
                            .iter()
                            .map(|s| s.tag.clone())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ))
                })?]
            };
            let records = load_manifest(input)?;
            for spec in &specs {
                let dir = out.join(slug(&spec.tag));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let mut derived = Vec::with_capacity(records.len());
                for record in &records {
                    let raster = perturb::load_rgb(&record.image_path)?;
                    let perturbed =
                        perturb::apply(&raster, spec, perturb::record_seed(seed, &record.id))?;
                    let path = dir.join(format!("{}.png", record.id));
                    std::fs::write(&path, perturb::png_bytes(&perturbed)?)
                        .map_err(|e| Error::io(&path, e))?;
                    let mut tagged = record.clone();
                    tagged.image_path = path.to_string_lossy().into_owned();
                    tagged
                        .extra
                        .insert("perturbation".into(), serde_json::Value::String(spec.tag.clone()));
                    derived.push(tagged);
                }
                write_manifest(dir.join("manifest.jsonl"), &derived)?;
                println!("{}: {} images -> {}", spec.tag, derived.len(), dir.display());
            }
            write_meta("perturb", &config, seed, out)?;
            Ok(())
        }

        Command::Evaluate {
            model,
            dataset,
            embedder,
            out,
        } => {
            require_config_path(&cli)?;
            let model_endpoint = config.endpoint(model)?.clone();
            let embedder_endpoint = match embedder.clone().or_else(|| config.roles.embedder.clone())
            {
                Some(name) => Some(config.endpoint(&name)?.clone()),
                None => None,
            };
            let gateway = Gateway::new();
            let options = EvalOptions {
                workers: config.workers,
                ..Default::default()
            };
            let outcome = runtime.block_on(evaluate(
                &gateway,
                &model_endpoint,
                dataset,
                embedder_endpoint.as_ref(),
                &options,
            ))?;
            let meta_digest = write_meta("evaluate", &config, config.seed, out)?;
            persist_outcome(out, &outcome, dataset, Some(meta_digest))?;
            write_outcome_file(out, &outcome)?;
            print!("{}", render_report(&[(outcome.model.clone(), outcome.report.clone())]));
            print!("{}", render_per_category(&outcome.report));
            Ok(())
        }

        Command::Robustness {
            model,
            dataset,
            seed,
            embedder,
            out,
        } => {
            require_config_path(&cli)?;
            let seed = seed.unwrap_or(config.seed);
            let model_endpoint = config.endpoint(model)?.clone();
            let embedder_endpoint = match embedder.clone().or_else(|| config.roles.embedder.clone())
            {
                Some(name) => Some(config.endpoint(&name)?.clone()),
                None => None,
            };
            let gateway = Gateway::new();
            let options = EvalOptions {
                workers: config.workers,
                ..Default::default()
            };
            let outcomes = runtime.block_on(evaluate_robustness(
                &gateway,
                &model_endpoint,
                dataset,
                seed,
                embedder_endpoint.as_ref(),
                &options,
            ))?;
            let meta_digest = write_meta("robustness", &config, seed, out)?;
            let rows: Vec<(String, crate::datamodel::MetricReport)> = outcomes
                .iter()
                .map(|o| (o.model.clone(), o.report.clone()))
                .collect();
            write_report_file(out.join("report.json"), &rows)?;
            for outcome in &outcomes {
                let tag = outcome.report.perturbation_tag.as_deref().unwrap_or("none");
                persist_outcome(
                    out.join(slug(tag)),
                    outcome,
                    dataset,
                    Some(meta_digest.clone()),
                )?;
            }
            print!("{}", render_report(&rows));
            Ok(())
        }

        Command::Rescore {
            responses,
            dataset,
            embedder,
            out,
        } => {
            let embedder_endpoint = match embedder.clone().or_else(|| config.roles.embedder.clone())
            {
                Some(name) => Some(config.endpoint(&name)?.clone()),
                None => None,
            };
            let gateway = Gateway::new();
            let outcome = runtime.block_on(rescore(
                &gateway,
                responses,
                dataset,
                embedder_endpoint.as_ref(),
            ))?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_report_file(
                out.join("report.json"),
                &[(outcome.model.clone(), outcome.report.clone())],
            )?;
            write_outcome_file(out, &outcome)?;
            write_meta("rescore", &config, config.seed, out)?;
            print!("{}", render_report(&[(outcome.model.clone(), outcome.report.clone())]));
            Ok(())
        }

        Command::Probe {
            encoder,
            train: train_manifest,
            test: test_manifest,
            out,
            cache,
        } => {
            require_config_path(&cli)?;
            let encoder_endpoint = config.endpoint(encoder)?.clone();
            let cache_dir = cache.clone().unwrap_or_else(|| out.join("feature_cache"));
            let gateway = Gateway::new();
            let train_records = load_manifest(train_manifest)?;
            let test_records = load_manifest(test_manifest)?;

            let (model, final_loss, outcome) = runtime.block_on(async {
                let train_features =
                    extract_features(&gateway, &train_records, &encoder_endpoint, &cache_dir).await?;
                let (model, final_loss) = train(&train_features, &TrainHyper::default())?;
                let test_features =
                    extract_features(&gateway, &test_records, &encoder_endpoint, &cache_dir).await?;
                let predictions = predict(&model, &test_features)?;

                let verdicts: Vec<(crate::datamodel::Verdict, crate::datamodel::Authenticity)> =
                    predictions
                        .iter()
                        .zip(&test_features.labels)
                        .map(|((_, v), l)| (*v, *l))
                        .collect();
                let (acc, f1, counts) = crate::metrics::detection_metrics(&verdicts)?;
                let scored: Vec<(f64, crate::datamodel::Authenticity)> = predictions
                    .iter()
                    .zip(&test_features.labels)
                    .map(|((s, _), l)| (*s, *l))
                    .collect();
                let auc = crate::metrics::auc(&scored).ok();

                let mut report = crate::datamodel::MetricReport {
                    overall: crate::datamodel::MetricBlock {
                        counts,
                        acc,
                        f1,
                        auc,
                        rouge_l: 0.0,
                        css: None,
                    },
                    ..Default::default()
                };
                // per-category detection slices
                let mut by_category: BTreeMap<
                    crate::datamodel::Category,
                    Vec<(crate::datamodel::Verdict, crate::datamodel::Authenticity)>,
                > = BTreeMap::new();
                for (record, (_, verdict)) in test_records.iter().zip(&predictions) {
                    if let Some(category) = record.category {
                        by_category
                            .entry(category)
                            .or_default()
                            .push((*verdict, record.authenticity));
                    }
                }
                for (category, members) in by_category {
                    let (acc, f1, counts) = crate::metrics::detection_metrics(&members)?;
                    report.per_category.insert(
                        category,
                        crate::datamodel::MetricBlock {
                            counts,
                            acc,
                            f1,
                            auc: None,
                            rouge_l: 0.0,
                            css: None,
                        },
                    );
                }

                let outcome = LabeledOutcome {
                    name: format!("frozen features + linear probe ({})", encoder_endpoint.name),
                    record_ids: test_records.iter().map(|r| r.id.clone()).collect(),
                    report,
                };
                Ok::<_, Error>((model, final_loss, outcome))
            })?;

            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let model_path = out.join("probe_model.json");
            std::fs::write(
                &model_path,
                serde_json::to_string_pretty(&model).map_err(|e| Error::Other(e.to_string()))? + "\n",
            )
            .map_err(|e| Error::io(&model_path, e))?;
            let outcome_path = out.join("outcome.json");
            std::fs::write(
                &outcome_path,
                serde_json::to_string_pretty(&outcome).map_err(|e| Error::Other(e.to_string()))?
                    + "\n",
            )
            .map_err(|e| Error::io(&outcome_path, e))?;
            write_report_file(
                out.join("report.json"),
                &[(outcome.name.clone(), outcome.report.clone())],
            )?;
            write_meta("probe", &config, config.seed, out)?;
            println!("final training loss: {final_loss:.6}");
            print!("{}", render_report(&[(outcome.name.clone(), outcome.report.clone())]));
            Ok(())
        }

        Command::Report { input, compare } => {
            if let Some(paths) = compare {
                let load = |p: &PathBuf| -> Result<LabeledOutcome> {
                    let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&raw)
                        .map_err(|e| Error::Other(format!("{}: {e}", p.display())))
                };
                let a = load(&paths[0])?;
                let b = load(&paths[1])?;
                print!("{}", compare_paradigms(&a, &b)?.render());
            }
            for path in input {
                let file = load_report_file(path)?;
                let rows: Vec<(String, crate::datamodel::MetricReport)> = file
                    .reports
                    .into_iter()
                    .map(|r| (r.model, r.report))
                    .collect();
                print!("{}", render_report(&rows));
            }
            Ok(())
        }
    }
}

/// A `LabeledOutcome` beside the report so paradigms can be compared later.
fn write_outcome_file(dir: &Path, outcome: &crate::eval::EvalOutcome) -> Result<()> {
    let labeled = LabeledOutcome {
        name: outcome.model.clone(),
        record_ids: outcome.record_ids(),
        report: outcome.report.clone(),
    };
    let path = dir.join("outcome.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&labeled).map_err(|e| Error::Other(e.to_string()))? + "\n",
    )
    .map_err(|e| Error::io(&path, e))
}
