//! Frozen-feature baseline: extract one visual embedding per image through an
//! encoder endpoint (cached by content digest), train a from-scratch logistic
//! linear classifier by full-batch gradient descent, and compare the result
//! against a chat-model evaluation over the same split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Authenticity, ImageRecord, MetricReport, Verdict};
use crate::error::{Error, Result};
use crate::gateway::{data_url, EndpointConfig, Gateway};

/// Row-major feature matrix with per-row labels and record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub record_ids: Vec<String>,
    pub labels: Vec<Authenticity>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.record_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.rows() || self.values.len() != self.rows() * self.dim {
            return Err(Error::Precondition("inconsistent feature matrix shape".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Trained linear probe: weights over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Per-dimension (mean, std) captured at train time; zero-variance
    /// dimensions get std 1.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.1,
            iterations: 500,
            l2: 1e-4,
        }
    }
}

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheIndex {
    encoder: String,
    entries: BTreeMap<String, usize>,
}

fn load_index(cache_dir: &Path) -> CacheIndex {
    let path = cache_dir.join(INDEX_FILE);
    std::fs::read_to_string(&path)
        .ok()
        .and_then(|raw| serde_json::from_str(&raw).ok())
        .unwrap_or_default()
}

fn store_index(cache_dir: &Path, index: &CacheIndex) -> Result<()> {
    let path = cache_dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(index).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn vector_path(cache_dir: &Path, digest: &str) -> std::path::PathBuf {
    cache_dir.join(format!("{digest}.vec"))
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Other(format!("corrupt feature cache file {}", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_vector(path: &Path, vector: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vector.len() * 8);
    for v in vector {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Embed every record's image through the encoder endpoint, one vector per
/// image, cached on disk by image content digest. The probe needs a complete
/// matrix, so any per-record failure fails the call, naming the records.
pub async fn extract_features(
    gateway: &Gateway,
    records: &[ImageRecord],
    encoder: &EndpointConfig,
    cache_dir: impl AsRef<Path>,
) -> Result<FeatureMatrix> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to featurize".into()));
    }
    let cache_dir = cache_dir.as_ref();
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut index = load_index(cache_dir);
    if index.encoder.is_empty() {
        index.encoder = encoder.name.clone();
    } else if index.encoder != encoder.name {
        return Err(Error::Config(format!(
            "feature cache {} was built with encoder {:?}; use a fresh cache dir for {:?}",
            cache_dir.display(),
            index.encoder,
            encoder.name
        )));
    }

    // resolve each record to (digest, payload); unreadable images fail here
    let mut digests = Vec::with_capacity(records.len());
    let mut payloads: BTreeMap<String, String> = BTreeMap::new();
    let mut bad: Vec<String> = Vec::new();
    for record in records {
        match gateway.encode_image_file(Path::new(&record.image_path)) {
            Ok((media_type, b64)) => {
                let url = data_url(&media_type, &b64);
                let digest = crate::digest::sha256_hex(url.as_bytes());
                payloads.entry(digest.clone()).or_insert(url);
                digests.push(digest);
            }
            Err(_) => bad.push(record.id.clone()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Precondition(format!(
            "cannot featurize records with unreadable images: {}",
            bad.join(", ")
        )));
    }

    // fetch only cache misses, in batches
    let missing: Vec<(String, String)> = payloads
        .iter()
        .filter(|(digest, _)| !vector_path(cache_dir, digest).exists())
        .map(|(digest, url)| (digest.clone(), url.clone()))
        .collect();
    for chunk in missing.chunks(16) {
        let inputs: Vec<String> = chunk.iter().map(|(_, url)| url.clone()).collect();
        let vectors = gateway.embed(encoder, &inputs).await?;
        for ((digest, _), vector) in chunk.iter().zip(vectors) {
            write_vector(&vector_path(cache_dir, digest), &vector)?;
            index.entries.insert(digest.clone(), vector.len());
        }
    }
    store_index(cache_dir, &index)?;

    let mut dim = 0usize;
    let mut values = Vec::new();
    for digest in &digests {
        let vector = read_vector(&vector_path(cache_dir, digest))?;
        if dim == 0 {
            dim = vector.len();
        } else if vector.len() != dim {
            return Err(Error::Other(format!(
                "feature dimension mismatch: expected {dim}, got {}",
                vector.len()
            )));
        }
        values.extend(vector);
    }
    let matrix = FeatureMatrix {
        record_ids: records.iter().map(|r| r.id.clone()).collect(),
        labels: records.iter().map(|r| r.authenticity).collect(),
        dim,
        values,
    };
    matrix.validate()?;
    Ok(matrix)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized mean binary cross-entropy of a linear model over row-major
/// features; `y` holds 0/1 targets (fake = 1). The bias is not regularized.
pub fn logistic_loss(
    x: &[f64],
    y: &[f64],
    rows: usize,
    dim: usize,
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        let row = &x[i * dim..(i + 1) * dim];
        let z: f64 = row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
        // stable form of -y ln p - (1-y) ln (1-p)
        total += z.max(0.0) - y[i] * z + (-z.abs()).exp().ln_1p();
    }
    let reg: f64 = 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    total / rows as f64 + reg
}

/// Analytic gradient of [`logistic_loss`] with respect to (weights, bias).
pub fn logistic_gradient(
    x: &[f64],
    y: &[f64],
    rows: usize,
    dim: usize,
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> (Vec<f64>, f64) {
    let mut grad_w = vec![0.0f64; dim];
    let mut grad_b = 0.0f64;
    for i in 0..rows {
        let row = &x[i * dim..(i + 1) * dim];
        let z: f64 = row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
        let residual = sigmoid(z) - y[i];
        for (g, v) in grad_w.iter_mut().zip(row) {
            *g += residual * v;
        }
        grad_b += residual;
    }
    let n = rows as f64;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (grad_w, grad_b / n)
}

fn standardize(features: &FeatureMatrix) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (rows, dim) = (features.rows(), features.dim);
    let mut means = vec![0.0f64; dim];
    for i in 0..rows {
        for (m, v) in means.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= rows as f64;
    }
    let mut stds = vec![0.0f64; dim];
    for i in 0..rows {
        for (s, (v, m)) in stds.iter_mut().zip(features.row(i).iter().zip(&means)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut stds {
        *s = (*s / rows as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let mut standardized = Vec::with_capacity(rows * dim);
    for i in 0..rows {
        for ((v, m), s) in features.row(i).iter().zip(&means).zip(&stds) {
            standardized.push((v - m) / s);
        }
    }
    (standardized, means, stds)
}

/// Train the probe: standardize, then full-batch gradient descent from zero
/// initialization. Deterministic. Returns the model and the final loss.
pub fn train(features: &FeatureMatrix, hyper: &TrainHyper) -> Result<(ProbeModel, f64)> {
    features.validate()?;
    let rows = features.rows();
    if rows < 2 {
        return Err(Error::Precondition("training needs at least 2 rows".into()));
    }
    let n_fake = features
        .labels
        .iter()
        .filter(|l| **l == Authenticity::Fake)
        .count();
    if n_fake == 0 || n_fake == rows {
        return Err(Error::Precondition(
            "training needs both classes present".into(),
        ));
    }

    let (x, means, stds) = standardize(features);
    let y: Vec<f64> = features
        .labels
        .iter()
        .map(|l| if *l == Authenticity::Fake { 1.0 } else { 0.0 })
        .collect();
    let dim = features.dim;

    let mut weights = vec![0.0f64; dim];
    let mut bias = 0.0f64;
    let mut prev_loss = logistic_loss(&x, &y, rows, dim, &weights, bias, hyper.l2);
    for iteration in 0..hyper.iterations {
        let (grad_w, grad_b) = logistic_gradient(&x, &y, rows, dim, &weights, bias, hyper.l2);
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= hyper.learning_rate * g;
        }
        bias -= hyper.learning_rate * grad_b;
        let loss = logistic_loss(&x, &y, rows, dim, &weights, bias, hyper.l2);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at iteration {iteration}; try a smaller learning rate"
            )));
        }
        if loss > prev_loss + 1e-9 {
            return Err(Error::Diverged(format!(
                "loss increased at iteration {iteration} ({prev_loss} -> {loss}); \
                 try a smaller learning rate"
            )));
        }
        prev_loss = loss;
    }
    Ok((
        ProbeModel {
            weights,
            bias,
            means,
            stds,
        },
        prev_loss,
    ))
}

/// Probability-of-fake scores plus thresholded verdicts (fake iff >= 0.5).
pub fn predict(model: &ProbeModel, features: &FeatureMatrix) -> Result<Vec<(f64, Verdict)>> {
    if features.dim != model.weights.len() {
        return Err(Error::Precondition(format!(
            "feature dim {} does not match model dim {}",
            features.dim,
            model.weights.len()
        )));
    }
    let mut out = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let z: f64 = features
            .row(i)
            .iter()
            .zip(&model.means)
            .zip(&model.stds)
            .zip(&model.weights)
            .map(|(((v, m), s), w)| ((v - m) / s) * w)
            .sum::<f64>()
            + model.bias;
        let score = sigmoid(z);
        let verdict = if score >= 0.5 {
            Verdict::Fake
        } else {
            Verdict::Real
        };
        out.push((score, verdict));
    }
    Ok(out)
}

/// An evaluation result bound to the record ids it covers, for paradigm
/// comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOutcome {
    pub name: String,
    pub record_ids: std::collections::BTreeSet<String>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub acc: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Side-by-side detection table for two paradigms over the same test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let mut out = format!("{:<32} {:>6} {:>6} {:>6}\n", "paradigm", "acc", "f1", "auc");
        for row in &self.rows {
            out.push_str(&format!(
                "{:<32} {:>6} {:>6} {:>6}\n",
                row.name,
                crate::eval::fmt_pct(row.acc),
                crate::eval::fmt_pct(row.f1),
                row.auc
                    .map(crate::eval::fmt_pct)
                    .unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }
}

/// Two-row comparison of the probe against a chat-model evaluation; errors
/// unless both cover exactly the same records.
pub fn compare_paradigms(
    probe: &LabeledOutcome,
    chat: &LabeledOutcome,
) -> Result<ComparisonTable> {
    if probe.record_ids != chat.record_ids {
        return Err(Error::Precondition(
            "paradigm comparison requires identical test splits".into(),
        ));
    }
    let row = |outcome: &LabeledOutcome| ComparisonRow {
        name: outcome.name.clone(),
        acc: outcome.report.overall.acc,
        f1: outcome.report.overall.f1,
        auc: outcome.report.overall.auc,
    };
    Ok(ComparisonTable {
        rows: vec![row(probe), row(chat)],
    })
}
