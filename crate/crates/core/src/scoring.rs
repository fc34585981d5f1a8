//! Reconstruction-error scoring, AUROC, Tukey-fence statistics and the
//! benchmark table aggregation.
//!
//! Scores and metrics are reported in `f64` regardless of the model element
//! type; AUROC is computed from exact pairwise win/tie counts so it agrees
//! with the brute-force Mann-Whitney definition to the last bit.

use crate::datasets::{Corpus, DataError, OneClassSplit};
use crate::models::{Generator, ModelError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("metric error: {0}")]
    Metric(String),
    #[error("filter error: {0}")]
    Filter(String),
    #[error("aggregation error: {0}")]
    Aggregate(String),
    #[error("scoring error: {0}")]
    Model(#[from] ModelError),
    #[error("scoring error: {0}")]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Euclidean norm of the reconstruction error over all elements of one
/// example. Accumulated in `f64` for a dtype-independent report value.
pub fn anomaly_score<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64, ScoreError> {
    if x.shape() != x_hat.shape() {
        return Err(ScoreError::Metric(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let d = a.to_f64_lossy() - b.to_f64_lossy();
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (anomaly, normal) pairs where the anomaly outscores the normal, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, ScoreError> {
    if scores.len() != labels.len() {
        return Err(ScoreError::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.iter().filter(|&&y| y == 0).count() as u64;
    if pos == 0 || neg == 0 {
        return Err(ScoreError::Metric(
            "AUROC needs both labels present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or_else(|| {
        panic!("NaN score at index {a} or {b}")
    }));

    let mut wins = 0u64; // anomaly strictly above a normal
    let mut ties = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_in_group, mut neg_in_group) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_in_group += 1;
            } else {
                neg_in_group += 1;
            }
            j += 1;
        }
        wins += pos_in_group * neg_below;
        ties += pos_in_group * neg_in_group;
        neg_below += neg_in_group;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
}

/// Quantile by linear interpolation on the sorted data at position `(n-1)*q`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Outcome of Tukey-fence filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeySummary {
    pub kept: Vec<f64>,
    pub removed: Vec<f64>,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
}

/// Keeps scores inside the closed interval `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`.
pub fn tukey_filter(scores: &[f64]) -> Result<TukeySummary, ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::Filter("cannot filter an empty score list".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN score"));
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lower_fence = q1 - 1.5 * iqr;
    let upper_fence = q3 + 1.5 * iqr;
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for &s in scores {
        if s >= lower_fence && s <= upper_fence {
            kept.push(s);
        } else {
            removed.push(s);
        }
    }
    Ok(TukeySummary {
        kept,
        removed,
        q1,
        q3,
        iqr,
        lower_fence,
        upper_fence,
    })
}

/// Mean and population standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if xs.windows(2).all(|w| w[0] == w[1]) {
        // identical values: avoid rounding noise from the mean
        return (xs[0], 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// One test example's anomaly score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub score: f64,
    pub y: u8,
}

/// Tukey-filtered score statistics for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: u8,
    pub count: usize,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    pub kept: usize,
    pub removed: usize,
    pub kept_mean: f64,
}

/// Per-example scores with the summary metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub auroc: f64,
    pub per_label: Vec<LabelStats>,
    pub scores: Vec<ExampleScore>,
}

impl ScoreReport {
    /// Assembles the report from raw per-example scores.
    pub fn from_scores(scores: Vec<ExampleScore>) -> Result<Self, ScoreError> {
        let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let labels: Vec<u8> = scores.iter().map(|s| s.y).collect();
        let auroc = auroc(&values, &labels)?;
        let mut per_label = Vec::new();
        for label in [0u8, 1u8] {
            let subset: Vec<f64> = scores
                .iter()
                .filter(|s| s.y == label)
                .map(|s| s.score)
                .collect();
            if subset.is_empty() {
                continue;
            }
            let t = tukey_filter(&subset)?;
            let (kept_mean, _) = mean_sd(&t.kept);
            per_label.push(LabelStats {
                label,
                count: subset.len(),
                q1: t.q1,
                q3: t.q3,
                iqr: t.iqr,
                lower_fence: t.lower_fence,
                upper_fence: t.upper_fence,
                kept: t.kept.len(),
                removed: t.removed.len(),
                kept_mean,
            });
        }
        Ok(ScoreReport {
            auroc,
            per_label,
            scores,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ScoreError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, ScoreError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Per-example scores as `id,score,label` CSV.
    pub fn save_csv(&self, path: &Path) -> Result<(), ScoreError> {
        let mut out = std::fs::File::create(path)?;
        writeln!(out, "id,score,label")?;
        for s in &self.scores {
            writeln!(out, "{},{},{}", csv_field(&s.id), s.score, s.y)?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores every test example of a split with eval-mode reconstructions.
pub fn score_split<T: Scalar>(
    gen: &mut Generator<T>,
    corpus: &Corpus<T>,
    split: &OneClassSplit,
    batch_size: usize,
) -> Result<ScoreReport, ScoreError> {
    if split.test.is_empty() {
        return Err(ScoreError::Metric("split has no test examples".into()));
    }
    let mut scores = Vec::with_capacity(split.test.len());
    for chunk in split.test.chunks(batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        for (id, _) in chunk {
            let ex = corpus.get(id).ok_or_else(|| {
                ScoreError::Metric(format!("test example {id} not found in corpus"))
            })?;
            images.push(ex.image.tensor());
        }
        let batch = Tensor::stack(&images);
        let recon = gen.reconstruct(&batch)?;
        let originals = batch.unstack();
        let recons = recon.unstack();
        for (((id, y), x), xh) in chunk.iter().zip(&originals).zip(&recons) {
            scores.push(ExampleScore {
                id: id.clone(),
                score: anomaly_score(x, xh)?,
                y: *y,
            });
        }
    }
    ScoreReport::from_scores(scores)
}

/// Loads a generator checkpoint and scores a split with it.
pub fn score_model<T: Scalar>(
    checkpoint_dir: &Path,
    corpus: &Corpus<T>,
    split: &OneClassSplit,
    batch_size: usize,
) -> Result<ScoreReport, ScoreError> {
    let (mut gen, _meta) = crate::checkpoint::load_generator::<T>(checkpoint_dir)?;
    score_split(&mut gen, corpus, split, batch_size)
}

/// One (class, seed) cell of a benchmark sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub class: u32,
    pub seed: u64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub class: u32,
    pub mean_auroc: f64,
}

/// Per-class seed means with the avg/SD footer across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<BenchmarkRow>,
    pub avg: f64,
    /// Population standard deviation across class means.
    pub sd: f64,
}

/// Aggregates per-seed AUROCs into the benchmark table. Every class must
/// cover the same seed set.
pub fn aggregate_benchmark(entries: &[BenchmarkEntry]) -> Result<BenchmarkTable, ScoreError> {
    if entries.is_empty() {
        return Err(ScoreError::Aggregate("no benchmark entries".into()));
    }
    let mut by_class: std::collections::BTreeMap<u32, Vec<(u64, f64)>> =
        std::collections::BTreeMap::new();
    for e in entries {
        by_class.entry(e.class).or_default().push((e.seed, e.auroc));
    }
    let mut reference: Vec<u64> = by_class.values().next().unwrap().iter().map(|e| e.0).collect();
    reference.sort_unstable();
    let mut gaps = Vec::new();
    for (class, cells) in &by_class {
        let mut seeds: Vec<u64> = cells.iter().map(|e| e.0).collect();
        seeds.sort_unstable();
        if seeds != reference {
            gaps.push(format!(
                "class {class} covers seeds {seeds:?} but expected {reference:?}"
            ));
        }
    }
    if !gaps.is_empty() {
        return Err(ScoreError::Aggregate(format!(
            "ragged seed sets: {}",
            gaps.join("; ")
        )));
    }
    let rows: Vec<BenchmarkRow> = by_class
        .iter()
        .map(|(&class, cells)| {
            let values: Vec<f64> = cells.iter().map(|e| e.1).collect();
            BenchmarkRow {
                class,
                mean_auroc: mean_sd(&values).0,
            }
        })
        .collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_auroc).collect();
    let (avg, sd) = mean_sd(&means);
    Ok(BenchmarkTable {
        seeds: reference,
        rows,
        avg,
        sd,
    })
}

impl BenchmarkTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,mean_auroc\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}\n", row.class, row.mean_auroc));
        }
        out.push_str(&format!("avg,{}\nsd,{}\n", self.avg, self.sd));
        out
    }

    /// Classes as columns with an avg/SD footer, in percent.
    pub fn to_text(&self) -> String {
        let mut header = String::from("class  ");
        let mut values = String::from("auroc  ");
        for row in &self.rows {
            header.push_str(&format!("{:>7}", row.class));
            values.push_str(&format!("{:>7.1}", row.mean_auroc * 100.0));
        }
        header.push_str(&format!("{:>8}{:>8}", "avg", "SD"));
        values.push_str(&format!("{:>8.1}{:>8.2}", self.avg * 100.0, self.sd * 100.0));
        format!("{header}\n{values}\n")
    }

    pub fn save(&self, csv_path: &Path, text_path: &Path) -> Result<(), ScoreError> {
        std::fs::write(csv_path, self.to_csv())?;
        std::fs::write(text_path, self.to_text())?;
        Ok(())
    }
}
