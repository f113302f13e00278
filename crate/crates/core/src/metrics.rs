//! Evaluation quantities: accuracies, concept alignment (CAS), leakage (OIS),
//! cosine-similarity distributions, intra-concept variance and intervention
//! curves.
//!
//! CAS and OIS are surrogates: CAS clusters each concept's embeddings into
//! two groups and scores agreement with the concept labels; OIS compares how
//! well each concept's embedding predicts every other concept against how well
//! the ground-truth concept itself does.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{ConceptModel, InterventionSelect};
use crate::rng;
use crate::tensor::Tensor;

pub const KMEANS_ITERS: usize = 50;
pub const PROBE_EPOCHS: usize = 200;
pub const MAX_PAIRS: usize = 2000;
pub const HIST_BINS: usize = 20;

/// Percentage of concept predictions `p >= 0.5` that match the labels.
pub fn concept_accuracy(p_hat: &Tensor, concepts: &[u8]) -> Result<f64> {
    if p_hat.len() != concepts.len() {
        return Err(Error::invalid(format!(
            "concept_accuracy: {} predictions for {} labels",
            p_hat.len(),
            concepts.len()
        )));
    }
    let hits = p_hat
        .data()
        .iter()
        .zip(concepts)
        .filter(|(&p, &c)| (p >= 0.5) == (c == 1))
        .count();
    Ok(100.0 * hits as f64 / concepts.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0]).map(|i| argmax(logits.row(i))).collect()
}

/// Percentage of rows whose argmax equals the label.
pub fn task_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::invalid("task_accuracy: logits and labels disagree"));
    }
    let m = logits.shape()[1];
    if labels.iter().any(|&l| l >= m) {
        return Err(Error::invalid("task_accuracy: label out of range"));
    }
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two-means clustering of the rows of `points` (k-means++ seeding, fixed
/// iteration count). Returns `None` when every point coincides.
pub fn two_means(points: &[&[f64]], seed: u64) -> Option<Vec<usize>> {
    let n = points.len();
    let mut r = rng::stream(seed, "kmeans");
    let first = r.random_range(0..n);
    let d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return None;
    }
    let mut target = r.random_range(0.0..total);
    let mut second = n - 1;
    for (i, &d) in d2.iter().enumerate() {
        if target < d {
            second = i;
            break;
        }
        target -= d;
    }
    let mut centers = [points[first].to_vec(), points[second].to_vec()];
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = (sq_dist(p, &centers[1]) < sq_dist(p, &centers[0])) as usize;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&&[f64]> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    Some(assign)
}

/// Rows `[i, k, :]` of an `[N, K, d]` tensor.
fn concept_rows(emb: &Tensor, k: usize) -> Vec<&[f64]> {
    let s = emb.shape();
    let d = s[2];
    (0..s[0])
        .map(|i| &emb.data()[(i * s[1] + k) * d..(i * s[1] + k + 1) * d])
        .collect()
}

fn check_embeddings(emb: &Tensor, concepts: &[u8]) -> Result<(usize, usize)> {
    let s = emb.shape();
    if s.len() != 3 || s[0] * s[1] != concepts.len() {
        return Err(Error::invalid(format!(
            "expected [N, K, d] embeddings matching {} concept labels, got {:?}",
            concepts.len(),
            s
        )));
    }
    Ok((s[0], s[1]))
}

/// Concept alignment score in percent.
pub fn cas(emb: &Tensor, concepts: &[u8], seed: u64) -> Result<f64> {
    let (n, k) = check_embeddings(emb, concepts)?;
    let mut total = 0.0;
    for c in 0..k {
        let labels: Vec<u8> = (0..n).map(|i| concepts[i * k + c]).collect();
        let ones = labels.iter().filter(|&&l| l == 1).count();
        let score = match two_means(&concept_rows(emb, c), rng::derive_seed(seed, "cas", c as u64)) {
            None => ones.max(n - ones) as f64 / n as f64,
            Some(assign) => {
                let agree = assign.iter().zip(&labels).filter(|(&a, &l)| a == l as usize).count();
                agree.max(n - agree) as f64 / n as f64
            }
        };
        total += score;
    }
    Ok(100.0 * total / k as f64)
}

/// Multinomial logistic regression trained with mini-batch SGD on
/// standardized inputs.
#[derive(Clone, Debug)]
pub struct SoftmaxProbe {
    classes: usize,
    dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
}

impl SoftmaxProbe {
    pub fn fit(x: &[&[f64]], y: &[usize], classes: usize, epochs: usize, seed: u64) -> Self {
        let n = x.len();
        let dim = x.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; dim];
        for row in x {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(*row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = Self {
            classes,
            dim,
            mean,
            scale,
            weights: vec![0.0; classes * (dim + 1)],
        };
        let mut r = rng::stream(seed, "probe");
        let mut order: Vec<usize> = (0..n).collect();
        let lr = 0.1;
        let batch = 32;
        let mut feat = vec![0.0; dim + 1];
        let mut probs = vec![0.0; classes];
        let mut grad = vec![0.0; probe.weights.len()];
        for _ in 0..epochs {
            order.shuffle(&mut r);
            for chunk in order.chunks(batch) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in chunk {
                    probe.standardize(x[i], &mut feat);
                    probe.probs(&feat, &mut probs);
                    for c in 0..classes {
                        let err = probs[c] - (y[i] == c) as u8 as f64;
                        for (g, f) in grad[c * (dim + 1)..(c + 1) * (dim + 1)].iter_mut().zip(&feat) {
                            *g += err * f;
                        }
                    }
                }
                let step = lr / chunk.len() as f64;
                for (w, g) in probe.weights.iter_mut().zip(&grad) {
                    *w -= step * g;
                }
            }
        }
        probe
    }

    fn standardize(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..self.dim {
            out[j] = (row[j] - self.mean[j]) * self.scale[j];
        }
        out[self.dim] = 1.0;
    }

    fn probs(&self, feat: &[f64], out: &mut [f64]) {
        let d = self.dim + 1;
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.weights[c * d..(c + 1) * d].iter().zip(feat).map(|(w, f)| w * f).sum();
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut feat = vec![0.0; self.dim + 1];
        let mut probs = vec![0.0; self.classes];
        self.standardize(row, &mut feat);
        self.probs(&feat, &mut probs);
        argmax(&probs)
    }
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        count[t] += 1;
        hit[t] += (p == t) as usize;
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&c| count[c] > 0)
        .map(|c| hit[c] as f64 / count[c] as f64)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Held-out balanced accuracy of a binary probe from `x` to `target`.
fn probe_score(x: &[&[f64]], target: &[u8], seed: u64) -> f64 {
    let n = x.len();
    let split = n / 2;
    let y: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let probe = SoftmaxProbe::fit(&x[..split], &y[..split], 2, PROBE_EPOCHS, seed);
    let pred: Vec<usize> = x[split..].iter().map(|r| probe.predict(r)).collect();
    balanced_accuracy(&pred, &y[split..], 2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OisReport {
    pub score: f64,
    /// Concepts left out because they take a single value.
    pub excluded: Vec<usize>,
    pub impurity: Vec<Vec<f64>>,
    pub oracle: Vec<Vec<f64>>,
}

/// `||P - O||_F / ||O||_F * 100` from two precomputed matrices.
pub fn ois_from_matrices(p: &[Vec<f64>], o: &[Vec<f64>]) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (pr, or) in p.iter().zip(o) {
        for (a, b) in pr.iter().zip(or) {
            diff += (a - b) * (a - b);
            norm += b * b;
        }
    }
    100.0 * diff.sqrt() / norm.sqrt()
}

/// Oracle impurity score of `[N, K, d]` embeddings.
pub fn ois(emb: &Tensor, concepts: &[u8], seed: u64) -> Result<OisReport> {
    let (n, k) = check_embeddings(emb, concepts)?;
    if n < 4 {
        return Err(Error::invalid("ois needs at least 4 samples"));
    }
    let column = |c: usize| -> Vec<u8> { (0..n).map(|i| concepts[i * k + c]).collect() };
    let half = n / 2;
    let (kept, excluded): (Vec<usize>, Vec<usize>) = (0..k).partition(|&c| {
        let col = column(c);
        let both = |s: &[u8]| s.contains(&0) && s.contains(&1);
        both(&col[..half]) && both(&col[half..])
    });
    if kept.is_empty() {
        return Err(Error::invalid("ois: every concept takes a single value"));
    }
    let columns: Vec<Vec<u8>> = kept.iter().map(|&c| column(c)).collect();
    let mut impurity = vec![vec![0.0; kept.len()]; kept.len()];
    let mut oracle = vec![vec![0.0; kept.len()]; kept.len()];
    for (a, &ka) in kept.iter().enumerate() {
        let rows = concept_rows(emb, ka);
        let scalar: Vec<[f64; 1]> = columns[a].iter().map(|&v| [v as f64]).collect();
        let scalar_rows: Vec<&[f64]> = scalar.iter().map(|r| &r[..]).collect();
        for (b, col) in columns.iter().enumerate() {
            let s = rng::derive_seed(seed, "ois", (ka * k + kept[b]) as u64);
            impurity[a][b] = probe_score(&rows, col, s);
            oracle[a][b] = probe_score(&scalar_rows, col, s);
        }
    }
    Ok(OisReport {
        score: ois_from_matrices(&impurity, &oracle),
        excluded,
        impurity,
        oracle,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean, standard deviation and a 20-bin histogram on `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Pairs dropped because one side had zero norm.
    pub skipped: usize,
    pub histogram: Vec<(f64, f64, usize)>,
}

impl SimilaritySummary {
    pub fn from_values(values: &[f64], skipped: usize) -> Self {
        let n = values.len();
        let (mean, std) = mean_std(values);
        let width = 2.0 / HIST_BINS as f64;
        let mut histogram: Vec<(f64, f64, usize)> = (0..HIST_BINS)
            .map(|b| (-1.0 + b as f64 * width, -1.0 + (b + 1) as f64 * width, 0))
            .collect();
        for &v in values {
            let b = (((v + 1.0) / width).floor() as usize).min(HIST_BINS - 1);
            histogram[b].2 += 1;
        }
        Self {
            mean,
            std,
            count: n,
            skipped,
            histogram,
        }
    }

    /// Combines summaries of disjoint value sets as if computed over their union.
    pub fn merge(parts: &[SimilaritySummary]) -> Self {
        let count: usize = parts.iter().map(|p| p.count).sum();
        let skipped = parts.iter().map(|p| p.skipped).sum();
        let mut merged = Self::from_values(&[], skipped);
        if count == 0 {
            return merged;
        }
        let n = count as f64;
        let mean = parts.iter().map(|p| p.count as f64 * p.mean).sum::<f64>() / n;
        let second = parts
            .iter()
            .map(|p| p.count as f64 * (p.std * p.std + p.mean * p.mean))
            .sum::<f64>()
            / n;
        merged.mean = mean;
        merged.std = (second - mean * mean).max(0.0).sqrt();
        merged.count = count;
        for p in parts {
            for (slot, bin) in merged.histogram.iter_mut().zip(&p.histogram) {
                slot.2 += bin.2;
            }
        }
        merged
    }

    /// Rebuilds the histogram part of a summary from a `bin_low,bin_high,count` file.
    pub fn read_histogram_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut histogram = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse_f = |s: String| s.parse::<f64>().map_err(|_| Error::format(format!("bad histogram value `{s}`")));
            let c = field(2)
                .parse::<usize>()
                .map_err(|_| Error::format(format!("bad histogram count `{}`", field(2))))?;
            histogram.push((parse_f(field(0))?, parse_f(field(1))?, c));
        }
        let count = histogram.iter().map(|b| b.2).sum();
        let mean = if count == 0 {
            0.0
        } else {
            histogram.iter().map(|b| 0.5 * (b.0 + b.1) * b.2 as f64).sum::<f64>() / count as f64
        };
        Ok(Self {
            mean,
            std: 0.0,
            count,
            skipped: 0,
            histogram,
        })
    }

    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (lo, hi, c) in &self.histogram {
            w.write_record([format!("{lo:.2}"), format!("{hi:.2}"), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample cosine between flattened embeddings before and after a shift.
pub fn cosine_shift_similarity(before: &Tensor, after: &Tensor) -> Result<SimilaritySummary> {
    if before.shape() != after.shape() {
        return Err(Error::invalid("cosine_shift_similarity: shapes differ"));
    }
    let n = before.shape()[0];
    let w = before.len() / n;
    let mut values = Vec::with_capacity(n);
    let mut skipped = 0;
    for i in 0..n {
        match cosine(&before.data()[i * w..(i + 1) * w], &after.data()[i * w..(i + 1) * w]) {
            Some(c) => values.push(c),
            None => skipped += 1,
        }
    }
    Ok(SimilaritySummary::from_values(&values, skipped))
}

/// Cosine over pairs of samples where concept `k` is active (at most
/// [`MAX_PAIRS`] pairs, drawn without replacement).
pub fn cosine_concept_consistency(emb: &Tensor, concepts: &[u8], k: usize, seed: u64) -> Result<SimilaritySummary> {
    let (n, kk) = check_embeddings(emb, concepts)?;
    if k >= kk {
        return Err(Error::invalid(format!("concept {k} out of range")));
    }
    let rows = concept_rows(emb, k);
    let active: Vec<usize> = (0..n).filter(|&i| concepts[i * kk + k] == 1).collect();
    let m = active.len();
    if m < 2 {
        return Err(Error::invalid(format!("concept {k} has fewer than 2 active samples")));
    }
    let total = m * (m - 1) / 2;
    let pair = |t: usize| -> (usize, usize) {
        // t-th pair (i < j) in row-major order of the upper triangle.
        let mut i = 0;
        let mut rem = t;
        while rem >= m - 1 - i {
            rem -= m - 1 - i;
            i += 1;
        }
        (i, i + 1 + rem)
    };
    let picks: Vec<usize> = if total <= MAX_PAIRS {
        (0..total).collect()
    } else {
        let mut r = rng::indexed_stream(seed, "consistency", k as u64);
        let mut v: Vec<usize> = rand::seq::index::sample(&mut r, total, MAX_PAIRS).into_vec();
        v.sort_unstable();
        v
    };
    let mut values = Vec::with_capacity(picks.len());
    let mut skipped = 0;
    for t in picks {
        let (i, j) = pair(t);
        match cosine(rows[active[i]], rows[active[j]]) {
            Some(c) => values.push(c),
            None => skipped += 1,
        }
    }
    Ok(SimilaritySummary::from_values(&values, skipped))
}

/// Mean squared distance of the rows to their mean.
pub fn intra_concept_variance(rows: &[&[f64]]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::invalid("intra_concept_variance needs at least 2 samples"));
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    Ok(rows.iter().map(|r| sq_dist(r, &mean)).sum::<f64>() / rows.len() as f64)
}

/// Variance of the active embeddings of concept `k` in `[N, K, d]` embeddings.
pub fn concept_variance(emb: &Tensor, concepts: &[u8], k: usize) -> Result<f64> {
    let (n, kk) = check_embeddings(emb, concepts)?;
    let rows = concept_rows(emb, k);
    let active: Vec<&[f64]> = (0..n).filter(|&i| concepts[i * kk + k] == 1).map(|i| rows[i]).collect();
    intra_concept_variance(&active)
}

/// Task accuracy against intervention ratio, sorted by ratio.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InterventionCurve {
    pub points: Vec<(f64, f64)>,
}

/// Mean task accuracy over `seeds` for each intervention ratio.
pub fn intervention_curve(
    model: &ConceptModel,
    features: &Tensor,
    concepts: &[u8],
    labels: &[usize],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<InterventionCurve> {
    if seeds.is_empty() {
        return Err(Error::invalid("intervention_curve needs at least one seed"));
    }
    let snap = model.snapshot(features)?;
    let mut sorted = ratios.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratio"));
    sorted.dedup();
    let mut points = Vec::with_capacity(sorted.len());
    for ratio in sorted {
        let mut acc = 0.0;
        for &seed in seeds {
            let logits = model.intervene(&snap, concepts, &InterventionSelect::Ratio { ratio, seed })?;
            acc += task_accuracy(&logits, labels)?;
        }
        points.push((ratio, acc / seeds.len() as f64));
    }
    Ok(InterventionCurve { points })
}

/// `1.96 * s / sqrt(n)` with the sample standard deviation `s`; 0 for n < 2.
pub fn ci_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Summary of one model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
    pub cas: Option<f64>,
    pub ois: Option<f64>,
    /// Variance of active embeddings per concept (`None` with < 2 active samples).
    pub intra_variance: Vec<Option<f64>>,
}

/// Accuracies plus embedding metrics when the model has embeddings.
pub fn report(model: &ConceptModel, features: &Tensor, concepts: &[u8], labels: &[usize], seed: u64, with_ois: bool) -> Result<MetricsReport> {
    let snap = model.snapshot(features)?;
    let k = model.config.num_concepts;
    let (cas_v, ois_v, var) = match &snap.c_mixed {
        Some(emb) => (
            Some(cas(emb, concepts, seed)?),
            if with_ois { Some(ois(emb, concepts, seed)?.score) } else { None },
            (0..k).map(|c| concept_variance(emb, concepts, c).ok()).collect(),
        ),
        None => (None, None, vec![None; k]),
    };
    Ok(MetricsReport {
        concept_accuracy: concept_accuracy(&snap.p_hat, concepts)?,
        task_accuracy: task_accuracy(&snap.logits, labels)?,
        cas: cas_v,
        ois: ois_v,
        intra_variance: var,
    })
}
