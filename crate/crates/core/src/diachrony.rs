//! Time-indexed analytics: convergence of a user's inputs over successive
//! dialogs (with a shuffled baseline) and batched MTLD time series per model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, UtteranceRecord};
use crate::error::{Error, Result};
use crate::geom::{cosine_sim, EmbeddingVector};
use crate::lexstats::{mode_tokens, mtld, TextMode};
use crate::segmark::SegmentedUtterance;

/// `min over j in 1..=min(k, i)` of `1 - cos(U_i, U_{i-j})`.
pub fn min_recent_diff(user_vectors: &[EmbeddingVector], i: usize, k: usize) -> Result<f64> {
    if i == 0 {
        return Err(Error::InvalidArgument("position 0 has no predecessor".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("window k must be >= 1".into()));
    }
    if i >= user_vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "position {i} out of range for {} dialogs",
            user_vectors.len()
        )));
    }
    let mut best = f64::INFINITY;
    for j in 1..=k.min(i) {
        best = best.min(1.0 - cosine_sim(&user_vectors[i], &user_vectors[i - j])?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub k: usize,
    /// Positions with fewer contributing users are cut from the curve.
    pub min_users: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { k: 1, min_users: 30 }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.min_users == 0 {
            return Err(Error::InvalidArgument("min_users must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    pub k: usize,
    pub positions: Vec<usize>,
    pub mean_min_diff: Vec<f64>,
    pub n_users: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEnvelope {
    pub trials: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Pairwise cosine distances of one user's dialogs, so shuffled trials reduce
/// to index lookups.
struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    fn new(vectors: &[EmbeddingVector]) -> Result<Self> {
        let n = vectors.len();
        let mut d = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..a {
                let v = 1.0 - cosine_sim(&vectors[a], &vectors[b])?;
                d[a * n + b] = v;
                d[b * n + a] = v;
            }
        }
        Ok(DistanceMatrix { n, d })
    }

    fn get(&self, a: usize, b: usize) -> f64 {
        self.d[a * self.n + b]
    }

    fn min_recent(&self, order: &[usize], i: usize, k: usize) -> f64 {
        (1..=k.min(i))
            .map(|j| self.get(order[i], order[i - j]))
            .fold(f64::INFINITY, f64::min)
    }
}

struct Prepared {
    matrices: Vec<DistanceMatrix>,
    /// Number of positions kept (positions are 1..=len).
    len: usize,
    n_users: Vec<usize>,
}

fn prepare(users: &[Vec<EmbeddingVector>], cfg: &ConvergenceConfig) -> Result<Prepared> {
    cfg.validate()?;
    let matrices = users
        .par_iter()
        .map(|u| DistanceMatrix::new(u))
        .collect::<Result<Vec<_>>>()?;
    let longest = matrices.iter().map(|m| m.n).max().unwrap_or(0);
    let mut n_users = Vec::new();
    for i in 1..longest {
        let n = matrices.iter().filter(|m| m.n > i).count();
        if n < cfg.min_users {
            break;
        }
        n_users.push(n);
    }
    if n_users.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no position has {} users with a predecessor dialog",
            cfg.min_users
        )));
    }
    Ok(Prepared {
        len: n_users.len(),
        matrices,
        n_users,
    })
}

fn curve_means(p: &Prepared, orders: &[Vec<usize>], k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; p.len];
    for (m, order) in p.matrices.iter().zip(orders) {
        for (pos, sum) in sums.iter_mut().enumerate().take(m.n.saturating_sub(1)) {
            *sum += m.min_recent(order, pos + 1, k);
        }
    }
    sums.iter().zip(&p.n_users).map(|(s, &n)| s / n as f64).collect()
}

fn identity_orders(p: &Prepared) -> Vec<Vec<usize>> {
    p.matrices.iter().map(|m| (0..m.n).collect()).collect()
}

/// Mean minimal recent difference per dialog position over all users reaching
/// that position. Users are given as chronological vector lists.
pub fn convergence_curve(users: &[Vec<EmbeddingVector>], cfg: &ConvergenceConfig) -> Result<ConvergenceCurve> {
    let p = prepare(users, cfg)?;
    let mean_min_diff = curve_means(&p, &identity_orders(&p), cfg.k);
    Ok(ConvergenceCurve {
        k: cfg.k,
        positions: (1..=p.len).collect(),
        mean_min_diff,
        n_users: p.n_users,
    })
}

/// Random stream for one trial; independent of scheduling.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Per-position mean and sample standard deviation of the curve after
/// independently shuffling every user's dialog order, over `trials` trials.
pub fn shuffle_baseline(
    users: &[Vec<EmbeddingVector>],
    cfg: &ConvergenceConfig,
    trials: usize,
    seed: u64,
) -> Result<BaselineEnvelope> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let p = prepare(users, cfg)?;
    let curves: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut orders = identity_orders(&p);
            for order in &mut orders {
                order.shuffle(&mut rng);
            }
            curve_means(&p, &orders, cfg.k)
        })
        .collect();
    let n = trials as f64;
    let mut mean = vec![0.0; p.len];
    let mut std = vec![0.0; p.len];
    for pos in 0..p.len {
        let m = curves.iter().map(|c| c[pos]).sum::<f64>() / n;
        mean[pos] = m;
        if trials > 1 {
            let var = curves.iter().map(|c| (c[pos] - m).powi(2)).sum::<f64>() / (n - 1.0);
            std[pos] = var.sqrt();
        }
    }
    Ok(BaselineEnvelope {
        trials,
        seed,
        mean,
        std,
    })
}

/// `position,mean_min_diff,n_users,baseline_mean,baseline_std`, one row per
/// curve position.
pub fn curve_csv(curve: &ConvergenceCurve, baseline: Option<&BaselineEnvelope>) -> String {
    let mut out = String::from("position,mean_min_diff,n_users,baseline_mean,baseline_std\n");
    for (idx, pos) in curve.positions.iter().enumerate() {
        let (bm, bs) = match baseline {
            Some(b) if idx < b.mean.len() => (b.mean[idx].to_string(), b.std[idx].to_string()),
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{pos},{},{},{bm},{bs}",
            curve.mean_min_diff[idx], curve.n_users[idx]
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimelapseConfig {
    pub batch_size: usize,
    pub min_batch_size: usize,
    pub mode: TextMode,
    pub mtld_threshold: f64,
}

impl Default for TimelapseConfig {
    fn default() -> Self {
        TimelapseConfig {
            batch_size: 100,
            min_batch_size: 20,
            mode: TextMode::ExpressionOnly,
            mtld_threshold: 0.72,
        }
    }
}

impl TimelapseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < self.min_batch_size.max(1) {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} below minimum {}",
                self.batch_size, self.min_batch_size
            )));
        }
        if !(self.mtld_threshold > 0.0 && self.mtld_threshold < 1.0) {
            return Err(Error::InvalidArgument("mtld_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RichnessBatch {
    pub model_tag: String,
    pub batch_index: usize,
    pub start_time: i64,
    pub end_time: i64,
    pub batch_size: usize,
    /// `None` when the batch has no tokens under the chosen mode.
    pub mtld: Option<f64>,
}

impl RichnessBatch {
    pub fn midpoint_time(&self) -> i64 {
        self.start_time + (self.end_time - self.start_time) / 2
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RichnessSeries {
    pub batches: Vec<RichnessBatch>,
}

impl RichnessSeries {
    /// `model_tag,batch_index,midpoint_time,mtld`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_tag,batch_index,midpoint_time,mtld\n");
        for b in &self.batches {
            let mtld = b.mtld.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{mtld}",
                crate::geom::csv_field(&b.model_tag),
                b.batch_index,
                b.midpoint_time()
            );
        }
        out
    }
}

fn record_tokens(
    r: &UtteranceRecord,
    segmentations: &HashMap<String, SegmentedUtterance>,
    mode: TextMode,
) -> Result<Vec<String>> {
    match (segmentations.get(&r.record_id), mode) {
        (Some(s), _) => Ok(mode_tokens(s, mode)),
        (None, TextMode::FullText) => Ok(mode_tokens(&SegmentedUtterance::plain(&r.record_id, &r.text), mode)),
        (None, TextMode::ExpressionOnly) => Err(Error::MissingSegmentation(r.record_id.clone())),
    }
}

/// Groups records by model tag, orders each group by `(timestamp, record_id)`
/// and computes MTLD over consecutive full batches. The trailing partial
/// batch of each group is dropped.
pub fn timelapse_richness(
    corpus: &Corpus,
    segmentations: &HashMap<String, SegmentedUtterance>,
    cfg: &TimelapseConfig,
) -> Result<RichnessSeries> {
    cfg.validate()?;
    let mut groups: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in corpus.records() {
        groups.entry(&r.model_tag).or_default().push(r);
    }
    let mut jobs = Vec::new();
    for (tag, mut records) in groups {
        records.sort_by(|a, b| (a.timestamp, &a.record_id).cmp(&(b.timestamp, &b.record_id)));
        for (idx, chunk) in records.chunks_exact(cfg.batch_size).enumerate() {
            jobs.push((tag, idx, chunk.to_vec()));
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no model tag has {} records for a full batch",
            cfg.batch_size
        )));
    }
    let mut batches = jobs
        .into_par_iter()
        .map(|(tag, idx, chunk)| {
            let mut tokens = Vec::new();
            for r in &chunk {
                tokens.extend(record_tokens(r, segmentations, cfg.mode)?);
            }
            let value = if tokens.is_empty() {
                None
            } else {
                Some(mtld(&tokens, cfg.mtld_threshold)?)
            };
            Ok(RichnessBatch {
                model_tag: tag.to_string(),
                batch_index: idx,
                start_time: chunk[0].timestamp,
                end_time: chunk[chunk.len() - 1].timestamp,
                batch_size: chunk.len(),
                mtld: value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    batches
        .sort_by(|a, b| (a.start_time, &a.model_tag, a.batch_index).cmp(&(b.start_time, &b.model_tag, b.batch_index)));
    Ok(RichnessSeries { batches })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub time: i64,
    pub model_tag: String,
    pub mtld_full: Option<f64>,
    pub mtld_cohort: Option<f64>,
    pub diff: Option<f64>,
}

/// Pairs each batch of the full series with the cohort batch of the same
/// model tag whose midpoint is nearest (earlier batch on ties).
pub fn cohort_compare(full: &RichnessSeries, cohort: &RichnessSeries) -> Vec<CohortRow> {
    let mut by_tag: HashMap<&str, Vec<&RichnessBatch>> = HashMap::new();
    for b in &cohort.batches {
        by_tag.entry(&b.model_tag).or_default().push(b);
    }
    full.batches
        .iter()
        .map(|f| {
            let t = f.midpoint_time();
            let nearest = by_tag.get(f.model_tag.as_str()).and_then(|bs| {
                bs.iter()
                    .min_by_key(|c| ((c.midpoint_time() - t).unsigned_abs(), c.midpoint_time(), c.batch_index))
                    .copied()
            });
            let mtld_cohort = nearest.and_then(|c| c.mtld);
            CohortRow {
                time: t,
                model_tag: f.model_tag.clone(),
                mtld_full: f.mtld,
                mtld_cohort,
                diff: f.mtld.zip(mtld_cohort).map(|(a, b)| b - a),
            }
        })
        .collect()
}

/// `time,model_tag,mtld_full,mtld_cohort,diff`.
pub fn cohort_csv(rows: &[CohortRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("time,model_tag,mtld_full,mtld_cohort,diff\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.time,
            crate::geom::csv_field(&r.model_tag),
            cell(r.mtld_full),
            cell(r.mtld_cohort),
            cell(r.diff)
        );
    }
    out
}
