//! Embedding-space geometry: template vectors, user means, anchor-based
//! categorization, 2-D projection, Gaussian KDE grids and user trajectories.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::express::TaxonomyClass;
use crate::jsonl::read_jsonl;
use crate::remote::{ordered_parallel_map, JsonClient, RetryPolicy};

pub const DEFAULT_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|x| x * c).collect())
    }

    /// Unit-norm copy.
    pub fn normalized(&self) -> Result<EmbeddingVector> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(self.scaled(1.0 / n))
    }
}

fn check_dim(expected: usize, v: &EmbeddingVector) -> Result<()> {
    if v.dim() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: v.dim(),
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dim(a.dim(), b)?;
    let (na2, nb2) = (dot(&a.0, &a.0), dot(&b.0, &b.0));
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // sqrt of the product keeps cos(v, v) exactly 1
    let denom = match na2 * nb2 {
        p if p.is_finite() && p > 0.0 => p.sqrt(),
        _ => na2.sqrt() * nb2.sqrt(),
    };
    Ok((dot(&a.0, &b.0) / denom).clamp(-1.0, 1.0))
}

pub fn user_mean(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = vectors.first().ok_or(Error::EmptyInput("user has no vectors"))?;
    let mut acc = vec![0.0; first.dim()];
    for v in vectors {
        check_dim(first.dim(), v)?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(EmbeddingVector(acc.into_iter().map(|a| a / n).collect()))
}

/// Source of template vectors.
pub trait EmbeddingProvider: Sync {
    /// One vector per `(id, text)` item, in order.
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>>;
}

#[derive(Debug, Clone, Deserialize)]
struct VectorRow {
    id: String,
    vector: EmbeddingVector,
}

/// Precomputed vectors keyed by id (JSONL `{id, vector: [...]}`).
#[derive(Debug, Clone, Default)]
pub struct VectorFile {
    vectors: HashMap<String, EmbeddingVector>,
}

impl VectorFile {
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<VectorRow> = read_jsonl(path)?;
        let mut vectors = HashMap::with_capacity(rows.len());
        for row in rows {
            if vectors.insert(row.id.clone(), row.vector).is_some() {
                return Err(Error::DuplicateRecord(row.id));
            }
        }
        Ok(VectorFile { vectors })
    }

    pub fn insert(&mut self, id: impl Into<String>, v: EmbeddingVector) {
        self.vectors.insert(id.into(), v);
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl FromIterator<(String, EmbeddingVector)> for VectorFile {
    fn from_iter<I: IntoIterator<Item = (String, EmbeddingVector)>>(iter: I) -> Self {
        VectorFile {
            vectors: iter.into_iter().collect(),
        }
    }
}

impl EmbeddingProvider for VectorFile {
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>> {
        items
            .iter()
            .map(|(id, _)| {
                self.vectors
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingVector(id.clone()))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP embedding service: POST `{texts}` → `{vectors}`.
pub struct RemoteEmbedder {
    client: JsonClient,
    dim: usize,
    batch_size: usize,
    parallelism: usize,
}

impl RemoteEmbedder {
    pub fn new(url: &str, token: Option<String>, dim: usize, retry: RetryPolicy) -> Result<Self> {
        Ok(RemoteEmbedder {
            client: JsonClient::new(url, token, retry).map_err(Error::Remote)?,
            dim,
            batch_size: 64,
            parallelism: 4,
        })
    }

    pub fn with_batching(mut self, batch_size: usize, parallelism: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self.parallelism = parallelism.max(1);
        self
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn embed(&self, items: &[(String, String)]) -> Result<Vec<EmbeddingVector>> {
        let batches: Vec<&[(String, String)]> = items.chunks(self.batch_size).collect();
        let responses = ordered_parallel_map(&batches, self.parallelism, |batch| {
            let req = EmbedRequest {
                texts: batch.iter().map(|(_, t)| t.as_str()).collect(),
            };
            self.client.post::<_, EmbedResponse>(&req)
        });
        let mut out = Vec::with_capacity(items.len());
        for (batch, resp) in batches.iter().zip(responses) {
            let resp = resp.map_err(Error::Remote)?;
            if resp.vectors.len() != batch.len() {
                return Err(Error::Remote(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    resp.vectors.len()
                )));
            }
            for values in resp.vectors {
                let v = EmbeddingVector::new(values)?;
                check_dim(self.dim, &v)?;
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Embeds items and checks every vector shares one dimension.
pub fn embed(items: &[(String, String)], provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVector>> {
    let vectors = provider.embed(items)?;
    if let Some(first) = vectors.first() {
        for v in &vectors {
            check_dim(first.dim(), v)?;
        }
    }
    Ok(vectors)
}

/// Anchor definition as shipped in anchor files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub anchor_id: String,
    pub class: TaxonomyClass,
    pub template_text: String,
}

const DEFAULT_ANCHORS: &str = include_str!("../data/anchors.jsonl");

pub fn default_anchor_specs() -> Vec<AnchorSpec> {
    DEFAULT_ANCHORS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled anchors are valid"))
        .collect()
}

pub fn load_anchor_specs(path: &Path) -> Result<Vec<AnchorSpec>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPoint {
    pub anchor_id: String,
    pub taxonomy_class: TaxonomyClass,
    pub template_text: String,
    pub vector: EmbeddingVector,
}

/// Anchors sharing one dimension and covering every taxonomy class, kept
/// sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<AnchorPoint>,
}

impl AnchorSet {
    pub fn new(mut anchors: Vec<AnchorPoint>) -> Result<Self> {
        let first = anchors.first().ok_or(Error::EmptyInput("anchor set"))?;
        let dim = first.vector.dim();
        for a in &anchors {
            check_dim(dim, &a.vector)?;
        }
        for class in TaxonomyClass::ALL {
            if !anchors.iter().any(|a| a.taxonomy_class == class) {
                return Err(Error::InvalidArgument(format!("anchor set has no {class} anchor")));
            }
        }
        anchors.sort_by(|a, b| a.anchor_id.cmp(&b.anchor_id));
        if let Some(w) = anchors.windows(2).find(|w| w[0].anchor_id == w[1].anchor_id) {
            return Err(Error::DuplicateRecord(w[0].anchor_id.clone()));
        }
        Ok(AnchorSet { anchors })
    }

    /// Vectorizes anchor templates through the same provider as user data.
    pub fn embed(specs: &[AnchorSpec], provider: &dyn EmbeddingProvider) -> Result<Self> {
        let items: Vec<(String, String)> = specs
            .iter()
            .map(|s| (s.anchor_id.clone(), s.template_text.clone()))
            .collect();
        let vectors = embed(&items, provider)?;
        AnchorSet::new(
            specs
                .iter()
                .zip(vectors)
                .map(|(s, vector)| AnchorPoint {
                    anchor_id: s.anchor_id.clone(),
                    taxonomy_class: s.class,
                    template_text: s.template_text.clone(),
                    vector,
                })
                .collect(),
        )
    }

    pub fn anchors(&self) -> &[AnchorPoint] {
        &self.anchors
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].vector.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AnchorMatch {
    Assigned {
        class: TaxonomyClass,
        anchor_id: String,
        similarity: f64,
    },
    Unassigned {
        best_similarity: f64,
    },
}

impl AnchorMatch {
    pub fn class(&self) -> Option<TaxonomyClass> {
        match self {
            AnchorMatch::Assigned { class, .. } => Some(*class),
            AnchorMatch::Unassigned { .. } => None,
        }
    }
}

/// Closest anchor by cosine similarity; equal similarities go to the lower
/// anchor id. Below `tau` the vector stays unassigned.
pub fn nearest_anchor(v: &EmbeddingVector, anchors: &[AnchorPoint], tau: f64) -> Result<AnchorMatch> {
    if anchors.is_empty() {
        return Err(Error::EmptyInput("anchor set"));
    }
    let mut best: Option<(&AnchorPoint, f64)> = None;
    for a in anchors {
        let sim = cosine_sim(v, &a.vector)?;
        let better = match best {
            None => true,
            Some((b, bs)) => sim > bs || (sim == bs && a.anchor_id < b.anchor_id),
        };
        if better {
            best = Some((a, sim));
        }
    }
    let (a, sim) = best.expect("anchors non-empty");
    Ok(if sim < tau {
        AnchorMatch::Unassigned { best_similarity: sim }
    } else {
        AnchorMatch::Assigned {
            class: a.taxonomy_class,
            anchor_id: a.anchor_id.clone(),
            similarity: sim,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSource {
    Ingested,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: BTreeMap<String, (f64, f64)>,
    pub source: ProjectionSource,
}

impl Projection2D {
    pub fn get(&self, id: &str) -> Option<(f64, f64)> {
        self.points.get(id).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,x,y\n");
        for (id, (x, y)) in &self.points {
            out.push_str(&format!("{},{x},{y}\n", csv_field(id)));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads an externally computed `(id, x, y)` CSV; a leading `id,x,y` header
/// is optional.
pub fn load_projection(path: &Path) -> Result<Projection2D> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    let mut points = BTreeMap::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| Error::malformed(path, row_no, e.to_string()))?;
        if row.len() != 3 {
            return Err(Error::malformed(
                path,
                row_no,
                format!("expected 3 fields, found {}", row.len()),
            ));
        }
        if idx == 0 && &row[0] == "id" && &row[1] == "x" && &row[2] == "y" {
            continue;
        }
        let coord = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::malformed(path, row_no, format!("not a number: {s:?}")))?;
            if !v.is_finite() {
                return Err(Error::malformed(path, row_no, format!("non-finite coordinate {s:?}")));
            }
            Ok(v)
        };
        let (x, y) = (coord(&row[1])?, coord(&row[2])?);
        if points.insert(row[0].to_string(), (x, y)).is_some() {
            return Err(Error::malformed(path, row_no, format!("duplicate id {:?}", &row[0])));
        }
    }
    Ok(Projection2D {
        points,
        source: ProjectionSource::Ingested,
    })
}

/// Mean and top-two principal axes of a fitted point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    axes: [DVector<f64>; 2],
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, v: &EmbeddingVector) -> Result<(f64, f64)> {
        check_dim(self.dim(), v)?;
        let centered = DVector::from_column_slice(v.as_slice()) - &self.mean;
        Ok((centered.dot(&self.axes[0]), centered.dot(&self.axes[1])))
    }
}

/// Fits PCA on at least three vectors. Each axis is oriented so that its
/// largest-magnitude coordinate (first on ties) is positive.
pub fn fit_pca(vectors: &[&EmbeddingVector]) -> Result<PcaModel> {
    if vectors.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 3 points, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].dim();
    for v in vectors {
        check_dim(dim, v)?;
    }
    let n = vectors.len();
    let raw = DMatrix::from_fn(n, dim, |i, j| vectors[i].0[j]);
    let mean = DVector::from_fn(dim, |j, _| raw.column(j).sum() / n as f64);
    let mut x = raw.clone();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let scale = raw.norm_squared();
    if x.norm_squared() <= 1e-24 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("all points identical"));
    }

    let mut axes: Vec<DVector<f64>> = if n <= dim {
        // eigenvectors of the n×n Gram matrix map to axes through Xᵀu/√λ
        let gram = &x * x.transpose();
        let eig = gram.symmetric_eigen();
        top_two(&eig.eigenvalues)
            .into_iter()
            .map(|(k, lambda)| {
                if lambda <= 1e-12 * eig.eigenvalues.max().max(0.0) {
                    DVector::zeros(dim)
                } else {
                    x.transpose() * eig.eigenvectors.column(k) / lambda.sqrt()
                }
            })
            .collect()
    } else {
        let cov = x.transpose() * &x;
        let eig = cov.symmetric_eigen();
        top_two(&eig.eigenvalues)
            .into_iter()
            .map(|(k, lambda)| {
                if lambda <= 1e-12 * eig.eigenvalues.max().max(0.0) {
                    DVector::zeros(dim)
                } else {
                    eig.eigenvectors.column(k).into_owned()
                }
            })
            .collect()
    };

    for axis in &mut axes {
        let mut best = 0;
        for j in 1..dim {
            if axis[j].abs() > axis[best].abs() {
                best = j;
            }
        }
        if axis[best] < 0.0 {
            *axis = -&*axis;
        }
    }
    let second = axes.pop().expect("two axes");
    let first = axes.pop().expect("two axes");
    Ok(PcaModel {
        mean,
        axes: [first, second],
    })
}

fn top_two(eigenvalues: &DVector<f64>) -> [(usize, f64); 2] {
    let mut idx: Vec<usize> = (0..eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    let pick = |r: usize| idx.get(r).map(|&k| (k, eigenvalues[k])).unwrap_or((idx[0], 0.0));
    [pick(0), pick(1)]
}

pub fn project_pca(vectors: &BTreeMap<String, EmbeddingVector>) -> Result<Projection2D> {
    let refs: Vec<&EmbeddingVector> = vectors.values().collect();
    let model = fit_pca(&refs)?;
    let points = vectors
        .iter()
        .map(|(id, v)| Ok((id.clone(), model.transform(v)?)))
        .collect::<Result<_>>()?;
    Ok(Projection2D {
        points,
        source: ProjectionSource::Pca,
    })
}

/// Density (or signed difference) values on a regular grid. Cells are stored
/// row-major: `cells[j * nx + i]` is column `i` of row `j` (y index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_width(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.nx as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width() * self.cell_height()
    }

    /// Sum of cells times cell area.
    pub fn mass(&self) -> f64 {
        self.cells.iter().sum::<f64>() * self.cell_area()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.cells[j * self.nx + i]
    }

    pub fn x_centers(&self) -> Vec<f64> {
        let w = self.cell_width();
        (0..self.nx).map(|i| self.x_range.0 + (i as f64 + 0.5) * w).collect()
    }

    pub fn y_centers(&self) -> Vec<f64> {
        let h = self.cell_height();
        (0..self.ny).map(|j| self.y_range.0 + (j as f64 + 0.5) * h).collect()
    }

    /// Cell `(i, j)` holding the largest value (first in row-major order).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, v) in self.cells.iter().enumerate() {
            if *v > self.cells[best] {
                best = k;
            }
        }
        (best % self.nx, best / self.nx)
    }

    /// Cell containing a point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.x_range.0) / self.cell_width()).floor();
        let fj = ((y - self.y_range.0) / self.cell_height()).floor();
        (fi >= 0.0 && fj >= 0.0 && (fi as usize) < self.nx && (fj as usize) < self.ny)
            .then_some((fi as usize, fj as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default)]
    pub x_range: Option<(f64, f64)>,
    #[serde(default)]
    pub y_range: Option<(f64, f64)>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nx: 100,
            ny: 100,
            x_range: None,
            y_range: None,
        }
    }
}

fn default_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    if width == 0.0 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo - 0.1 * width, hi + 0.1 * width)
    }
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scott's rule for a 2-D product kernel: n^(-1/6) · σ. Zero spread falls back
/// to 1% of the axis range.
pub fn scott_bandwidth(values: &[f64], range: (f64, f64)) -> f64 {
    let sd = sample_std(values);
    if sd > 0.0 && sd.is_finite() {
        (values.len() as f64).powf(-1.0 / 6.0) * sd
    } else {
        0.01 * (range.1 - range.0)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Probability mass of N(center, h²) falling in each of `n` equal cells.
fn cell_masses(center: f64, h: f64, range: (f64, f64), n: usize) -> Vec<f64> {
    let w = (range.1 - range.0) / n as f64;
    let cdf: Vec<f64> = (0..=n)
        .map(|k| normal_cdf((range.0 + k as f64 * w - center) / h))
        .collect();
    cdf.windows(2).map(|p| (p[1] - p[0]).max(0.0)).collect()
}

/// Gaussian product-kernel density on a regular grid. Each cell holds the
/// kernel mass falling in it divided by its area, normalized so that the
/// grid carries unit mass (kernel mass outside the window is discarded).
pub fn kde_2d(points: &[(f64, f64)], grid: &GridSpec, bandwidth: Option<(f64, f64)>) -> Result<DensityGrid> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "KDE needs at least 2 points, got {}",
            points.len()
        )));
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("KDE points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let x_range = grid.x_range.unwrap_or_else(|| default_range(&xs));
    let y_range = grid.y_range.unwrap_or_else(|| default_range(&ys));
    for r in [x_range, y_range] {
        if r.1 <= r.0 || !r.0.is_finite() || !r.1.is_finite() {
            return Err(Error::InvalidArgument(
                "grid ranges must be finite and increasing".into(),
            ));
        }
    }
    let (hx, hy) = match bandwidth {
        Some((hx, hy)) => {
            if !(hx > 0.0 && hy > 0.0 && hx.is_finite() && hy.is_finite()) {
                return Err(Error::InvalidArgument("bandwidth must be positive".into()));
            }
            (hx, hy)
        }
        None => (scott_bandwidth(&xs, x_range), scott_bandwidth(&ys, y_range)),
    };

    let mx: Vec<Vec<f64>> = xs.iter().map(|&x| cell_masses(x, hx, x_range, grid.nx)).collect();
    let my: Vec<Vec<f64>> = ys.iter().map(|&y| cell_masses(y, hy, y_range, grid.ny)).collect();
    let total: f64 = mx
        .iter()
        .zip(&my)
        .map(|(a, b)| a.iter().sum::<f64>() * b.iter().sum::<f64>())
        .sum();
    if total <= 0.0 || total.is_nan() {
        return Err(Error::Degenerate("no kernel mass inside the grid"));
    }

    let nx = grid.nx;
    let mut out = DensityGrid {
        x_range,
        y_range,
        nx,
        ny: grid.ny,
        cells: vec![0.0; nx * grid.ny],
    };
    let norm = 1.0 / (total * out.cell_area());
    out.cells.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
        for (px, py) in mx.iter().zip(&my) {
            let wy = py[j];
            if wy == 0.0 {
                continue;
            }
            for (cell, wx) in row.iter_mut().zip(px) {
                *cell += wx * wy;
            }
        }
        for cell in row.iter_mut() {
            *cell *= norm;
        }
    });
    Ok(out)
}

/// Cell-wise `late − early`.
pub fn kde_diff(late: &DensityGrid, early: &DensityGrid) -> Result<DensityGrid> {
    if late.nx != early.nx || late.ny != early.ny {
        return Err(Error::GridMismatch("resolutions differ"));
    }
    if late.x_range != early.x_range || late.y_range != early.y_range {
        return Err(Error::GridMismatch("axis ranges differ"));
    }
    Ok(DensityGrid {
        x_range: late.x_range,
        y_range: late.y_range,
        nx: late.nx,
        ny: late.ny,
        cells: late.cells.iter().zip(&early.cells).map(|(a, b)| a - b).collect(),
    })
}

/// A user's per-dialog projected points in chronological order. Points are
/// looked up by record id.
pub fn user_trajectory(user_id: &str, projection: &Projection2D, corpus: &Corpus) -> Result<Vec<(f64, f64)>> {
    let (_, records) = corpus
        .users()
        .find(|(u, _)| *u == user_id)
        .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?;
    records
        .iter()
        .map(|r| {
            projection
                .get(&r.record_id)
                .ok_or_else(|| Error::MissingPoint(r.record_id.clone()))
        })
        .collect()
}
