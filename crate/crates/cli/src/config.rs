//! Run configuration.
//!
//! One TOML file describes a run. Relative paths are resolved against the
//! directory holding the file. Command-line flags override file values, and
//! every problem found during validation is reported in a single error.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//! segmentations = "segmentations.jsonl"
//!
//! [corpus]
//! path = "chats.jsonl"
//! format = "jsonl"            # or "speaker" for {id, speaker, text} rows
//! [corpus.schema]
//! record_id = "conversation_hash"
//!
//! [spam]
//! sim_threshold = 0.9
//! window_seconds = 300
//!
//! [cohort]
//! min_span_days = 14
//! min_dialogs = 10
//!
//! [annotate]
//! delta = 5
//! instructions_path = "prompt.txt"
//! large = { name = "L", kind = "remote", url = "https://annotator.example/v1", token_env = "L_TOKEN" }
//! small = { name = "l", kind = "replay", path = "small.jsonl" }
//!
//! [embedding]
//! kind = "file"
//! path = "vectors.jsonl"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reqlens::annotate::{AnnotatorEndpoint, EndpointKind};
use reqlens::corpus::{CohortFilter, SchemaMap, SpamConfig};
use reqlens::lexstats::{RichnessConfig, TextMode};
use reqlens::remote::RetryPolicy;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub corpus: Option<CorpusSection>,
    /// Segmented utterances (`{record_id, text, spans}` JSONL).
    pub segmentations: Option<PathBuf>,
    /// Request-type verdicts (`{id, verdict}` JSONL); when set only
    /// request-making records are analysed.
    pub triage_verdicts: Option<PathBuf>,
    pub spam: Option<SpamConfig>,
    #[serde(default)]
    pub cohort: CohortFilter,
    pub annotate: Option<AnnotateSection>,
    /// Conversational lexicon JSON; defaults to the built-in lexicon.
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub richness: RichnessSection,
    pub embedding: Option<EmbeddingSection>,
    #[serde(default)]
    pub anchors: AnchorSection,
    /// Externally computed `(id, x, y)` CSV; PCA is used when absent.
    pub projection: Option<PathBuf>,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub timelapse: TimelapseSection,
    #[serde(default)]
    pub kde: KdeSection,
    pub compare: Option<CompareSection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    #[default]
    Jsonl,
    Speaker,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default)]
    pub format: CorpusFormat,
    #[serde(default)]
    pub schema: SchemaMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    pub large: AnnotatorEndpoint,
    pub small: AnnotatorEndpoint,
    /// Absolute disagreement threshold in words.
    pub delta: Option<usize>,
    /// Threshold as a fraction of the record's word count.
    pub delta_fraction: Option<f64>,
    #[serde(default = "default_round")]
    pub round: usize,
    pub instructions: Option<String>,
    pub instructions_path: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Gold annotations merged into the training set by `triage`.
    pub gold: Option<PathBuf>,
    /// Reviewer decisions (`{id, decision, ...}` JSONL) applied by `triage`.
    pub decisions: Option<PathBuf>,
}

fn default_round() -> usize {
    1
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RichnessSection {
    pub mattr_window: usize,
    pub mtld_threshold: f64,
    pub mode: TextMode,
    pub bins: usize,
}

impl Default for RichnessSection {
    fn default() -> Self {
        let r = RichnessConfig::default();
        RichnessSection {
            mattr_window: r.mattr_window,
            mtld_threshold: r.mtld_threshold,
            mode: TextMode::ExpressionOnly,
            bins: 20,
        }
    }
}

impl RichnessSection {
    pub fn config(&self) -> RichnessConfig {
        RichnessConfig {
            mattr_window: self.mattr_window,
            mtld_threshold: self.mtld_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSection {
    /// `{id, vector}` JSONL keyed by record id and anchor id.
    File { path: PathBuf },
    Remote {
        url: String,
        token_env: Option<String>,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_dim() -> usize {
    reqlens::geom::DEFAULT_DIM
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSection {
    /// Anchor JSONL (`{anchor_id, class, template_text}`); the bundled set is
    /// used when absent.
    pub path: Option<PathBuf>,
    pub tau: f64,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection { path: None, tau: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub k: usize,
    pub min_users: usize,
    pub trials: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            k: 1,
            min_users: 30,
            trials: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimelapseSection {
    /// Batch size for the all-user series.
    pub batch_size: usize,
    /// Batch size for the long-term cohort series; defaults to `batch_size`.
    pub cohort_batch_size: Option<usize>,
    pub min_batch_size: usize,
}

impl Default for TimelapseSection {
    fn default() -> Self {
        TimelapseSection {
            batch_size: 100,
            cohort_batch_size: None,
            min_batch_size: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeSection {
    pub nx: usize,
    pub ny: usize,
    /// Zero-based dialog indices compared by the difference map.
    pub early_index: usize,
    pub late_index: usize,
    pub bandwidth: Option<(f64, f64)>,
}

impl Default for KdeSection {
    fn default() -> Self {
        KdeSection {
            nx: 100,
            ny: 100,
            early_index: 0,
            late_index: 19,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub reference: CorpusSection,
    pub reference_segmentations: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub delta: Option<usize>,
    pub window: Option<usize>,
    pub k: Option<usize>,
    pub trials: Option<usize>,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
    pub mode: Option<TextMode>,
}

/// What a subcommand needs from the configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub corpus: bool,
    pub segmentations: bool,
    pub annotate: bool,
    pub embedding: bool,
    pub seed: bool,
    pub compare: bool,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn resolve_endpoint(base: &Path, e: &mut AnnotatorEndpoint) {
    if let EndpointKind::Replay { path } = &mut e.kind {
        resolve(base, path);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve_opt(base, &mut self.out_dir);
        if let Some(c) = &mut self.corpus {
            resolve(base, &mut c.path);
        }
        resolve_opt(base, &mut self.segmentations);
        resolve_opt(base, &mut self.triage_verdicts);
        resolve_opt(base, &mut self.lexicon);
        resolve_opt(base, &mut self.anchors.path);
        resolve_opt(base, &mut self.projection);
        if let Some(a) = &mut self.annotate {
            resolve_endpoint(base, &mut a.large);
            resolve_endpoint(base, &mut a.small);
            resolve_opt(base, &mut a.instructions_path);
            resolve_opt(base, &mut a.gold);
            resolve_opt(base, &mut a.decisions);
        }
        if let Some(EmbeddingSection::File { path }) = &mut self.embedding {
            resolve(base, path);
        }
        if let Some(c) = &mut self.compare {
            resolve(base, &mut c.reference.path);
            resolve_opt(base, &mut c.reference_segmentations);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = Some(seed);
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if let (Some(d), Some(a)) = (o.delta, self.annotate.as_mut()) {
            a.delta = Some(d);
            a.delta_fraction = None;
        }
        if let Some(w) = o.window {
            self.richness.mattr_window = w;
        }
        if let Some(k) = o.k {
            self.convergence.k = k;
        }
        if let Some(t) = o.trials {
            self.convergence.trials = t;
        }
        if let Some(b) = o.batch_size {
            self.timelapse.batch_size = b;
        }
        if let Some(t) = o.tau {
            self.anchors.tau = t;
        }
        if let Some(m) = o.mode {
            self.richness.mode = m;
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Segmentations file: the configured one, else `segmentations.jsonl` in
    /// the output directory when a previous `triage` wrote it.
    pub fn segmentations_path(&self) -> Option<PathBuf> {
        self.segmentations.clone().or_else(|| {
            let p = self.out_dir().join("segmentations.jsonl");
            p.exists().then_some(p)
        })
    }

    /// Every problem at once; empty when the configuration is usable.
    pub fn validate(&self, needs: Needs) -> Vec<String> {
        let mut errors = Vec::new();
        let mut missing = Vec::new();
        let mut exists = |what: &str, p: &Path| {
            if !p.exists() {
                missing.push(format!("{what}: {} does not exist", p.display()));
            }
        };

        if let Some(c) = &self.corpus {
            exists("corpus.path", &c.path);
        }
        if let Some(p) = &self.segmentations {
            exists("segmentations", p);
        }
        if let Some(p) = &self.triage_verdicts {
            exists("triage_verdicts", p);
        }
        if let Some(p) = &self.lexicon {
            exists("lexicon", p);
        }
        if let Some(p) = &self.anchors.path {
            exists("anchors.path", p);
        }
        if let Some(p) = &self.projection {
            exists("projection", p);
        }
        if let Some(a) = &self.annotate {
            for e in [&a.large, &a.small] {
                if let EndpointKind::Replay { path } = &e.kind {
                    exists(&format!("annotate.{}.path", e.name), path);
                }
            }
            for (what, p) in [
                ("annotate.instructions_path", &a.instructions_path),
                ("annotate.gold", &a.gold),
                ("annotate.decisions", &a.decisions),
            ] {
                if let Some(p) = p {
                    exists(what, p);
                }
            }
        }
        if let Some(EmbeddingSection::File { path }) = &self.embedding {
            exists("embedding.path", path);
        }
        if let Some(c) = &self.compare {
            exists("compare.reference.path", &c.reference.path);
            if let Some(p) = &c.reference_segmentations {
                exists("compare.reference_segmentations", p);
            }
        }

        errors.append(&mut missing);
        if needs.corpus && self.corpus.is_none() {
            errors.push("corpus: section required by this command".into());
        }
        if needs.segmentations && self.segmentations_path().is_none() {
            errors.push("segmentations: required by this command (set it or run `triage` first)".into());
        }
        if needs.seed && self.seed.is_none() {
            errors.push("seed: required by this command (set `seed` or pass --seed)".into());
        }
        if needs.embedding && self.embedding.is_none() {
            errors.push("embedding: section required by this command".into());
        }
        if needs.compare && self.compare.is_none() {
            errors.push("compare: section required by this command".into());
        }
        match &self.annotate {
            Some(a) => {
                match (a.delta, a.delta_fraction) {
                    (Some(_), Some(_)) => errors.push("annotate: set only one of delta and delta_fraction".into()),
                    (None, Some(f)) if !(f > 0.0 && f <= 1.0) => {
                        errors.push(format!("annotate.delta_fraction: {f} outside (0, 1]"))
                    }
                    (Some(0), None) => errors.push("annotate.delta: must be >= 1".into()),
                    _ => {}
                }
                if a.instructions.is_some() && a.instructions_path.is_some() {
                    errors.push("annotate: set only one of instructions and instructions_path".into());
                }
                if a.parallelism == 0 {
                    errors.push("annotate.parallelism: must be >= 1".into());
                }
                if let EndpointKind::Remote { url, .. } = &a.large.kind {
                    if url.is_empty() {
                        errors.push("annotate.large.url: empty".into());
                    }
                }
            }
            None if needs.annotate => errors.push("annotate: section required by this command".into()),
            None => {}
        }

        if let Some(s) = &self.spam {
            if let Err(e) = s.validate() {
                errors.push(format!("spam: {e}"));
            }
        }
        if let Err(e) = self.cohort.validate() {
            errors.push(format!("cohort: {e}"));
        }
        if let Err(e) = self.richness.config().validate() {
            errors.push(format!("richness: {e}"));
        }
        if self.richness.bins == 0 {
            errors.push("richness.bins: must be >= 1".into());
        }
        if !(-1.0..=1.0).contains(&self.anchors.tau) {
            errors.push(format!("anchors.tau: {} outside [-1, 1]", self.anchors.tau));
        }
        let c = &self.convergence;
        if c.k == 0 {
            errors.push("convergence.k: must be >= 1".into());
        }
        if c.min_users == 0 {
            errors.push("convergence.min_users: must be >= 1".into());
        }
        if c.trials == 0 {
            errors.push("convergence.trials: must be >= 1".into());
        }
        let t = &self.timelapse;
        for (what, size) in [
            ("batch_size", Some(t.batch_size)),
            ("cohort_batch_size", t.cohort_batch_size),
        ] {
            if let Some(size) = size {
                if size < t.min_batch_size.max(1) {
                    errors.push(format!(
                        "timelapse.{what}: {size} below minimum {}",
                        t.min_batch_size.max(1)
                    ));
                }
            }
        }
        let k = &self.kde;
        if k.nx == 0 || k.ny == 0 {
            errors.push("kde: nx and ny must be >= 1".into());
        }
        if k.late_index <= k.early_index {
            errors.push("kde: late_index must exceed early_index".into());
        }
        if let Some((hx, hy)) = k.bandwidth {
            if !(hx > 0.0 && hy > 0.0) {
                errors.push("kde.bandwidth: both values must be positive".into());
            }
        }
        if let Some(EmbeddingSection::Remote {
            dim,
            batch_size,
            parallelism,
            ..
        }) = &self.embedding
        {
            if *dim == 0 || *batch_size == 0 || *parallelism == 0 {
                errors.push("embedding: dim, batch_size and parallelism must be >= 1".into());
            }
        }
        errors
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let text = r#"
            seed = 7
            out_dir = "out"
            [corpus]
            path = "c.jsonl"
            [corpus.schema]
            record_id = "id"
            [annotate]
            delta = 5
            large = { name = "L", kind = "remote", url = "http://localhost:1/", token_env = "TOK" }
            small = { name = "l", kind = "replay", path = "small.jsonl" }
            [embedding]
            kind = "file"
            path = "v.jsonl"
        "#;
        let cfg = RunConfig::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, Some(7));
        let corpus = cfg.corpus.as_ref().unwrap();
        assert_eq!(corpus.path, Path::new("/base/c.jsonl"));
        assert_eq!(corpus.schema.record_id, "id");
        assert_eq!(corpus.schema.user_id, "user_hash");
        let a = cfg.annotate.as_ref().unwrap();
        assert_eq!(
            a.small.kind,
            EndpointKind::Replay {
                path: PathBuf::from("/base/small.jsonl")
            }
        );
        assert_eq!(a.round, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 7", Path::new(".")).is_err());
    }

    #[test]
    fn validation_reports_everything() {
        let text = r#"
            [corpus]
            path = "/nonexistent/c.jsonl"
            [convergence]
            k = 0
            trials = 0
            [kde]
            early_index = 3
            late_index = 3
        "#;
        let cfg = RunConfig::from_toml(text, Path::new(".")).unwrap();
        let errors = cfg.validate(Needs {
            seed: true,
            embedding: true,
            ..Default::default()
        });
        assert_eq!(errors.len(), 6, "{errors:?}");
    }

    #[test]
    fn flags_win() {
        let mut cfg = RunConfig::from_toml("seed = 1\n[convergence]\nk = 3", Path::new(".")).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            k: Some(1),
            mode: Some(TextMode::FullText),
            ..Default::default()
        });
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.convergence.k, 1);
        assert_eq!(cfg.richness.mode, TextMode::FullText);
    }
}
