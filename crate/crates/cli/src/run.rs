//! Per-invocation state: resolved configuration, input loading with digests,
//! atomic output writes and the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use reqlens::corpus::{
    filter_request_making, load_corpus, load_speaker_corpus, select_long_term, spam_filter, Corpus, LoadReport,
    TriageVerdicts,
};
use reqlens::express::ConversationalLexicon;
use reqlens::geom::{
    default_anchor_specs, load_anchor_specs, AnchorSet, EmbeddingProvider, RemoteEmbedder, VectorFile,
};
use reqlens::jsonl::read_jsonl;
use reqlens::segmark::SegmentedUtterance;

use crate::config::{CorpusFormat, CorpusSection, EmbeddingSection, Needs, Overrides, RunConfig};

/// A user-facing failure that is not a library error.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub location: Option<String>,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
            location: None,
        }
    }

    pub fn at(mut self, location: &Path) -> Self {
        self.location = Some(location.display().to_string());
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_path: Option<String>,
    config_sha256: Option<String>,
    overrides: &'a Overrides,
    seed: Option<u64>,
    effective_config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

pub struct Run {
    pub cfg: RunConfig,
    command: &'static str,
    config_path: Option<PathBuf>,
    config_sha256: Option<String>,
    overrides: Overrides,
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| CliError::new("io", format!("cannot read input: {e}")).at(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| CliError::new("io", format!("cannot read input: {e}")).at(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Run {
    /// Reads and validates the configuration for `command`. All validation
    /// problems are reported together.
    pub fn open(
        command: &'static str,
        config_path: Option<&Path>,
        overrides: Overrides,
        needs: impl Fn(&RunConfig) -> Needs,
    ) -> Result<Self> {
        let (mut cfg, config_sha256) = match config_path {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::new("io", format!("cannot read config: {e}")).at(path))?;
                let base = path.parent().unwrap_or(Path::new("."));
                let cfg = RunConfig::from_toml(&text, base)
                    .map_err(|e| CliError::new("config_parse", e.trim_end().to_string()).at(path))?;
                (cfg, Some(hex::encode(Sha256::digest(text.as_bytes()))))
            }
            None => (RunConfig::default(), None),
        };
        cfg.apply(&overrides);
        let errors = cfg.validate(needs(&cfg));
        if !errors.is_empty() {
            let message = format!("{} configuration problem(s): {}", errors.len(), errors.join("; "));
            let mut err = CliError::new("invalid_config", message);
            if let Some(p) = config_path {
                err = err.at(p);
            }
            return Err(err.into());
        }
        let out_dir = cfg.out_dir();
        Ok(Run {
            cfg,
            command,
            config_path: config_path.map(Path::to_path_buf),
            config_sha256,
            overrides,
            out_dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// `--delta` from the command line, if given.
    pub fn delta_override(&self) -> Option<usize> {
        self.overrides.delta
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Records the digest of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn create_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| {
            CliError::new("io", format!("cannot create output directory: {e}"))
                .at(&self.out_dir)
                .into()
        })
    }

    /// Writes `name` inside the output directory via a temporary file and
    /// rename, so readers never see a partial file.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.create_out_dir()?;
        let path = self.out_path(name);
        let io_err = |e: std::io::Error| CliError::new("io", format!("cannot write output: {e}")).at(&path);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.out_dir).map_err(io_err)?;
        tmp.write_all(bytes).map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        tmp.persist(&path).map_err(|e| io_err(e.error))?;
        self.outputs
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: impl IntoIterator<Item = T>) -> Result<()> {
        let text = reqlens::jsonl::to_jsonl_string(items)?;
        self.write(name, text.as_bytes())
    }

    /// Temporary file in the output directory for outputs produced by a
    /// library writer; finish with [`Run::persist`].
    pub fn temp_output(&self) -> Result<tempfile::NamedTempFile> {
        self.create_out_dir()?;
        tempfile::NamedTempFile::new_in(&self.out_dir).map_err(|e| {
            CliError::new("io", format!("cannot write output: {e}"))
                .at(&self.out_dir)
                .into()
        })
    }

    pub fn persist(&mut self, tmp: tempfile::NamedTempFile, name: &str) -> Result<()> {
        let path = self.out_path(name);
        let digest = sha256_file(tmp.path())?;
        tmp.persist(&path)
            .map_err(|e| CliError::new("io", format!("cannot write output: {}", e.error)).at(&path))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    /// Writes `<command>.manifest.json`. It carries no timestamps, so equal
    /// runs give equal manifests.
    pub fn finish(mut self) -> Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            config_sha256: self.config_sha256.clone(),
            overrides: &self.overrides,
            seed: self.cfg.seed,
            effective_config: &self.cfg,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let name = format!("{}.manifest.json", self.command);
        self.write(&name, &bytes)
    }

    fn load_section(&mut self, section: &CorpusSection) -> Result<(Corpus, Option<LoadReport>)> {
        self.input(&section.path)?;
        Ok(match section.format {
            CorpusFormat::Jsonl => {
                let (c, report) = load_corpus(&section.path, &section.schema)?;
                (c, Some(report))
            }
            CorpusFormat::Speaker => (load_speaker_corpus(&section.path)?, None),
        })
    }

    /// The analysed corpus: loaded, restricted to request-making records when
    /// verdicts are configured, and spam-filtered when `[spam]` is set.
    pub fn corpus(&mut self) -> Result<Prepared> {
        let section = self
            .cfg
            .corpus
            .clone()
            .ok_or_else(|| CliError::new("invalid_config", "corpus: section required by this command"))?;
        let (loaded, load_report) = self.load_section(&section)?;
        let input_count = loaded.len();
        let mut corpus = loaded;
        if let Some(path) = self.cfg.triage_verdicts.clone() {
            self.input(&path)?;
            corpus = filter_request_making(&corpus, &TriageVerdicts::load(&path)?)?;
        }
        let after_triage = corpus.len();
        if let Some(spam) = &self.cfg.spam {
            corpus = spam_filter(&corpus, spam);
        }
        Ok(Prepared {
            dropped_non_request: input_count - after_triage,
            dropped_spam: after_triage - corpus.len(),
            input_count,
            load_report,
            corpus,
        })
    }

    /// Reference corpus of `compare`, prepared the same way except for the
    /// request-type filter, whose verdicts cover only the main corpus.
    pub fn reference_corpus(&mut self) -> Result<Corpus> {
        let section = self
            .cfg
            .compare
            .as_ref()
            .map(|c| c.reference.clone())
            .ok_or_else(|| CliError::new("invalid_config", "compare: section required by this command"))?;
        let (c, _) = self.load_section(&section)?;
        Ok(match &self.cfg.spam {
            Some(spam) => spam_filter(&c, spam),
            None => c,
        })
    }

    pub fn cohort(&self, corpus: &Corpus) -> Corpus {
        select_long_term(corpus, &self.cfg.cohort)
    }

    /// Segmentations keyed by record id; empty when none are available.
    pub fn segmentations(&mut self) -> Result<HashMap<String, SegmentedUtterance>> {
        match self.cfg.segmentations_path() {
            Some(path) => self.read_segmentations(&path),
            None => Ok(HashMap::new()),
        }
    }

    pub fn read_segmentations(&mut self, path: &Path) -> Result<HashMap<String, SegmentedUtterance>> {
        self.input(path)?;
        let rows: Vec<SegmentedUtterance> = read_jsonl(path)?;
        let mut out = HashMap::with_capacity(rows.len());
        for s in rows {
            let id = s.record_id().to_string();
            if out.insert(id.clone(), s).is_some() {
                return Err(reqlens::Error::DuplicateRecord(id).into());
            }
        }
        Ok(out)
    }

    pub fn lexicon(&mut self) -> Result<ConversationalLexicon> {
        match self.cfg.lexicon.clone() {
            Some(path) => {
                self.input(&path)?;
                Ok(ConversationalLexicon::load(&path)?)
            }
            None => Ok(ConversationalLexicon::default()),
        }
    }

    pub fn embedder(&mut self) -> Result<Box<dyn EmbeddingProvider>> {
        match self.cfg.embedding.clone() {
            Some(EmbeddingSection::File { path }) => {
                self.input(&path)?;
                Ok(Box::new(VectorFile::load(&path)?))
            }
            Some(EmbeddingSection::Remote {
                url,
                token_env,
                dim,
                batch_size,
                parallelism,
                retry,
            }) => {
                let token = token_env.and_then(|var| std::env::var(var).ok());
                Ok(Box::new(
                    RemoteEmbedder::new(&url, token, dim, retry)?.with_batching(batch_size, parallelism),
                ))
            }
            None => Err(CliError::new("invalid_config", "embedding: section required by this command").into()),
        }
    }

    pub fn anchors(&mut self, provider: &dyn EmbeddingProvider) -> Result<AnchorSet> {
        let specs = match self.cfg.anchors.path.clone() {
            Some(path) => {
                self.input(&path)?;
                load_anchor_specs(&path)?
            }
            None => default_anchor_specs(),
        };
        Ok(AnchorSet::embed(&specs, provider)?)
    }
}

pub struct Prepared {
    pub corpus: Corpus,
    pub load_report: Option<LoadReport>,
    pub input_count: usize,
    pub dropped_non_request: usize,
    pub dropped_spam: usize,
}
