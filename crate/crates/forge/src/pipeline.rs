//! Stage orchestration with on-disk checkpoints.
//!
//! Layout of the output directory:
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.json` | [`DatasetManifest`], rewritten after every stage |
//! | `drafts.json`, `geometry_variants.json`, `variants.json` | tree nodes per depth |
//! | `candidates.jsonl`, `vetted.jsonl` | one [`CodeCandidate`] per line, appended as work completes |
//! | `records.jsonl` | one [`RecordEntry`] per kept candidate |
//! | `dataset.jsonl` | seed records then synthetic records, Alpaca triples only |
//!
//! Within a stage work fans out over a rayon pool; a single writer on the
//! calling thread appends results, so a crash loses at most the in-flight
//! items and a resume skips every lineage already on disk.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use femagent_core::gateway::{ChatEndpoint, EndpointRegistry, GatewayError};
use femagent_core::sandbox::{CodeRunner, SandboxConfig};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompts::PROMPT_VERSION;
use crate::record::{self, AlpacaRecord};
use crate::seed::{ingest_seed, SeedCorpus, SeedError};
use crate::stages::{
    finalize_record, gen_problem_drafts, gen_variants, synthesize_code, vet_candidate, CodeCandidate, Lineage,
    StageError, VariantAxis, VariantSpec, VetStatus,
};
use crate::vocab::{boundary_vocabulary, domain_vocabulary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DRAFTS_FILE: &str = "drafts.json";
pub const GEOMETRY_FILE: &str = "geometry_variants.json";
pub const VARIANTS_FILE: &str = "variants.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const VETTED_FILE: &str = "vetted.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";

/// Names of the gateway endpoints each stage talks to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct StageEndpointNames {
    pub problem_gen: String,
    pub variant_gen: String,
    pub code_gen: String,
    pub correction: String,
    pub instruction_gen: String,
}

impl StageEndpointNames {
    pub fn uniform(name: &str) -> Self {
        Self {
            problem_gen: name.into(),
            variant_gen: name.into(),
            code_gen: name.into(),
            correction: name.into(),
            instruction_gen: name.into(),
        }
    }
}

impl Default for StageEndpointNames {
    fn default() -> Self {
        Self::uniform("default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_problems: usize,
    pub y_geometry: usize,
    pub z_boundary: usize,
    pub retrieval_k: usize,
    pub rng_seed: u64,
    pub seed_paths: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Worker threads per stage. Gateway and sandbox limits still apply underneath.
    pub parallelism: usize,
    /// Flag every synthetic record for expert review. Off by default.
    pub manual_review: bool,
    pub stage_endpoints: StageEndpointNames,
    pub sandbox: SandboxConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_problems: 7,
            y_geometry: 10,
            z_boundary: 10,
            retrieval_k: crate::retrieve::DEFAULT_K,
            rng_seed: 0,
            seed_paths: Vec::new(),
            output_dir: PathBuf::from("forge-out"),
            parallelism: std::thread::available_parallelism().map_or(4, |n| n.get()),
            manual_review: false,
            stage_endpoints: StageEndpointNames::default(),
            sandbox: SandboxConfig::for_vetting(std::env::temp_dir().join("femagent-forge-runs")),
        }
    }
}

impl PipelineConfig {
    pub fn candidate_target(&self) -> usize {
        self.n_problems * self.y_geometry * self.z_boundary
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        let fail = |m: String| Err(ForgeError::Config(m));
        for (name, v) in [
            ("n_problems", self.n_problems),
            ("y_geometry", self.y_geometry),
            ("z_boundary", self.z_boundary),
            ("retrieval_k", self.retrieval_k),
            ("parallelism", self.parallelism),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        let (g, b) = (domain_vocabulary().len(), boundary_vocabulary().len());
        if self.y_geometry > g {
            return fail(format!("y_geometry {} exceeds the {g} distinct domains available", self.y_geometry));
        }
        if self.z_boundary > b {
            return fail(format!(
                "z_boundary {} exceeds the {b} distinct boundary assignments available",
                self.z_boundary
            ));
        }
        Ok(())
    }
}

/// Endpoint handles per stage.
#[derive(Clone)]
pub struct ForgeEndpoints {
    pub problem_gen: Arc<dyn ChatEndpoint>,
    pub variant_gen: Arc<dyn ChatEndpoint>,
    pub code_gen: Arc<dyn ChatEndpoint>,
    pub correction: Arc<dyn ChatEndpoint>,
    pub instruction_gen: Arc<dyn ChatEndpoint>,
}

impl ForgeEndpoints {
    pub fn uniform(endpoint: Arc<dyn ChatEndpoint>) -> Self {
        Self {
            problem_gen: endpoint.clone(),
            variant_gen: endpoint.clone(),
            code_gen: endpoint.clone(),
            correction: endpoint.clone(),
            instruction_gen: endpoint,
        }
    }

    pub fn from_registry(registry: &EndpointRegistry, names: &StageEndpointNames) -> Result<Self, GatewayError> {
        Ok(Self {
            problem_gen: registry.get(&names.problem_gen)?,
            variant_gen: registry.get(&names.variant_gen)?,
            code_gen: registry.get(&names.code_gen)?,
            correction: registry.get(&names.correction)?,
            instruction_gen: registry.get(&names.instruction_gen)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Seed,
    Drafts,
    GeometryVariants,
    BoundaryVariants,
    CodeGen,
    Vetting,
    Finalize,
    Assemble,
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageName::Seed => "seed",
            StageName::Drafts => "drafts",
            StageName::GeometryVariants => "geometry-variants",
            StageName::BoundaryVariants => "boundary-variants",
            StageName::CodeGen => "code-gen",
            StageName::Vetting => "vetting",
            StageName::Finalize => "finalize",
            StageName::Assemble => "assemble",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub seed: usize,
    pub seed_malformed: usize,
    pub seed_duplicates: usize,
    pub drafts: usize,
    pub geometry_variants: usize,
    /// Complete variants generated, before statement deduplication.
    pub variants: usize,
    pub duplicate_statements: usize,
    pub candidates: usize,
    pub code_gen_failures: usize,
    pub passed: usize,
    pub corrected: usize,
    pub discarded: usize,
    pub records: usize,
    pub finalize_failures: usize,
    pub manual_review_pending: usize,
    /// Seed plus synthetic records in the dataset file.
    pub total: usize,
}

/// An error that cost one item (or one subtree) without stopping the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: StageName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub prompt_version: String,
    pub rng_seed: u64,
    pub config: PipelineConfig,
    pub completed_stages: Vec<StageName>,
    pub counts: StageCounts,
    pub records_path: PathBuf,
    /// Wall-clock seconds per stage, summed over resumes.
    pub timings: BTreeMap<StageName, f64>,
    pub stage_errors: Vec<StageFailure>,
}

impl DatasetManifest {
    fn new(config: PipelineConfig) -> Self {
        Self {
            prompt_version: PROMPT_VERSION.into(),
            rng_seed: config.rng_seed,
            records_path: config.output_dir.join(DATASET_FILE),
            config,
            completed_stages: Vec::new(),
            counts: StageCounts::default(),
            timings: BTreeMap::new(),
            stage_errors: Vec::new(),
        }
    }

    pub fn is_complete(&self, stage: StageName) -> bool {
        self.completed_stages.contains(&stage)
    }

    pub fn load(path: &Path) -> Result<Self, ForgeError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|source| ForgeError::Json { path: path.into(), source })
    }

    /// Accounting identities that hold once the relevant stages have finished.
    pub fn check(&self) -> Vec<String> {
        let c = &self.counts;
        let mut out = Vec::new();
        if self.is_complete(StageName::CodeGen)
            && c.candidates + c.code_gen_failures + c.duplicate_statements != c.variants
        {
            out.push(format!(
                "candidates {} + code-gen failures {} + duplicates {} != variants {}",
                c.candidates, c.code_gen_failures, c.duplicate_statements, c.variants
            ));
        }
        if self.is_complete(StageName::Vetting) && c.passed + c.corrected + c.discarded != c.candidates {
            out.push(format!(
                "passed {} + corrected {} + discarded {} != candidates {}",
                c.passed, c.corrected, c.discarded, c.candidates
            ));
        }
        if self.is_complete(StageName::Finalize) && c.records + c.finalize_failures != c.passed + c.corrected {
            out.push(format!(
                "records {} + finalize failures {} != passed {} + corrected {}",
                c.records, c.finalize_failures, c.passed, c.corrected
            ));
        }
        if self.is_complete(StageName::Assemble) && c.total != c.seed + c.records {
            out.push(format!("total {} != seed {} + records {}", c.total, c.seed, c.records));
        }
        out
    }
}

/// A synthetic record with its origin, as kept in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub lineage: Lineage,
    #[serde(default)]
    pub manual_review: bool,
    pub record: AlpacaRecord,
}

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error("stage {stage}: {source}")]
    Stage { stage: StageName, source: StageError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0} already holds a pipeline manifest; resume it instead")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn io_err(path: &Path, source: std::io::Error) -> ForgeError {
    ForgeError::Io { path: path.into(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ForgeError> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).expect("checkpoint serializes");
    std::fs::write(&tmp, text + "\n").map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ForgeError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| ForgeError::Json { path: path.into(), source })
}

/// Reads an append-only checkpoint. A torn final line from an interrupted
/// write is dropped and the file is rewritten without it.
pub fn read_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ForgeError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut items = Vec::new();
    let mut good = Vec::new();
    let mut torn = false;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => {
                items.push(v);
                good.push(line);
            }
            Err(e) => {
                log::warn!("{}: dropping unreadable checkpoint line and everything after it: {e}", path.display());
                torn = true;
                break;
            }
        }
    }
    if torn {
        let mut text = good.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    Ok(items)
}

/// Line-at-a-time appender, flushed after each item.
struct Appender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Appender {
    fn open(path: &Path) -> Result<Self, ForgeError> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(Self { path: path.into(), out: BufWriter::new(f) })
    }

    fn push<T: Serialize>(&mut self, item: &T) -> Result<(), ForgeError> {
        let line = serde_json::to_string(item).expect("checkpoint item serializes");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| io_err(&self.path, e))
    }
}

/// Runs `work` over `items` on a pool of `threads` and feeds results to
/// `sink` on the calling thread, in completion order.
fn fan_out<T, R, W, S>(threads: usize, items: &[T], work: W, mut sink: S) -> Result<(), ForgeError>
where
    T: Sync,
    R: Send,
    W: Fn(&T) -> R + Sync,
    S: FnMut(R) -> Result<(), ForgeError>,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ForgeError::Config(format!("thread pool: {e}")))?;
    let (tx, rx) = mpsc::channel();
    let work = &work;
    let mut first_err = None;
    std::thread::scope(|s| {
        s.spawn(move || {
            pool.install(|| {
                items.par_iter().for_each_with(tx, |tx, item| {
                    let _ = tx.send(work(item));
                })
            })
        });
        for r in rx {
            if first_err.is_none() {
                if let Err(e) = sink(r) {
                    first_err = Some(e);
                }
            }
        }
    });
    first_err.map_or(Ok(()), Err)
}

/// Whitespace- and case-insensitive digest of a statement.
pub fn statement_key(statement: &str) -> String {
    let norm = statement.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    hex::encode(Sha256::digest(norm.as_bytes()))
}

/// Drops later variants whose statement matches an earlier one; returns the number dropped.
pub fn dedup_statements(variants: &mut Vec<VariantSpec>) -> usize {
    let before = variants.len();
    let mut seen = HashSet::new();
    variants.retain(|v| seen.insert(statement_key(&v.statement)));
    before - variants.len()
}

pub struct Pipeline<'a> {
    config: PipelineConfig,
    endpoints: &'a ForgeEndpoints,
    runner: &'a dyn CodeRunner,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: PipelineConfig, endpoints: &'a ForgeEndpoints, runner: &'a dyn CodeRunner) -> Self {
        Self { config, endpoints, runner }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Starts a fresh run. Fails if the output directory already holds a manifest.
    pub fn run(&self) -> Result<DatasetManifest, ForgeError> {
        self.config.validate()?;
        let dir = &self.config.output_dir;
        if dir.join(MANIFEST_FILE).exists() {
            return Err(ForgeError::OutputExists(dir.clone()));
        }
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.drive(DatasetManifest::new(self.config.clone()))
    }

    /// Continues the run recorded in `manifest_path`, using the configuration
    /// stored there. The manifest's directory is taken as the output directory.
    pub fn resume(
        manifest_path: &Path,
        endpoints: &'a ForgeEndpoints,
        runner: &'a dyn CodeRunner,
    ) -> Result<DatasetManifest, ForgeError> {
        let mut manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        manifest.config.output_dir = dir.clone();
        manifest.records_path = dir.join(DATASET_FILE);
        let p = Pipeline { config: manifest.config.clone(), endpoints, runner };
        p.config.validate()?;
        p.drive(manifest)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.config.output_dir.join(file)
    }

    fn save(&self, m: &DatasetManifest) -> Result<(), ForgeError> {
        write_json(&self.path(MANIFEST_FILE), m)
    }

    fn finish_stage(&self, m: &mut DatasetManifest, stage: StageName, started: Instant) -> Result<(), ForgeError> {
        *m.timings.entry(stage).or_insert(0.0) += started.elapsed().as_secs_f64();
        if !m.is_complete(stage) {
            m.completed_stages.push(stage);
        }
        log::info!("stage {stage} done");
        self.save(m)
    }

    /// Forgets failures from an earlier, interrupted attempt at `stage`.
    fn reset_errors(m: &mut DatasetManifest, stage: StageName) {
        m.stage_errors.retain(|e| e.stage != stage);
    }

    fn fatal(&self, m: &mut DatasetManifest, stage: StageName, source: StageError) -> ForgeError {
        m.stage_errors.push(StageFailure { stage, lineage: None, message: source.to_string() });
        if let Err(e) = self.save(m) {
            log::error!("could not save manifest: {e}");
        }
        ForgeError::Stage { stage, source }
    }

    fn drive(&self, mut m: DatasetManifest) -> Result<DatasetManifest, ForgeError> {
        let cfg = &self.config;

        let t = Instant::now();
        let corpus: SeedCorpus = ingest_seed(&cfg.seed_paths)?;
        if m.is_complete(StageName::Seed) && m.counts.seed != corpus.len() {
            log::warn!("seed corpus now has {} entries, manifest recorded {}", corpus.len(), m.counts.seed);
        }
        m.counts.seed = corpus.len();
        m.counts.seed_malformed = corpus.malformed.len();
        m.counts.seed_duplicates = corpus.duplicates.len();
        self.finish_stage(&mut m, StageName::Seed, t)?;

        let drafts: Vec<VariantSpec> = if m.is_complete(StageName::Drafts) {
            read_json(&self.path(DRAFTS_FILE))?
        } else {
            let t = Instant::now();
            Self::reset_errors(&mut m, StageName::Drafts);
            let drafts =
                match gen_problem_drafts(self.endpoints.problem_gen.as_ref(), &corpus, cfg.n_problems, cfg.retrieval_k)
                {
                    Ok(d) => d,
                    Err(e) => return Err(self.fatal(&mut m, StageName::Drafts, e)),
                };
            write_json(&self.path(DRAFTS_FILE), &drafts)?;
            m.counts.drafts = drafts.len();
            self.finish_stage(&mut m, StageName::Drafts, t)?;
            drafts
        };

        let geometry = self.expand(&mut m, &drafts, VariantAxis::Geometry)?;
        let leaves = self.expand(&mut m, &geometry, VariantAxis::Boundary)?;

        self.code_gen(&mut m, &leaves)?;
        self.vetting(&mut m)?;
        self.finalize(&mut m)?;
        self.assemble(&mut m, &corpus)?;

        for problem in m.check() {
            log::error!("manifest accounting: {problem}");
        }
        Ok(m)
    }

    /// One variant stage over all parents. A parent whose generation fails loses its subtree.
    fn expand(
        &self,
        m: &mut DatasetManifest,
        parents: &[VariantSpec],
        axis: VariantAxis,
    ) -> Result<Vec<VariantSpec>, ForgeError> {
        let (stage, file, count) = match axis {
            VariantAxis::Geometry => (StageName::GeometryVariants, GEOMETRY_FILE, self.config.y_geometry),
            VariantAxis::Boundary => (StageName::BoundaryVariants, VARIANTS_FILE, self.config.z_boundary),
        };
        if m.is_complete(stage) {
            return read_json(&self.path(file));
        }
        let t = Instant::now();
        Self::reset_errors(m, stage);
        let mut children = Vec::new();
        let endpoint = self.endpoints.variant_gen.as_ref();
        let seed = self.config.rng_seed;
        fan_out(
            self.config.parallelism,
            parents,
            |p| (p.lineage, gen_variants(endpoint, p, axis, count, seed)),
            |(lineage, result)| {
                match result {
                    Ok(v) => children.extend(v),
                    Err(e) => {
                        log::warn!("{stage} for {lineage}: {e}");
                        m.stage_errors.push(StageFailure { stage, lineage: Some(lineage), message: e.to_string() });
                    }
                }
                Ok(())
            },
        )?;
        children.sort_by_key(|v| v.lineage);
        match axis {
            VariantAxis::Geometry => m.counts.geometry_variants = children.len(),
            VariantAxis::Boundary => {
                m.counts.variants = children.len();
                m.counts.duplicate_statements = dedup_statements(&mut children);
            }
        }
        write_json(&self.path(file), &children)?;
        self.finish_stage(m, stage, t)?;
        Ok(children)
    }

    fn code_gen(&self, m: &mut DatasetManifest, leaves: &[VariantSpec]) -> Result<(), ForgeError> {
        let stage = StageName::CodeGen;
        if m.is_complete(stage) {
            return Ok(());
        }
        let t = Instant::now();
        Self::reset_errors(m, stage);
        let path = self.path(CANDIDATES_FILE);
        let done: HashSet<Lineage> = read_checkpoint::<CodeCandidate>(&path)?.iter().map(|c| c.lineage).collect();
        let todo: Vec<&VariantSpec> = leaves.iter().filter(|v| !done.contains(&v.lineage)).collect();
        if !done.is_empty() {
            log::info!("code-gen: {} candidates on disk, {} to go", done.len(), todo.len());
        }
        let mut out = Appender::open(&path)?;
        let endpoint = self.endpoints.code_gen.as_ref();
        let mut written = done.len();
        fan_out(
            self.config.parallelism,
            &todo,
            |v| (v.lineage, synthesize_code(endpoint, v)),
            |(lineage, result)| match result {
                Ok(c) => {
                    written += 1;
                    out.push(&c)
                }
                Err(e) => {
                    log::warn!("code-gen: {e}");
                    m.stage_errors.push(StageFailure { stage, lineage: Some(lineage), message: e.to_string() });
                    Ok(())
                }
            },
        )?;
        m.counts.candidates = written;
        m.counts.code_gen_failures = m.stage_errors.iter().filter(|e| e.stage == stage).count();
        self.finish_stage(m, stage, t)
    }

    fn vetting(&self, m: &mut DatasetManifest) -> Result<(), ForgeError> {
        let stage = StageName::Vetting;
        let path = self.path(VETTED_FILE);
        if !m.is_complete(stage) {
            let t = Instant::now();
            let candidates: Vec<CodeCandidate> = read_checkpoint(&self.path(CANDIDATES_FILE))?;
            let done: HashSet<Lineage> = read_checkpoint::<CodeCandidate>(&path)?.iter().map(|c| c.lineage).collect();
            let todo: Vec<&CodeCandidate> = candidates.iter().filter(|c| !done.contains(&c.lineage)).collect();
            let mut out = Appender::open(&path)?;
            let (runner, correction) = (self.runner, self.endpoints.correction.as_ref());
            fan_out(
                self.config.parallelism,
                &todo,
                |c| vet_candidate((*c).clone(), runner, correction),
                |c| out.push(&c),
            )?;
            self.tally_vetting(m)?;
            self.finish_stage(m, stage, t)?;
        }
        Ok(())
    }

    fn tally_vetting(&self, m: &mut DatasetManifest) -> Result<(), ForgeError> {
        let vetted: Vec<CodeCandidate> = read_checkpoint(&self.path(VETTED_FILE))?;
        let count = |s: VetStatus| vetted.iter().filter(|c| c.vet_status == s).count();
        m.counts.passed = count(VetStatus::Passed);
        m.counts.corrected = count(VetStatus::CorrectedPassed);
        m.counts.discarded = count(VetStatus::Discarded);
        Ok(())
    }

    fn finalize(&self, m: &mut DatasetManifest) -> Result<(), ForgeError> {
        let stage = StageName::Finalize;
        if m.is_complete(stage) {
            return Ok(());
        }
        let t = Instant::now();
        Self::reset_errors(m, stage);
        let path = self.path(RECORDS_FILE);
        let vetted: Vec<CodeCandidate> = read_checkpoint(&self.path(VETTED_FILE))?;
        let existing: Vec<RecordEntry> = read_checkpoint(&path)?;
        let done: HashSet<Lineage> = existing.iter().map(|r| r.lineage).collect();
        let todo: Vec<&CodeCandidate> =
            vetted.iter().filter(|c| c.vet_status.is_kept() && !done.contains(&c.lineage)).collect();
        let mut out = Appender::open(&path)?;
        let endpoint = self.endpoints.instruction_gen.as_ref();
        let review = self.config.manual_review;
        let mut records = existing.len();
        fan_out(
            self.config.parallelism,
            &todo,
            |c| (c.lineage, finalize_record(endpoint, c)),
            |(lineage, result)| match result {
                Ok(record) => {
                    records += 1;
                    out.push(&RecordEntry { lineage, manual_review: review, record })
                }
                Err(e) => {
                    log::warn!("finalize: {e}");
                    m.stage_errors.push(StageFailure { stage, lineage: Some(lineage), message: e.to_string() });
                    Ok(())
                }
            },
        )?;
        m.counts.records = records;
        m.counts.finalize_failures = m.stage_errors.iter().filter(|e| e.stage == stage).count();
        self.finish_stage(m, stage, t)
    }

    fn assemble(&self, m: &mut DatasetManifest, corpus: &SeedCorpus) -> Result<(), ForgeError> {
        let t = Instant::now();
        let mut entries: Vec<RecordEntry> = read_checkpoint(&self.path(RECORDS_FILE))?;
        entries.sort_by_key(|e| e.lineage);
        let seed: Vec<AlpacaRecord> = corpus.entries.iter().map(|e| e.to_record()).collect();
        let path = self.path(DATASET_FILE);
        record::write_jsonl(&path, seed.iter().chain(entries.iter().map(|e| &e.record)))
            .map_err(|e| io_err(&path, e))?;
        m.counts.records = entries.len();
        m.counts.manual_review_pending = entries.iter().filter(|e| e.manual_review).count();
        m.counts.total = seed.len() + entries.len();
        m.records_path = path;
        self.finish_stage(m, StageName::Assemble, t)
    }
}

/// Cross-checks a finished output directory: every synthetic record's output
/// is the script of a kept candidate whose last execution succeeded, every
/// candidate ran at most twice, and lineage ids are unique. Returns the problems found.
pub fn verify_output(dir: &Path) -> Result<Vec<String>, ForgeError> {
    let vetted: Vec<CodeCandidate> = read_checkpoint(&dir.join(VETTED_FILE))?;
    let records: Vec<RecordEntry> = read_checkpoint(&dir.join(RECORDS_FILE))?;
    let mut problems = Vec::new();
    let mut by_lineage = BTreeMap::new();
    for c in &vetted {
        if by_lineage.insert(c.lineage, c).is_some() {
            problems.push(format!("{}: vetted twice", c.lineage));
        }
        if let Err(e) = c.check_invariants() {
            problems.push(e);
        }
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.lineage) {
            problems.push(format!("{}: more than one record", r.lineage));
        }
        match by_lineage.get(&r.lineage) {
            None => problems.push(format!("{}: record without a vetted candidate", r.lineage)),
            Some(c) => {
                let ran_ok = c.reports.last().is_some_and(|x| x.is_success());
                if !c.vet_status.is_kept() || !ran_ok || c.source != r.record.output {
                    problems.push(format!("{}: record output was not the script that executed cleanly", r.lineage));
                }
            }
        }
    }
    Ok(problems)
}
