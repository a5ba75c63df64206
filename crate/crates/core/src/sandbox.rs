//! Runs generated code in a fresh directory as a child process group.
//!
//! Every run gets its own workspace under `workspace_root`, an environment
//! built only from the allowlist, a wall-clock limit enforced by killing the
//! whole process group, and (by default) a private network namespace with no
//! interfaces. Streams keep their last `max_stream_bytes` bytes, because the
//! end of a solver log is where the error is.

use std::fs;
use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::CodeBlock;
use crate::sync::Semaphore;

pub const SCRIPT_PLACEHOLDER: &str = "{script}";
pub const DEFAULT_SCRIPT_NAME: &str = "main_generated.py";
pub const DEFAULT_MAX_STREAM_BYTES: usize = 256 * 1024;
pub const BENCHMARK_TIMEOUT: Duration = Duration::from_secs(600);
pub const VETTING_TIMEOUT: Duration = Duration::from_secs(120);

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

fn default_command() -> Vec<String> {
    vec!["python3".into(), SCRIPT_PLACEHOLDER.into()]
}

fn default_allowlist() -> Vec<String> {
    ["PATH", "LANG", "LC_ALL", "PYTHONPATH", "LD_LIBRARY_PATH", "VIRTUAL_ENV", "CONDA_PREFIX", "OMP_NUM_THREADS"]
        .map(String::from)
        .to_vec()
}

fn default_patterns() -> Vec<String> {
    ["*.png", "*.xdmf", "*.h5", "*.csv", "*.txt"].map(String::from).to_vec()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// argv; `{script}` is replaced by the absolute script path.
    pub command_template: Vec<String>,
    pub workspace_root: PathBuf,
    #[serde(with = "secs")]
    pub wall_timeout: Duration,
    pub env_allowlist: Vec<String>,
    pub artifact_patterns: Vec<String>,
    pub max_stream_bytes: usize,
    pub script_name: String,
    #[serde(default = "default_true")]
    pub isolate_network: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            command_template: default_command(),
            workspace_root: std::env::temp_dir().join("femagent-runs"),
            wall_timeout: BENCHMARK_TIMEOUT,
            env_allowlist: default_allowlist(),
            artifact_patterns: default_patterns(),
            max_stream_bytes: DEFAULT_MAX_STREAM_BYTES,
            script_name: DEFAULT_SCRIPT_NAME.into(),
            isolate_network: true,
        }
    }
}

impl SandboxConfig {
    pub fn new(workspace_root: impl Into<PathBuf>) -> Self {
        Self { workspace_root: workspace_root.into(), ..Self::default() }
    }

    pub fn for_vetting(workspace_root: impl Into<PathBuf>) -> Self {
        Self { wall_timeout: VETTING_TIMEOUT, ..Self::new(workspace_root) }
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        self.wall_timeout = t;
        self
    }

    pub fn with_command(mut self, argv: &[&str]) -> Self {
        self.command_template = argv.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ExitStatus {
    Success,
    Nonzero { code: i32 },
    Timeout,
    SpawnFailure { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Image,
    Xdmf,
    Table,
    Text,
    Other,
}

impl ArtifactKind {
    pub fn from_path(path: &str) -> Self {
        let ext = Path::new(path).extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "png" | "jpg" | "jpeg" | "gif" | "svg" => ArtifactKind::Image,
            "xdmf" => ArtifactKind::Xdmf,
            "csv" => ArtifactKind::Table,
            "txt" | "log" => ArtifactKind::Text,
            _ => ArtifactKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Artifact {
    pub relative_path: String,
    pub size_bytes: u64,
    /// Hex SHA-256 of the file contents.
    pub content_hash: String,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub exit_status: ExitStatus,
    pub stdout: String,
    pub stdout_truncated: bool,
    pub stderr: String,
    pub stderr_truncated: bool,
    pub duration_secs: f64,
    pub artifacts: Vec<Artifact>,
    /// Where the run happened. Local handle only; not part of the wire form.
    #[serde(skip)]
    pub workspace: Option<PathBuf>,
}

impl ExecutionReport {
    pub fn spawn_failure(message: impl Into<String>) -> Self {
        Self {
            exit_status: ExitStatus::SpawnFailure { message: message.into() },
            stdout: String::new(),
            stdout_truncated: false,
            stderr: String::new(),
            stderr_truncated: false,
            duration_secs: 0.0,
            artifacts: Vec::new(),
            workspace: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.exit_status == ExitStatus::Success
    }

    /// The JSON posted as an exec-report message.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Equality on everything except timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { duration_secs: 0.0, workspace: None, ..self.clone() }
            == Self { duration_secs: 0.0, workspace: None, ..other.clone() }
    }
}

/// Executes code blocks. The duo and multi-agent loops accept any runner so
/// tests can substitute deterministic fakes.
pub trait CodeRunner: Send + Sync {
    fn run(&self, code: &CodeBlock) -> ExecutionReport;
}

fn global_slots() -> Arc<Semaphore> {
    static SLOTS: OnceLock<Arc<Semaphore>> = OnceLock::new();
    SLOTS.get_or_init(|| Arc::new(Semaphore::new(thread::available_parallelism().map_or(1, |n| n.get())))).clone()
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    config: SandboxConfig,
    slots: Arc<Semaphore>,
}

impl Sandbox {
    /// Shares the process-wide cap of one child per CPU.
    pub fn new(config: SandboxConfig) -> Self {
        Self { config, slots: global_slots() }
    }

    pub fn with_concurrency(config: SandboxConfig, max_children: usize) -> Self {
        Self { config, slots: Arc::new(Semaphore::new(max_children)) }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn execute(&self, code: &CodeBlock) -> ExecutionReport {
        if code.source.trim().is_empty() {
            return ExecutionReport::spawn_failure("code block is empty");
        }
        let _slot = self.slots.acquire();
        match prepare_workspace(&self.config, code) {
            Ok((ws, script)) => run_child(&self.config, ws, &script),
            Err(e) => ExecutionReport::spawn_failure(format!("preparing workspace: {e}")),
        }
    }
}

impl CodeRunner for Sandbox {
    fn run(&self, code: &CodeBlock) -> ExecutionReport {
        self.execute(code)
    }
}

pub fn execute(code: &CodeBlock, config: &SandboxConfig) -> ExecutionReport {
    Sandbox::new(config.clone()).execute(code)
}

fn prepare_workspace(config: &SandboxConfig, code: &CodeBlock) -> io::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(&config.workspace_root)?;
    let root = config.workspace_root.canonicalize()?;
    let ws = root.join(format!("run-{}", uuid::Uuid::new_v4().simple()));
    // create_dir (not _all) fails if the directory already exists
    fs::create_dir(&ws)?;
    let script = ws.join(&config.script_name);
    fs::write(&script, &code.source)?;
    Ok((ws, script))
}

/// Keeps the last `cap` bytes of a stream and counts the total.
fn drain_tail<R: Read>(mut r: R, cap: usize) -> (Vec<u8>, bool) {
    let mut kept: Vec<u8> = Vec::new();
    let mut total = 0usize;
    let mut buf = [0u8; 8192];
    loop {
        match r.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                total += n;
                kept.extend_from_slice(&buf[..n]);
                if kept.len() > cap.saturating_mul(2).max(8192) {
                    kept.drain(..kept.len() - cap);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    if kept.len() > cap {
        kept.drain(..kept.len() - cap);
    }
    (kept, total > cap)
}

fn lossy_tail(bytes: &[u8], truncated: bool) -> String {
    // a cut in the middle of a UTF-8 sequence leaves continuation bytes at the front
    let start = if truncated { bytes.iter().take(3).take_while(|b| (**b & 0xC0) == 0x80).count() } else { 0 };
    String::from_utf8_lossy(&bytes[start..]).into_owned()
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall; a stale group id only yields ESRCH.
    unsafe {
        libc::killpg(pgid as libc::pid_t, libc::SIGKILL);
    }
}

fn build_command(config: &SandboxConfig, ws: &Path, script: &Path) -> Result<Command, String> {
    let script_str = script.to_str().ok_or("workspace path is not UTF-8")?;
    let argv: Vec<String> = config.command_template.iter().map(|a| a.replace(SCRIPT_PLACEHOLDER, script_str)).collect();
    let (program, args) = argv.split_first().ok_or("command_template is empty")?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(ws)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for name in &config.env_allowlist {
        if let Some(v) = std::env::var_os(name) {
            cmd.env(name, v);
        }
    }
    // keep caches and temp files of well-behaved programs inside the workspace
    cmd.env("HOME", ws).env("TMPDIR", ws).env("MPLBACKEND", "Agg");
    if config.isolate_network {
        // SAFETY: only async-signal-safe calls between fork and exec.
        unsafe {
            cmd.pre_exec(|| {
                if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) != 0 {
                    let msg = b"sandbox: network isolation unavailable, running with host network\n";
                    libc::write(2, msg.as_ptr().cast(), msg.len());
                }
                Ok(())
            });
        }
    }
    Ok(cmd)
}

fn run_child(config: &SandboxConfig, ws: PathBuf, script: &Path) -> ExecutionReport {
    let mut cmd = match build_command(config, &ws, script) {
        Ok(c) => c,
        Err(e) => return ExecutionReport { workspace: Some(ws), ..ExecutionReport::spawn_failure(e) },
    };
    let started = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            let msg = format!("cannot start `{}`: {e}", config.command_template.first().map_or("", String::as_str));
            return ExecutionReport { workspace: Some(ws), ..ExecutionReport::spawn_failure(msg) };
        }
    };
    let pgid = child.id();
    let cap = config.max_stream_bytes;
    let out = child.stdout.take().expect("piped stdout");
    let err = child.stderr.take().expect("piped stderr");
    let out_h = thread::spawn(move || drain_tail(out, cap));
    let err_h = thread::spawn(move || drain_tail(err, cap));

    let deadline = started + config.wall_timeout;
    let (status, timed_out) = loop {
        match child.try_wait() {
            Ok(Some(s)) => break (Some(s), false),
            Ok(None) if Instant::now() >= deadline => {
                kill_group(pgid);
                break (child.wait().ok(), true);
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => {
                kill_group(pgid);
                break (child.wait().ok(), false);
            }
        }
    };
    let duration_secs = started.elapsed().as_secs_f64();
    // stragglers left in the background would otherwise hold the pipes open
    kill_group(pgid);

    let (out_bytes, stdout_truncated) = out_h.join().unwrap_or_default();
    let (err_bytes, stderr_truncated) = err_h.join().unwrap_or_default();
    let exit_status = if timed_out {
        ExitStatus::Timeout
    } else {
        match status {
            Some(s) => match (s.code(), s.signal()) {
                (Some(0), _) => ExitStatus::Success,
                (Some(c), _) => ExitStatus::Nonzero { code: c },
                (None, Some(sig)) => ExitStatus::Nonzero { code: 128 + sig },
                (None, None) => ExitStatus::Nonzero { code: -1 },
            },
            None => ExitStatus::Nonzero { code: -1 },
        }
    };

    let scan = collect_artifacts(&ws, &config.artifact_patterns);
    let mut stderr = lossy_tail(&err_bytes, stderr_truncated);
    for w in &scan.warnings {
        if !stderr.is_empty() && !stderr.ends_with('\n') {
            stderr.push('\n');
        }
        stderr.push_str("sandbox: ");
        stderr.push_str(w);
        stderr.push('\n');
    }
    ExecutionReport {
        exit_status,
        stdout: lossy_tail(&out_bytes, stdout_truncated),
        stdout_truncated,
        stderr,
        stderr_truncated,
        duration_secs,
        artifacts: scan.artifacts,
        workspace: Some(ws),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactScan {
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
}

fn hash_file(path: &Path) -> io::Result<(u64, String)> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        size += n as u64;
        h.update(&buf[..n]);
    }
    Ok((size, hex::encode(h.finalize())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files under `workspace` whose relative path matches any pattern, sorted
/// by relative path. Symlinks are followed only when their target stays
/// inside the workspace.
pub fn collect_artifacts(workspace: &Path, patterns: &[String]) -> ArtifactScan {
    let mut scan = ArtifactScan::default();
    let Ok(root) = workspace.canonicalize() else {
        return scan;
    };
    let compiled: Vec<glob::Pattern> = patterns
        .iter()
        .filter_map(|p| match glob::Pattern::new(p) {
            Ok(g) => Some(g),
            Err(e) => {
                scan.warnings.push(format!("ignoring bad artifact pattern `{p}`: {e}"));
                None
            }
        })
        .collect();
    let opts = glob::MatchOptions {
        case_sensitive: true,
        require_literal_separator: false,
        require_literal_leading_dot: false,
    };

    for entry in walkdir::WalkDir::new(&root).follow_links(false).min_depth(1) {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                scan.warnings.push(format!("cannot walk workspace: {e}"));
                continue;
            }
        };
        let Ok(rel) = entry.path().strip_prefix(&root) else { continue };
        let rel = rel.to_string_lossy().replace('\\', "/");
        if !compiled.iter().any(|g| g.matches_with(&rel, opts)) {
            continue;
        }
        let ft = entry.file_type();
        let target = if ft.is_symlink() {
            match entry.path().canonicalize() {
                Ok(t) if t.starts_with(&root) && t.is_file() => t,
                _ => continue,
            }
        } else if ft.is_file() {
            entry.path().to_path_buf()
        } else {
            continue;
        };
        match hash_file(&target) {
            Ok((size_bytes, content_hash)) => scan.artifacts.push(Artifact {
                kind: ArtifactKind::from_path(&rel),
                relative_path: rel,
                size_bytes,
                content_hash,
            }),
            Err(e) => scan.warnings.push(format!("skipping unreadable artifact {rel}: {e}")),
        }
    }
    scan.artifacts.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    scan
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_by_extension() {
        assert_eq!(ArtifactKind::from_path("a/b.PNG"), ArtifactKind::Image);
        assert_eq!(ArtifactKind::from_path("u.xdmf"), ArtifactKind::Xdmf);
        assert_eq!(ArtifactKind::from_path("u.h5"), ArtifactKind::Other);
        assert_eq!(ArtifactKind::from_path("t.csv"), ArtifactKind::Table);
        assert_eq!(ArtifactKind::from_path("noext"), ArtifactKind::Other);
    }

    #[test]
    fn tail_keeps_last_bytes() {
        let data: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
        let (kept, trunc) = drain_tail(&data[..], 1000);
        assert!(trunc);
        assert_eq!(kept, &data[data.len() - 1000..]);
        let (kept, trunc) = drain_tail(&data[..1000], 1000);
        assert!(!trunc);
        assert_eq!(kept.len(), 1000);
    }

    #[test]
    fn tail_drops_partial_utf8_prefix() {
        let s = "é".repeat(10);
        let (kept, trunc) = drain_tail(s.as_bytes(), 5);
        assert!(trunc);
        assert_eq!(lossy_tail(&kept, trunc), "éé");
    }

    #[test]
    fn report_status_wire_form() {
        let v = serde_json::to_value(ExitStatus::Nonzero { code: 1 }).unwrap();
        assert_eq!(v, serde_json::json!({"status": "nonzero", "code": 1}));
        let v = serde_json::to_value(ExitStatus::SpawnFailure { message: "x".into() }).unwrap();
        assert_eq!(v["status"], "spawn-failure");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn config_toml_round_trip() {
        let c: SandboxConfig = toml::from_str("wall_timeout = 2.5\nworkspace_root = \"/tmp/x\"\n").unwrap();
        assert_eq!(c.wall_timeout, Duration::from_millis(2500));
        assert_eq!(c.script_name, DEFAULT_SCRIPT_NAME);
        assert!(c.isolate_network);
        assert_eq!(c.max_stream_bytes, 262_144);
    }
}
