use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use virreq_core::dataset::{load_corpus, synthetic_kb, CorpusError, DataLayout, GenError};
use virreq_core::executor::ExecError;
use virreq_core::kb::fixtures::{cpp_kb, cpp_kb_compositional};
use virreq_core::kb::{KbError, KbRegistry, KbResolver, KbVersion};
use virreq_core::metrics::MetricError;
use virreq_core::predict::PredictError;
use virreq_core::probe::ProbeError;
use virreq_core::request::RequestError;
use virreq_core::tree::TreeError;
use virreq_core::RecognitionTree;

pub struct Ctx {
    pub json: bool,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
}

impl Ctx {
    pub fn layout(&self) -> Option<DataLayout> {
        self.data_dir.as_ref().map(DataLayout::new)
    }

    /// `explicit`, else `data_dir/<sub>`.
    pub fn dir_or(&self, explicit: Option<PathBuf>, sub: fn(&DataLayout) -> PathBuf, what: &str) -> Result<PathBuf> {
        explicit
            .or_else(|| self.layout().map(|l| sub(&l)))
            .ok_or_else(|| input(format!("{what} is required (or set VIRREQ_DATA_DIR)")))
    }

    /// Prints `value` as JSON with `--json`, else the text from `text`.
    pub fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        let t = if self.json { serde_json::to_string_pretty(value).expect("output serializes") } else { text() };
        if !t.is_empty() {
            // A closed pipe (`| head`) is not an error worth a panic.
            let _ = writeln!(std::io::stdout().lock(), "{t}");
        }
    }
}

/// Bad input that parsed fine: a missing file, a label that does not
/// exist, an empty corpus.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// Machine-readable code for the innermost known error in the chain.
pub fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        let code = if cause.is::<InputError>() {
            "invalid_input"
        } else if cause.is::<KbError>() {
            "kb_error"
        } else if cause.is::<TreeError>() {
            "tree_error"
        } else if cause.is::<RequestError>() {
            "request_error"
        } else if cause.is::<MetricError>() {
            "metric_error"
        } else if cause.is::<PredictError>() {
            "predict_error"
        } else if cause.is::<ExecError>() {
            "exec_error"
        } else if cause.is::<ProbeError>() {
            "probe_error"
        } else if cause.is::<GenError>() {
            "gen_error"
        } else if cause.is::<CorpusError>() {
            "corpus_error"
        } else if cause.is::<serde_json::Error>() {
            "invalid_json"
        } else if cause.is::<std::io::Error>() {
            "io_error"
        } else {
            continue;
        };
        return code;
    }
    "runtime_error"
}

pub fn builtin(name: &str) -> Option<KbVersion> {
    match name {
        "synthetic" => Some(synthetic_kb()),
        "cpp" => Some(cpp_kb()),
        "cpp-compositional" => Some(cpp_kb_compositional()),
        _ => None,
    }
}

/// Every KB the invocation can see: built-ins, `data/kb/`, and `extra`
/// files.
pub fn registry(ctx: &Ctx, extra: &[PathBuf]) -> Result<KbRegistry> {
    let reg = match ctx.layout().map(|l| l.kb_dir()).filter(|d| d.is_dir()) {
        Some(d) => KbRegistry::load_dir(&d).with_context(|| format!("loading {}", d.display()))?,
        None => KbRegistry::new(),
    };
    for name in ["synthetic", "cpp", "cpp-compositional"] {
        reg.insert(builtin(name).expect("known builtin"));
    }
    for p in extra {
        reg.insert(read_kb_file(p)?);
    }
    Ok(reg)
}

pub fn read_kb_file(p: &Path) -> Result<KbVersion> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    KbVersion::from_json(&text).with_context(|| format!("parsing {}", p.display()))
}

/// A KB named by file path, `builtin:<name>`, or version id.
pub fn load_kb(ctx: &Ctx, spec: &str) -> Result<Arc<KbVersion>> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin(name)
            .map(Arc::new)
            .ok_or_else(|| input(format!("unknown built-in KB {name:?}; try synthetic, cpp, cpp-compositional")));
    }
    let p = Path::new(spec);
    if p.is_file() {
        return Ok(Arc::new(read_kb_file(p)?));
    }
    registry(ctx, &[])?.resolve(spec).ok_or_else(|| input(format!("no KB file or version {spec:?}")))
}

/// The KB a tree refers to, from `--kb` or the registry.
pub fn kb_for(ctx: &Ctx, tree: &RecognitionTree, kb: Option<&str>) -> Result<Arc<KbVersion>> {
    match kb {
        Some(s) => {
            let k = load_kb(ctx, s)?;
            if k.version_id() != tree.kb_version() {
                log::warn!("{}: tree refers to KB {}, using {}", tree.image_id, tree.kb_version(), k.version_id());
            }
            Ok(k)
        }
        None => registry(ctx, &[])?.resolve(tree.kb_version()).ok_or_else(|| {
            input(format!("KB version {} of {} not found; pass --kb", tree.kb_version(), tree.image_id))
        }),
    }
}

pub fn read_tree(p: &Path) -> Result<RecognitionTree> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    RecognitionTree::parse(&bytes, None).with_context(|| format!("parsing {}", p.display()))
}

pub fn read_corpus(dir: &Path) -> Result<Vec<RecognitionTree>> {
    if !dir.is_dir() {
        return Err(input(format!("{} is not a directory", dir.display())));
    }
    Ok(load_corpus(dir, None)?)
}

/// `SOURCE_DATE_EPOCH` when set, for reproducible KB files; else now.
pub fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse::<i64>().ok());
    let t = match secs.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
}
