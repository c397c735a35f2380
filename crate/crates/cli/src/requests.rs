use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde_json::json;
use virreq_core::dataset::TREE_SUFFIX;
use virreq_core::executor::{run_batch, LogEntry, NmsConfig, NmsMode, RunMode, Session, DEFAULT_NMS_THRESHOLD};
use virreq_core::predict::{BundleStore, EmbeddingTable, FilesBackend, LinearBackend, OracleBackend, Predictor};
use virreq_core::probe::{GammaPolicy, GridPolicy};
use virreq_core::request::{parse_requests, read_stream, write_stream, ProbeSource, StreamHeader};
use virreq_core::RecognitionTree;

use crate::common::{input, kb_for, load_kb, read_corpus, read_tree, write, Ctx};

#[derive(Args)]
pub struct ParseArgs {
    /// Ground-truth tree JSON.
    #[arg(long)]
    gt: PathBuf,
    /// KB file, `builtin:<name>` or version id; defaults to the tree's own.
    #[arg(long)]
    kb: Option<String>,
    /// Stream destination; stdout when omitted and --json is off.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse(ctx: &Ctx, a: ParseArgs) -> Result<()> {
    let gt = read_tree(&a.gt)?;
    let kb = kb_for(ctx, &gt, a.kb.as_deref())?;
    let pairs = parse_requests(&gt, &kb)?;
    let recorded = gt.nodes().iter().any(|n| n.probe.is_some());
    let header = StreamHeader {
        image_id: gt.image_id.clone(),
        width: gt.width(),
        height: gt.height(),
        kb_version: kb.version_id().to_string(),
        probe_source: if recorded { ProbeSource::Recorded } else { ProbeSource::MassCenter },
    };
    let text = write_stream(&header, &pairs);
    let type1 = pairs.iter().filter(|(r, _)| r.is_type1()).count();
    if let Some(p) = &a.out {
        write(p, &text)?;
    }
    let summary = json!({
        "image_id": gt.image_id,
        "requests": pairs.len(),
        "type1": type1,
        "type2": pairs.len() - type1,
        "out": a.out,
    });
    if ctx.json || a.out.is_some() {
        ctx.emit(&summary, || {
            format!("{} requests ({type1} Type-I) -> {}", pairs.len(), a.out.as_ref().unwrap().display())
        });
    } else {
        let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), text.as_bytes());
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BackendKind {
    Oracle,
    Files,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeKind {
    Probing,
    Nonprobing,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NmsKind {
    Greedy,
    Fast,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
    backend: BackendKind,
    #[arg(long, value_enum, default_value_t = ModeKind::Probing)]
    mode: ModeKind,
    /// Probe centerness for probing mode, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Grid stride for non-probing mode.
    #[arg(long, default_value_t = GridPolicy::DEFAULT_STRIDE)]
    stride: u32,
    /// First grid offset; half the stride when omitted.
    #[arg(long)]
    anchor: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    nms: f64,
    #[arg(long, value_enum, default_value_t = NmsKind::Greedy)]
    nms_mode: NmsKind,
    /// Give pixels claimed by two kept instances to the higher score.
    #[arg(long)]
    disjoint: bool,
    /// Deepest level non-probing mode expands.
    #[arg(long, default_value_t = 8)]
    max_levels: usize,
    /// Ground-truth trees; `data/gt` by default.
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// Prediction bundles; `data/bundles` by default.
    #[arg(long)]
    bundles: Option<PathBuf>,
    /// Embedding table; `data/embeddings.json` by default.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Type-II temperature for the linear backend.
    #[arg(long)]
    type2_temperature: Option<f32>,
    /// Only these image ids.
    #[arg(long, value_delimiter = ',')]
    images: Vec<String>,
    /// Replay a recorded request stream instead of asking a backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// KB for --script; defaults to the stream's version.
    #[arg(long)]
    kb: Option<String>,
    /// Output directory, or output file with --script.
    #[arg(long)]
    out: PathBuf,
}

fn backend(ctx: &Ctx, a: &RunArgs, gts: &[RecognitionTree]) -> Result<Arc<dyn Predictor>> {
    let embeddings = |required: bool| -> Result<Option<EmbeddingTable>> {
        let p = a.embeddings.clone().or_else(|| ctx.layout().map(|l| l.embeddings()));
        match p.filter(|p| p.is_file()) {
            Some(p) => Ok(Some(EmbeddingTable::load(&p).with_context(|| format!("loading {}", p.display()))?)),
            None if required => Err(input("the linear backend needs --embeddings")),
            None => Ok(None),
        }
    };
    let bundles = || ctx.dir_or(a.bundles.clone(), |l| l.bundles_dir(), "--bundles").map(BundleStore::open);
    Ok(match a.backend {
        BackendKind::Oracle => Arc::new(OracleBackend::new(gts.iter().cloned())),
        BackendKind::Files => Arc::new(FilesBackend::new(bundles()?, embeddings(false)?)),
        BackendKind::Linear => {
            let mut b = LinearBackend::new(bundles()?, embeddings(true)?.expect("required"));
            if let Some(t) = a.type2_temperature {
                b = b.with_type2_temperature(t)?;
            }
            Arc::new(b)
        }
    })
}

fn replay(ctx: &Ctx, a: &RunArgs, script: &PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?;
    let (header, pairs) = read_stream(&text)?;
    let kb = load_kb(ctx, a.kb.as_deref().unwrap_or(&header.kb_version))?;
    let start = RecognitionTree::new(header.image_id.clone(), header.width, header.height, &kb)?;
    let mut s = Session::new(start, kb, None);
    s.run_script(&pairs)?;
    let tree = s.tree();
    write(&a.out, tree.to_json_pretty())?;
    let out = json!({ "image_id": header.image_id, "requests": pairs.len(), "nodes": tree.len(), "hash": tree.hash(), "out": a.out });
    ctx.emit(&out, || format!("{} nodes, hash {} -> {}", tree.len(), tree.hash(), a.out.display()));
    Ok(())
}

pub fn run(ctx: &Ctx, a: RunArgs) -> Result<()> {
    if let Some(script) = &a.script {
        return replay(ctx, &a, script);
    }
    let gt_dir = ctx.dir_or(a.gt_dir.clone(), |l| l.gt_dir(), "--gt-dir")?;
    let mut gts = read_corpus(&gt_dir)?;
    if !a.images.is_empty() {
        gts.retain(|g| a.images.contains(&g.image_id));
    }
    if gts.is_empty() {
        return Err(input(format!("no trees to run in {}", gt_dir.display())));
    }
    let kb = kb_for(ctx, &gts[0], a.kb.as_deref())?;
    if let Some(other) = gts.iter().find(|g| g.kb_version() != gts[0].kb_version()) {
        log::warn!("{} uses KB {}; running everything against {}", other.image_id, other.kb_version(), kb.version_id());
    }
    let mode = match a.mode {
        ModeKind::Probing => RunMode::Probing { gamma: GammaPolicy::new(a.gamma, ctx.seed)? },
        ModeKind::Nonprobing => {
            let mut grid = GridPolicy::new(a.stride)?;
            if let Some(anchor) = a.anchor {
                grid = grid.with_anchor(anchor);
            }
            if !(0.0..=1.0).contains(&a.nms) {
                return Err(input("--nms must lie in [0, 1]"));
            }
            let mode = match a.nms_mode {
                NmsKind::Greedy => NmsMode::Greedy,
                NmsKind::Fast => NmsMode::Fast,
            };
            RunMode::NonProbing {
                grid,
                nms: NmsConfig { threshold: a.nms, mode, disjoint: a.disjoint },
                max_levels: a.max_levels,
            }
        }
    };
    let be = backend(ctx, &a, &gts)?;
    let runs = run_batch(&gts, kb, be, &mode);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (mut nodes, mut misses, mut lost) = (0, 0, 0);
    let mut failed = Vec::new();
    for r in &runs {
        misses += r.log.iter().filter(|e| matches!(e, LogEntry::Miss { .. })).count();
        lost += r.log.iter().filter(|e| matches!(e, LogEntry::Lost { .. })).count();
        let log: String = r.log.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect();
        write(&a.out.join(format!("{}.log.jsonl", r.image_id)), log)?;
        match &r.result {
            Ok(t) => {
                nodes += t.len();
                write(&a.out.join(format!("{}{TREE_SUFFIX}", r.image_id)), t.to_json_pretty())?;
            }
            Err(e) => failed.push(json!({ "image_id": r.image_id, "error": e })),
        }
    }
    let out = json!({
        "backend": a.backend.to_possible_value().map(|v| v.get_name().to_string()),
        "mode": mode,
        "seed": ctx.seed,
        "images": runs.len(),
        "nodes": nodes,
        "misses": misses,
        "lost": lost,
        "failed": failed,
        "out": a.out,
    });
    ctx.emit(&out, || {
        format!(
            "{} images, {nodes} nodes, {misses} misses, {lost} lost, {} failed -> {}",
            runs.len(),
            failed.len(),
            a.out.display()
        )
    });
    if !failed.is_empty() {
        return Err(anyhow::anyhow!("{} of {} images failed", failed.len(), runs.len()));
    }
    Ok(())
}
