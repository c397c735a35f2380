use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;
use virreq_core::dataset::{
    generate_corpus, render_png, save_corpus, subsample_parts, subsample_semantic_and_parts, DataLayout, SceneSpec,
};

use crate::common::{input, load_kb, read_corpus, write, Ctx};

#[derive(Args)]
pub struct GenArgs {
    /// Scene spec JSON; a 64x64 default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Vocabulary; the built-in synthetic one by default.
    #[arg(long, default_value = "builtin:synthetic")]
    kb: String,
    /// Corpus root to write; --data-dir by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip rendering PNGs.
    #[arg(long)]
    no_images: bool,
}

pub fn gen(ctx: &Ctx, a: GenArgs) -> Result<()> {
    let spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneSpec::new(64, 64),
    };
    let kb = load_kb(ctx, &a.kb)?;
    let root =
        a.out.clone().or_else(|| ctx.data_dir.clone()).ok_or_else(|| input("pass --out or set VIRREQ_DATA_DIR"))?;
    let layout = DataLayout::new(&root);
    let scenes = generate_corpus(&spec, &kb, a.n, ctx.seed)?;
    layout.save_kb(&kb)?;
    let (gts, preds): (Vec<_>, Vec<_>) = scenes.into_iter().unzip();
    save_corpus(&layout.gt_dir(), &gts)?;
    let preds: Vec<_> = preds.into_iter().flatten().collect();
    if !preds.is_empty() {
        save_corpus(&root.join("pred"), &preds)?;
    }
    if !a.no_images {
        for g in &gts {
            let png = render_png(g).context("rendering image")?;
            write(&layout.image_path(&g.image_id).expect("generated ids are safe"), png)?;
        }
    }
    let nodes: usize = gts.iter().map(|g| g.len()).sum();
    let out = json!({
        "images": gts.len(),
        "nodes": nodes,
        "predictions": preds.len(),
        "kb_version": kb.version_id(),
        "seed": ctx.seed,
        "out": root,
    });
    ctx.emit(&out, || {
        format!("{} scenes ({nodes} nodes, {} predictions) -> {}", gts.len(), preds.len(), root.display())
    });
    Ok(())
}

#[derive(Args)]
pub struct SubsampleArgs {
    /// 1: drop part regions; 2: drop scene-level regions, then parts.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    setting: u8,
    /// Keep probability, in [0, 1].
    #[arg(long)]
    ratio: f64,
    /// Part keep probability for setting 2; --ratio when omitted.
    #[arg(long)]
    part_ratio: Option<f64>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn subsample(ctx: &Ctx, a: SubsampleArgs) -> Result<()> {
    for r in [Some(a.ratio), a.part_ratio].into_iter().flatten() {
        if !(0.0..=1.0).contains(&r) {
            return Err(input(format!("ratio {r} is outside [0, 1]")));
        }
    }
    let gt_dir = ctx.dir_or(a.gt_dir.clone(), |l| l.gt_dir(), "--gt-dir")?;
    let trees = read_corpus(&gt_dir)?;
    let (out, stats) = match a.setting {
        1 => {
            let (t, s) = subsample_parts(&trees, a.ratio, ctx.seed);
            (t, json!({ "parts": s }))
        }
        _ => {
            let (t, s1, s2) = subsample_semantic_and_parts(&trees, a.ratio, a.part_ratio.unwrap_or(a.ratio), ctx.seed);
            (t, json!({ "semantic": s1, "parts": s2 }))
        }
    };
    save_corpus(&a.out, &out)?;
    let doc = json!({ "setting": a.setting, "ratio": a.ratio, "seed": ctx.seed, "images": out.len(), "stats": stats, "out": a.out });
    ctx.emit(&doc, || {
        format!("setting {} at {}: {} images -> {}\n{stats}", a.setting, a.ratio, out.len(), a.out.display())
    });
    Ok(())
}
