use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;
use virreq_core::dataset::split_seed;
use virreq_core::probe::{grid_probes, sample_probe, GammaPolicy, GridPolicy};
use virreq_core::{BinaryMask, NodeId, Rle};

use crate::common::{input, read_tree, Ctx};

#[derive(Args)]
pub struct ProbeArgs {
    /// Tree JSON holding the region.
    #[arg(long, conflicts_with = "rle", requires = "node")]
    tree: Option<PathBuf>,
    /// Node of --tree to sample from.
    #[arg(long)]
    node: Option<usize>,
    /// RLE JSON file of the region.
    #[arg(long)]
    rle: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Number of γ-sampled probes.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Emit grid probes at this stride instead of sampling.
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long, requires = "stride")]
    anchor: Option<u32>,
}

fn region(a: &ProbeArgs) -> Result<BinaryMask> {
    match (&a.tree, &a.rle) {
        (Some(t), _) => {
            let tree = read_tree(t)?;
            let id = NodeId(a.node.expect("clap requires --node"));
            Ok(tree.node(id)?.mask.clone())
        }
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Rle::from_json(&text)?.decode()?)
        }
        (None, None) => Err(input("pass --tree with --node, or --rle")),
    }
}

pub fn run(ctx: &Ctx, a: ProbeArgs) -> Result<()> {
    let m = region(&a)?;
    let lines: Vec<serde_json::Value> = match a.stride {
        Some(s) => {
            let mut g = GridPolicy::new(s)?;
            if let Some(anchor) = a.anchor {
                g = g.with_anchor(anchor);
            }
            grid_probes(&m, &g).into_iter().map(|p| json!({ "a": p.a, "b": p.b })).collect()
        }
        None => (0..a.count)
            .map(|i| {
                let seed = if a.count == 1 { ctx.seed } else { split_seed(ctx.seed, "probe", i as u64) };
                let s = sample_probe(&m, &GammaPolicy::new(a.gamma, seed)?)?;
                Ok(json!({ "a": s.probe.a, "b": s.probe.b, "off_region": s.off_region }))
            })
            .collect::<Result<_>>()?,
    };
    if ctx.json {
        ctx.emit(&json!({ "probes": lines }), String::new);
    } else {
        let text = lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n");
        ctx.emit(&(), || text);
    }
    Ok(())
}
