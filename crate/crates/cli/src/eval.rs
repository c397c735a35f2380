use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde_json::{json, Value};
use virreq_core::metrics::{dataset_hpq, dataset_pq, miou_per_level, part_pq, MetricConfig, MetricReport, Subset};
use virreq_core::RecognitionTree;

use crate::common::{input, read_corpus, registry, write, Ctx};

#[derive(Clone, Copy, ValueEnum)]
pub enum Metric {
    Hpq,
    Pq,
    Partpq,
    Miou,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    All,
    Np,
    P,
    Pdagger,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long = "gt-dir", alias = "gt")]
    gt_dir: PathBuf,
    #[arg(long = "pred-dir", alias = "pred")]
    pred_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Hpq)]
    metric: Metric,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
    /// Count predictions of classes the ground truth left unlabeled.
    #[arg(long)]
    strict_fp: bool,
    /// Level whose mean IoU is the headline score for `miou`.
    #[arg(long, default_value_t = 1)]
    level: usize,
    /// Extra KB files to resolve versions against.
    #[arg(long)]
    kb: Vec<PathBuf>,
    /// Also write the full JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn name(m: Metric) -> &'static str {
    match m {
        Metric::Hpq => "hpq",
        Metric::Pq => "pq",
        Metric::Partpq => "partpq",
        Metric::Miou => "miou",
    }
}

fn subset_name(s: SubsetArg) -> &'static str {
    match s {
        SubsetArg::All => "all",
        SubsetArg::Np => "np",
        SubsetArg::P => "p",
        SubsetArg::Pdagger => "pdagger",
    }
}

fn table(r: &MetricReport) -> String {
    let mut s = String::new();
    for row in &r.classes {
        s.push_str(&format!(
            "  {:<28} {:>2} {:>7.4}  tp {:>4} fp {:>4} fn {:>4}\n",
            row.label,
            if row.subset == Subset::P { "P" } else { "NP" },
            row.score,
            row.counts.tp,
            row.counts.fp,
            row.counts.fn_
        ));
    }
    s
}

pub fn run(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let reg = registry(ctx, &a.kb)?;
    let gts = read_corpus(&a.gt_dir)?;
    let mut preds: BTreeMap<String, RecognitionTree> =
        read_corpus(&a.pred_dir)?.into_iter().map(|t| (t.image_id.clone(), t)).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(gts.len());
    for g in gts {
        let p = match preds.remove(&g.image_id) {
            Some(p) => p,
            None => {
                missing.push(g.image_id.clone());
                RecognitionTree::new_in(g.image_id.clone(), g.width(), g.height(), g.kb_version(), &reg)?
            }
        };
        pairs.push((g, p));
    }
    if pairs.is_empty() {
        return Err(input(format!("no ground truth in {}", a.gt_dir.display())));
    }
    if !missing.is_empty() {
        log::warn!("{} images have no prediction and score as empty", missing.len());
    }
    let extra: Vec<String> = preds.into_keys().collect();
    if !extra.is_empty() {
        log::warn!("{} predictions have no ground truth and are ignored", extra.len());
    }
    let cfg = MetricConfig { strict_fp: a.strict_fp, ..MetricConfig::default() };
    let (score, body, text): (Option<f64>, Value, String) = match a.metric {
        Metric::Miou => {
            let depth = pairs.iter().map(|(g, _)| g.max_level()).max().unwrap_or(1);
            let levels = (1..=depth).map(|l| miou_per_level(&pairs, l)).collect::<Result<Vec<_>, _>>()?;
            let score = levels.iter().find(|l| l.level == a.level).and_then(|l| l.mean);
            let text = levels
                .iter()
                .map(|l| format!("  level {}: {}", l.level, l.mean.map_or("n/a".into(), |m| format!("{m:.4}"))))
                .collect::<Vec<_>>()
                .join("\n");
            (score, json!({ "levels": levels }), text)
        }
        m => {
            let r = match m {
                Metric::Hpq => dataset_hpq(&pairs, &reg, &cfg)?,
                Metric::Pq => dataset_pq(&pairs, &reg, &cfg)?,
                _ => part_pq(&pairs, &reg, &cfg)?,
            };
            let score = match a.subset {
                SubsetArg::All => r.score(None, false),
                SubsetArg::Np => r.score(Some(Subset::Np), false),
                SubsetArg::P => r.score(Some(Subset::P), false),
                SubsetArg::Pdagger => r.score(None, true),
            };
            let text = table(&r);
            (score, serde_json::to_value(&r)?, text)
        }
    };
    let doc = json!({
        "metric": name(a.metric),
        "subset": subset_name(a.subset),
        "score": score,
        "images": pairs.len(),
        "missing_predictions": missing,
        "report": body,
    });
    if let Some(p) = &a.report {
        write(p, serde_json::to_string_pretty(&doc)?)?;
    }
    ctx.emit(&doc, || {
        let s = score.map_or("n/a".to_string(), |s| format!("{s:.4}"));
        format!(
            "{} ({}): {s} over {} images\n{}",
            name(a.metric).to_uppercase(),
            subset_name(a.subset),
            pairs.len(),
            text.trim_end()
        )
    });
    Ok(())
}
