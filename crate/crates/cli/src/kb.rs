use std::path::PathBuf;

use anyhow::Result;
use clap::Subcommand;
use serde_json::json;
use virreq_core::kb::{ConceptId, CopyConflict, KbVersion};

use crate::common::{builtin, input, load_kb, timestamp, write, Ctx};

#[derive(Subcommand)]
pub enum KbCmd {
    /// Write a built-in vocabulary (synthetic, cpp, cpp-compositional).
    Init {
        #[arg(long, default_value = "synthetic")]
        builtin: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the concept graph, or one class's sub-knowledge.
    Show {
        /// File, `builtin:<name>` or version id.
        #[arg(long)]
        kb: String,
        #[arg(long)]
        class: Option<String>,
    },
    /// Add a concept, producing a new version.
    Add {
        #[arg(long)]
        kb: String,
        #[arg(long)]
        parent: String,
        #[arg(long)]
        label: String,
        #[arg(long)]
        countable: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy one class's sub-knowledge onto another.
    Copy {
        #[arg(long)]
        kb: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Keep existing children instead of failing on label clashes.
        #[arg(long)]
        merge: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Concepts added, removed or changed between two versions.
    Diff { a: String, b: String },
}

/// Stamps and stores a new version: `--out`, else `data/kb/`.
fn save(ctx: &Ctx, kb: KbVersion, out: Option<PathBuf>) -> Result<(KbVersion, PathBuf)> {
    let kb = kb.with_created_at(Some(timestamp()));
    let path = match out {
        Some(p) => {
            write(&p, kb.to_json())?;
            p
        }
        None => ctx.layout().ok_or_else(|| input("pass --out or set VIRREQ_DATA_DIR"))?.save_kb(&kb)?,
    };
    Ok((kb, path))
}

fn saved(ctx: &Ctx, kb: &KbVersion, path: &std::path::Path) {
    let out = json!({
        "version_id": kb.version_id(),
        "parent_version": kb.parent_version(),
        "concepts": kb.len(),
        "path": path,
    });
    ctx.emit(&out, || format!("{} -> {}", kb.version_id(), path.display()));
}

fn outline(kb: &KbVersion, id: ConceptId, depth: usize, out: &mut String) {
    let c = kb.concept(id).expect("listed concept exists");
    out.push_str(&format!("{}{}{} [{}]\n", "  ".repeat(depth), c.label, if c.countable { " *" } else { "" }, id));
    for &k in &c.children {
        outline(kb, k, depth + 1, out);
    }
}

pub fn run(ctx: &Ctx, cmd: KbCmd) -> Result<()> {
    match cmd {
        KbCmd::Init { builtin: name, out } => {
            let kb = builtin(&name).ok_or_else(|| input(format!("unknown built-in KB {name:?}")))?;
            let (kb, path) = save(ctx, kb, out)?;
            saved(ctx, &kb, &path);
        }
        KbCmd::Show { kb, class } => {
            let kb = load_kb(ctx, &kb)?;
            match class {
                Some(label) => {
                    let id = kb.find(&label)?;
                    let c = kb.concept(id)?;
                    let subs: Vec<_> = kb
                        .sub_knowledge(id)?
                        .into_iter()
                        .map(|s| json!({ "id": s.id, "label": s.label, "countable": s.countable }))
                        .collect();
                    let out = json!({
                        "version_id": kb.version_id(),
                        "class": { "id": id, "path": kb.label_path(id), "countable": c.countable },
                        "sub_knowledge": subs,
                    });
                    ctx.emit(&out, || {
                        let names: Vec<&str> =
                            kb.sub_knowledge(id).unwrap_or_default().iter().map(|s| s.label.as_str()).collect();
                        format!("{}: {}", kb.label_path(id).unwrap_or_default(), names.join(", "))
                    });
                }
                None => {
                    let concepts: Vec<_> = kb
                        .concepts()
                        .map(|c| json!({ "id": c.id, "path": kb.label_path(c.id), "countable": c.countable, "children": c.children }))
                        .collect();
                    let out = json!({
                        "version_id": kb.version_id(),
                        "parent_version": kb.parent_version(),
                        "concepts": concepts,
                    });
                    ctx.emit(&out, || {
                        let mut s = format!("version {}\n", kb.version_id());
                        outline(&kb, ConceptId::SCENE, 0, &mut s);
                        s.trim_end().to_string()
                    });
                }
            }
        }
        KbCmd::Add { kb, parent, label, countable, out } => {
            let kb = load_kb(ctx, &kb)?;
            let next = kb.add_concept(kb.find(&parent)?, &label, countable)?;
            let (next, path) = save(ctx, next, out)?;
            saved(ctx, &next, &path);
        }
        KbCmd::Copy { kb, from, to, merge, out } => {
            let kb = load_kb(ctx, &kb)?;
            let policy = if merge { CopyConflict::Merge } else { CopyConflict::Error };
            let next = kb.copy_sub_knowledge(kb.find(&from)?, kb.find(&to)?, policy)?;
            let (next, path) = save(ctx, next, out)?;
            saved(ctx, &next, &path);
        }
        KbCmd::Diff { a, b } => {
            let (a, b) = (load_kb(ctx, &a)?, load_kb(ctx, &b)?);
            let d = KbVersion::diff(&a, &b);
            let out = json!({ "a": a.version_id(), "b": b.version_id(), "diff": d });
            ctx.emit(&out, || {
                let mut s = String::new();
                for p in &d.added {
                    s.push_str(&format!("+ {p}\n"));
                }
                for p in &d.removed {
                    s.push_str(&format!("- {p}\n"));
                }
                for p in &d.changed {
                    s.push_str(&format!("~ {p}\n"));
                }
                if s.is_empty() {
                    "no differences".into()
                } else {
                    s.trim_end().into()
                }
            });
        }
    }
    Ok(())
}
