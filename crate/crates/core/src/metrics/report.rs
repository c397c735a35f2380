use serde::{Deserialize, Serialize};

use super::MetricConfig;
use crate::kb::ConceptId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Hpq,
    Pq,
    PartPq,
}

/// Whether a class has parts in the knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Np,
    P,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: ConceptId,
    pub label: String,
    pub subset: Subset,
    pub score: f64,
    /// Score with part-less ground-truth instances left out of matching.
    pub pq_dagger: Option<f64>,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kb_versions: Vec<String>,
    pub images: usize,
    pub config: MetricConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub classes: Vec<ClassRow>,
    /// Mean over every reported class.
    pub all: Option<f64>,
    pub np: Option<f64>,
    pub p: Option<f64>,
    pub p_dagger: Option<f64>,
    pub provenance: Provenance,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn from_rows(metric: MetricKind, classes: Vec<ClassRow>, provenance: Provenance) -> Self {
        let all = mean(classes.iter().map(|r| r.score));
        let np = mean(classes.iter().filter(|r| r.subset == Subset::Np).map(|r| r.score));
        let p = mean(classes.iter().filter(|r| r.subset == Subset::P).map(|r| r.score));
        let p_dagger = mean(classes.iter().filter(|r| r.subset == Subset::P).filter_map(|r| r.pq_dagger));
        Self { metric, classes, all, np, p, p_dagger, provenance }
    }

    pub fn score(&self, subset: Option<Subset>, dagger: bool) -> Option<f64> {
        match (subset, dagger) {
            (_, true) => self.p_dagger,
            (None, false) => self.all,
            (Some(Subset::Np), false) => self.np,
            (Some(Subset::P), false) => self.p,
        }
    }

    pub fn row(&self, class: ConceptId) -> Option<&ClassRow> {
        self.classes.iter().find(|r| r.class == class)
    }
}
