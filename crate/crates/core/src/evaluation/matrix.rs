//! Source × target × assembly Dice matrix and its aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DatasetDice;
use crate::assembly::{AssemblySpec, ModelAssembly};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// What the report layouts need to know about an assembly.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssemblyInfo {
    pub id: String,
    pub backbone: String,
    pub peft: String,
    pub decoder: String,
    pub trainable_params: usize,
}

impl AssemblyInfo {
    /// Describe `spec`, counting its trainable parameters without allocating weights.
    pub fn from_spec(spec: &AssemblySpec) -> Result<Self> {
        let trainable_params = ModelAssembly::build_shapes(spec)?.partition().trainable_count;
        Ok(Self {
            id: spec.id(),
            backbone: format!("{}-{}", spec.backbone.family, spec.backbone.size),
            peft: spec.peft.kind.to_string(),
            decoder: spec.decoder.kind.to_string(),
            trainable_params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgCell {
    pub source: String,
    pub target: String,
    pub assembly_id: String,
    /// Dice per class, class 0 first.
    pub per_class: Vec<f64>,
    /// Foreground mean.
    pub mean: f64,
}

impl DgCell {
    pub fn is_id(&self) -> bool {
        self.source == self.target
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "MatrixFile", from = "MatrixFile")]
pub struct DgMatrix {
    pub assemblies: BTreeMap<String, AssemblyInfo>,
    cells: BTreeMap<(String, String, String), DgCell>,
    /// Config hashes, seeds and similar provenance.
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    assemblies: BTreeMap<String, AssemblyInfo>,
    cells: Vec<DgCell>,
    metadata: BTreeMap<String, String>,
}

impl From<DgMatrix> for MatrixFile {
    fn from(m: DgMatrix) -> Self {
        Self {
            assemblies: m.assemblies,
            cells: m.cells.into_values().collect(),
            metadata: m.metadata,
        }
    }
}

impl From<MatrixFile> for DgMatrix {
    fn from(f: MatrixFile) -> Self {
        Self {
            assemblies: f.assemblies,
            cells: f
                .cells
                .into_iter()
                .map(|c| ((c.source.clone(), c.target.clone(), c.assembly_id.clone()), c))
                .collect(),
            metadata: f.metadata,
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl DgMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_assembly(&mut self, info: AssemblyInfo) {
        self.assemblies.insert(info.id.clone(), info);
    }

    /// Insert or replace a cell. Every Dice value must lie in [0, 1].
    pub fn insert(&mut self, cell: DgCell) -> Result<()> {
        if let Some(bad) = cell
            .per_class
            .iter()
            .chain(std::iter::once(&cell.mean))
            .find(|d| !(0.0..=1.0).contains(*d))
        {
            return Err(Error::Data(format!(
                "Dice {bad} outside [0, 1] in cell ({}, {}, {})",
                cell.source, cell.target, cell.assembly_id
            )));
        }
        let key = (cell.source.clone(), cell.target.clone(), cell.assembly_id.clone());
        self.cells.insert(key, cell);
        Ok(())
    }

    pub fn insert_scores(&mut self, source: &str, target: &str, assembly_id: &str, d: &DatasetDice) -> Result<()> {
        self.insert(DgCell {
            source: source.into(),
            target: target.into(),
            assembly_id: assembly_id.into(),
            per_class: d.per_class.clone(),
            mean: d.mean,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> impl Iterator<Item = &DgCell> {
        self.cells.values()
    }

    pub fn get(&self, source: &str, target: &str, assembly_id: &str) -> Option<&DgCell> {
        self.cells
            .get(&(source.to_string(), target.to_string(), assembly_id.to_string()))
    }

    pub fn assembly_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cells.keys().map(|k| k.2.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn sources(&self, assembly_id: &str) -> Vec<String> {
        let mut s: Vec<String> = self
            .cells
            .keys()
            .filter(|k| k.2 == assembly_id)
            .map(|k| k.0.clone())
            .collect();
        s.dedup();
        s
    }

    pub fn targets(&self, source: &str, assembly_id: &str) -> Vec<String> {
        self.cells
            .keys()
            .filter(|k| k.0 == source && k.2 == assembly_id)
            .map(|k| k.1.clone())
            .collect()
    }

    /// In-domain score of one source.
    pub fn id(&self, source: &str, assembly_id: &str) -> Option<f64> {
        self.get(source, source, assembly_id).map(|c| c.mean)
    }

    /// Mean over the off-diagonal targets of one source.
    pub fn dg_mean(&self, source: &str, assembly_id: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|(k, _)| k.0 == source && k.2 == assembly_id && k.1 != source)
            .map(|(_, c)| c.mean)
            .collect();
        mean(&v)
    }

    /// ID averaged over every source.
    pub fn id_grand(&self, assembly_id: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .sources(assembly_id)
            .iter()
            .filter_map(|s| self.id(s, assembly_id))
            .collect();
        mean(&v)
    }

    /// DG averaged over every source-target combination.
    pub fn dg_grand(&self, assembly_id: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .values()
            .filter(|c| c.assembly_id == assembly_id && !c.is_id())
            .map(|c| c.mean)
            .collect();
        mean(&v)
    }

    /// DG averaged first over targets, then over sources.
    pub fn dg_grand_over_sources(&self, assembly_id: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .sources(assembly_id)
            .iter()
            .filter_map(|s| self.dg_mean(s, assembly_id))
            .collect();
        mean(&v)
    }

    /// `(ID + DG) / 2` of the grand means.
    pub fn av(&self, assembly_id: &str) -> Option<f64> {
        Some((self.id_grand(assembly_id)? + self.dg_grand(assembly_id)?) / 2.0)
    }
}

/// Evaluate every (source, assembly) against every dataset in `datasets`.
///
/// `score` returns `None` when the trained model for a cell is missing,
/// which is an error here.
pub fn dg_matrix<F>(
    sources: &[String],
    assemblies: &[AssemblyInfo],
    datasets: &[String],
    exec: Exec,
    score: F,
) -> Result<DgMatrix>
where
    F: Fn(&str, &str, &AssemblyInfo) -> Result<Option<DatasetDice>> + Sync + Send,
{
    let mut jobs = Vec::new();
    for a in assemblies {
        for s in sources {
            for t in datasets {
                jobs.push((s.clone(), t.clone(), a.clone()));
            }
        }
    }
    let results = exec.map(&jobs, |(s, t, a)| score(s, t, a));
    let mut m = DgMatrix::new();
    for a in assemblies {
        m.add_assembly(a.clone());
    }
    for ((s, t, a), r) in jobs.iter().zip(results) {
        match r? {
            Some(d) => m.insert_scores(s, t, &a.id, &d)?,
            None => {
                return Err(Error::Data(format!(
                    "missing checkpoint for source `{s}`, assembly `{}`",
                    a.id
                )))
            }
        }
    }
    Ok(m)
}
