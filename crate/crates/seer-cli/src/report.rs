//! Result files: human tab-separated tables, the machine-readable JSON
//! result, and thematic plane exports.
//!
//! The JSON schema is stable: top-level keys `algorithm`, `seed`, `converged`,
//! `iterations`, `observation_ids`, `weights`, `criterion_trace`, `groups`
//! and `fit_table`. Numbers are written with full round-trip precision;
//! human tables round to 3 decimals.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use seer_core::criteria::significance_stars;
use seer_core::linalg::Weights;

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultFile {
    pub algorithm: String,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub observation_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub criterion_trace: Vec<TraceEntry>,
    pub groups: Vec<GroupResult>,
    pub fit_table: FitTable,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub criterion: f64,
    pub max_delta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    /// "predictor" or "dependent".
    pub role: String,
    pub variables: Vec<String>,
    pub components: Vec<ComponentResult>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComponentResult {
    pub rank: usize,
    pub eigenvalue: f64,
    pub loading: Vec<f64>,
    pub score: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitTable {
    /// Labels like "economy:1", in regression order.
    pub component_labels: Vec<String>,
    pub rows: Vec<FitRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitRow {
    /// A dependent component label ("G1", …) or a dependent variable name.
    pub target: String,
    pub r_squared: f64,
    pub coefficients: Vec<Coefficient>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Coefficient {
    pub value: f64,
    /// Absent when the fit leaves no residual degrees of freedom.
    pub p_value: Option<f64>,
}

impl ResultFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).context("serialize result")?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("write `{}`", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read result file `{}`", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("cannot parse result file `{}`", path.display()))
    }

    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// group, rank, eigenvalue and loading entries, one row per variable.
pub fn write_components_tsv(result: &ResultFile, path: &Path) -> Result<()> {
    let mut out = String::from("group\trank\teigenvalue\tvariable\tloading\n");
    for group in &result.groups {
        for comp in &group.components {
            for (var, value) in group.variables.iter().zip(&comp.loading) {
                out.push_str(&format!(
                    "{}\t{}\t{:.3}\t{}\t{:.3}\n",
                    group.name, comp.rank, comp.eigenvalue, var, value
                ));
            }
        }
    }
    fs::write(path, out).with_context(|| format!("write `{}`", path.display()))?;
    Ok(())
}

/// Goodness-of-fit table: one row per modelled target, coefficient cells
/// star-coded and blanked when p ≥ 0.05 (cells without a p-value keep the
/// coefficient).
pub fn write_fit_table_tsv(result: &ResultFile, path: &Path) -> Result<()> {
    let mut out = String::from("target\tR2");
    for label in &result.fit_table.component_labels {
        out.push('\t');
        out.push_str(label);
    }
    out.push('\n');
    for row in &result.fit_table.rows {
        out.push_str(&format!("{}\t{:.3}", row.target, row.r_squared));
        for coef in &row.coefficients {
            out.push('\t');
            match coef.p_value {
                Some(p) if p < 0.05 => {
                    out.push_str(&format!("{:.3} {}", coef.value, significance_stars(p)))
                }
                Some(_) => {}
                None => out.push_str(&format!("{:.3}", coef.value)),
            }
        }
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("write `{}`", path.display()))?;
    Ok(())
}

pub fn write_convergence_tsv(result: &ResultFile, path: &Path) -> Result<()> {
    let mut out = String::from("iteration\tcriterion\tmax_component_delta\n");
    for entry in &result.criterion_trace {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            entry.iteration, entry.criterion, entry.max_delta
        ));
    }
    fs::write(path, out).with_context(|| format!("write `{}`", path.display()))?;
    Ok(())
}

/// One backward-selection step per row.
pub struct SelectionRow {
    pub step: usize,
    pub removed_group: String,
    pub removed_rank: usize,
    pub scores: Vec<Option<f64>>,
    pub criterion_after: f64,
}

pub fn write_selection_tsv(
    group_names: &[String],
    rows: &[SelectionRow],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("step\tremoved_group\tremoved_rank");
    for name in group_names {
        out.push_str(&format!("\tscore_{name}"));
    }
    out.push_str("\trefit_criterion\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{}",
            row.step, row.removed_group, row.removed_rank
        ));
        for score in &row.scores {
            match score {
                Some(s) => out.push_str(&format!("\t{s}")),
                None => out.push('\t'),
            }
        }
        out.push_str(&format!("\t{}\n", row.criterion_after));
    }
    fs::write(path, out).with_context(|| format!("write `{}`", path.display()))?;
    Ok(())
}

/// A parsed plane request: group name plus two 1-based component ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaneRequest {
    pub group: String,
    pub first: usize,
    pub second: usize,
}

impl PlaneRequest {
    /// Parses `group:j,j'` with 1-based ranks.
    pub fn parse(text: &str) -> Result<Self> {
        let (group, ranks) = text
            .split_once(':')
            .ok_or_else(|| anyhow::anyhow!("plane `{text}` must look like group:1,2"))?;
        let (a, b) = ranks
            .split_once(',')
            .ok_or_else(|| anyhow::anyhow!("plane `{text}` must name two ranks like group:1,2"))?;
        let first: usize = a
            .trim()
            .parse()
            .with_context(|| format!("plane `{text}`: bad rank `{a}`"))?;
        let second: usize = b
            .trim()
            .parse()
            .with_context(|| format!("plane `{text}`: bad rank `{b}`"))?;
        if first == 0 || second == 0 {
            bail!("plane `{text}`: ranks are 1-based");
        }
        Ok(Self {
            group: group.trim().to_string(),
            first,
            second,
        })
    }
}

/// Variable columns available for plane correlations.
pub struct PlaneVariables<'a> {
    pub names: Vec<String>,
    pub columns: Vec<DVector<f64>>,
    pub weights: &'a Weights,
}

/// Writes one thematic plane: correlations of the chosen variables with the
/// two component scores, then standardized observation scores.
pub fn write_plane_tsv(
    request: &PlaneRequest,
    result: &ResultFile,
    vars: &PlaneVariables,
    observation_ids: &[String],
    path: &Path,
) -> Result<()> {
    let group = result.group(&request.group).ok_or_else(|| {
        anyhow::anyhow!("unknown component group `{}` in plane request", request.group)
    })?;
    let fetch = |rank: usize| -> Result<DVector<f64>> {
        group
            .components
            .iter()
            .find(|c| c.rank == rank)
            .map(|c| DVector::from_vec(c.score.clone()))
            .ok_or_else(|| {
                anyhow::anyhow!(
                    "unknown component `{}:{rank}` (group has {} components)",
                    request.group,
                    group.components.len()
                )
            })
    };
    let f1 = fetch(request.first)?;
    let f2 = fetch(request.second)?;
    let w = vars.weights;
    let corr = |v: &DVector<f64>, f: &DVector<f64>| w.dot(v, f) / (w.norm(v) * w.norm(f));
    let mut out = format!(
        "kind\tid\tcomp_{}\tcomp_{}\n",
        request.first, request.second
    );
    for (name, col) in vars.names.iter().zip(&vars.columns) {
        out.push_str(&format!(
            "variable\t{}\t{}\t{}\n",
            name,
            corr(col, &f1),
            corr(col, &f2)
        ));
    }
    let s1 = w.unit(&f1);
    let s2 = w.unit(&f2);
    for (i, id) in observation_ids.iter().enumerate() {
        out.push_str(&format!("observation\t{}\t{}\t{}\n", id, s1[i], s2[i]));
    }
    fs::write(path, out).with_context(|| format!("write `{}`", path.display()))?;
    Ok(())
}
