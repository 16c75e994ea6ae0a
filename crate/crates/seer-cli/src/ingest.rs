//! CSV ingestion: one table in, one standardized dataset per group out.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;

use seer_core::linalg::{
    make_metric, standardize, GroupSpec, StandardizeMode, WeightedDataset, Weights,
};

use crate::config::{parse_metric_kind, Config};

pub struct Ingested {
    /// Groups in config order (dependent included at its configured position).
    pub groups: Vec<GroupSpec>,
    pub weights: Weights,
    pub observation_ids: Vec<String>,
}

impl Ingested {
    pub fn group(&self, name: &str) -> &GroupSpec {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .expect("validated: group exists")
    }
}

/// Reads the configured CSV and builds per-group standardized datasets sharing
/// one set of observation weights.
pub fn ingest(config: &Config, csv_path: &Path) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .with_context(|| format!("cannot open dataset `{}`", csv_path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("dataset has no header row")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let rows: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .context("cannot read dataset rows")?;
    if rows.len() < 2 {
        bail!("dataset has {} rows; need at least 2", rows.len());
    }
    let n = rows.len();

    let column_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow::anyhow!("variable `{name}` is missing from the dataset"))
    };
    let numeric_column = |name: &str| -> Result<Vec<f64>> {
        let idx = column_index(name)?;
        rows.iter()
            .enumerate()
            .map(|(i, row)| {
                let cell = row.get(idx).unwrap_or("");
                cell.trim().parse::<f64>().map_err(|_| {
                    anyhow::anyhow!(
                        "non-numeric cell `{cell}` at row {} column `{name}`",
                        i + 2
                    )
                })
            })
            .collect()
    };

    let weights = match &config.dataset.weight_column {
        Some(name) => {
            let raw = numeric_column(name)?;
            if let Some((i, &v)) = raw.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                bail!("weight column `{name}` has non-positive value {v} at row {}", i + 2);
            }
            Weights::new(raw).context("invalid observation weights")?
        }
        None => Weights::uniform(n),
    };

    // Observation ids: the first column when it is not numeric and not used as
    // a variable or weight, row numbers otherwise.
    let used_names: Vec<&String> = config
        .groups
        .iter()
        .flat_map(|g| g.variables.iter())
        .chain(config.dataset.weight_column.iter())
        .collect();
    let first_is_free = headers
        .first()
        .map(|h| !used_names.contains(&h))
        .unwrap_or(false);
    let first_is_text = first_is_free
        && rows
            .iter()
            .any(|row| row.get(0).map(|c| c.trim().parse::<f64>().is_err()).unwrap_or(true));
    let observation_ids: Vec<String> = if first_is_text {
        rows.iter()
            .map(|row| row.get(0).unwrap_or("").trim().to_string())
            .collect()
    } else {
        (1..=n).map(|i| i.to_string()).collect()
    };

    let mut groups = Vec::with_capacity(config.groups.len());
    for section in &config.groups {
        let mut data = DMatrix::zeros(n, section.variables.len());
        for (j, var) in section.variables.iter().enumerate() {
            let col = numeric_column(var)?;
            for (i, v) in col.into_iter().enumerate() {
                data[(i, j)] = v;
            }
        }
        let ds: WeightedDataset = standardize(
            &data,
            section.variables.clone(),
            &weights,
            StandardizeMode::CenterScale,
        )
        .with_context(|| format!("group `{}`", section.name))?;
        let kind = parse_metric_kind(&section.metric, &section.name)?;
        let blocks: Option<Vec<Vec<usize>>> = section.blocks.as_ref().map(|blocks| {
            blocks
                .iter()
                .map(|block| {
                    block
                        .iter()
                        .map(|v| {
                            section
                                .variables
                                .iter()
                                .position(|gv| gv == v)
                                .expect("validated: block variables belong to the group")
                        })
                        .collect()
                })
                .collect()
        });
        let metric = make_metric(kind, &ds, blocks.as_deref())
            .with_context(|| format!("group `{}` metric", section.name))?;
        groups.push(
            GroupSpec::new(section.name.clone(), ds, metric)
                .with_context(|| format!("group `{}`", section.name))?,
        );
    }

    Ok(Ingested {
        groups,
        weights,
        observation_ids,
    })
}
