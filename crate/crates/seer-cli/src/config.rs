//! Declarative model configuration.
//!
//! A fit is described by a TOML file with four sections:
//!
//! ```toml
//! [dataset]
//! csv = "towns.csv"
//! weight_column = "pop"        # optional; uniform weights otherwise
//!
//! [[group]]
//! name = "economy"
//! variables = ["AvgWage", "Unemployt"]
//! metric = "identity"          # identity | inverse_gram | block_inverse
//! components = 2
//!
//! [[group]]
//! name = "demography"
//! variables = ["PopGrowth", "Ageing"]
//! components = 2
//!
//! [model]
//! dependent = "demography"
//! algorithm = "seer_a3"        # pls1 | ln_pls2 | seer_a3 | seer_b2 | select
//!
//! [options]
//! component_tol = 1e-9
//! inner_tol = 1e-9
//! max_outer = 200
//! max_inner = 200
//! init = "first_pc"            # or { column = 2 } or { given = [[...], ...] }
//! omega = "inv_lambda1"        # inv_inertia | inv_lambda1
//! out_dir = "results"
//! ```
//!
//! `block_inverse` groups additionally list `blocks`, a partition of the
//! group's variables by name.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use seer_core::linalg::MetricKind;
use seer_core::seer::{InitRule, OmegaKind};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSection,
    #[serde(rename = "group")]
    pub groups: Vec<GroupSection>,
    pub model: ModelSection,
    #[serde(default)]
    pub options: OptionsSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub csv: PathBuf,
    pub weight_column: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    pub name: String,
    pub variables: Vec<String>,
    #[serde(default = "default_metric")]
    pub metric: String,
    pub blocks: Option<Vec<Vec<String>>>,
    #[serde(default = "default_components")]
    pub components: usize,
}

fn default_metric() -> String {
    "identity".into()
}

fn default_components() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dependent: String,
    pub algorithm: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsSection {
    pub component_tol: Option<f64>,
    pub inner_tol: Option<f64>,
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub init: Option<InitSection>,
    pub omega: Option<String>,
    pub target_counts: Option<Vec<usize>>,
    pub min_criterion: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum InitSection {
    Name(String),
    Column { column: usize },
    Given { given: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Pls1,
    LnPls2,
    SeerA3,
    SeerB2,
    Select,
}

impl Algorithm {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "pls1" => Algorithm::Pls1,
            "ln_pls2" => Algorithm::LnPls2,
            "seer_a3" => Algorithm::SeerA3,
            "seer_b2" => Algorithm::SeerB2,
            "select" => Algorithm::Select,
            other => bail!(
                "unknown algorithm `{other}` (expected pls1, ln_pls2, seer_a3, seer_b2 or select)"
            ),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pls1 => "pls1",
            Algorithm::LnPls2 => "ln_pls2",
            Algorithm::SeerA3 => "seer_a3",
            Algorithm::SeerB2 => "seer_b2",
            Algorithm::Select => "select",
        }
    }
}

pub fn parse_metric_kind(name: &str, group: &str) -> Result<MetricKind> {
    Ok(match name {
        "identity" => MetricKind::Identity,
        "inverse_gram" => MetricKind::InverseGram,
        "block_inverse" => MetricKind::BlockInverse,
        other => bail!(
            "group `{group}`: unknown metric `{other}` (expected identity, inverse_gram or block_inverse)"
        ),
    })
}

pub fn parse_omega(name: &str) -> Result<OmegaKind> {
    Ok(match name {
        "inv_inertia" => OmegaKind::InvInertia,
        "inv_lambda1" => OmegaKind::InvLambda1,
        other => bail!("unknown omega `{other}` (expected inv_inertia or inv_lambda1)"),
    })
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config `{}`", path.display()))?;
        let config: Config = toml::from_str(&text)
            .with_context(|| format!("cannot parse config `{}`", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            bail!("config defines no groups");
        }
        let mut group_names = HashSet::new();
        let mut seen_vars: HashSet<&str> = HashSet::new();
        for g in &self.groups {
            if !group_names.insert(g.name.as_str()) {
                bail!("group `{}` is defined twice", g.name);
            }
            if g.variables.is_empty() {
                bail!("group `{}` lists no variables", g.name);
            }
            for v in &g.variables {
                if !seen_vars.insert(v.as_str()) {
                    bail!("variable `{v}` is assigned to two groups");
                }
            }
            let kind = parse_metric_kind(&g.metric, &g.name)?;
            match (kind, &g.blocks) {
                (MetricKind::BlockInverse, None) => {
                    bail!("group `{}` uses block_inverse but lists no blocks", g.name)
                }
                (MetricKind::BlockInverse, Some(blocks)) => {
                    let mut covered: HashSet<&str> = HashSet::new();
                    for block in blocks {
                        for v in block {
                            if !g.variables.iter().any(|gv| gv == v) {
                                bail!("group `{}`: block variable `{v}` is not in the group", g.name);
                            }
                            if !covered.insert(v.as_str()) {
                                bail!("group `{}`: block variable `{v}` appears twice", g.name);
                            }
                        }
                    }
                    if covered.len() != g.variables.len() {
                        bail!("group `{}`: blocks must cover every variable", g.name);
                    }
                }
                (_, Some(_)) => {
                    bail!("group `{}` lists blocks but its metric is not block_inverse", g.name)
                }
                _ => {}
            }
        }
        if !group_names.contains(self.model.dependent.as_str()) {
            bail!("dependent group `{}` is not defined", self.model.dependent);
        }
        if let Some(w) = &self.dataset.weight_column {
            if seen_vars.contains(w.as_str()) {
                bail!("weight column `{w}` cannot also be a group variable");
            }
        }
        Algorithm::parse(&self.model.algorithm)?;
        if let Some(omega) = &self.options.omega {
            parse_omega(omega)?;
        }
        if let Some(ts) = &self.options.target_counts {
            if ts.len() != self.groups.len() - 1 {
                bail!(
                    "target_counts has {} entries for {} predictor groups",
                    ts.len(),
                    self.groups.len() - 1
                );
            }
        }
        Ok(())
    }

    pub fn predictor_groups(&self) -> Vec<&GroupSection> {
        self.groups
            .iter()
            .filter(|g| g.name != self.model.dependent)
            .collect()
    }

    pub fn dependent_group(&self) -> &GroupSection {
        self.groups
            .iter()
            .find(|g| g.name == self.model.dependent)
            .expect("validated: dependent group exists")
    }

    pub fn init_rule(&self) -> Result<InitRule> {
        Ok(match &self.options.init {
            None => InitRule::FirstPc,
            Some(InitSection::Name(name)) if name == "first_pc" => InitRule::FirstPc,
            Some(InitSection::Name(name)) => bail!("unknown init `{name}`"),
            Some(InitSection::Column { column }) => InitRule::Column(*column),
            Some(InitSection::Given { given }) => InitRule::Given(
                given
                    .iter()
                    .map(|v| nalgebra::DVector::from_vec(v.clone()))
                    .collect(),
            ),
        })
    }
}
