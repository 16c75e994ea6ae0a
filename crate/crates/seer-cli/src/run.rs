//! Orchestration: build the model from a config, dispatch the algorithm, and
//! assemble the result structures.

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};

use seer_core::criteria::{pseudo_pvalues, r_squared};
use seer_core::linalg::{GroupSpec, ProjectionBasis};
use seer_core::pls::{ln_pls2, pls1, Component};
use seer_core::seer::{
    a3, b2, backward_select, dependent_components, ConvergenceOptions, ModelComponents,
    StopRule, ThematicModel,
};

use crate::config::{parse_omega, Algorithm, Config};
use crate::ingest::Ingested;
use crate::report::{
    Coefficient, ComponentResult, FitRow, FitTable, GroupResult, ResultFile, SelectionRow,
    TraceEntry,
};

pub struct FitOutcome {
    pub result: ResultFile,
    pub selection: Option<(Vec<String>, Vec<SelectionRow>)>,
}

pub fn convergence_options(config: &Config) -> Result<ConvergenceOptions> {
    let defaults = ConvergenceOptions::default();
    Ok(ConvergenceOptions {
        component_tol: config.options.component_tol.unwrap_or(defaults.component_tol),
        inner_tol: config.options.inner_tol.unwrap_or(defaults.inner_tol),
        max_outer: config.options.max_outer.unwrap_or(defaults.max_outer),
        max_inner: config.options.max_inner.unwrap_or(defaults.max_inner),
        init: config.init_rule()?,
    })
}

fn build_model(config: &Config, data: &Ingested) -> Result<ThematicModel> {
    let dependent = data.group(&config.model.dependent).clone();
    let mut predictors = Vec::new();
    let mut counts = Vec::new();
    for section in config.predictor_groups() {
        predictors.push(data.group(&section.name).clone());
        counts.push(section.components);
    }
    let l = config.dependent_group().components;
    ThematicModel::new(
        dependent,
        predictors,
        counts,
        l,
        convergence_options(config)?,
    )
    .context("invalid thematic model")
}

/// Fits the configured algorithm and assembles the full result.
pub fn run_fit(config: &Config, data: &Ingested, algorithm: Algorithm, seed: u64) -> Result<FitOutcome> {
    match algorithm {
        Algorithm::Pls1 => fit_pls1(config, data, seed),
        Algorithm::LnPls2 => fit_ln_pls2(config, data, seed),
        Algorithm::SeerA3 => {
            let model = build_model(config, data)?;
            let mut fit = a3(&model)?;
            fit.dependent = dependent_components(&fit, &model.dependent, model.dependent_count)?;
            Ok(FitOutcome {
                result: assemble(config, data, algorithm, seed, &fit)?,
                selection: None,
            })
        }
        Algorithm::SeerB2 => {
            let model = build_model(config, data)?;
            let fit = b2(&model)?;
            Ok(FitOutcome {
                result: assemble(config, data, algorithm, seed, &fit)?,
                selection: None,
            })
        }
        Algorithm::Select => bail!("algorithm `select` runs through the select subcommand"),
    }
}

/// Backward selection: nested fit, then one removal per step.
pub fn run_select(config: &Config, data: &Ingested, seed: u64) -> Result<FitOutcome> {
    let model = build_model(config, data)?;
    let fit = a3(&model)?;
    let omega = parse_omega(config.options.omega.as_deref().unwrap_or("inv_lambda1"))?;
    let stop = StopRule {
        target_counts: config.options.target_counts.clone(),
        min_criterion: config.options.min_criterion,
    };
    let outcome = backward_select(&model, &fit, omega, &stop)?;
    let group_names: Vec<String> = model.predictors.iter().map(|g| g.name.clone()).collect();
    let rows: Vec<SelectionRow> = outcome
        .steps
        .iter()
        .map(|step| SelectionRow {
            step: step.step,
            removed_group: group_names[step.removed.group].clone(),
            removed_rank: step.removed.removed_rank(),
            scores: step.scores.clone(),
            criterion_after: step.criterion_after,
        })
        .collect();
    let mut final_fit = outcome.final_fit;
    let l = config.dependent_group().components;
    if !final_fit.all_scores().is_empty() && l > 0 {
        final_fit.dependent = dependent_components(&final_fit, &model.dependent, l)?;
    }
    Ok(FitOutcome {
        result: assemble(config, data, Algorithm::Select, seed, &final_fit)?,
        selection: Some((group_names, rows)),
    })
}

fn fit_pls1(config: &Config, data: &Ingested, seed: u64) -> Result<FitOutcome> {
    let predictors = config.predictor_groups();
    if predictors.len() != 1 {
        bail!("pls1 expects exactly one predictor group, found {}", predictors.len());
    }
    let dep_section = config.dependent_group();
    let dep = data.group(&dep_section.name);
    if dep.n_vars() != 1 {
        bail!(
            "pls1 expects a single dependent variable, group `{}` has {}",
            dep.name,
            dep.n_vars()
        );
    }
    let x_group = data.group(&predictors[0].name);
    let y = dep.data.column(0);
    let fit = pls1(x_group, &y, predictors[0].components)?;
    let mc = sequence_to_components(x_group, &fit.components, &[]);
    Ok(FitOutcome {
        result: assemble(config, data, Algorithm::Pls1, seed, &mc)?,
        selection: None,
    })
}

fn fit_ln_pls2(config: &Config, data: &Ingested, seed: u64) -> Result<FitOutcome> {
    let predictors = config.predictor_groups();
    if predictors.len() != 1 {
        bail!(
            "ln_pls2 expects exactly one predictor group, found {}",
            predictors.len()
        );
    }
    let dep_section = config.dependent_group();
    let x_group = data.group(&predictors[0].name);
    let y_group = data.group(&dep_section.name);
    let fit = ln_pls2(
        x_group,
        y_group,
        predictors[0].components,
        dep_section.components,
    )?;
    let mc = sequence_to_components(x_group, &fit.f_components, &fit.g_components);
    Ok(FitOutcome {
        result: assemble(config, data, Algorithm::LnPls2, seed, &mc)?,
        selection: None,
    })
}

/// Wraps plain component sequences in the common fit container; the trace
/// records one entry per extracted rank with its eigenvalue.
fn sequence_to_components(
    x_group: &GroupSpec,
    f_components: &[Component],
    g_components: &[Component],
) -> ModelComponents {
    let criterion_trace: Vec<(usize, f64)> = f_components
        .iter()
        .map(|c| (c.rank, c.eigenvalue))
        .collect();
    let delta_trace: Vec<(usize, f64)> = f_components.iter().map(|c| (c.rank, 0.0)).collect();
    ModelComponents {
        groups: vec![seer_core::seer::GroupComponents {
            group: x_group.name.clone(),
            components: f_components.to_vec(),
        }],
        dependent: g_components.to_vec(),
        criterion_trace,
        delta_trace,
        converged: true,
        iterations: f_components.len(),
        inner_runs: Vec::new(),
    }
}

/// Builds the serializable result: component tables plus the goodness-of-fit
/// block regressing dependent components and variables on all predictor
/// component scores.
fn assemble(
    config: &Config,
    data: &Ingested,
    algorithm: Algorithm,
    seed: u64,
    fit: &ModelComponents,
) -> Result<ResultFile> {
    let w = &data.weights;
    let dep = data.group(&config.model.dependent);

    let mut groups = Vec::new();
    for gc in &fit.groups {
        let spec = data.group(&gc.group);
        groups.push(GroupResult {
            name: gc.group.clone(),
            role: "predictor".into(),
            variables: spec.data.column_names.clone(),
            components: gc
                .components
                .iter()
                .map(|c| ComponentResult {
                    rank: c.rank,
                    eigenvalue: c.eigenvalue,
                    loading: c.loading.iter().copied().collect(),
                    score: c.score.iter().copied().collect(),
                })
                .collect(),
        });
    }
    groups.push(GroupResult {
        name: dep.name.clone(),
        role: "dependent".into(),
        variables: dep.data.column_names.clone(),
        components: fit
            .dependent
            .iter()
            .map(|c| ComponentResult {
                rank: c.rank,
                eigenvalue: c.eigenvalue,
                loading: c.loading.iter().copied().collect(),
                score: c.score.iter().copied().collect(),
            })
            .collect(),
    });

    // Regression targets: dependent components first, then the dependent
    // group's variables; regressors are every predictor component score.
    let mut labels = Vec::new();
    let mut scores: Vec<DVector<f64>> = Vec::new();
    for gc in &fit.groups {
        for c in &gc.components {
            labels.push(format!("{}:{}", gc.group, c.rank));
            scores.push(c.score.clone());
        }
    }
    let mut rows = Vec::new();
    if !scores.is_empty() {
        let n = w.len();
        let mut regressors = DMatrix::zeros(n, scores.len());
        for (j, s) in scores.iter().enumerate() {
            regressors.set_column(j, s);
        }
        let mut targets: Vec<(String, DVector<f64>)> = Vec::new();
        for c in &fit.dependent {
            targets.push((format!("G{}", c.rank), c.score.clone()));
        }
        for (k, name) in dep.data.column_names.iter().enumerate() {
            targets.push((name.clone(), dep.data.column(k)));
        }
        for (target, y) in targets {
            let r2 = r_squared(&y, &regressors, w)?;
            let coefficients = match pseudo_pvalues(&y, &regressors, w) {
                Ok(stats) => stats
                    .iter()
                    .map(|s| Coefficient {
                        value: s.coefficient,
                        p_value: Some(s.p_value),
                    })
                    .collect(),
                Err(seer_core::Error::InsufficientDof { .. }) => {
                    let basis = ProjectionBasis::new(regressors.clone(), w)?;
                    basis
                        .coefficients(&y)
                        .iter()
                        .map(|&v| Coefficient {
                            value: v,
                            p_value: None,
                        })
                        .collect()
                }
                Err(e) => return Err(e.into()),
            };
            rows.push(FitRow {
                target,
                r_squared: r2,
                coefficients,
            });
        }
    }

    Ok(ResultFile {
        algorithm: algorithm.name().into(),
        seed,
        converged: fit.converged,
        iterations: fit.iterations,
        observation_ids: data.observation_ids.clone(),
        weights: w.as_vector().iter().copied().collect(),
        criterion_trace: fit
            .criterion_trace
            .iter()
            .zip(fit.delta_trace.iter().map(|&(_, d)| d).chain(std::iter::repeat(0.0)))
            .map(|(&(iteration, criterion), max_delta)| TraceEntry {
                iteration,
                criterion,
                max_delta,
            })
            .collect(),
        groups,
        fit_table: FitTable {
            component_labels: labels,
            rows,
        },
    })
}
