//! Command-line surface for thematic latent-component regression.

mod config;
mod ingest;
mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use config::{Algorithm, Config};
use report::{PlaneRequest, PlaneVariables, ResultFile};

/// Environment variable overriding the output directory (below `--out`).
const OUT_DIR_ENV: &str = "SEER_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "seer",
    about = "Latent component regression of a dependent variable group on thematic predictor groups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model and write components, tables and the JSON result.
    Fit(FitArgs),
    /// Backward component selection: remove the weakest last-rank component
    /// per step, refitting after each removal.
    Select(FitArgs),
    /// Export thematic plane coordinates from a saved fit.
    Planes(PlanesArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Model configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: SEER_OUT_DIR, then the config's out_dir,
    /// then `seer-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recorded in the result file; fits are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Thematic planes to export, like `economy:1,2` (repeatable).
    #[arg(long = "planes")]
    planes: Vec<String>,
    /// Override the configured algorithm.
    #[arg(long)]
    algorithm: Option<String>,
    /// Correlate all variables on exported planes, not just the plane group's.
    #[arg(long)]
    all_variables: bool,
}

#[derive(Args)]
struct PlanesArgs {
    /// Model configuration (TOML) used to produce the fit.
    #[arg(long)]
    config: PathBuf,
    /// A result.json written by `seer fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Plane requests like `economy:1,2` (repeatable).
    #[arg(long = "pair", required = true)]
    pairs: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Correlate all variables, not just the plane group's.
    #[arg(long)]
    all_variables: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => fit_command(&args, false),
        Command::Select(args) => fit_command(&args, true),
        Command::Planes(args) => planes_command(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn output_dir(cli_out: &Option<PathBuf>, config: &Config) -> PathBuf {
    if let Some(dir) = cli_out {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    config
        .options
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("seer-out"))
}

fn resolve_csv_path(config_path: &Path, config: &Config) -> PathBuf {
    let csv = &config.dataset.csv;
    if csv.is_absolute() {
        csv.clone()
    } else {
        config_path
            .parent()
            .map(|dir| dir.join(csv))
            .unwrap_or_else(|| csv.clone())
    }
}

fn fit_command(args: &FitArgs, select: bool) -> Result<()> {
    let config = Config::load(&args.config)?;
    let algorithm = match &args.algorithm {
        Some(name) => Algorithm::parse(name)?,
        None => Algorithm::parse(&config.model.algorithm)?,
    };
    let csv_path = resolve_csv_path(&args.config, &config);
    let data = ingest::ingest(&config, &csv_path)?;
    let out_dir = output_dir(&args.out, &config);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory `{}`", out_dir.display()))?;

    let outcome = if select || algorithm == Algorithm::Select {
        run::run_select(&config, &data, args.seed)?
    } else {
        run::run_fit(&config, &data, algorithm, args.seed)?
    };

    outcome.result.save(&out_dir.join("result.json"))?;
    report::write_components_tsv(&outcome.result, &out_dir.join("components.tsv"))?;
    report::write_fit_table_tsv(&outcome.result, &out_dir.join("fit_table.tsv"))?;
    report::write_convergence_tsv(&outcome.result, &out_dir.join("convergence.tsv"))?;
    if let Some((group_names, rows)) = &outcome.selection {
        report::write_selection_tsv(group_names, rows, &out_dir.join("selection.tsv"))?;
    }
    for plane in &args.planes {
        let request = PlaneRequest::parse(plane)?;
        export_plane(
            &config,
            &data,
            &outcome.result,
            &request,
            args.all_variables,
            &out_dir,
        )?;
    }
    println!(
        "{}: wrote results to {}",
        if select { "select" } else { "fit" },
        out_dir.display()
    );
    Ok(())
}

fn planes_command(args: &PlanesArgs) -> Result<()> {
    let config = Config::load(&args.config)?;
    let csv_path = resolve_csv_path(&args.config, &config);
    let data = ingest::ingest(&config, &csv_path)?;
    let result = ResultFile::load(&args.fit)?;
    let out_dir = output_dir(&args.out, &config);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory `{}`", out_dir.display()))?;
    for pair in &args.pairs {
        let request = PlaneRequest::parse(pair)?;
        export_plane(&config, &data, &result, &request, args.all_variables, &out_dir)?;
    }
    println!("planes: wrote results to {}", out_dir.display());
    Ok(())
}

fn export_plane(
    config: &Config,
    data: &ingest::Ingested,
    result: &ResultFile,
    request: &PlaneRequest,
    all_variables: bool,
    out_dir: &Path,
) -> Result<()> {
    let mut names: Vec<String> = Vec::new();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let push_group = |names: &mut Vec<String>, columns: &mut Vec<DVector<f64>>, g: &str| {
        let group = data.group(g);
        for (k, name) in group.data.column_names.iter().enumerate() {
            names.push(name.clone());
            columns.push(group.data.column(k));
        }
    };
    if all_variables {
        for section in &config.groups {
            push_group(&mut names, &mut columns, &section.name);
        }
    } else {
        if !config.groups.iter().any(|g| g.name == request.group) {
            anyhow::bail!(
                "unknown component group `{}` in plane request",
                request.group
            );
        }
        push_group(&mut names, &mut columns, &request.group);
    }
    let vars = PlaneVariables {
        names,
        columns,
        weights: &data.weights,
    };
    let path = out_dir.join(format!(
        "plane_{}_{}_{}.tsv",
        request.group, request.first, request.second
    ));
    report::write_plane_tsv(request, result, &vars, &result.observation_ids, &path)
}
