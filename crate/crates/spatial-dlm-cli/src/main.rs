//! Command-line driver: fit, forecast, simulate, compare and validate
//! subcommands over the panel/geometry/config file formats.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spatial_dlm::io::{
    load_recipe, load_run_config, read_geometry_csv, read_panel_csv, write_chain_csv,
    write_chain_meta, write_forecast_csv, write_geometry_csv, write_latent_paths_csv,
    write_panel_csv, write_predictive_draws_csv, write_rmse_csv, write_run_manifest,
    write_summary_csv, write_summary_text, ModelKind, PanelIngest, RunConfig, RunManifest,
};
use spatial_dlm::mcmc::{
    fit_single_zone, posterior_summaries, two_stage_fit, SingleZoneFit, TwoStageFit,
};
use spatial_dlm::model::{PanelData, ZoneGeometry};
use spatial_dlm::predict::{
    forecast_from_fit, forecast_single_from_fit, rmse_by_zone, summarize_draws,
    within_sample_predictive, within_sample_predictive_single, ForecastResult,
};
use spatial_dlm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "spatial-dlm",
    version,
    about = "Bayesian seasonal-harmonic dynamic linear models with spatially correlated levels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML); for `simulate` this is the recipe.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for draw-parallel stages (0 = library default).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model and persist chain, latent paths and summaries.
    Fit(CommonArgs),
    /// Withhold the configured holdout, refit, forecast and report coverage.
    Forecast(CommonArgs),
    /// Generate synthetic panel/geometry/truth files from a recipe.
    Simulate(CommonArgs),
    /// Fit single-zone and joint models on the same panel and compare RMSE.
    Compare(CommonArgs),
    /// Parse and validate the configured inputs, reporting every violation.
    Validate(CommonArgs),
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Parse(_) => 2,
        Error::Validation(_) => 3,
        Error::Numerical(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn setup_threads(threads: usize) {
    if threads > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

struct LoadedRun {
    config: RunConfig,
    panel: PanelData,
    zone_ids: Vec<String>,
    geometry: Option<ZoneGeometry>,
    warnings: Vec<String>,
}

fn load_run(args: &CommonArgs) -> Result<LoadedRun> {
    let mut config = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
        config.mcmc.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    if let Some(output) = &args.output {
        config.output = output.clone();
    }
    setup_threads(config.threads);
    let PanelIngest {
        panel,
        zone_ids,
        warnings,
    } = read_panel_csv(&config.panel_path)?;
    let geometry = match &config.geometry_path {
        Some(path) => {
            let geometry = read_geometry_csv(path)?;
            if geometry.zone_ids() != zone_ids.as_slice() {
                return Err(Error::validation(format!(
                    "panel zones {:?} do not match geometry zones {:?}",
                    zone_ids,
                    geometry.zone_ids()
                )));
            }
            Some(geometry)
        }
        None => None,
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(LoadedRun {
        config,
        panel,
        zone_ids,
        geometry,
        warnings,
    })
}

fn create_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn fit_joint(run: &LoadedRun, panel: &PanelData) -> Result<TwoStageFit> {
    let geometry = run
        .geometry
        .as_ref()
        .ok_or_else(|| Error::validation("joint fits require a geometry file"))?;
    two_stage_fit(
        panel,
        geometry,
        &run.config.priors,
        &run.config.harmonic,
        run.config.kernel,
        &run.config.mcmc,
        run.config.ffbs_draws,
    )
}

fn fit_all_single(run: &LoadedRun, panel: &PanelData) -> Result<Vec<SingleZoneFit>> {
    (0..panel.n_zones())
        .map(|j| {
            let zone_panel = panel.zone_panel(j);
            let mut mcmc = run.config.mcmc.clone();
            mcmc.seed = spatial_dlm::derive_seed(run.config.mcmc.seed, 0x7a6f6e65, j as u64);
            fit_single_zone(
                &zone_panel,
                &run.config.priors,
                &run.config.single_init,
                &run.config.harmonic,
                &mcmc,
                run.config.ffbs_draws,
            )
        })
        .collect()
}

fn cmd_fit(args: &CommonArgs) -> Result<()> {
    let run = load_run(args)?;
    let out = &run.config.output;
    create_output_dir(out)?;
    let mut manifest = RunManifest::new(
        "fit",
        run.config.seed,
        run.config.threads,
        run.config.clone(),
    );
    manifest
        .inputs
        .push(run.config.panel_path.display().to_string());
    if let Some(g) = &run.config.geometry_path {
        manifest.inputs.push(g.display().to_string());
    }
    manifest.warnings = run.warnings.clone();

    match run.config.model {
        ModelKind::Joint => {
            let fit = fit_joint(&run, &run.panel)?;
            write_chain_csv(&fit.chain, File::create(out.join("chain.csv"))?)?;
            write_chain_meta(&fit.chain, File::create(out.join("chain_meta.json"))?)?;
            write_latent_paths_csv(
                &fit.latent_paths,
                run.panel.grid().times(),
                run.panel.grid().origin_time(),
                &run.zone_ids,
                File::create(out.join("latent_paths.csv"))?,
            )?;
            let summaries = posterior_summaries(&fit.chain);
            write_summary_csv(&summaries, File::create(out.join("summary.csv"))?)?;
            write_summary_text(
                "joint model posterior",
                &summaries,
                fit.chain.acceptance_rate,
                File::create(out.join("summary.txt"))?,
            )?;
            for name in [
                "chain.csv",
                "chain_meta.json",
                "latent_paths.csv",
                "summary.csv",
                "summary.txt",
            ] {
                manifest.outputs.push(name.to_string());
            }
        }
        ModelKind::SingleZone => {
            let fits = fit_all_single(&run, &run.panel)?;
            for (j, fit) in fits.iter().enumerate() {
                let zone = &run.zone_ids[j];
                let chain_name = format!("chain_{zone}.csv");
                let meta_name = format!("chain_meta_{zone}.json");
                let paths_name = format!("latent_paths_{zone}.csv");
                let summary_csv = format!("summary_{zone}.csv");
                let summary_txt = format!("summary_{zone}.txt");
                write_chain_csv(&fit.chain, File::create(out.join(&chain_name))?)?;
                write_chain_meta(&fit.chain, File::create(out.join(&meta_name))?)?;
                write_latent_paths_csv(
                    &fit.latent_paths,
                    run.panel.grid().times(),
                    run.panel.grid().origin_time(),
                    &[
                        "theta1".to_string(),
                        "theta2".to_string(),
                        "theta3".to_string(),
                    ],
                    File::create(out.join(&paths_name))?,
                )?;
                let summaries = posterior_summaries(&fit.chain);
                write_summary_csv(&summaries, File::create(out.join(&summary_csv))?)?;
                write_summary_text(
                    &format!("single-zone posterior: {zone}"),
                    &summaries,
                    fit.chain.acceptance_rate,
                    File::create(out.join(&summary_txt))?,
                )?;
                for name in [chain_name, meta_name, paths_name, summary_csv, summary_txt] {
                    manifest.outputs.push(name);
                }
            }
        }
    }
    write_run_manifest(&manifest, out)?;
    println!("fit complete; outputs in {}", out.display());
    Ok(())
}

/// Fraction of held-out observations covered by the forecast band, per zone.
fn coverage_report(
    held_out: &PanelData,
    forecast: &ForecastResult,
    zone_ids: &[String],
) -> (Vec<(String, f64, usize)>, f64) {
    let mut per_zone = Vec::new();
    let mut total_hits = 0usize;
    let mut total_count = 0usize;
    for j in 0..held_out.n_zones() {
        let mut hits = 0usize;
        let mut count = 0usize;
        for (h, &t) in forecast.horizons().iter().enumerate() {
            if let Some(i) = held_out
                .grid()
                .times()
                .iter()
                .position(|&ht| (ht - t).abs() < 1e-9)
            {
                if let Some(x) = held_out.value(i, j) {
                    count += 1;
                    if x >= forecast.summary.lower[(h, j)] && x <= forecast.summary.upper[(h, j)] {
                        hits += 1;
                    }
                }
            }
        }
        let frac = if count == 0 {
            f64::NAN
        } else {
            hits as f64 / count as f64
        };
        per_zone.push((zone_ids[j].clone(), frac, count));
        total_hits += hits;
        total_count += count;
    }
    let overall = if total_count == 0 {
        f64::NAN
    } else {
        total_hits as f64 / total_count as f64
    };
    (per_zone, overall)
}

fn held_out_tail(panel: &PanelData, holdout: usize) -> Result<PanelData> {
    let n = panel.n_times();
    let keep = n - holdout;
    let times = panel.grid().times()[keep..].to_vec();
    let grid = spatial_dlm::model::TimeGrid::with_origin(panel.grid().times()[keep - 1], times)?;
    let values = panel.values().rows(keep, holdout).into_owned();
    let observed = panel.observed().rows(keep, holdout).into_owned();
    PanelData::new(grid, values, observed)
}

fn cmd_forecast(args: &CommonArgs) -> Result<()> {
    let run = load_run(args)?;
    if run.config.forecast_horizon == 0 {
        return Err(Error::validation("forecast horizon must be at least 1"));
    }
    if run.config.holdout >= run.panel.n_times() {
        return Err(Error::validation(format!(
            "holdout {} must be smaller than the {} observed time points",
            run.config.holdout,
            run.panel.n_times()
        )));
    }
    let out = &run.config.output;
    create_output_dir(out)?;
    let fitted_panel = if run.config.holdout > 0 {
        run.panel.truncated(run.config.holdout)?
    } else {
        run.panel.clone()
    };
    let mut manifest = RunManifest::new(
        "forecast",
        run.config.seed,
        run.config.threads,
        run.config.clone(),
    );
    manifest
        .inputs
        .push(run.config.panel_path.display().to_string());
    manifest.warnings = run.warnings.clone();

    let forecast_seed = spatial_dlm::derive_seed(run.config.seed, 0x66_63, 0);
    match run.config.model {
        ModelKind::Joint => {
            let geometry = run.geometry.as_ref().unwrap();
            let fit = fit_joint(&run, &fitted_panel)?;
            let forecast = forecast_from_fit(
                &fit,
                &fitted_panel,
                geometry,
                &run.config.harmonic,
                run.config.forecast_horizon,
                forecast_seed,
                0.95,
            )?;
            write_forecast_csv(
                &forecast.summary,
                &run.zone_ids,
                File::create(out.join("forecast.csv"))?,
            )?;
            write_predictive_draws_csv(
                &forecast.draws,
                &run.zone_ids,
                File::create(out.join("forecast_draws.csv"))?,
            )?;
            emit_coverage(&run, &forecast, out, &mut manifest)?;
        }
        ModelKind::SingleZone => {
            let fits = fit_all_single(&run, &fitted_panel)?;
            // Assemble per-zone single forecasts into one panel-wide result.
            let mut combined: Option<ForecastResult> = None;
            for (j, fit) in fits.iter().enumerate() {
                let zone_panel = fitted_panel.zone_panel(j);
                let fc = forecast_single_from_fit(
                    fit,
                    &zone_panel,
                    &run.config.single_init,
                    &run.config.harmonic,
                    run.config.forecast_horizon,
                    spatial_dlm::derive_seed(forecast_seed, 0x7a, j as u64),
                    0.95,
                )?;
                combined = Some(match combined {
                    None => fc,
                    Some(mut acc) => {
                        for (dst, src) in acc.draws.draws.iter_mut().zip(&fc.draws.draws) {
                            *dst = stack_columns(dst, src);
                        }
                        acc.summary.mean = stack_columns(&acc.summary.mean, &fc.summary.mean);
                        acc.summary.lower = stack_columns(&acc.summary.lower, &fc.summary.lower);
                        acc.summary.upper = stack_columns(&acc.summary.upper, &fc.summary.upper);
                        acc
                    }
                });
            }
            let forecast = combined.expect("at least one zone");
            write_forecast_csv(
                &forecast.summary,
                &run.zone_ids,
                File::create(out.join("forecast.csv"))?,
            )?;
            write_predictive_draws_csv(
                &forecast.draws,
                &run.zone_ids,
                File::create(out.join("forecast_draws.csv"))?,
            )?;
            emit_coverage(&run, &forecast, out, &mut manifest)?;
        }
    }
    manifest.outputs.push("forecast.csv".to_string());
    manifest.outputs.push("forecast_draws.csv".to_string());
    write_run_manifest(&manifest, out)?;
    println!("forecast complete; outputs in {}", out.display());
    Ok(())
}

fn stack_columns(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let mut out = nalgebra::DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

fn emit_coverage(
    run: &LoadedRun,
    forecast: &ForecastResult,
    out: &Path,
    manifest: &mut RunManifest<RunConfig>,
) -> Result<()> {
    if run.config.holdout == 0 {
        return Ok(());
    }
    let held = held_out_tail(&run.panel, run.config.holdout)?;
    let (per_zone, overall) = coverage_report(&held, forecast, &run.zone_ids);
    let mut report = File::create(out.join("coverage.csv"))?;
    use std::io::Write;
    writeln!(report, "zone,coverage,held_out_points")?;
    for (zone, frac, count) in &per_zone {
        writeln!(report, "{zone},{frac},{count}")?;
    }
    writeln!(
        report,
        "overall,{overall},{}",
        per_zone.iter().map(|p| p.2).sum::<usize>()
    )?;
    manifest.outputs.push("coverage.csv".to_string());
    println!("holdout coverage of the 95% band: {overall:.3}");
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let mut recipe = load_recipe(&args.config)?;
    if let Some(seed) = args.seed {
        recipe.seed = seed;
    }
    if let Some(threads) = args.threads {
        setup_threads(threads);
    }
    let out = args.output.clone().unwrap_or_else(|| PathBuf::from("out"));
    create_output_dir(&out)?;
    let (panel, truth) = spatial_dlm::simulate::simulate_joint(&recipe)?;
    let zone_ids = recipe.geometry.zone_ids().to_vec();
    write_panel_csv(&panel, &zone_ids, File::create(out.join("panel.csv"))?)?;
    write_geometry_csv(&recipe.geometry, File::create(out.join("geometry.csv"))?)?;
    write_latent_paths_csv(
        &[truth],
        panel.grid().times(),
        panel.grid().origin_time(),
        &zone_ids,
        File::create(out.join("truth.csv"))?,
    )?;
    let mut manifest = RunManifest::new("simulate", recipe.seed, 0, ());
    manifest.inputs.push(args.config.display().to_string());
    for name in ["panel.csv", "geometry.csv", "truth.csv"] {
        manifest.outputs.push(name.to_string());
    }
    write_run_manifest(&manifest, &out)?;
    println!("simulation written to {}", out.display());
    Ok(())
}

fn cmd_compare(args: &CommonArgs) -> Result<()> {
    let run = load_run(args)?;
    let out = &run.config.output;
    create_output_dir(out)?;
    let geometry = run
        .geometry
        .as_ref()
        .ok_or_else(|| Error::validation("compare requires a geometry file"))?;

    let joint = two_stage_fit(
        &run.panel,
        geometry,
        &run.config.priors,
        &run.config.harmonic,
        run.config.kernel,
        &run.config.mcmc,
        run.config.ffbs_draws,
    )?;
    let joint_seed = spatial_dlm::derive_seed(run.config.seed, 0x636d70, 0);
    let joint_draws = within_sample_predictive(
        &joint.ffbs_params,
        &joint.latent_paths,
        run.panel.grid(),
        &run.config.harmonic,
        joint_seed,
    )?;
    let joint_rmse = rmse_by_zone(&run.panel, &joint_draws)?;

    let fits = fit_all_single(&run, &run.panel)?;
    let mut single_rmse = nalgebra::DVector::zeros(run.panel.n_zones());
    for (j, fit) in fits.iter().enumerate() {
        let zone_panel = run.panel.zone_panel(j);
        let draws = within_sample_predictive_single(
            &fit.ffbs_params,
            &fit.latent_paths,
            zone_panel.grid(),
            &run.config.harmonic,
            spatial_dlm::derive_seed(joint_seed, 0x73, j as u64),
        )?;
        single_rmse[j] = rmse_by_zone(&zone_panel, &draws)?[0];
    }
    write_rmse_csv(
        &run.zone_ids,
        &single_rmse,
        &joint_rmse,
        File::create(out.join("rmse.csv"))?,
    )?;
    let joint_summary = summarize_draws(&joint_draws, 0.95)?;
    write_forecast_csv(
        &joint_summary,
        &run.zone_ids,
        File::create(out.join("within_sample_joint.csv"))?,
    )?;
    let mut manifest = RunManifest::new(
        "compare",
        run.config.seed,
        run.config.threads,
        run.config.clone(),
    );
    manifest.warnings = run.warnings.clone();
    manifest.outputs.push("rmse.csv".to_string());
    manifest.outputs.push("within_sample_joint.csv".to_string());
    write_run_manifest(&manifest, out)?;
    for j in 0..run.panel.n_zones() {
        println!(
            "{}: single {:.4}  joint {:.4}",
            run.zone_ids[j], single_rmse[j], joint_rmse[j]
        );
    }
    Ok(())
}

fn cmd_validate(args: &CommonArgs) -> Result<()> {
    let run = load_run(args)?;
    let mut problems = Vec::new();
    if run.config.holdout >= run.panel.n_times() {
        problems.push(format!(
            "holdout {} is not smaller than the {} observed time points",
            run.config.holdout,
            run.panel.n_times()
        ));
    }
    if run.config.model == ModelKind::Joint {
        match &run.geometry {
            Some(g) => {
                if g.n_zones() != run.panel.n_zones() {
                    problems.push("geometry and panel zone counts differ".to_string());
                }
            }
            None => problems.push("joint model requires a geometry file".to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    println!(
        "ok: {} zones, {} time points, {} observed entries",
        run.panel.n_zones(),
        run.panel.n_times(),
        run.panel.observed_count()
    );
    for w in &run.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
