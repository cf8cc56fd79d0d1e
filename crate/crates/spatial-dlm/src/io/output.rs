//! Result persistence: chain CSV plus JSON metadata sidecar, latent-path
//! and predictive draw archives, forecast and RMSE tables, Table-style
//! posterior summaries and the reproducibility manifest.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mcmc::{ChainOutput, ParamSummary};
use crate::predict::{PredictiveDraws, PredictiveSummary};
use crate::smoother::LatentPath;

/// Chain draws as CSV: one column per parameter on the natural scale.
pub fn write_chain_csv<W: Write>(chain: &ChainOutput, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(&chain.param_names)?;
    for draw in &chain.draws {
        let record: Vec<String> = draw.iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ChainMeta<'a> {
    seed: u64,
    acceptance_rate: f64,
    kept_draws: usize,
    param_names: &'a [String],
    config: &'a crate::mcmc::McmcConfig,
}

/// JSON sidecar with the seed, acceptance rate and config echo.
pub fn write_chain_meta<W: Write>(chain: &ChainOutput, out: W) -> Result<()> {
    let meta = ChainMeta {
        seed: chain.seed,
        acceptance_rate: chain.acceptance_rate,
        kept_draws: chain.draws.len(),
        param_names: &chain.param_names,
        config: &chain.config,
    };
    serde_json::to_writer_pretty(out, &meta)
        .map_err(|e| Error::parse(format!("cannot serialize chain metadata: {e}")))
}

/// Latent paths in tidy form: `time,zone,draw,value`. Row 0 of each path is
/// the initial state at the grid origin time.
pub fn write_latent_paths_csv<W: Write>(
    paths: &[LatentPath],
    times: &[f64],
    origin_time: f64,
    zone_ids: &[String],
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["time", "zone", "draw", "value"])?;
    for (r, path) in paths.iter().enumerate() {
        if path.n_steps() != times.len() {
            return Err(Error::validation(format!(
                "latent path {r} has {} steps but the grid has {}",
                path.n_steps(),
                times.len()
            )));
        }
        for i in 0..path.states.nrows() {
            let t = if i == 0 { origin_time } else { times[i - 1] };
            for j in 0..path.state_dim() {
                let zone = zone_ids
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("state_{}", j + 1));
                wtr.write_record(&[
                    format!("{t}"),
                    zone,
                    format!("{r}"),
                    format!("{}", path.states[(i, j)]),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Interval summary as tidy CSV: `time,zone,mean,lo,hi`.
pub fn write_forecast_csv<W: Write>(
    summary: &PredictiveSummary,
    zone_ids: &[String],
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["time", "zone", "mean", "lo", "hi"])?;
    for (i, &t) in summary.times.iter().enumerate() {
        for j in 0..summary.mean.ncols() {
            let zone = zone_ids
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("zone_{}", j + 1));
            wtr.write_record(&[
                format!("{t}"),
                zone,
                format!("{}", summary.mean[(i, j)]),
                format!("{}", summary.lower[(i, j)]),
                format!("{}", summary.upper[(i, j)]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Full draw archive: `time,zone,draw,value`.
pub fn write_predictive_draws_csv<W: Write>(
    draws: &PredictiveDraws,
    zone_ids: &[String],
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["time", "zone", "draw", "value"])?;
    for (r, draw) in draws.draws.iter().enumerate() {
        for (i, &t) in draws.times.iter().enumerate() {
            for j in 0..draw.ncols() {
                let zone = zone_ids
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("zone_{}", j + 1));
                wtr.write_record(&[
                    format!("{t}"),
                    zone,
                    format!("{r}"),
                    format!("{}", draw[(i, j)]),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Table-2-shaped comparison: `zone,single_zone_rmse,joint_rmse`.
pub fn write_rmse_csv<W: Write>(
    zone_ids: &[String],
    single: &DVector<f64>,
    joint: &DVector<f64>,
    out: W,
) -> Result<()> {
    if single.len() != zone_ids.len() || joint.len() != zone_ids.len() {
        return Err(Error::validation("RMSE vectors must cover every zone"));
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["zone", "single_zone_rmse", "joint_rmse"])?;
    for (j, id) in zone_ids.iter().enumerate() {
        wtr.write_record(&[
            id.clone(),
            format!("{}", single[j]),
            format!("{}", joint[j]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Posterior summary table as CSV: `parameter,mean,lower,upper`.
pub fn write_summary_csv<W: Write>(summaries: &[ParamSummary], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["parameter", "mean", "lower", "upper"])?;
    for s in summaries {
        wtr.write_record(&[
            s.name.clone(),
            format!("{}", s.mean),
            format!("{}", s.lower),
            format!("{}", s.upper),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Human-readable summary: parameter, posterior mean and 95% interval.
pub fn write_summary_text<W: Write>(
    title: &str,
    summaries: &[ParamSummary],
    acceptance_rate: f64,
    mut out: W,
) -> Result<()> {
    writeln!(out, "{title}")?;
    writeln!(out, "{}", "-".repeat(title.len()))?;
    writeln!(out, "{:<12} {:>12} {:>26}", "parameter", "mean", "95% CI")?;
    for s in summaries {
        writeln!(
            out,
            "{:<12} {:>12.4} {:>26}",
            s.name,
            s.mean,
            format!("({:.4}, {:.4})", s.lower, s.upper)
        )?;
    }
    writeln!(out)?;
    writeln!(out, "acceptance rate: {acceptance_rate:.4}")?;
    Ok(())
}

/// Everything needed to rerun a command bit-for-bit within one build.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: C,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &str, seed: u64, threads: usize, config: C) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            threads,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

pub fn write_run_manifest<C: Serialize>(manifest: &RunManifest<C>, dir: &Path) -> Result<()> {
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(file, manifest)
        .map_err(|e| Error::parse(format!("cannot serialize manifest: {e}")))
}
