//! File formats and persistence: panel/geometry CSV ingestion, run
//! configuration and simulation recipes (TOML), chain/forecast/summary
//! output files and the per-run manifest.

mod config;
mod csv_io;
mod output;

pub use config::{
    load_recipe, load_run_config, parse_recipe, parse_run_config, ModelKind, RunConfig,
};
pub use csv_io::{
    parse_geometry_csv, parse_panel_csv, read_geometry_csv, read_panel_csv, write_geometry_csv,
    write_panel_csv, PanelIngest,
};
pub use output::{
    write_chain_csv, write_chain_meta, write_forecast_csv, write_latent_paths_csv,
    write_predictive_draws_csv, write_rmse_csv, write_run_manifest, write_summary_csv,
    write_summary_text, RunManifest,
};
