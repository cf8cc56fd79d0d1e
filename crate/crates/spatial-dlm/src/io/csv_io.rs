//! Panel and geometry CSV schemas.
//!
//! Panel: header `time,<zone>,...`, one row per observation time, empty
//! cells for missing entries. Exact zeros are treated as missing (the rates
//! are strictly positive by construction) and reported as warnings.
//!
//! Geometry: either `zone_id,lon,lat` rows, or a square distance matrix
//! with zone ids as both the header (after the first cell) and the first
//! column.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{PanelData, TimeGrid, ZoneGeometry};

/// A parsed panel plus its column labels and any load-time warnings.
#[derive(Debug, Clone)]
pub struct PanelIngest {
    pub panel: PanelData,
    pub zone_ids: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn read_panel_csv(path: &Path) -> Result<PanelIngest> {
    let file = File::open(path)
        .map_err(|e| Error::parse(format!("cannot open panel file {}: {e}", path.display())))?;
    parse_panel_csv(file)
}

pub fn parse_panel_csv<R: Read>(reader: R) -> Result<PanelIngest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("panel header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::parse(
            "panel header must be `time,<zone>,...` with at least one zone column",
        ));
    }
    if !headers[0].eq_ignore_ascii_case("time") {
        return Err(Error::parse(format!(
            "panel header must start with `time`, found `{}`",
            &headers[0]
        )));
    }
    let zone_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n_z = zone_ids.len();

    let mut times = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut warnings = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::parse(format!("panel line {line}: {e}")))?;
        if record.len() != n_z + 1 {
            return Err(Error::parse(format!(
                "panel line {line}: expected {} fields, found {}",
                n_z + 1,
                record.len()
            )));
        }
        let t: f64 = record[0].parse().map_err(|_| {
            Error::parse(format!("panel line {line}: invalid time `{}`", &record[0]))
        })?;
        times.push(t);
        let mut row = Vec::with_capacity(n_z);
        for (j, field) in record.iter().skip(1).enumerate() {
            if field.is_empty() {
                row.push(None);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(format!(
                    "panel line {line}: invalid value `{field}` for zone {}",
                    zone_ids[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(format!(
                    "panel line {line}: non-finite value for zone {}",
                    zone_ids[j]
                )));
            }
            if v == 0.0 {
                warnings.push(format!(
                    "panel line {line}: zero rate for zone {} treated as missing",
                    zone_ids[j]
                ));
                row.push(None);
            } else {
                row.push(Some(v));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse("panel file contains no observation rows"));
    }
    let grid = TimeGrid::from_times(times)?;
    let n = rows.len();
    let values = DMatrix::from_fn(n, n_z, |i, j| rows[i][j].unwrap_or(0.0));
    let observed = DMatrix::from_fn(n, n_z, |i, j| rows[i][j].is_some());
    let panel = PanelData::new(grid, values, observed)?;
    Ok(PanelIngest {
        panel,
        zone_ids,
        warnings,
    })
}

pub fn write_panel_csv<W: Write>(panel: &PanelData, zone_ids: &[String], out: W) -> Result<()> {
    if zone_ids.len() != panel.n_zones() {
        return Err(Error::validation(format!(
            "{} zone ids for a panel with {} zones",
            zone_ids.len(),
            panel.n_zones()
        )));
    }
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend_from_slice(zone_ids);
    wtr.write_record(&header)?;
    for i in 0..panel.n_times() {
        let mut record = vec![format!("{}", panel.grid().times()[i])];
        for j in 0..panel.n_zones() {
            record.push(match panel.value(i, j) {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_geometry_csv(path: &Path) -> Result<ZoneGeometry> {
    let file = File::open(path)
        .map_err(|e| Error::parse(format!("cannot open geometry file {}: {e}", path.display())))?;
    parse_geometry_csv(file)
}

pub fn parse_geometry_csv<R: Read>(reader: R) -> Result<ZoneGeometry> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("geometry header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::parse("geometry file needs at least two columns"));
    }
    let is_coordinates = headers.len() == 3
        && headers[1].eq_ignore_ascii_case("lon")
        && headers[2].eq_ignore_ascii_case("lat");

    if is_coordinates {
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| Error::parse(format!("geometry line {line}: {e}")))?;
            if record.len() != 3 {
                return Err(Error::parse(format!(
                    "geometry line {line}: expected 3 fields, found {}",
                    record.len()
                )));
            }
            let lon: f64 = record[1].parse().map_err(|_| {
                Error::parse(format!(
                    "geometry line {line}: invalid lon `{}`",
                    &record[1]
                ))
            })?;
            let lat: f64 = record[2].parse().map_err(|_| {
                Error::parse(format!(
                    "geometry line {line}: invalid lat `{}`",
                    &record[2]
                ))
            })?;
            ids.push(record[0].to_string());
            coords.push((lon, lat));
        }
        if ids.is_empty() {
            return Err(Error::parse("geometry file contains no zones"));
        }
        return ZoneGeometry::from_coordinates(ids, coords);
    }

    // Distance-matrix form: header carries zone ids after the first cell.
    let header_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n_z = header_ids.len();
    let mut row_ids = Vec::new();
    let mut entries = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::parse(format!("geometry line {line}: {e}")))?;
        if record.len() != n_z + 1 {
            return Err(Error::parse(format!(
                "geometry line {line}: expected {} fields, found {}",
                n_z + 1,
                record.len()
            )));
        }
        row_ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let d: f64 = field.parse().map_err(|_| {
                Error::parse(format!("geometry line {line}: invalid distance `{field}`"))
            })?;
            entries.push(d);
        }
    }
    if row_ids.len() != n_z {
        return Err(Error::parse(format!(
            "distance matrix is not square: {} header ids but {} rows",
            n_z,
            row_ids.len()
        )));
    }
    if row_ids != header_ids {
        return Err(Error::parse(
            "distance matrix row ids do not match header ids",
        ));
    }
    let d = DMatrix::from_row_slice(n_z, n_z, &entries);
    ZoneGeometry::from_distances(row_ids, d)
}

/// Write geometry as coordinates when available, otherwise as a distance
/// matrix.
pub fn write_geometry_csv<W: Write>(geometry: &ZoneGeometry, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    match geometry.coordinates() {
        Some(coords) => {
            wtr.write_record(["zone_id", "lon", "lat"])?;
            for (id, (lon, lat)) in geometry.zone_ids().iter().zip(coords) {
                wtr.write_record(&[id.clone(), format!("{lon}"), format!("{lat}")])?;
            }
        }
        None => {
            let mut header = vec!["zone_id".to_string()];
            header.extend_from_slice(geometry.zone_ids());
            wtr.write_record(&header)?;
            for (i, id) in geometry.zone_ids().iter().enumerate() {
                let mut record = vec![id.clone()];
                for j in 0..geometry.n_zones() {
                    record.push(format!("{}", geometry.distances()[(i, j)]));
                }
                wtr.write_record(&record)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::parse(e.to_string())
    }
}
