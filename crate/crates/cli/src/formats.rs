//! Readers and writers for every file the commands exchange.
//!
//! Floats are written in the shortest form that parses back to the same
//! value, so write → read → write reproduces a file byte for byte.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use smoothwarp::inference::ModelDims;
use smoothwarp::{BBox, Cell, Grid, GriddedField, ModelState, StationData, UnitPoint};

use crate::error::{CliError, CliResult};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_f64(path: &Path, line: Option<u64>, field: &str, s: &str) -> CliResult<f64> {
    s.trim().parse().map_err(|_| CliError::parse(path, line, format!("{field}: cannot parse '{s}' as a number")))
}

fn parse_usize(path: &Path, line: Option<u64>, field: &str, s: &str) -> CliResult<usize> {
    s.trim().parse().map_err(|_| CliError::parse(path, line, format!("{field}: cannot parse '{s}' as an index")))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?))
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    csv::ReaderBuilder::new().from_path(path).map_err(|e| CliError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line());
    CliError::parse(path, line, e)
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header check shared by the fixed-layout readers.
fn expect_header(path: &Path, reader: &mut csv::Reader<File>, want: &[&str]) -> CliResult<()> {
    let got = reader.headers().map_err(|e| csv_error(path, e))?;
    if got.iter().ne(want.iter().copied()) {
        return Err(CliError::parse(path, Some(1), format!("expected header '{}'", want.join(","))));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, Some(e.line() as u64), e))
}

/// Rows of a plain record type, one per line, header from the field names.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv_reader(path)?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Sidecar of a grid file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub nx: usize,
    pub ny: usize,
    pub n_times: usize,
    pub bbox: BBox,
}

const GRID_HEADER: [&str; 4] = ["time", "row", "col", "value"];

/// Writes `time,row,col,value` to `path` and the metadata next to it with
/// a `.json` extension.
pub fn write_grid(path: &Path, field: &GriddedField) -> CliResult<()> {
    let grid = field.grid();
    let meta = GridMeta { nx: grid.nx(), ny: grid.ny(), n_times: field.n_times(), bbox: grid.bbox() };
    write_json(&path.with_extension("json"), &meta)?;
    let header: Vec<String> = GRID_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = (0..field.n_times()).flat_map(|t| {
        (0..grid.cell_count()).map(move |k| {
            let cell = grid.cell_from_flat(k);
            vec![t.to_string(), cell.row.to_string(), cell.col.to_string(), fmt_f64(field.get(t, cell))]
        })
    });
    write_rows(path, &header, rows)
}

pub fn read_grid(path: &Path) -> CliResult<GriddedField> {
    let meta_path = path.with_extension("json");
    let meta: GridMeta = read_json(&meta_path)?;
    let grid = Grid::new(meta.nx, meta.ny, meta.bbox).map_err(|e| CliError::parse(&meta_path, None, e))?;
    let cells = grid.cell_count();
    let mut values = vec![None; meta.n_times * cells];
    let mut r = csv_reader(path)?;
    expect_header(path, &mut r, &GRID_HEADER)?;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line());
        let t = parse_usize(path, line, "time", &rec[0])?;
        let row = parse_usize(path, line, "row", &rec[1])?;
        let col = parse_usize(path, line, "col", &rec[2])?;
        let v = parse_f64(path, line, "value", &rec[3])?;
        if t >= meta.n_times || row >= meta.ny || col >= meta.nx {
            return Err(CliError::parse(path, line, format!("({t}, {row}, {col}) outside the grid in the sidecar")));
        }
        let slot = &mut values[t * cells + grid.flat_index(Cell { row, col })];
        if slot.replace(v).is_some() {
            return Err(CliError::parse(path, line, format!("duplicate entry ({t}, {row}, {col})")));
        }
    }
    let missing = values.iter().filter(|v| v.is_none()).count();
    if missing > 0 {
        return Err(CliError::parse(path, None, format!("{missing} grid entries missing")));
    }
    GriddedField::new(grid, meta.n_times, values.into_iter().flatten().collect())
        .map_err(|e| CliError::parse(path, None, e))
}

/// Station observations with coordinates in raw bounding-box units, kept
/// as read so that rewriting them is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct StationTable {
    pub ids: Vec<String>,
    pub xy: Vec<(f64, f64)>,
    pub n_times: usize,
    /// Time-major, `t * n_stations + i`.
    pub values: Vec<Option<f64>>,
}

impl StationTable {
    pub fn from_data(data: &StationData, bbox: &BBox) -> Self {
        StationTable {
            ids: data.ids().to_vec(),
            xy: data.locations().iter().map(|&p| bbox.denormalize(p)).collect(),
            n_times: data.n_times(),
            values: data.values().to_vec(),
        }
    }

    pub fn to_data(&self, bbox: &BBox) -> CliResult<StationData> {
        let locations = self
            .xy
            .iter()
            .map(|&(x, y)| bbox.normalize(x, y))
            .collect::<smoothwarp::Result<Vec<UnitPoint>>>()?;
        Ok(StationData::new(self.ids.clone(), locations, self.n_times, self.values.clone())?)
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }
}

const STATION_HEADER: [&str; 5] = ["station_id", "x", "y", "time", "value"];

/// One row per station and time, station by station; an empty value is a
/// missing observation.
pub fn write_stations(path: &Path, table: &StationTable) -> CliResult<()> {
    let header: Vec<String> = STATION_HEADER.iter().map(|s| s.to_string()).collect();
    let n = table.ids.len();
    let rows = (0..n).flat_map(|i| {
        (0..table.n_times).map(move |t| {
            let (x, y) = table.xy[i];
            let v = table.values[t * n + i].map(fmt_f64).unwrap_or_default();
            vec![table.ids[i].clone(), fmt_f64(x), fmt_f64(y), t.to_string(), v]
        })
    });
    write_rows(path, &header, rows)
}

pub fn read_stations(path: &Path) -> CliResult<StationTable> {
    let mut r = csv_reader(path)?;
    expect_header(path, &mut r, &STATION_HEADER)?;
    let mut ids: Vec<String> = Vec::new();
    let mut xy: Vec<(f64, f64)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut entries: Vec<(usize, usize, Option<f64>, Option<u64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line());
        let id = rec[0].to_string();
        let x = parse_f64(path, line, "x", &rec[1])?;
        let y = parse_f64(path, line, "y", &rec[2])?;
        let t = parse_usize(path, line, "time", &rec[3])?;
        let v = if rec[4].trim().is_empty() { None } else { Some(parse_f64(path, line, "value", &rec[4])?) };
        let i = match index.get(&id) {
            Some(&i) => {
                if xy[i] != (x, y) {
                    return Err(CliError::parse(path, line, format!("station {id} changes location")));
                }
                i
            }
            None => {
                index.insert(id.clone(), ids.len());
                ids.push(id);
                xy.push((x, y));
                ids.len() - 1
            }
        };
        entries.push((i, t, v, line));
    }
    if ids.is_empty() {
        return Err(CliError::parse(path, None, "no stations"));
    }
    let n_times = entries.iter().map(|e| e.1).max().unwrap_or(0) + 1;
    let n = ids.len();
    let mut values: Vec<Option<Option<f64>>> = vec![None; n * n_times];
    for (i, t, v, line) in entries {
        if values[t * n + i].replace(v).is_some() {
            return Err(CliError::parse(path, line, format!("duplicate row for station {} at time {t}", ids[i])));
        }
    }
    if let Some(k) = values.iter().position(|v| v.is_none()) {
        return Err(CliError::parse(
            path,
            None,
            format!("station {} has no row for time {}", ids[k % n], k / n),
        ));
    }
    Ok(StationTable { ids, xy, n_times, values: values.into_iter().flatten().collect() })
}

/// Column names of the samples file for a model of the given dimensions.
pub fn sample_header(dims: &ModelDims) -> Vec<String> {
    let mut h = vec!["b0".to_string()];
    if let Some([j, k]) = dims.intercept_basis {
        for jj in 1..=j {
            for kk in 1..=k {
                h.push(format!("b_{jj}_{kk}"));
            }
        }
    }
    if let Some([j, k]) = dims.warp_basis {
        // coefficient layout: axis-major, then j, then k
        for l in 1..=2 {
            for jj in 1..=j {
                for kk in 1..=k {
                    h.push(format!("a_{jj}_{kk}_{l}"));
                }
            }
        }
    }
    h.extend((1..=dims.n_layers).map(|l| format!("beta_{l}")));
    h.extend(["sigma2", "sigma02", "sigmaa2", "rho0", "rhoa", "rhox"].map(String::from));
    h
}

pub fn write_samples(path: &Path, dims: &ModelDims, states: &[ModelState]) -> CliResult<()> {
    let rows = states.iter().map(|s| {
        let scalars = [s.sigma2, s.sigma02, s.sigmaa2, s.rho0, s.rhoa, s.rhox];
        std::iter::once(s.b0)
            .chain(s.b.iter().copied())
            .chain(s.a.iter().copied())
            .chain(s.beta.iter().copied())
            .chain(scalars)
            .map(fmt_f64)
            .collect()
    });
    write_rows(path, &sample_header(dims), rows)
}

pub fn read_samples(path: &Path, dims: &ModelDims) -> CliResult<Vec<ModelState>> {
    let mut r = csv_reader(path)?;
    let want = sample_header(dims);
    let want_ref: Vec<&str> = want.iter().map(String::as_str).collect();
    expect_header(path, &mut r, &want_ref)?;
    let (jk, wl, l) = (dims.intercept_len(), dims.warp_len(), dims.n_layers);
    let mut states = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line());
        let v = rec
            .iter()
            .zip(&want)
            .map(|(s, name)| parse_f64(path, line, name, s))
            .collect::<CliResult<Vec<f64>>>()?;
        let mut it = v.into_iter();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let b0 = take(1)[0];
        let b = take(jk);
        let a = take(wl);
        let beta = take(l);
        let s = take(6);
        states.push(ModelState {
            b0,
            b,
            a,
            beta,
            sigma2: s[0],
            sigma02: s[1],
            sigmaa2: s[2],
            rho0: s[3],
            rhoa: s[4],
            rhox: s[5],
        });
    }
    if states.is_empty() {
        return Err(CliError::parse(path, None, "no samples"));
    }
    Ok(states)
}

/// Predictive draws in wide form: `station_id,time,draw_1..draw_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub keys: Vec<(String, usize)>,
    pub draws: Vec<Vec<f64>>,
}

pub fn write_draws(path: &Path, table: &DrawTable) -> CliResult<()> {
    let m = table.draws.first().map_or(0, Vec::len);
    let mut header = vec!["station_id".to_string(), "time".to_string()];
    header.extend((1..=m).map(|d| format!("draw_{d}")));
    let rows = table.keys.iter().zip(&table.draws).map(|((id, t), d)| {
        let mut row = vec![id.clone(), t.to_string()];
        row.extend(d.iter().map(|&x| fmt_f64(x)));
        row
    });
    write_rows(path, &header, rows)
}

pub fn read_draws(path: &Path) -> CliResult<DrawTable> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 3 || &header[0] != "station_id" || &header[1] != "time" {
        return Err(CliError::parse(path, Some(1), "expected header 'station_id,time,draw_1,...'"));
    }
    let mut table = DrawTable { keys: Vec::new(), draws: Vec::new() };
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line());
        let t = parse_usize(path, line, "time", &rec[1])?;
        let d = rec.iter().skip(2).map(|s| parse_f64(path, line, "draw", s)).collect::<CliResult<Vec<f64>>>()?;
        table.keys.push((rec[0].to_string(), t));
        table.draws.push(d);
    }
    Ok(table)
}
