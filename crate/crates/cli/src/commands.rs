//! The five subcommands. Each reads its inputs, runs, and writes its
//! outputs into one directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smoothwarp::evaluation::{
    derive_seed, generate, run_study, score, split_times, synthetic_plume_with, GroundTruth, Metric, StudyCell,
    StudyRow,
};
use smoothwarp::inference::{fit_with_layers, posterior_predict, BlockAcceptance, Model, ModelDims};
use smoothwarp::warp::displacement_significance;
use smoothwarp::{Error, Generation, Grid, ModelConfig, PosteriorSamples, Scenario, Variant};

use crate::config::{EvaluateConfig, FitConfig, PredictConfig, ReportConfig, SimulateConfig};
use crate::error::{CliError, CliResult};
use crate::formats::*;

pub const FORECAST_FILE: &str = "forecast.csv";
pub const STATIONS_FILE: &str = "stations.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const FIT_FILE: &str = "fit.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const ACCEPTANCE_FILE: &str = "acceptance.json";
pub const WARP_SUMMARY_FILE: &str = "warp_summary.csv";
pub const WARP_TRACE_FILE: &str = "warp_trace.csv";
pub const DIVERGED_FILE: &str = "diverged_state.json";
pub const SUMMARY_FILE: &str = "predictive_summary.csv";
pub const DRAWS_FILE: &str = "predictive_draws.csv";
pub const SCORES_FILE: &str = "scores.json";
pub const OBS_SCORES_FILE: &str = "scores.csv";
pub const TIME_SCORES_FILE: &str = "scores_by_time.csv";
pub const TABLE_FILE: &str = "study_table.csv";
pub const CELLS_FILE: &str = "study_cells.csv";
pub const TEXT_FILE: &str = "study_summary.txt";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Contents of the ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub scenario: Scenario,
    pub truth: GroundTruth,
}

pub fn simulate(config: &SimulateConfig, out: &Path) -> CliResult<()> {
    config.plume.validate()?;
    let grid = Grid::new(config.nx, config.ny, config.bbox)?;
    let seed = config.scenario.seed;
    let forecast = synthetic_plume_with(grid, config.n_times, &config.plume, derive_seed(seed, &[1]))?;
    let (stations, truth) = generate(&config.scenario, &forecast)?;
    ensure_dir(out)?;
    write_grid(&out.join(FORECAST_FILE), &forecast)?;
    write_stations(&out.join(STATIONS_FILE), &StationTable::from_data(&stations, &config.bbox))?;
    write_json(&out.join(TRUTH_FILE), &TruthFile { scenario: config.scenario.clone(), truth })
}

/// Everything `predict` needs to rebuild the fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub variant: Variant,
    pub model: ModelConfig,
    pub dims: ModelDims,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSummaryRow {
    pub station_id: String,
    pub x: f64,
    pub y: f64,
    pub mean_dx: f64,
    pub mean_dy: f64,
    pub lower_dx: f64,
    pub upper_dx: f64,
    pub lower_dy: f64,
    pub upper_dy: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpTraceRow {
    pub iteration: usize,
    pub mean_dx: f64,
    pub mean_dy: f64,
}

/// Level of the credible intervals in the warp summary.
pub const WARP_LEVEL: f64 = 0.95;

pub fn fit(config: &FitConfig, data: &Path, out: &Path) -> CliResult<()> {
    let forecast = read_grid(&data.join(FORECAST_FILE))?;
    let table = read_stations(&data.join(STATIONS_FILE))?;
    let stations = table.to_data(&forecast.grid().bbox())?;
    if stations.n_times() != forecast.n_times() {
        return Err(CliError::Data(format!(
            "stations cover {} timesteps but the forecast has {}",
            stations.n_times(),
            forecast.n_times()
        )));
    }
    let (train, test) = split_times(forecast.n_times(), config.train_fraction)?;
    let model = Model::new(&config.model, config.variant)?;
    let layers = model.layers_for(&forecast)?;
    ensure_dir(out)?;
    let samples = match fit_with_layers(&model, &layers, &stations, &train) {
        Ok(s) => s,
        Err(Error::Diverged { message, state }) => {
            write_json(&out.join(DIVERGED_FILE), &state)?;
            return Err(CliError::Numerical(format!(
                "sampler diverged: {message}; state written to {}",
                out.join(DIVERGED_FILE).display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let meta = FitFile {
        variant: config.variant,
        model: config.model,
        dims: samples.dims,
        train,
        test,
        kept: samples.len(),
    };
    write_json(&out.join(FIT_FILE), &meta)?;
    write_samples(&out.join(SAMPLES_FILE), &samples.dims, &samples.states)?;
    write_json(&out.join(ACCEPTANCE_FILE), &samples.acceptance)?;
    if config.variant.has_warp() {
        write_records(&out.join(WARP_SUMMARY_FILE), &warp_summary(&samples, &table)?)?;
        write_records(&out.join(WARP_TRACE_FILE), &warp_trace(&samples, &config.model))?;
    }
    Ok(())
}

fn warp_summary(samples: &PosteriorSamples, table: &StationTable) -> CliResult<Vec<WarpSummaryRow>> {
    let mut rows = Vec::with_capacity(table.ids.len());
    for (i, id) in table.ids.iter().enumerate() {
        let draws: Vec<[f64; 2]> = samples.station_displacements.iter().map(|d| d[i]).collect();
        let n = draws.len() as f64;
        let mean_dx = draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let mean_dy = draws.iter().map(|d| d[1]).sum::<f64>() / n;
        let (intervals, significant) = if draws.len() >= 2 {
            let s = displacement_significance(&draws, WARP_LEVEL)?;
            (s.intervals, s.significant)
        } else {
            ([(mean_dx, mean_dx), (mean_dy, mean_dy)], false)
        };
        rows.push(WarpSummaryRow {
            station_id: id.clone(),
            x: table.xy[i].0,
            y: table.xy[i].1,
            mean_dx,
            mean_dy,
            lower_dx: intervals[0].0,
            upper_dx: intervals[0].1,
            lower_dy: intervals[1].0,
            upper_dy: intervals[1].1,
            significant,
        });
    }
    Ok(rows)
}

/// Station-averaged displacement per kept iteration.
fn warp_trace(samples: &PosteriorSamples, model: &ModelConfig) -> Vec<WarpTraceRow> {
    samples
        .station_displacements
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let n = d.len() as f64;
            WarpTraceRow {
                iteration: model.n_burn + k * model.thin,
                mean_dx: d.iter().map(|v| v[0]).sum::<f64>() / n,
                mean_dy: d.iter().map(|v| v[1]).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub station_id: String,
    pub time: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn predict(config: &PredictConfig, data: &Path, fit_dir: &Path, out: &Path) -> CliResult<()> {
    if config.draws_per_state == 0 {
        return Err(CliError::Config("draws_per_state must be positive".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(CliError::Config(format!("level {} outside (0, 1)", config.level)));
    }
    let meta: FitFile = read_json(&fit_dir.join(FIT_FILE))?;
    let forecast = read_grid(&data.join(FORECAST_FILE))?;
    let table = read_stations(&data.join(STATIONS_FILE))?;
    let stations = table.to_data(&forecast.grid().bbox())?;
    let model = Model::new(&meta.model, meta.variant)?;
    if *model.dims() != meta.dims {
        return Err(CliError::Data(format!("{}: dimensions disagree with the model settings", FIT_FILE)));
    }
    if meta.test.is_empty() {
        return Err(CliError::Data("the fit has an empty test range".into()));
    }
    let states = read_samples(&fit_dir.join(SAMPLES_FILE), &meta.dims)?;
    let samples = PosteriorSamples {
        variant: meta.variant,
        dims: meta.dims,
        states,
        station_displacements: Vec::new(),
        acceptance: Vec::<BlockAcceptance>::new(),
    };
    let layers = model.layers_for(&forecast)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pred = posterior_predict(&model, &samples, &layers, &stations, &meta.test, config.draws_per_state, &mut rng)?;
    let rows: Vec<SummaryRow> = pred
        .summary(config.level)
        .into_iter()
        .map(|s| SummaryRow {
            station_id: table.ids[s.key.station].clone(),
            time: s.key.time,
            mean: s.mean,
            sd: s.sd,
            skewness: s.skewness,
            kurtosis: s.kurtosis,
            lower: s.lower,
            upper: s.upper,
        })
        .collect();
    ensure_dir(out)?;
    write_records(&out.join(SUMMARY_FILE), &rows)?;
    if config.write_draws {
        let keys = pred.keys.iter().map(|k| (table.ids[k.station].clone(), k.time)).collect();
        write_draws(&out.join(DRAWS_FILE), &DrawTable { keys, draws: pred.draws })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSummary {
    pub mse: f64,
    pub mad: f64,
    pub coverage: f64,
    pub crps: f64,
    pub level: f64,
    pub n_scored: usize,
    pub n_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub station_id: String,
    pub time: usize,
    pub y: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub squared_error: f64,
    pub absolute_error: f64,
    pub covered: bool,
    pub crps: f64,
}

/// Scores per timestep, the plot data for daily error curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub time: usize,
    pub n: usize,
    pub mse: f64,
    pub mad: f64,
    pub coverage: f64,
    pub crps: f64,
}

pub fn evaluate(config: &EvaluateConfig, data: &Path, predictions: &Path, out: &Path) -> CliResult<ScoreSummary> {
    let table = read_stations(&data.join(STATIONS_FILE))?;
    let draws_path = predictions.join(DRAWS_FILE);
    let draws = read_draws(&draws_path)?;
    let index = table.index_of();
    let n = table.ids.len();
    let mut y = Vec::with_capacity(draws.keys.len());
    for (id, t) in &draws.keys {
        let Some(&i) = index.get(id.as_str()) else {
            return Err(CliError::Data(format!("{}: station {id} is not in the truth file", draws_path.display())));
        };
        if *t >= table.n_times {
            return Err(CliError::Data(format!("{}: time {t} is beyond the truth file", draws_path.display())));
        }
        y.push(table.values[t * n + i]);
    }
    let report = score(&draws.draws, &y, config.level)?;
    if report.n_missing > 0 {
        eprintln!("warning: {} held-out values are missing and were excluded", report.n_missing);
    }
    let summary = ScoreSummary {
        mse: report.mse,
        mad: report.mad,
        coverage: report.coverage,
        crps: report.crps,
        level: report.level,
        n_scored: report.n_scored,
        n_missing: report.n_missing,
    };
    let rows: Vec<ObservationRow> = report
        .observations
        .iter()
        .map(|o| {
            let (id, t) = &draws.keys[o.index];
            ObservationRow {
                station_id: id.clone(),
                time: *t,
                y: o.y,
                mean: o.mean,
                lower: o.lower,
                upper: o.upper,
                squared_error: o.squared_error,
                absolute_error: o.absolute_error,
                covered: o.covered,
                crps: o.crps,
            }
        })
        .collect();
    let mut by_time: BTreeMap<usize, Vec<&ObservationRow>> = BTreeMap::new();
    for r in &rows {
        by_time.entry(r.time).or_default().push(r);
    }
    let time_rows: Vec<TimeRow> = by_time
        .into_iter()
        .map(|(time, rs)| {
            let k = rs.len() as f64;
            let avg = |f: &dyn Fn(&ObservationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / k;
            TimeRow {
                time,
                n: rs.len(),
                mse: avg(&|r| r.squared_error),
                mad: avg(&|r| r.absolute_error),
                coverage: avg(&|r| f64::from(u8::from(r.covered))),
                crps: avg(&|r| r.crps),
            }
        })
        .collect();
    ensure_dir(out)?;
    write_json(&out.join(SCORES_FILE), &summary)?;
    write_records(&out.join(OBS_SCORES_FILE), &rows)?;
    write_records(&out.join(TIME_SCORES_FILE), &time_rows)?;
    Ok(summary)
}

/// One line of the study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scenario: Generation,
    pub n: usize,
    pub variant: Variant,
    pub metric: Metric,
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
}

impl From<&StudyRow> for TableRow {
    fn from(r: &StudyRow) -> Self {
        TableRow {
            scenario: r.scenario,
            n: r.n,
            variant: r.variant,
            metric: r.metric,
            mean: r.mean,
            se: r.se,
            replicates: r.replicates,
        }
    }
}

/// One fit of the study; `error` is empty for successful fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub scenario: Generation,
    pub n: usize,
    pub replicate: usize,
    pub variant: Variant,
    pub mse: Option<f64>,
    pub mad: Option<f64>,
    pub coverage: Option<f64>,
    pub crps: Option<f64>,
    pub n_scored: Option<usize>,
    pub error: String,
}

impl From<&StudyCell> for CellRow {
    fn from(c: &StudyCell) -> Self {
        let ok = c.outcome.as_ref().ok();
        CellRow {
            scenario: c.scenario,
            n: c.n_stations,
            replicate: c.replicate,
            variant: c.variant,
            mse: ok.map(|s| s.mse),
            mad: ok.map(|s| s.mad),
            coverage: ok.map(|s| s.coverage),
            crps: ok.map(|s| s.crps),
            n_scored: ok.map(|s| s.n_scored),
            error: c.outcome.as_ref().err().cloned().unwrap_or_default(),
        }
    }
}

pub fn report(config: &ReportConfig, out: &Path) -> CliResult<Vec<StudyRow>> {
    let scenarios: Vec<Scenario> = config
        .scenarios
        .iter()
        .flat_map(|&generation| {
            config.station_counts.iter().map(move |&n| Scenario { generation, n_stations: n, ..config.scenario.clone() })
        })
        .collect();
    let result = run_study(&scenarios, &config.variants, config.replicates, &config.study)?;
    let mut cells = result.cells.clone();
    cells.sort_by_key(|c| (c.scenario, c.n_stations, c.replicate, c.variant));
    ensure_dir(out)?;
    let table: Vec<TableRow> = result.rows.iter().map(TableRow::from).collect();
    write_records(&out.join(TABLE_FILE), &table)?;
    write_records(&out.join(CELLS_FILE), &cells.iter().map(CellRow::from).collect::<Vec<_>>())?;
    let text = summary_text(&result.rows, &config.variants);
    std::fs::write(out.join(TEXT_FILE), text).map_err(|e| CliError::io(&out.join(TEXT_FILE), e))?;
    let failed: usize = cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("warning: {failed} fits failed; see {}", out.join(CELLS_FILE).display());
    }
    Ok(result.rows)
}

/// One block per metric, a row per (scenario, n) and a `mean(se)` column
/// per variant.
pub fn summary_text(rows: &[StudyRow], variants: &[Variant]) -> String {
    let mut s = String::new();
    for metric in Metric::ALL {
        let _ = writeln!(s, "{}", metric.name().to_uppercase());
        let _ = write!(s, "{:<22}{:>6}", "scenario", "n");
        for v in variants {
            let _ = write!(s, "{:>16}", v.name());
        }
        s.push('\n');
        let mut keys: Vec<(Generation, usize)> = rows.iter().map(|r| (r.scenario, r.n)).collect();
        keys.dedup();
        for (g, n) in keys {
            let _ = write!(s, "{:<22}{:>6}", g.name(), n);
            for v in variants {
                let cell = rows
                    .iter()
                    .find(|r| r.scenario == g && r.n == n && r.variant == *v && r.metric == metric)
                    .map_or("-".to_string(), |r| format!("{:.2}({:.2})", r.mean, r.se));
                let _ = write!(s, "{cell:>16}");
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

/// Resolves an input directory that defaults to the output directory.
pub fn input_dir(configured: &Option<PathBuf>, out: &Path) -> PathBuf {
    configured.clone().unwrap_or_else(|| out.to_path_buf())
}
