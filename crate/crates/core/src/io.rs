//! File formats: dataset and rollout CSV, TOML run configuration, JSON model
//! archive and metrics reports. Floats are written with 17 significant digits.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bench::{DatasetConfig, EvaluateConfig, Metrics};
use crate::error::{Error, Result};
use crate::pipeline::{TrainConfig, TrainedModel, TrajectoryDataset, MODEL_FORMAT_VERSION};
use crate::simulate::{Rollout, SimulationConfig};

fn num(v: f64) -> String {
    // `+ 0.0` folds negative zero.
    format!("{:.16e}", v + 0.0)
}

/// Writes `trajectory_id,t,x1..xn,[u1..um,]s`.
pub fn write_dataset_csv(dataset: &TrajectoryDataset, out: &mut impl Write) -> Result<()> {
    let n = dataset.state_dim();
    let m = dataset.input_dim();
    let mut header = vec!["trajectory_id".to_string(), "t".to_string()];
    header.extend((1..=n).map(|j| format!("x{j}")));
    header.extend((1..=m).map(|j| format!("u{j}")));
    header.push("s".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..dataset.len() {
        let mut row = vec![dataset.trajectory_id[i].to_string(), num(dataset.times[i])];
        row.extend(dataset.states.row(i).iter().map(|v| num(*v)));
        row.extend(dataset.inputs.row(i).iter().map(|v| num(*v)));
        row.push(dataset.modes[i].to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_csv(dataset, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn header_dims(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Parse {
        line: 1,
        message: msg,
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 4 || cols[0] != "trajectory_id" || cols[1] != "t" || cols[cols.len() - 1] != "s"
    {
        return Err(bad(format!(
            "expected header `trajectory_id,t,x1..xn,[u1..um,]s`, got `{}`",
            cols.join(",")
        )));
    }
    let middle = &cols[2..cols.len() - 1];
    let n = middle.iter().take_while(|c| c.starts_with('x')).count();
    let m = middle.len() - n;
    for (j, c) in middle.iter().enumerate() {
        let want = if j < n {
            format!("x{}", j + 1)
        } else {
            format!("u{}", j - n + 1)
        };
        if *c != want {
            return Err(bad(format!(
                "column {} should be `{want}`, got `{c}`",
                j + 3
            )));
        }
    }
    if n == 0 {
        return Err(bad("no state columns".into()));
    }
    Ok((n, m))
}

/// Parses a dataset CSV, reporting the offending line for malformed rows.
pub fn read_dataset_csv(text: &str) -> Result<TrajectoryDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let (n, m) = header_dims(&header)?;
    let width = n + m + 3;

    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut modes = Vec::new();
    let mut last_t: std::collections::BTreeMap<usize, f64> = Default::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |message: String| Error::Parse { line, message };
        if rec.len() != width {
            return Err(err(format!(
                "expected {width} columns, found {}",
                rec.len()
            )));
        }
        let field = |k: usize| rec[k].trim();
        let id: usize = field(0)
            .parse()
            .map_err(|_| err(format!("bad trajectory_id `{}`", field(0))))?;
        let float = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number `{}` in column {}", field(k), k + 1)))
        };
        let t = float(1)?;
        if let Some(prev) = last_t.insert(id, t) {
            if t <= prev {
                return Err(err(format!(
                    "time {t} does not increase within trajectory {id}"
                )));
            }
        }
        for k in 0..n {
            states.push(float(2 + k)?);
        }
        for k in 0..m {
            inputs.push(float(2 + n + k)?);
        }
        let s: usize = field(width - 1)
            .parse()
            .ok()
            .filter(|s| *s >= 1)
            .ok_or_else(|| {
                err(format!(
                    "bad mode `{}` (mode ids start at 1)",
                    field(width - 1)
                ))
            })?;
        ids.push(id);
        times.push(t);
        modes.push(s);
    }
    let rows = times.len();
    TrajectoryDataset::new(
        times,
        DMatrix::from_row_slice(rows, n, &states),
        DMatrix::from_row_slice(rows, m, &inputs),
        modes,
        ids,
    )
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    read_dataset_csv(&fs::read_to_string(path)?)
}

/// Writes `t,x1..xn,mode,H,supply`.
pub fn write_rollout_csv(rollout: &Rollout, out: &mut impl Write) -> Result<()> {
    let n = rollout.states.ncols();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("x{j}")));
    header.extend(["mode", "H", "supply"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for k in 0..rollout.len() {
        let mut row = vec![num(rollout.times[k])];
        row.extend(rollout.states.row(k).iter().map(|v| num(*v)));
        row.push(rollout.modes[k].to_string());
        row.push(num(rollout.energy[k]));
        row.push(num(rollout.supply[k]));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_rollout(rollout: &Rollout, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_rollout_csv(rollout, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Training section of the run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub seed: u64,
    #[serde(flatten)]
    pub config: TrainConfig,
}

/// Sectioned run configuration, read from TOML.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub simulate: SimulationConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Applies one master seed to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.simulate.seed = seed;
        self.evaluate.simulation.seed = seed;
    }
}

pub fn model_to_json(model: &TrainedModel) -> Result<String> {
    serde_json::to_string(model).map_err(|e| Error::Format(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<TrainedModel> {
    #[derive(Deserialize)]
    struct Version {
        format_version: u32,
    }
    let v: Version =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model archive: {e}")))?;
    if v.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model archive version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            v.format_version
        )));
    }
    serde_json::from_str(text).map_err(|e| Error::Format(format!("model archive: {e}")))
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    model_from_json(&fs::read_to_string(path)?)
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub classifier_accuracy: f64,
    pub trajectory_mse: f64,
    pub passivity_violations: usize,
    pub failed_samples: usize,
    pub accuracy_ok: bool,
    pub mse_ok: bool,
    pub passivity_ok: bool,
    pub all_ok: bool,
}

impl From<&Metrics> for MetricsSummary {
    fn from(m: &Metrics) -> Self {
        MetricsSummary {
            classifier_accuracy: m.classifier_accuracy,
            trajectory_mse: m.trajectory_mse,
            passivity_violations: m.passivity_violations,
            failed_samples: m.failed_samples.len(),
            accuracy_ok: m.accuracy_ok,
            mse_ok: m.mse_ok,
            passivity_ok: m.passivity_ok,
            all_ok: m.all_ok(),
        }
    }
}

impl MetricsSummary {
    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "classifier_accuracy = {}\ntrajectory_mse = {}\npassivity_violations = {}\nfailed_samples = {}\n\
             accuracy_ok = {}\nmse_ok = {}\npassivity_ok = {}\nall_ok = {}\n",
            num(self.classifier_accuracy),
            num(self.trajectory_mse),
            self.passivity_violations,
            self.failed_samples,
            self.accuracy_ok,
            self.mse_ok,
            self.passivity_ok,
            self.all_ok
        )
    }

    /// JSON; the non-finite MSE of a diverged ensemble is written as `null`.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            classifier_accuracy: f64,
            trajectory_mse: Option<f64>,
            passivity_violations: usize,
            failed_samples: usize,
            accuracy_ok: bool,
            mse_ok: bool,
            passivity_ok: bool,
            all_ok: bool,
        }
        let r: Raw = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("metrics summary: {e}")))?;
        Ok(MetricsSummary {
            classifier_accuracy: r.classifier_accuracy,
            trajectory_mse: r.trajectory_mse.unwrap_or(f64::INFINITY),
            passivity_violations: r.passivity_violations,
            failed_samples: r.failed_samples,
            accuracy_ok: r.accuracy_ok,
            mse_ok: r.mse_ok,
            passivity_ok: r.passivity_ok,
            all_ok: r.all_ok,
        })
    }
}
