use std::path::Path;

use crate::envs::Game;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "run_id,game,seed,arch,env_step,episode_return,loss,dormant_fraction";

/// One evaluation point. `loss` is the mean training loss since the previous
/// row; `loss` and `dormant_fraction` are empty before learning starts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub game: Game,
    pub seed: u64,
    pub arch: String,
    pub env_step: u64,
    pub episode_return: f64,
    pub loss: Option<f64>,
    pub dormant_fraction: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.game.to_string(),
            r.seed.to_string(),
            r.arch.clone(),
            r.env_step.to_string(),
            r.episode_return.to_string(),
            opt(r.loss),
            opt(r.dormant_fraction),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv_string(rows)).map_err(|e| Error::io(path, e))
}

/// Parses and validates a metrics CSV.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, msg: String| Error::Format {
        path: format!("metrics.csv line {line}"),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(err(1, format!("header must be `{METRICS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let num = |j: usize, name: &str| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("{name}: not a finite number `{}`", &rec[j])))
        };
        let optional = |j: usize, name: &str| -> Result<Option<f64>> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                num(j, name).map(Some)
            }
        };
        let int = |j: usize, name: &str| -> Result<u64> {
            rec[j].parse::<u64>().map_err(|_| err(line, format!("{name}: not an integer `{}`", &rec[j])))
        };
        if rec[0].is_empty() || rec[3].is_empty() {
            return Err(err(line, "run_id and arch must be non-empty".into()));
        }
        let dormant = optional(7, "dormant_fraction")?;
        if dormant.is_some_and(|d| !(0.0..=1.0).contains(&d)) {
            return Err(err(line, "dormant_fraction must lie in [0, 1]".into()));
        }
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            game: rec[1].parse().map_err(|e: Error| err(line, e.to_string()))?,
            seed: int(2, "seed")?,
            arch: rec[3].to_string(),
            env_step: int(4, "env_step")?,
            episode_return: num(5, "episode_return")?,
            loss: optional(6, "loss")?,
            dormant_fraction: dormant,
        });
    }
    Ok(rows)
}
