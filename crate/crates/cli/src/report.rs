use std::fs;
use std::path::{Path, PathBuf};

use fedyolo_core::fl::UpdateMode;
use fedyolo_core::telemetry;
use serde::Serialize;
use serde_json::Value;

use crate::config::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::experiment::ResultFile;

/// Ratios above this are flagged, as in ">100x less communication".
pub const RATIO_FLAG: f64 = 100.0;

/// Reads `dir/result.json`, checking the schema version first.
pub fn load_result(dir: &Path) -> Result<ResultFile> {
    let path = dir.join("result.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.clone(),
        reason,
    };
    let v: Value = serde_json::from_str(&text).map_err(|e| corrupt(format!("invalid JSON: {e}")))?;
    let found = v
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| corrupt("missing schema_version".into()))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            path: path.clone(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(v).map_err(|e| corrupt(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub run: String,
    pub scheme: String,
    pub update_mode: String,
    pub model: String,
    pub module: String,
    pub tasks: usize,
    pub homogeneous: bool,
    pub global_acc: f64,
    pub mean_local_acc: f64,
    pub per_task_acc: Vec<f64>,
    pub forgetting_ratio: Option<f64>,
    pub hetero_drop: Option<f64>,
    pub up_params: u64,
    pub down_params: u64,
    /// Uploaded parameters per sampled client per round.
    pub up_per_client_round: f64,
    /// Full-update upload over this run's, against the first full-update
    /// run of the same model.
    pub comm_ratio: Option<f64>,
}

impl Row {
    pub fn flagged(&self) -> bool {
        self.comm_ratio.is_some_and(|r| r > RATIO_FLAG)
    }
}

fn family(r: &ResultFile) -> (String, String, &'static str, &'static str, usize) {
    (
        r.config.model.clone(),
        r.config.module.kind.as_str().to_string(),
        r.config.scheme.as_str(),
        r.config.fed.update_mode.as_str(),
        r.config.tasks.len(),
    )
}

fn homogeneous(r: &ResultFile) -> bool {
    r.config.tasks.iter().all(|t| t.partition.is_homogeneous(t.data.num_classes()))
}

/// One row per run. Heterogeneous runs get a hetero drop against the
/// homogeneous run of the same model, module, scheme, mode and task count.
pub fn tabulate(dirs: &[PathBuf]) -> Result<Vec<Row>> {
    let runs = dirs.iter().map(|d| load_result(d)).collect::<Result<Vec<_>>>()?;
    let per_client_round = |r: &ResultFile| {
        let n = (r.result.rounds * r.result.clients_per_round) as f64;
        if n == 0.0 {
            0.0
        } else {
            r.result.comm.up_params as f64 / n
        }
    };
    let mut rows = Vec::with_capacity(runs.len());
    for (dir, r) in dirs.iter().zip(&runs) {
        let last = r.result.final_metrics().ok_or_else(|| Error::Corrupt {
            path: dir.join("result.json"),
            reason: "no metrics rows".into(),
        })?;
        let hetero_drop = if homogeneous(r) {
            None
        } else {
            runs.iter()
                .find(|h| homogeneous(h) && family(h) == family(r))
                .and_then(|h| h.result.final_metrics())
                .and_then(|h| telemetry::hetero_drop(h.global_acc, last.global_acc).ok())
        };
        let up = per_client_round(r);
        let comm_ratio = runs
            .iter()
            .find(|f| f.config.fed.update_mode == UpdateMode::Full && f.config.model == r.config.model)
            .map(per_client_round)
            .filter(|_| up > 0.0)
            .map(|full| full / up);
        rows.push(Row {
            run: dir.display().to_string(),
            scheme: r.config.scheme.as_str().into(),
            update_mode: r.config.fed.update_mode.as_str().into(),
            model: r.config.model.clone(),
            module: r.config.module.kind.as_str().into(),
            tasks: r.result.num_tasks,
            homogeneous: homogeneous(r),
            global_acc: last.global_acc,
            mean_local_acc: last.mean_local_acc,
            per_task_acc: last.per_task_acc.clone(),
            forgetting_ratio: r.result.personalization.as_ref().and_then(|p| p.forgetting_ratio),
            hetero_drop,
            up_params: r.result.comm.up_params,
            down_params: r.result.comm.down_params,
            up_per_client_round: up,
            comm_ratio,
        });
    }
    Ok(rows)
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

const HEADER: [&str; 15] = [
    "run",
    "scheme",
    "update_mode",
    "model",
    "module",
    "tasks",
    "global_acc",
    "mean_local_acc",
    "per_task_acc",
    "forgetting_ratio",
    "hetero_drop",
    "up_params",
    "down_params",
    "comm_ratio",
    "flag",
];

fn cells(r: &Row, ratio_digits: usize) -> [String; 15] {
    [
        r.run.clone(),
        r.scheme.clone(),
        r.update_mode.clone(),
        r.model.clone(),
        r.module.clone(),
        r.tasks.to_string(),
        format!("{:.4}", r.global_acc),
        format!("{:.4}", r.mean_local_acc),
        r.per_task_acc.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(";"),
        opt(r.forgetting_ratio, 4),
        opt(r.hetero_drop, 4),
        r.up_params.to_string(),
        r.down_params.to_string(),
        opt(r.comm_ratio, ratio_digits),
        if r.flagged() { ">100x".into() } else { String::new() },
    ]
}

/// Aligned plain-text table.
pub fn render_text(rows: &[Row]) -> String {
    let body: Vec<[String; 15]> = rows.iter().map(|r| cells(r, 1)).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([HEADER[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cols: Vec<&str>| {
        cols.iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(HEADER.to_vec());
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn write_csv<W: std::io::Write>(rows: &[Row], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record(cells(r, 4))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
