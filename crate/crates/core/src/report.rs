//! Run directories, manifests, and plot-ready data series.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{DistanceMatrix, GapReport, Regime};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub timestamp: u64,
    pub command: String,
    pub args: Vec<String>,
    pub checkpoint_hashes: Vec<String>,
    pub contract_ids: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

/// Writes artifacts into `runs/<run-id>/` and records each one in the
/// manifest, which is written last.
pub struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunWriter {
    pub fn create(root: &Path, run_id: String, command: &str, args: Vec<String>) -> Result<Self> {
        let dir = root.join(&run_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            manifest: RunManifest {
                run_id,
                timestamp: timestamp(),
                command: command.to_string(),
                args,
                checkpoint_hashes: Vec::new(),
                contract_ids: Vec::new(),
                outputs: Vec::new(),
                tool_version: TOOL_VERSION.to_string(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn add_checkpoint_hash(&mut self, hash: String) {
        if !self.manifest.checkpoint_hashes.contains(&hash) {
            self.manifest.checkpoint_hashes.push(hash);
        }
    }

    pub fn add_contract_id(&mut self, id: String) {
        if !self.manifest.contract_ids.contains(&id) {
            self.manifest.contract_ids.push(id);
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn emit(&mut self, stem: &str, report: &dyn Report, formats: &[Format]) -> Result<Vec<PathBuf>> {
        emit_report(self, stem, report, formats)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.outputs.sort();
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Plotdata,
}

/// One plotted point. Heatmaps use `value` for the cell; line series leave
/// it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub value: Option<f64>,
}

pub fn plot_csv(points: &[PlotPoint]) -> String {
    let mut s = String::from("series,x,y,value\n");
    for p in points {
        let v = p.value.map(|v| format!("{v:.9}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", p.series, p.x, p.y, v));
    }
    s
}

/// Something that can be written as JSON and optionally as CSV or plot data.
pub trait Report {
    fn to_json_value(&self) -> Result<serde_json::Value>;
    fn to_csv(&self) -> Option<String> {
        None
    }
    fn plotdata(&self) -> Option<Vec<PlotPoint>> {
        None
    }
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>.plot.csv` as requested and
/// supported by the report.
pub fn emit_report(w: &mut RunWriter, stem: &str, report: &dyn Report, formats: &[Format]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for f in formats {
        match f {
            Format::Json => paths.push(w.write_json(&format!("{stem}.json"), &report.to_json_value()?)?),
            Format::Csv => {
                if let Some(csv) = report.to_csv() {
                    paths.push(w.write_text(&format!("{stem}.csv"), &csv)?);
                }
            }
            Format::Plotdata => {
                if let Some(points) = report.plotdata() {
                    paths.push(w.write_text(&format!("{stem}.plot.csv"), &plot_csv(&points))?);
                }
            }
        }
    }
    Ok(paths)
}

/// `L x L` heatmap of headline distances; self-pairs are 0 and pairs absent
/// from the matrix are left empty.
pub fn heatmap(m: &DistanceMatrix) -> Vec<PlotPoint> {
    let series = format!("heatmap:{}", m.protocol);
    let mut out = Vec::with_capacity(m.n_layers * m.n_layers);
    for i in 0..m.n_layers {
        for j in 0..m.n_layers {
            let value = if i == j { Some(0.0) } else { m.distance(i, j) };
            out.push(PlotPoint {
                series: series.clone(),
                x: i as f64,
                y: j as f64,
                value,
            });
        }
    }
    out
}

/// Distance of each adjacent pair `(i, i + 1)` against `i`.
pub fn adjacent_profile(m: &DistanceMatrix) -> Vec<PlotPoint> {
    (0..m.n_layers.saturating_sub(1))
        .map(|i| PlotPoint {
            series: format!("adjacent:{}", m.protocol),
            x: i as f64,
            y: m.distance(i, i + 1).unwrap_or(f64::NAN),
            value: None,
        })
        .collect()
}

/// Protocol gap of each pair against the pair's mean depth.
pub fn gap_vs_depth(r: &GapReport) -> Vec<PlotPoint> {
    r.pairs
        .iter()
        .filter_map(|p| {
            Some(PlotPoint {
                series: "gap".into(),
                x: (p.i + p.j) as f64 / 2.0,
                y: p.gap?,
                value: None,
            })
        })
        .collect()
}

impl Report for DistanceMatrix {
    fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    fn to_csv(&self) -> Option<String> {
        Some(DistanceMatrix::to_csv(self))
    }

    fn plotdata(&self) -> Option<Vec<PlotPoint>> {
        let mut p = heatmap(self);
        p.extend(adjacent_profile(self));
        Some(p)
    }
}

impl Report for GapReport {
    fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    fn to_csv(&self) -> Option<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let mut s = String::from("i,j,d_repl,d_inter,gap,ratio,flag\n");
        for p in &self.pairs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.i,
                p.j,
                f(p.d_repl),
                f(p.d_inter),
                f(p.gap),
                f(p.ratio),
                p.flag.as_deref().unwrap_or("")
            ));
        }
        Some(s)
    }

    fn plotdata(&self) -> Option<Vec<PlotPoint>> {
        Some(gap_vs_depth(self))
    }
}

/// Any serializable value as a JSON-only report.
pub struct JsonReport<'a, T: Serialize>(pub &'a T);

impl<T: Serialize> Report for JsonReport<'_, T> {
    fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.0)?)
    }
}

/// A serializable value with a CSV rendering.
pub struct TableReport<'a, T: Serialize>(pub &'a T, pub String);

impl<T: Serialize> Report for TableReport<'_, T> {
    fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.0)?)
    }

    fn to_csv(&self) -> Option<String> {
        Some(self.1.clone())
    }
}

impl Regime {
    /// What the verdict suggests doing before removing or merging layers.
    pub fn advice(self) -> &'static str {
        match self {
            Regime::Divergent => {
                "high replacement, low interchange (I/R well below 1): prefer interchange-guided selection"
            }
            Regime::Tied => {
                "replacement and interchange agree (I/R near 1): either swap protocol is reasonable; \
                 calibrated iterative methods may win at larger budgets"
            }
            Regime::WeakSignal => {
                "high replacement and high interchange: swap scores alone are weak; add calibration data \
                 or another signal"
            }
            Regime::Indeterminate => "no rule matched; inspect the per-pair gaps before choosing a selector",
        }
    }
}
