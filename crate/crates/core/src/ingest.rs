//! Trace ingestion: parsing raw counter exports, hourly aggregation, gap
//! filling, chronological splitting and min-max scaling.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const SECONDS_PER_HOUR: i64 = 3600;
pub const BYTES_PER_GB: f64 = 1e9;

/// One cell of a raw trace export.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub timestamp: i64,
    pub node_id: String,
    pub volume: f64,
}

/// Time-aligned traffic values, `T` rows by `N` node columns, in GB/s.
///
/// Cells flagged in `mask` were missing in the source and have been (or will
/// be) filled. Before [`fill_gaps`] those cells hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficPanel {
    pub start_time: i64,
    pub step: i64,
    pub node_ids: Vec<String>,
    pub values: Matrix,
    pub mask: Vec<bool>,
}

impl TrafficPanel {
    pub fn new(start_time: i64, step: i64, node_ids: Vec<String>, values: Matrix) -> Result<Self> {
        if values.cols() != node_ids.len() {
            return Err(Error::validation(format!(
                "panel has {} columns but {} node ids",
                values.cols(),
                node_ids.len()
            )));
        }
        check_unique(&node_ids)?;
        if step <= 0 {
            return Err(Error::validation("panel step must be positive"));
        }
        let mask = vec![false; values.len()];
        Ok(TrafficPanel {
            start_time,
            step,
            node_ids,
            values,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn timestamp(&self, row: usize) -> i64 {
        self.start_time + row as i64 * self.step
    }

    pub fn is_filled(&self, row: usize, node: usize) -> bool {
        self.mask[row * self.num_nodes() + node]
    }

    pub fn node_series(&self, node: usize) -> Vec<f64> {
        self.values.column(node)
    }

    /// Rows `[start, end)` as a new panel.
    pub fn slice(&self, start: usize, end: usize) -> TrafficPanel {
        let n = self.num_nodes();
        TrafficPanel {
            start_time: self.timestamp(start),
            step: self.step,
            node_ids: self.node_ids.clone(),
            values: self.values.row_range(start, end),
            mask: self.mask[start * n..end * n].to_vec(),
        }
    }

    /// Writes the panel CSV and its `.mask.csv` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let mut mask = String::new();
        let header = format!("timestamp,{}\n", self.node_ids.join(","));
        out.push_str(&header);
        mask.push_str(&header);
        for r in 0..self.len() {
            let ts = iso8601(self.timestamp(r))?;
            out.push_str(&ts);
            mask.push_str(&ts);
            for c in 0..self.num_nodes() {
                out.push(',');
                out.push_str(&format!("{:?}", self.values.get(r, c)));
                mask.push_str(if self.is_filled(r, c) { ",1" } else { ",0" });
            }
            out.push('\n');
            mask.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let mpath = mask_path(path);
        std::fs::write(&mpath, mask).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    /// Reads a panel CSV; the mask sidecar is optional.
    pub fn read_csv(path: &Path) -> Result<TrafficPanel> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (times, node_ids, values) = read_wide_csv(std::io::BufReader::new(file), |s| {
            parse_iso8601(s)
        })?;
        let step = if times.len() >= 2 {
            times[1] - times[0]
        } else {
            SECONDS_PER_HOUR
        };
        for (i, w) in times.windows(2).enumerate() {
            if w[1] - w[0] != step || step <= 0 {
                return Err(Error::Parse {
                    line: i + 3,
                    message: "panel rows must be strictly ordered with a constant step".into(),
                });
            }
        }
        let start = times.first().copied().unwrap_or(0);
        let rows = values.len();
        let n = node_ids.len();
        let flat: Vec<f64> = values.into_iter().flatten().collect();
        let mut panel = TrafficPanel::new(start, step, node_ids, Matrix::from_vec(rows, n, flat)?)?;
        let mpath = mask_path(path);
        if mpath.exists() {
            let file = std::fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let (_, mask_ids, mask_rows) =
                read_wide_csv(std::io::BufReader::new(file), parse_iso8601)?;
            if mask_ids != panel.node_ids || mask_rows.len() != rows {
                return Err(Error::validation("mask sidecar does not match panel layout"));
            }
            panel.mask = mask_rows.into_iter().flatten().map(|v| v != 0.0).collect();
        }
        Ok(panel)
    }
}

pub fn mask_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.mask.csv"))
}

pub fn iso8601(ts: i64) -> Result<String> {
    let dt: DateTime<Utc> = DateTime::from_timestamp(ts, 0)
        .ok_or_else(|| Error::validation(format!("timestamp {ts} out of range")))?;
    Ok(dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}

fn parse_iso8601(s: &str) -> std::result::Result<i64, String> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

type WideRows = (Vec<i64>, Vec<String>, Vec<Vec<f64>>);

fn read_wide_csv<R: std::io::Read>(
    reader: R,
    parse_time: impl Fn(&str) -> std::result::Result<i64, String>,
) -> Result<WideRows> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let node_ids: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let ts = parse_time(rec.get(0).unwrap_or("").trim())
            .map_err(|message| Error::Parse { line, message })?;
        let row = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("bad value {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != node_ids.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} values, found {}", node_ids.len(), row.len()),
            });
        }
        times.push(ts);
        rows.push(row);
    }
    Ok((times, node_ids, rows))
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(Error::validation(format!("empty node id in column {i}")));
        }
        if seen.insert(id.as_str(), i).is_some() {
            return Err(Error::validation(format!("duplicate node id {id:?}")));
        }
    }
    Ok(())
}

/// Parses a trace export.
///
/// Accepted layouts: long format with header `timestamp,node,volume_bytes`,
/// wide format with header `timestamp,<node1>,<node2>,...`, or headerless
/// long-format rows. Empty wide-format cells are skipped.
pub fn parse_traces<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    let mut wide_nodes: Option<Vec<String>> = None;
    let mut first = true;
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first {
            first = false;
            if fields[0].eq_ignore_ascii_case("timestamp") {
                let is_long = fields.len() == 3
                    && fields[1].eq_ignore_ascii_case("node")
                    && fields[2].eq_ignore_ascii_case("volume_bytes");
                if !is_long {
                    let nodes: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
                    if nodes.is_empty() {
                        return Err(Error::Parse {
                            line: lineno,
                            message: "wide header names no node columns".into(),
                        });
                    }
                    check_unique(&nodes).map_err(|e| Error::Parse {
                        line: lineno,
                        message: e.to_string(),
                    })?;
                    wide_nodes = Some(nodes);
                }
                continue;
            }
        }
        let timestamp = parse_timestamp(fields[0], lineno)?;
        match &wide_nodes {
            Some(nodes) => {
                if fields.len() != nodes.len() + 1 {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!(
                            "expected {} columns, found {}",
                            nodes.len() + 1,
                            fields.len()
                        ),
                    });
                }
                for (node, cell) in nodes.iter().zip(&fields[1..]) {
                    if cell.is_empty() {
                        continue;
                    }
                    let volume = parse_volume(cell, lineno)?;
                    records.push(TraceRecord {
                        timestamp,
                        node_id: node.clone(),
                        volume,
                    });
                }
            }
            None => {
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("expected timestamp,node,volume_bytes; found {} fields", fields.len()),
                    });
                }
                if fields[1].is_empty() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "empty node id".into(),
                    });
                }
                let volume = parse_volume(fields[2], lineno)?;
                records.push(TraceRecord {
                    timestamp,
                    node_id: fields[1].to_string(),
                    volume,
                });
            }
        }
    }
    Ok(records)
}

fn parse_timestamp(s: &str, line: usize) -> Result<i64> {
    let ts: i64 = s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad timestamp {s:?}"),
    })?;
    if ts < 0 {
        return Err(Error::Parse {
            line,
            message: format!("negative timestamp {ts}"),
        });
    }
    Ok(ts)
}

fn parse_volume(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad volume {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite volume {s:?}"),
        });
    }
    if v < 0.0 {
        return Err(Error::validation(format!(
            "negative volume {v} at line {line}"
        )));
    }
    Ok(v)
}

/// Sums records into hourly bins and converts to GB/s.
///
/// Bins are aligned to whole hours (UTC). Bins with no contributing record
/// hold `NaN` and are flagged in the mask.
pub fn aggregate_hourly(records: &[TraceRecord]) -> Result<TrafficPanel> {
    aggregate(records, SECONDS_PER_HOUR)
}

pub fn aggregate(records: &[TraceRecord], step: i64) -> Result<TrafficPanel> {
    if records.is_empty() {
        return Err(Error::validation("no trace records to aggregate"));
    }
    let mut node_ids: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if !index.contains_key(r.node_id.as_str()) {
            index.insert(r.node_id.as_str(), node_ids.len());
            node_ids.push(r.node_id.clone());
        }
    }
    let min_ts = records.iter().map(|r| r.timestamp).min().unwrap_or(0);
    let max_ts = records.iter().map(|r| r.timestamp).max().unwrap_or(0);
    let start = min_ts.div_euclid(step) * step;
    let bins = ((max_ts - start).div_euclid(step) + 1) as usize;
    let n = node_ids.len();
    let mut sums = vec![0.0f64; bins * n];
    let mut seen = vec![false; bins * n];
    for r in records {
        let b = ((r.timestamp - start).div_euclid(step)) as usize;
        let c = index[r.node_id.as_str()];
        sums[b * n + c] += r.volume;
        seen[b * n + c] = true;
    }
    let denom = step as f64 * BYTES_PER_GB;
    let values: Vec<f64> = sums
        .iter()
        .zip(&seen)
        .map(|(&s, &ok)| if ok { s / denom } else { f64::NAN })
        .collect();
    let mut panel = TrafficPanel::new(start, step, node_ids, Matrix::from_vec(bins, n, values)?)?;
    panel.mask = seen.iter().map(|ok| !ok).collect();
    Ok(panel)
}

/// Replaces missing (`NaN`) cells with the mean of the nearest observed
/// values before and after; edge gaps copy the single nearest observation.
pub fn fill_gaps(panel: &TrafficPanel) -> Result<TrafficPanel> {
    let mut out = panel.clone();
    let (t, n) = panel.values.shape();
    for c in 0..n {
        let series = panel.node_series(c);
        let observed: Vec<usize> = (0..t).filter(|&r| series[r].is_finite()).collect();
        if observed.is_empty() {
            return Err(Error::validation(format!(
                "node {:?} has no observed values",
                panel.node_ids[c]
            )));
        }
        let mut next_obs = 0usize;
        for r in 0..t {
            if series[r].is_finite() {
                continue;
            }
            while next_obs < observed.len() && observed[next_obs] < r {
                next_obs += 1;
            }
            let before = next_obs.checked_sub(1).map(|k| series[observed[k]]);
            let after = observed.get(next_obs).map(|&k| series[k]);
            let v = match (before, after) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("node has observations"),
            };
            out.values.set(r, c, v);
            out.mask[r * n + c] = true;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::validation("split fractions must be positive"));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Segment lengths for a series of `t` steps.
    pub fn lengths(&self, t: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = (t as f64 * self.train_fraction + 1e-9).floor() as usize;
        let val = (t as f64 * self.val_fraction + 1e-9).floor() as usize;
        let test = t.saturating_sub(train + val);
        Ok((train, val, test))
    }
}

/// Contiguous train/validation/test segments in time order. Each segment must
/// hold at least one window of `min_window` steps.
pub fn chronological_split(
    panel: &TrafficPanel,
    spec: &SplitSpec,
    min_window: usize,
) -> Result<(TrafficPanel, TrafficPanel, TrafficPanel)> {
    let t = panel.len();
    let (a, b, c) = spec.lengths(t)?;
    let min_w = min_window.max(1);
    if a < min_w || b < min_w || c < min_w {
        let smallest = spec
            .train_fraction
            .min(spec.val_fraction)
            .min(spec.test_fraction);
        let needed = (min_w as f64 / smallest).ceil() as usize;
        return Err(Error::validation(format!(
            "panel of {t} steps too short: each split needs {min_w} steps, requiring T >= {needed}"
        )));
    }
    Ok((panel.slice(0, a), panel.slice(a, a + b), panel.slice(a + b, t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub node_ids: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub fitted_on: String,
}

/// Fits per-node min-max parameters on the training segment. With
/// `global = true` a single range over all nodes is used instead.
pub fn fit_scaler(train: &TrafficPanel, global: bool) -> Result<ScalerParams> {
    if train.is_empty() {
        return Err(Error::validation("cannot fit scaler on an empty panel"));
    }
    let n = train.num_nodes();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for r in 0..train.len() {
        for (c, &v) in train.values.row(r).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite value in node {:?}; fill gaps before scaling",
                    train.node_ids[c]
                )));
            }
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    if global {
        let lo = min.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        min.iter_mut().for_each(|m| *m = lo);
        max.iter_mut().for_each(|m| *m = hi);
    }
    Ok(ScalerParams {
        node_ids: train.node_ids.clone(),
        min,
        max,
        fitted_on: "train".into(),
    })
}

impl ScalerParams {
    fn check(&self, node_ids: &[String]) -> Result<()> {
        if self.node_ids != node_ids {
            return Err(Error::validation(
                "scaler node ids do not match panel node ids",
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn scale_value(&self, node: usize, x: f64) -> f64 {
        let range = self.max[node] - self.min[node];
        if range > 0.0 {
            (x - self.min[node]) / range
        } else {
            0.0
        }
    }

    #[inline]
    pub fn invert_value(&self, node: usize, y: f64) -> f64 {
        let range = self.max[node] - self.min[node];
        if range > 0.0 {
            y * range + self.min[node]
        } else {
            self.min[node]
        }
    }

    /// Scales a `rows × N` matrix whose columns follow this scaler's node order.
    pub fn scale_matrix(&self, m: &Matrix) -> Result<Matrix> {
        self.check_width(m)?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            self.scale_value(j, m.get(i, j))
        }))
    }

    pub fn invert_matrix(&self, m: &Matrix) -> Result<Matrix> {
        self.check_width(m)?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            self.invert_value(j, m.get(i, j))
        }))
    }

    fn check_width(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.min.len() {
            return Err(Error::validation(format!(
                "matrix has {} columns, scaler has {} nodes",
                m.cols(),
                self.min.len()
            )));
        }
        Ok(())
    }
}

pub fn apply_scaler(panel: &TrafficPanel, params: &ScalerParams) -> Result<TrafficPanel> {
    params.check(&panel.node_ids)?;
    let mut out = panel.clone();
    out.values = params.scale_matrix(&panel.values)?;
    Ok(out)
}

pub fn invert_scaler(panel: &TrafficPanel, params: &ScalerParams) -> Result<TrafficPanel> {
    params.check(&panel.node_ids)?;
    let mut out = panel.clone();
    out.values = params.invert_matrix(&panel.values)?;
    Ok(out)
}

/// Reads a trace file from disk.
pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_traces(std::io::BufReader::new(file))
}

/// Writes records in long format.
pub fn write_traces<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(w, "timestamp,node,volume_bytes")?;
    for r in records {
        writeln!(w, "{},{},{}", r.timestamp, r.node_id, r.volume)?;
    }
    Ok(())
}
