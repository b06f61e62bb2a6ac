//! Forecast metrics on the original traffic scale, per-horizon reports and
//! autocorrelation characterization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ScalerParams;
use crate::matrix::Matrix;

pub const DEFAULT_MAPE_FLOOR: f64 = 1e-6;
pub const DEFAULT_ACF_LAGS: usize = 10;
pub const SUMMARY_HORIZONS: [usize; 6] = [1, 3, 6, 9, 12, 24];
pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    /// Percentage, `None` when every observation fell below the floor.
    pub value: Option<f64>,
    pub excluded: usize,
}

fn check_len(obs: &[f64], pred: &[f64]) -> Result<()> {
    if obs.len() != pred.len() {
        return Err(Error::validation(format!(
            "observed and predicted lengths differ: {} vs {}",
            obs.len(),
            pred.len()
        )));
    }
    Ok(())
}

pub fn mape(obs: &[f64], pred: &[f64], floor: f64) -> Result<Mape> {
    check_len(obs, pred)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (o, p) in obs.iter().zip(pred) {
        if o.abs() >= floor {
            sum += (o - p).abs() / o.abs();
            used += 1;
        }
    }
    Ok(Mape {
        value: (used > 0).then(|| 100.0 * sum / used as f64),
        excluded: obs.len() - used,
    })
}

/// `None` when `obs` is constant.
pub fn r_squared(obs: &[f64], pred: &[f64]) -> Result<Option<f64>> {
    check_len(obs, pred)?;
    if obs.len() < 2 {
        return Err(Error::validation("r_squared needs at least two observations"));
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let scale = obs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if ss_tot <= (1e-12 * scale).powi(2) * obs.len() as f64 {
        return Ok(None);
    }
    let ss_res: f64 = obs.iter().zip(pred).map(|(o, p)| (o - p).powi(2)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

pub fn mae(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(obs, pred)?;
    if obs.is_empty() {
        return Err(Error::validation("mae of empty vectors"));
    }
    Ok(obs.iter().zip(pred).map(|(o, p)| (o - p).abs()).sum::<f64>() / obs.len() as f64)
}

fn mean_std(values: impl Iterator<Item = f64>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (Some(m), Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCell {
    pub node: String,
    pub horizon: usize,
    pub mape: Option<f64>,
    pub r2: Option<f64>,
    pub mae: f64,
    pub count: usize,
    pub excluded: usize,
}

/// Across-node mean and standard deviation (divisor n) for one horizon.
/// Undefined node metrics are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonAggregate {
    pub horizon: usize,
    pub mape_mean: Option<f64>,
    pub mape_std: Option<f64>,
    pub r2_mean: Option<f64>,
    pub r2_std: Option<f64>,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model_kind: String,
    pub config_hash: String,
    pub horizon: usize,
    pub cells: Vec<HorizonCell>,
    pub aggregates: Vec<HorizonAggregate>,
}

/// Builds a report from forecasts and targets already in original units.
/// Each element of `preds`/`targets` is one test window (T×N).
pub fn horizon_report(
    preds: &[Matrix],
    targets: &[Matrix],
    node_ids: &[String],
    floor: f64,
    model_kind: &str,
    config_hash: &str,
) -> Result<ForecastReport> {
    if preds.is_empty() {
        return Err(Error::validation("no test windows to evaluate"));
    }
    if preds.len() != targets.len() {
        return Err(Error::validation("prediction and target window counts differ"));
    }
    let (t, n) = targets[0].shape();
    if n != node_ids.len() {
        return Err(Error::validation("node id count does not match forecast width"));
    }
    for (p, y) in preds.iter().zip(targets) {
        if p.shape() != (t, n) || y.shape() != (t, n) {
            return Err(Error::Shape {
                op: "horizon_report",
                left: p.shape(),
                right: y.shape(),
            });
        }
    }
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|c| (0..t).map(move |h| (c, h))).collect();
    let cells: Vec<HorizonCell> = jobs
        .par_iter()
        .map(|&(c, h)| {
            let obs: Vec<f64> = targets.iter().map(|m| m.get(h, c)).collect();
            let pred: Vec<f64> = preds.iter().map(|m| m.get(h, c)).collect();
            let m = mape(&obs, &pred, floor)?;
            let r2 = if obs.len() >= 2 { r_squared(&obs, &pred)? } else { None };
            Ok(HorizonCell {
                node: node_ids[c].clone(),
                horizon: h + 1,
                mape: m.value,
                r2,
                mae: mae(&obs, &pred)?,
                count: obs.len(),
                excluded: m.excluded,
            })
        })
        .collect::<Result<_>>()?;
    let aggregates = (1..=t)
        .map(|h| {
            let at = || cells.iter().filter(move |c| c.horizon == h);
            let (mape_mean, mape_std) = mean_std(at().filter_map(|c| c.mape));
            let (r2_mean, r2_std) = mean_std(at().filter_map(|c| c.r2));
            let (mae_mean, mae_std) = mean_std(at().map(|c| c.mae));
            HorizonAggregate {
                horizon: h,
                mape_mean,
                mape_std,
                r2_mean,
                r2_std,
                mae_mean: mae_mean.unwrap_or(f64::NAN),
                mae_std: mae_std.unwrap_or(f64::NAN),
            }
        })
        .collect();
    Ok(ForecastReport {
        model_kind: model_kind.to_string(),
        config_hash: config_hash.to_string(),
        horizon: t,
        cells,
        aggregates,
    })
}

/// Inverts the scaler on both predictions and targets, then reports.
pub fn horizon_report_scaled(
    preds: &[Matrix],
    targets: &[Matrix],
    scaler: &ScalerParams,
    floor: f64,
    model_kind: &str,
    config_hash: &str,
) -> Result<ForecastReport> {
    let preds: Vec<Matrix> = preds.iter().map(|m| scaler.invert_matrix(m)).collect::<Result<_>>()?;
    let targets: Vec<Matrix> = targets.iter().map(|m| scaler.invert_matrix(m)).collect::<Result<_>>()?;
    horizon_report(&preds, &targets, &scaler.node_ids, floor, model_kind, config_hash)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:?}"))
}

impl ForecastReport {
    pub fn horizon_mape(&self) -> Vec<Option<f64>> {
        self.aggregates.iter().map(|a| a.mape_mean).collect()
    }

    /// Mean MAPE over every defined node×horizon cell.
    pub fn overall_mape(&self) -> Option<f64> {
        mean_std(self.cells.iter().filter_map(|c| c.mape)).0
    }

    pub fn overall_r2(&self) -> Option<f64> {
        mean_std(self.cells.iter().filter_map(|c| c.r2)).0
    }

    pub fn summary(&self) -> Vec<&HorizonAggregate> {
        self.aggregates
            .iter()
            .filter(|a| SUMMARY_HORIZONS.contains(&a.horizon))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,horizon,mape_pct,r2,mae_gbps,count,excluded\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:?},{},{}\n",
                c.node,
                c.horizon,
                fmt_opt(c.mape),
                fmt_opt(c.r2),
                c.mae,
                c.count,
                c.excluded
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("horizon,mape_mean,mape_std,r2_mean,r2_std,mae_mean,mae_std\n");
        for a in self.summary() {
            out.push_str(&format!(
                "{},{},{},{},{},{:?},{:?}\n",
                a.horizon,
                fmt_opt(a.mape_mean),
                fmt_opt(a.mape_std),
                fmt_opt(a.r2_mean),
                fmt_opt(a.r2_std),
                a.mae_mean,
                a.mae_std
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            model_kind: &'a str,
            config_hash: &'a str,
            horizon: usize,
            overall_mape: Option<f64>,
            overall_r2: Option<f64>,
            per_horizon: &'a [HorizonAggregate],
            summary: Vec<&'a HorizonAggregate>,
        }
        serde_json::to_string_pretty(&Out {
            model_kind: &self.model_kind,
            config_hash: &self.config_hash,
            horizon: self.horizon,
            overall_mape: self.overall_mape(),
            overall_r2: self.overall_r2(),
            per_horizon: &self.aggregates,
            summary: self.summary(),
        })
        .expect("report serializes")
    }
}

fn check_series(series: &[f64], lags: usize) -> Result<()> {
    if series.len() <= lags {
        return Err(Error::validation(format!(
            "series length {} must exceed lag count {lags}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("series contains non-finite values"));
    }
    Ok(())
}

/// Biased sample autocorrelation at lags 1..=`lags`; `None` for a constant
/// series.
pub fn acf(series: &[f64], lags: usize) -> Result<Option<Vec<f64>>> {
    check_series(series, lags)?;
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0: f64 = dev.iter().map(|d| d * d).sum();
    let scale = series.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if c0 <= (1e-12 * scale).powi(2) * n as f64 {
        return Ok(None);
    }
    Ok(Some(
        (1..=lags)
            .map(|k| dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
            .collect(),
    ))
}

/// Partial autocorrelations from an ACF (lags 1..) via Durbin–Levinson.
pub fn pacf_from_acf(r: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    let mut phi: Vec<f64> = Vec::new();
    for k in 1..=r.len() {
        let num = r[k - 1] - (1..k).map(|j| phi[j - 1] * r[k - j - 1]).sum::<f64>();
        let den = 1.0 - (1..k).map(|j| phi[j - 1] * r[j - 1]).sum::<f64>();
        let pkk = if den.abs() < 1e-300 { 0.0 } else { num / den };
        let next: Vec<f64> = (1..k)
            .map(|j| phi[j - 1] - pkk * phi[k - j - 1])
            .chain(std::iter::once(pkk))
            .collect();
        phi = next;
        out.push(pkk);
    }
    out
}

pub fn pacf(series: &[f64], lags: usize) -> Result<Option<Vec<f64>>> {
    Ok(acf(series, lags)?.map(|r| pacf_from_acf(&r)))
}

pub fn mean_acf(series: &[f64], lags: usize) -> Result<Option<f64>> {
    Ok(acf(series, lags)?.map(|r| r.iter().sum::<f64>() / r.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcfProfile {
    pub node: String,
    pub lags: usize,
    /// `None` marks a constant node.
    pub acf: Option<Vec<f64>>,
    pub pacf: Option<Vec<f64>>,
    pub mean_acf: Option<f64>,
}

pub fn characterize(values: &Matrix, node_ids: &[String], lags: usize) -> Result<Vec<AcfProfile>> {
    if node_ids.len() != values.cols() {
        return Err(Error::validation("node id count does not match panel width"));
    }
    (0..values.cols())
        .into_par_iter()
        .map(|c| {
            let r = acf(&values.column(c), lags)?;
            Ok(AcfProfile {
                node: node_ids[c].clone(),
                lags,
                pacf: r.as_deref().map(pacf_from_acf),
                mean_acf: r.as_ref().map(|r| r.iter().sum::<f64>() / lags as f64),
                acf: r,
            })
        })
        .collect()
}

/// Descending by mean ACF; undefined nodes last, ties by node id.
pub fn rank_by_mean_acf(profiles: &[AcfProfile]) -> Vec<&AcfProfile> {
    let mut out: Vec<&AcfProfile> = profiles.iter().collect();
    out.sort_by(|a, b| match (a.mean_acf, b.mean_acf) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.node.cmp(&b.node)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.node.cmp(&b.node),
    });
    out
}

pub fn acf_profiles_csv(profiles: &[AcfProfile]) -> String {
    let lags = profiles.first().map_or(0, |p| p.lags);
    let mut out = String::from("node,mean_acf");
    for k in 1..=lags {
        out.push_str(&format!(",acf_{k}"));
    }
    for k in 1..=lags {
        out.push_str(&format!(",pacf_{k}"));
    }
    out.push('\n');
    for p in profiles {
        out.push_str(&p.node);
        out.push(',');
        out.push_str(&fmt_opt(p.mean_acf));
        for series in [&p.acf, &p.pacf] {
            for k in 0..lags {
                out.push(',');
                out.push_str(&fmt_opt(series.as_ref().map(|v| v[k])));
            }
        }
        out.push('\n');
    }
    out
}

pub fn ranking_csv(profiles: &[AcfProfile]) -> String {
    let mut out = String::from("rank,node,mean_acf\n");
    for (i, p) in rank_by_mean_acf(profiles).iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, p.node, fmt_opt(p.mean_acf)));
    }
    out
}
