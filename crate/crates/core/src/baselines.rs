//! Reference forecasters: persistence, seasonal naive and per-node linear
//! autoregression. All take original-unit inputs (T′×N) and return T×N.

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const LINEAR_AR_KIND: &str = "linear-ar";
pub const DEFAULT_AR_ORDER: usize = 24;
pub const RIDGE_JITTER: f64 = 1e-8;

fn check_inputs(inputs: &Matrix) -> Result<()> {
    if inputs.rows() == 0 || inputs.cols() == 0 {
        return Err(Error::validation("forecast inputs are empty"));
    }
    Ok(())
}

pub fn persistence_forecast(inputs: &Matrix, horizon: usize) -> Result<Matrix> {
    check_inputs(inputs)?;
    let last = inputs.row(inputs.rows() - 1);
    Ok(Matrix::from_fn(horizon, inputs.cols(), |_, c| last[c]))
}

pub fn seasonal_naive_forecast(inputs: &Matrix, season: usize, horizon: usize) -> Result<Matrix> {
    check_inputs(inputs)?;
    if season == 0 {
        return Err(Error::validation("season must be at least 1"));
    }
    let t = inputs.rows();
    if t < season {
        return Err(Error::validation(format!(
            "input horizon {t} is shorter than season {season}"
        )));
    }
    Ok(Matrix::from_fn(horizon, inputs.cols(), |h, c| {
        inputs.get(t - season + h % season, c)
    }))
}

/// Per-node AR(p) coefficients. Row n holds `[intercept, a_1, .., a_p]`
/// where `a_j` multiplies the value `j` steps back.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearARParams {
    pub order: usize,
    pub node_ids: Vec<String>,
    pub coefficients: Matrix,
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Some(x)
}

fn fit_node(series: &[f64], p: usize, node: &str) -> Result<Vec<f64>> {
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        let mut coef = vec![0.0; p + 1];
        coef[0] = series[0];
        return Ok(coef);
    }
    let dim = p + 1;
    let mut xtx = Matrix::zeros(dim, dim);
    let mut xty = vec![0.0; dim];
    let mut row = vec![0.0; dim];
    for t in p..series.len() {
        row[0] = 1.0;
        for j in 1..=p {
            row[j] = series[t - j];
        }
        for i in 0..dim {
            xty[i] += row[i] * series[t];
            for j in 0..=i {
                let v = xtx.get(i, j) + row[i] * row[j];
                xtx.set(i, j, v);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            xtx.set(j, i, xtx.get(i, j));
        }
        xtx.set(i, i, xtx.get(i, i) + RIDGE_JITTER);
    }
    cholesky_solve(&xtx, &xty).ok_or_else(|| {
        Error::Numeric(format!("linear AR normal equations are singular for node {node}"))
    })
}

pub fn fit_linear_ar(train: &Matrix, node_ids: &[String], order: usize) -> Result<LinearARParams> {
    if order == 0 {
        return Err(Error::validation("AR order must be at least 1"));
    }
    if node_ids.len() != train.cols() {
        return Err(Error::validation("node id count does not match panel width"));
    }
    if train.rows() <= order + 1 {
        return Err(Error::validation(format!(
            "training length {} must exceed order + 1 = {}",
            train.rows(),
            order + 1
        )));
    }
    let rows: Vec<Vec<f64>> = (0..train.cols())
        .into_par_iter()
        .map(|n| fit_node(&train.column(n), order, &node_ids[n]))
        .collect::<Result<_>>()?;
    Ok(LinearARParams {
        order,
        node_ids: node_ids.to_vec(),
        coefficients: Matrix::from_rows(&rows)?,
    })
}

impl LinearARParams {
    pub fn forecast(&self, inputs: &Matrix, horizon: usize) -> Result<Matrix> {
        check_inputs(inputs)?;
        let p = self.order;
        if inputs.cols() != self.coefficients.rows() {
            return Err(Error::validation(format!(
                "inputs have {} nodes, model has {}",
                inputs.cols(),
                self.coefficients.rows()
            )));
        }
        if inputs.rows() < p {
            return Err(Error::validation(format!(
                "input horizon {} is shorter than AR order {p}",
                inputs.rows()
            )));
        }
        let mut out = Matrix::zeros(horizon, inputs.cols());
        for n in 0..inputs.cols() {
            let coef = self.coefficients.row(n);
            let mut hist: Vec<f64> = inputs.column(n)[inputs.rows() - p..].to_vec();
            for h in 0..horizon {
                let len = hist.len();
                let y = coef[0] + (1..=p).map(|j| coef[j] * hist[len - j]).sum::<f64>();
                out.set(h, n, y);
                hist.push(y);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(LINEAR_AR_KIND);
        ck.set_meta("order", self.order);
        ck.set_meta("nodes", self.node_ids.join(","));
        ck.push_matrix("coefficients", self.coefficients.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(LINEAR_AR_KIND)?;
        let order: usize = ck.meta_parse("order")?;
        let node_ids: Vec<String> = ck.meta("nodes")?.split(',').map(String::from).collect();
        let coefficients = ck.matrix("coefficients")?.clone();
        if coefficients.cols() != order + 1 || coefficients.rows() != node_ids.len() {
            return Err(Error::Checkpoint("coefficient shape does not match order and nodes".into()));
        }
        Ok(LinearARParams {
            order,
            node_ids,
            coefficients,
        })
    }
}

/// Baselines behind one interface so evaluation treats them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Persistence,
    SeasonalNaive { season: usize },
    LinearAr(LinearARParams),
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Persistence => "persistence",
            Baseline::SeasonalNaive { .. } => "seasonal-naive",
            Baseline::LinearAr(_) => "linear-ar",
        }
    }

    pub fn forecast(&self, inputs: &Matrix, horizon: usize) -> Result<Matrix> {
        match self {
            Baseline::Persistence => persistence_forecast(inputs, horizon),
            Baseline::SeasonalNaive { season } => seasonal_naive_forecast(inputs, *season, horizon),
            Baseline::LinearAr(p) => p.forecast(inputs, horizon),
        }
    }
}
