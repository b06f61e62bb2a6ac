//! End-to-end experiment plumbing shared by the CLI: split, scale, build
//! the graph, train, forecast test windows and report.

use rayon::prelude::*;

use crate::baselines::Baseline;
use crate::config::{FlatConfig, HYPER_KEYS, TRAIN_KEYS};
use crate::error::{Error, Result};
use crate::evaluation::{horizon_report, ForecastReport};
use crate::graph::{static_adjacency, Topology};
use crate::ingest::{apply_scaler, chronological_split, fit_scaler, ScalerParams, SplitSpec, TrafficPanel};
use crate::matrix::Matrix;
use crate::model::{GraphMode, Hyper, ModelState};
use crate::training::{make_samples, train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyChoice {
    Dynamic,
    Static,
}

impl std::str::FromStr for AdjacencyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(AdjacencyChoice::Dynamic),
            "static" => Ok(AdjacencyChoice::Static),
            other => Err(Error::validation(format!("unknown adjacency {other:?}"))),
        }
    }
}

impl std::fmt::Display for AdjacencyChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdjacencyChoice::Dynamic => "dynamic",
            AdjacencyChoice::Static => "static",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderChoice {
    NonAutoregressive,
    Autoregressive,
}

impl std::str::FromStr for DecoderChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonautoregressive" => Ok(DecoderChoice::NonAutoregressive),
            "autoregressive" => Ok(DecoderChoice::Autoregressive),
            other => Err(Error::validation(format!("unknown decoder {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecoderChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderChoice::NonAutoregressive => "nonautoregressive",
            DecoderChoice::Autoregressive => "autoregressive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hyper: Hyper,
    pub train: TrainConfig,
    pub adjacency: AdjacencyChoice,
    pub decoder: DecoderChoice,
    /// Restrict correlation edges to topology links plus self loops.
    pub mask_to_topology: bool,
    pub signed: bool,
    pub hop_sigma: f64,
    pub hop_threshold: f64,
    pub global_scaler: bool,
    pub split: SplitSpec,
    pub mape_floor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hyper: Hyper::default(),
            train: TrainConfig::default(),
            adjacency: AdjacencyChoice::Dynamic,
            decoder: DecoderChoice::NonAutoregressive,
            mask_to_topology: true,
            signed: false,
            hop_sigma: 2.0,
            hop_threshold: 4.0,
            global_scaler: false,
            split: SplitSpec::default(),
            mape_floor: crate::evaluation::DEFAULT_MAPE_FLOOR,
        }
    }
}

impl ExperimentConfig {
    /// Horizon the trained network emits per call.
    pub fn model_hyper(&self) -> Hyper {
        let mut h = self.hyper;
        if self.decoder == DecoderChoice::Autoregressive {
            h.output_horizon = 1;
        }
        h
    }
}

/// Experiment-level keys accepted in flat config files on top of the
/// training and model keys.
pub const EXPERIMENT_KEYS: &[&str] = &[
    "adjacency",
    "decoder",
    "mask_to_topology",
    "signed",
    "hop_sigma",
    "hop_threshold",
    "global_scaler",
    "train_fraction",
    "val_fraction",
    "test_fraction",
    "mape_floor",
];

impl ExperimentConfig {
    /// Defaults overridden by whatever keys `cfg` sets. Unknown keys are
    /// rejected unless listed in `extra`.
    pub fn from_flat(cfg: &FlatConfig, extra: &[&str]) -> Result<Self> {
        let known: Vec<&str> = TRAIN_KEYS
            .iter()
            .chain(HYPER_KEYS)
            .chain(EXPERIMENT_KEYS)
            .chain(extra)
            .copied()
            .collect();
        cfg.check_known(&known)?;
        let mut c = ExperimentConfig::default();
        cfg.apply_train(&mut c.train)?;
        cfg.apply_hyper(&mut c.hyper)?;
        if let Some(v) = cfg.get("adjacency")? {
            c.adjacency = v;
        }
        if let Some(v) = cfg.get("decoder")? {
            c.decoder = v;
        }
        if let Some(v) = cfg.get("mask_to_topology")? {
            c.mask_to_topology = v;
        }
        if let Some(v) = cfg.get("signed")? {
            c.signed = v;
        }
        if let Some(v) = cfg.get("hop_sigma")? {
            c.hop_sigma = v;
        }
        if let Some(v) = cfg.get("hop_threshold")? {
            c.hop_threshold = v;
        }
        if let Some(v) = cfg.get("global_scaler")? {
            c.global_scaler = v;
        }
        if let Some(v) = cfg.get("train_fraction")? {
            c.split.train_fraction = v;
        }
        if let Some(v) = cfg.get("val_fraction")? {
            c.split.val_fraction = v;
        }
        if let Some(v) = cfg.get("test_fraction")? {
            c.split.test_fraction = v;
        }
        if let Some(v) = cfg.get("mape_floor")? {
            c.mape_floor = v;
        }
        c.split.validate()?;
        if !(c.hop_sigma > 0.0 && c.hop_threshold >= 0.0) {
            return Err(Error::validation("hop_sigma must be positive and hop_threshold nonnegative"));
        }
        if !(c.mape_floor > 0.0) {
            return Err(Error::validation("mape_floor must be positive"));
        }
        Ok(c)
    }

    /// Every setting as a flat config; parsing it back gives `self`.
    pub fn to_flat(&self) -> FlatConfig {
        let mut f = FlatConfig::default();
        let t = &self.train;
        f.set("batch_size", t.batch_size);
        f.set("epochs", t.epochs);
        f.set("lr", format!("{:?}", t.lr));
        f.set("lr_decay", format!("{:?}", t.lr_decay));
        f.set(
            "decay_epochs",
            t.decay_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
        );
        f.set("max_grad_norm", format!("{:?}", t.max_grad_norm));
        f.set("optimizer", t.optimizer);
        f.set("seed", t.seed);
        f.set("teacher_forcing", format!("{:?}", t.teacher_forcing));
        f.set("threads", t.threads);
        let h = &self.hyper;
        f.set("k", h.k);
        f.set("num_layers", h.num_layers);
        f.set("units", h.units);
        f.set("input_horizon", h.input_horizon);
        f.set("output_horizon", h.output_horizon);
        f.set("adjacency", self.adjacency);
        f.set("decoder", self.decoder);
        f.set("mask_to_topology", self.mask_to_topology);
        f.set("signed", self.signed);
        f.set("hop_sigma", format!("{:?}", self.hop_sigma));
        f.set("hop_threshold", format!("{:?}", self.hop_threshold));
        f.set("global_scaler", self.global_scaler);
        f.set("train_fraction", format!("{:?}", self.split.train_fraction));
        f.set("val_fraction", format!("{:?}", self.split.val_fraction));
        f.set("test_fraction", format!("{:?}", self.split.test_fraction));
        f.set("mape_floor", format!("{:?}", self.mape_floor));
        f
    }

    /// Short digest of the resolved settings, stamped into reports. The
    /// thread count does not affect results and is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.threads = 0;
        crate::manifest::sha256_hex(c.to_flat().to_text().as_bytes())[..16].to_string()
    }
}

/// Original-unit splits plus the scaler fitted on the training part.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scaler: ScalerParams,
    pub train: TrafficPanel,
    pub val: TrafficPanel,
    pub test: TrafficPanel,
}

pub fn prepare(panel: &TrafficPanel, config: &ExperimentConfig) -> Result<PreparedData> {
    let min_window = config.hyper.input_horizon + config.hyper.output_horizon;
    let (train, val, test) = chronological_split(panel, &config.split, min_window)?;
    let scaler = fit_scaler(&train, config.global_scaler)?;
    Ok(PreparedData {
        scaler,
        train,
        val,
        test,
    })
}

pub fn build_graph(
    choice: AdjacencyChoice,
    topology: &Topology,
    config: &ExperimentConfig,
) -> Result<GraphMode> {
    Ok(match choice {
        AdjacencyChoice::Dynamic => GraphMode::Dynamic {
            mask: config.mask_to_topology.then(|| topology.connectivity()),
            signed: config.signed,
        },
        AdjacencyChoice::Static => GraphMode::Static {
            adjacency: static_adjacency(topology, config.hop_sigma, config.hop_threshold)?.weights,
            signed: config.signed,
        },
    })
}

/// Trains a model on `data`. `topology` must already be aligned with the
/// panel's node order.
pub fn train_model(
    data: &PreparedData,
    topology: &Topology,
    config: &ExperimentConfig,
) -> Result<(ModelState, TrainLog)> {
    if topology.node_ids() != data.train.node_ids.as_slice() {
        return Err(Error::validation("topology nodes do not match panel nodes"));
    }
    let hyper = config.model_hyper();
    let graph = build_graph(config.adjacency, topology, config)?;
    let samples = |p: &TrafficPanel| -> Result<_> {
        let scaled = apply_scaler(p, &data.scaler)?;
        make_samples(&scaled.values, hyper.input_horizon, hyper.output_horizon, &graph, hyper.k)
    };
    let train_samples = samples(&data.train)?;
    let val_samples = samples(&data.val)?;
    let mut model = ModelState::init(hyper, graph.clone(), config.train.seed)?;
    model.scaler = Some(data.scaler.clone());
    let (mut best, log) = train(model, &train_samples, &val_samples, &config.train)?;
    best.scaler = Some(data.scaler.clone());
    Ok((best, log))
}

/// Anything that maps an original-unit `T′ × N` window to a `T × N`
/// original-unit forecast.
#[derive(Debug, Clone)]
pub enum Forecaster {
    Model(ModelState),
    Baseline(Baseline),
}

impl Forecaster {
    pub fn kind(&self) -> String {
        match self {
            Forecaster::Model(m) => {
                let graph = match m.graph {
                    GraphMode::Dynamic { .. } => "dynamic",
                    GraphMode::Static { .. } => "static",
                };
                let decoder = if m.hyper.output_horizon == 1 { "-autoregressive" } else { "" };
                format!("ddcrnn-{graph}{decoder}")
            }
            Forecaster::Baseline(b) => b.name().to_string(),
        }
    }

    pub fn forecast(&self, inputs: &Matrix, horizon: usize) -> Result<Matrix> {
        match self {
            Forecaster::Baseline(b) => b.forecast(inputs, horizon),
            Forecaster::Model(m) => {
                let scaler = m
                    .scaler
                    .as_ref()
                    .ok_or_else(|| Error::validation("model has no stored scaler"))?;
                let scaled = scaler.scale_matrix(inputs)?;
                let out = if m.hyper.output_horizon == horizon {
                    m.predict(&scaled)?
                } else if m.hyper.output_horizon == 1 {
                    m.forward_autoregressive(&scaled, horizon)?
                } else {
                    return Err(Error::validation(format!(
                        "model forecasts {} steps, {horizon} requested",
                        m.hyper.output_horizon
                    )));
                };
                scaler.invert_matrix(&out)
            }
        }
    }
}

/// Stride-1 windows over `panel`: `(inputs, targets)` in original units.
pub fn windows(panel: &TrafficPanel, input_horizon: usize, horizon: usize) -> Result<Vec<(Matrix, Matrix)>> {
    let need = input_horizon + horizon;
    if panel.len() < need {
        return Err(Error::validation(format!(
            "segment has {} steps, need at least {need}",
            panel.len()
        )));
    }
    Ok((0..=panel.len() - need)
        .map(|s| {
            (
                panel.values.row_range(s, s + input_horizon),
                panel.values.row_range(s + input_horizon, s + need),
            )
        })
        .collect())
}

/// Forecasts every test window and reports metrics in original units.
pub fn evaluate(
    forecaster: &Forecaster,
    test: &TrafficPanel,
    input_horizon: usize,
    horizon: usize,
    mape_floor: f64,
    config_hash: &str,
) -> Result<ForecastReport> {
    let wins = windows(test, input_horizon, horizon)?;
    let preds: Vec<Matrix> = wins
        .par_iter()
        .map(|(x, _)| forecaster.forecast(x, horizon))
        .collect::<Result<_>>()?;
    let targets: Vec<Matrix> = wins.into_iter().map(|(_, y)| y).collect();
    horizon_report(&preds, &targets, &test.node_ids, mape_floor, &forecaster.kind(), config_hash)
}
