//! Command-line front end. Every command writes its artifacts plus a
//! `manifest.json` into `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{fit_linear_ar, Baseline, LinearARParams, DEFAULT_AR_ORDER, LINEAR_AR_KIND};
use crate::checkpoint::Checkpoint;
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::evaluation::{acf_profiles_csv, characterize, ranking_csv, ForecastReport, DEFAULT_ACF_LAGS};
use crate::graph::Topology;
use crate::ingest::{aggregate, fill_gaps, iso8601, read_trace_file, TrafficPanel, SECONDS_PER_HOUR};
use crate::manifest::{write_atomic, RunManifest};
use crate::model::{ModelState, MODEL_KIND};
use crate::pipeline::{
    evaluate, prepare, train_model, AdjacencyChoice, DecoderChoice, ExperimentConfig, Forecaster,
};
use crate::synth::{generate, SynthConfig, TwoRegime};

#[derive(Debug, Parser)]
#[command(name = "ddcrnn", version, about = "Graph-diffusion forecasting of WAN traffic")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate a raw trace export into a gap-filled panel.
    Ingest {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        /// Aggregation interval in seconds.
        #[arg(long, default_value_t = SECONDS_PER_HOUR)]
        step: i64,
    },
    /// Generate a synthetic panel. Without `--config` the two-regime layout
    /// is used.
    Synth {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        regime_len: Option<usize>,
    },
    /// Train a model and write its checkpoint and training log.
    Train {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[command(flatten)]
        opts: ExperimentArgs,
    },
    /// Forecast the steps after the end of a panel.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score a checkpoint or a baseline on the test split of a panel.
    Evaluate {
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineName>,
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = 24)]
        season: usize,
        #[arg(long, default_value_t = DEFAULT_AR_ORDER)]
        ar_order: usize,
        #[command(flatten)]
        opts: ExperimentArgs,
    },
    /// Train dynamic and static adjacency models on the same data and
    /// compare them with persistence.
    Ablate {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[command(flatten)]
        opts: ExperimentArgs,
    },
    /// Autocorrelation profiles and mean-ACF ranking per node.
    Characterize {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ACF_LAGS)]
        lags: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineName {
    Persistence,
    SeasonalNaive,
    LinearAr,
}

/// Flag overrides for config keys. Each flag maps to the key of the same
/// name with dashes replaced by underscores.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_parser = ["dynamic", "static"])]
    pub adjacency: Option<String>,
    #[arg(long, value_parser = ["nonautoregressive", "autoregressive"])]
    pub decoder: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long)]
    pub decay_epochs: Option<String>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long, value_parser = ["adam", "sgd"])]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub teacher_forcing: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub units: Option<usize>,
    #[arg(long)]
    pub input_horizon: Option<usize>,
    #[arg(long)]
    pub output_horizon: Option<usize>,
    #[arg(long)]
    pub mape_floor: Option<f64>,
}

impl ExperimentArgs {
    fn overlay(&self, cfg: &mut FlatConfig) {
        let mut put = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                cfg.set(key, v);
            }
        };
        let s = |v: &Option<String>| v.clone();
        let d = |v: Option<usize>| v.map(|x| x.to_string());
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}"));
        put("adjacency", s(&self.adjacency));
        put("decoder", s(&self.decoder));
        put("epochs", d(self.epochs));
        put("batch_size", d(self.batch_size));
        put("lr", f(self.lr));
        put("lr_decay", f(self.lr_decay));
        put("decay_epochs", s(&self.decay_epochs));
        put("max_grad_norm", f(self.max_grad_norm));
        put("optimizer", s(&self.optimizer));
        put("teacher_forcing", f(self.teacher_forcing));
        put("k", d(self.k));
        put("num_layers", d(self.num_layers));
        put("units", d(self.units));
        put("input_horizon", d(self.input_horizon));
        put("output_horizon", d(self.output_horizon));
        put("mape_floor", f(self.mape_floor));
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?
            .install(|| dispatch(cli)),
        _ => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match &cli.command {
        Command::Ingest { traces, topology, step } => cmd_ingest(cli, traces, topology, *step),
        Command::Synth {
            nodes,
            length,
            regime_len,
        } => cmd_synth(cli, *nodes, *length, *regime_len),
        Command::Train { panel, topology, opts } => cmd_train(cli, panel, topology, opts),
        Command::Forecast {
            checkpoint,
            panel,
            horizon,
        } => cmd_forecast(cli, checkpoint, panel, *horizon),
        Command::Evaluate {
            checkpoint,
            baseline,
            panel,
            season,
            ar_order,
            opts,
        } => cmd_evaluate(cli, checkpoint.as_deref(), *baseline, panel, *season, *ar_order, opts),
        Command::Ablate { panel, topology, opts } => cmd_ablate(cli, panel, topology, opts),
        Command::Characterize { panel, lags } => cmd_characterize(cli, panel, *lags),
    }
}

fn load_flat(cli: &Cli) -> Result<FlatConfig> {
    match &cli.config {
        Some(p) => FlatConfig::read_file(p),
        None => Ok(FlatConfig::default()),
    }
}

/// Config file, then flags, then the global seed and thread count.
fn resolve(cli: &Cli, opts: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut flat = load_flat(cli)?;
    opts.overlay(&mut flat);
    if let Some(s) = cli.seed {
        flat.set("seed", s);
    }
    if let Some(t) = cli.threads {
        flat.set("threads", t);
    }
    ExperimentConfig::from_flat(&flat, &[])
}

fn start_manifest(cli: &Cli, command: &str, seed: u64) -> Result<RunManifest> {
    let mut m = RunManifest::start(command, seed);
    if let Some(p) = &cli.config {
        m.add_input(p)?;
    }
    Ok(m)
}

fn record_config(m: &mut RunManifest, cfg: &FlatConfig) {
    for (k, v) in cfg.iter() {
        m.set_config(k, v);
    }
}

fn write_output(m: &mut RunManifest, path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    m.add_output(path)
}

fn write_panel(m: &mut RunManifest, path: &Path, panel: &TrafficPanel) -> Result<()> {
    panel.write_csv(path)?;
    m.add_output(path)?;
    m.add_output(&crate::ingest::mask_path(path))
}

fn read_panel(path: &Path) -> Result<TrafficPanel> {
    let panel = TrafficPanel::read_csv(path)?;
    if panel.values.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "panel {} has missing or non-finite values",
            path.display()
        )));
    }
    Ok(panel)
}

fn cmd_ingest(cli: &Cli, traces: &Path, topology: &Path, step: i64) -> Result<()> {
    let mut m = start_manifest(cli, "ingest", cli.seed.unwrap_or(0))?;
    let topo = Topology::read_file(topology)?;
    let records = read_trace_file(traces)?;
    m.add_input(traces)?;
    m.add_input(topology)?;
    m.set_config("step", step);
    let panel = fill_gaps(&aggregate(&records, step)?)?;
    let aligned = topo.align_to(&panel.node_ids)?;
    write_panel(&mut m, &cli.out.join("panel.csv"), &panel)?;
    write_output(&mut m, &cli.out.join("topology.txt"), &aligned.to_edge_list())?;
    m.finish(&cli.out)?;
    Ok(())
}

fn cmd_synth(cli: &Cli, nodes: Option<usize>, length: Option<usize>, regime_len: Option<usize>) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => {
            if nodes.is_some() || length.is_some() || regime_len.is_some() {
                return Err(Error::validation(
                    "--nodes, --length and --regime-len apply only without --config",
                ));
            }
            SynthConfig::from_flat(&FlatConfig::read_file(p)?)?
        }
        None => {
            let d = TwoRegime::default();
            TwoRegime {
                nodes: nodes.unwrap_or(d.nodes),
                length: length.unwrap_or(d.length),
                regime_len: regime_len.unwrap_or(d.regime_len),
                ..d
            }
            .config()?
        }
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let mut m = start_manifest(cli, "synth", config.seed)?;
    let flat = config.to_flat();
    record_config(&mut m, &flat);
    let panel = generate(&config)?;
    write_panel(&mut m, &cli.out.join("panel.csv"), &panel)?;
    write_output(&mut m, &cli.out.join("topology.txt"), &config.topology.to_edge_list())?;
    write_output(&mut m, &cli.out.join("synth.conf"), &flat.to_text())?;
    m.finish(&cli.out)?;
    Ok(())
}

struct Trained {
    model: ModelState,
    report: ForecastReport,
}

/// Trains on the train/validation splits and scores the test split,
/// writing checkpoint, log and report files into `dir`.
fn train_and_report(
    m: &mut RunManifest,
    dir: &Path,
    panel: &TrafficPanel,
    topology: &Topology,
    cfg: &ExperimentConfig,
) -> Result<Trained> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = prepare(panel, cfg)?;
    let (model, log) = train_model(&data, topology, cfg)?;
    write_output(m, &dir.join("model.ckpt"), &model.to_checkpoint().to_text())?;
    write_output(m, &dir.join("train_log.csv"), &log.to_csv())?;
    write_output(m, &dir.join("config.txt"), &cfg.to_flat().to_text())?;
    let report = evaluate(
        &Forecaster::Model(model.clone()),
        &data.test,
        cfg.hyper.input_horizon,
        cfg.hyper.output_horizon,
        cfg.mape_floor,
        &cfg.hash(),
    )?;
    write_report(m, dir, &report)?;
    Ok(Trained { model, report })
}

fn write_report(m: &mut RunManifest, dir: &Path, report: &ForecastReport) -> Result<()> {
    write_output(m, &dir.join("report.csv"), &report.to_csv())?;
    write_output(m, &dir.join("summary.csv"), &report.summary_csv())?;
    write_output(m, &dir.join("report.json"), &report.to_json())
}

fn load_topology(path: &Path, panel: &TrafficPanel) -> Result<Topology> {
    Topology::read_file(path)?.align_to(&panel.node_ids)
}

fn cmd_train(cli: &Cli, panel_path: &Path, topo_path: &Path, opts: &ExperimentArgs) -> Result<()> {
    let cfg = resolve(cli, opts)?;
    let mut m = start_manifest(cli, "train", cfg.train.seed)?;
    record_config(&mut m, &cfg.to_flat());
    let panel = read_panel(panel_path)?;
    let topology = load_topology(topo_path, &panel)?;
    m.add_input(panel_path)?;
    m.add_input(topo_path)?;
    let t = train_and_report(&mut m, &cli.out, &panel, &topology, &cfg)?;
    eprintln!(
        "trained {} ({} parameters), test MAPE {}",
        Forecaster::Model(t.model.clone()).kind(),
        t.model.num_params(),
        fmt_pct(t.report.overall_mape())
    );
    m.finish(&cli.out)?;
    Ok(())
}

fn load_forecaster(path: &Path) -> Result<Forecaster> {
    let ck = Checkpoint::load(path)?;
    match ck.kind() {
        MODEL_KIND => Ok(Forecaster::Model(ModelState::from_checkpoint(&ck)?)),
        LINEAR_AR_KIND => Ok(Forecaster::Baseline(Baseline::LinearAr(
            LinearARParams::from_checkpoint(&ck)?,
        ))),
        other => Err(Error::Checkpoint(format!("unsupported checkpoint kind {other:?}"))),
    }
}

/// Input window and default horizon a forecaster expects, plus the node
/// order it was fitted on.
fn forecaster_shape(f: &Forecaster, cfg: &ExperimentConfig) -> (usize, usize, Option<Vec<String>>) {
    match f {
        Forecaster::Model(m) => {
            let horizon = if m.hyper.output_horizon == 1 {
                cfg.hyper.output_horizon
            } else {
                m.hyper.output_horizon
            };
            (m.hyper.input_horizon, horizon, m.scaler.as_ref().map(|s| s.node_ids.clone()))
        }
        Forecaster::Baseline(Baseline::LinearAr(p)) => {
            (cfg.hyper.input_horizon.max(p.order), cfg.hyper.output_horizon, Some(p.node_ids.clone()))
        }
        Forecaster::Baseline(_) => (cfg.hyper.input_horizon, cfg.hyper.output_horizon, None),
    }
}

fn check_nodes(expected: Option<&[String]>, panel: &TrafficPanel) -> Result<()> {
    match expected {
        Some(ids) if ids != panel.node_ids.as_slice() => Err(Error::validation(format!(
            "panel nodes {:?} do not match the fitted nodes {:?}",
            panel.node_ids, ids
        ))),
        _ => Ok(()),
    }
}

fn cmd_forecast(cli: &Cli, ck_path: &Path, panel_path: &Path, horizon: Option<usize>) -> Result<()> {
    let cfg = resolve(cli, &ExperimentArgs::default())?;
    let mut m = start_manifest(cli, "forecast", cfg.train.seed)?;
    let f = load_forecaster(ck_path)?;
    let panel = read_panel(panel_path)?;
    m.add_input(ck_path)?;
    m.add_input(panel_path)?;
    let (window, default_h, ids) = forecaster_shape(&f, &cfg);
    check_nodes(ids.as_deref(), &panel)?;
    let horizon = horizon.unwrap_or(default_h);
    m.set_config("horizon", horizon);
    if panel.len() < window {
        return Err(Error::validation(format!(
            "panel has {} steps, the forecaster needs {window}",
            panel.len()
        )));
    }
    let inputs = panel.values.row_range(panel.len() - window, panel.len());
    let pred = f.forecast(&inputs, horizon)?;
    let mut out = format!("timestamp,{}\n", panel.node_ids.join(","));
    let last = panel.timestamp(panel.len() - 1);
    for h in 0..horizon {
        out.push_str(&iso8601(last + panel.step * (h as i64 + 1))?);
        for c in 0..pred.cols() {
            out.push_str(&format!(",{:?}", pred.get(h, c)));
        }
        out.push('\n');
    }
    write_output(&mut m, &cli.out.join("forecast.csv"), &out)?;
    m.finish(&cli.out)?;
    Ok(())
}

fn cmd_evaluate(
    cli: &Cli,
    ck_path: Option<&Path>,
    baseline: Option<BaselineName>,
    panel_path: &Path,
    season: usize,
    ar_order: usize,
    opts: &ExperimentArgs,
) -> Result<()> {
    let cfg = resolve(cli, opts)?;
    let mut m = start_manifest(cli, "evaluate", cfg.train.seed)?;
    record_config(&mut m, &cfg.to_flat());
    let panel = read_panel(panel_path)?;
    m.add_input(panel_path)?;
    let data = prepare(&panel, &cfg)?;
    let f = match (ck_path, baseline) {
        (Some(p), _) => {
            m.add_input(p)?;
            load_forecaster(p)?
        }
        (None, Some(BaselineName::Persistence)) => Forecaster::Baseline(Baseline::Persistence),
        (None, Some(BaselineName::SeasonalNaive)) => {
            m.set_config("season", season);
            Forecaster::Baseline(Baseline::SeasonalNaive { season })
        }
        (None, Some(BaselineName::LinearAr)) => {
            m.set_config("ar_order", ar_order);
            let params = fit_linear_ar(&data.train.values, &data.train.node_ids, ar_order)?;
            write_output(&mut m, &cli.out.join("linear_ar.ckpt"), &params.to_checkpoint().to_text())?;
            Forecaster::Baseline(Baseline::LinearAr(params))
        }
        (None, None) => return Err(Error::validation("pass --checkpoint or --baseline")),
    };
    let (mut window, horizon, ids) = forecaster_shape(&f, &cfg);
    if let Forecaster::Baseline(Baseline::SeasonalNaive { season }) = &f {
        window = window.max(*season);
    }
    check_nodes(ids.as_deref(), &panel)?;
    let report = evaluate(&f, &data.test, window, horizon, cfg.mape_floor, &cfg.hash())?;
    write_report(&mut m, &cli.out, &report)?;
    eprintln!("{}: test MAPE {}", report.model_kind, fmt_pct(report.overall_mape()));
    m.finish(&cli.out)?;
    Ok(())
}

fn cmd_ablate(cli: &Cli, panel_path: &Path, topo_path: &Path, opts: &ExperimentArgs) -> Result<()> {
    let base = resolve(cli, opts)?;
    let mut m = start_manifest(cli, "ablate", base.train.seed)?;
    record_config(&mut m, &base.to_flat());
    let panel = read_panel(panel_path)?;
    let topology = load_topology(topo_path, &panel)?;
    m.add_input(panel_path)?;
    m.add_input(topo_path)?;
    let mut reports = Vec::new();
    for choice in [AdjacencyChoice::Dynamic, AdjacencyChoice::Static] {
        let cfg = ExperimentConfig {
            adjacency: choice,
            ..base.clone()
        };
        let dir = cli.out.join(choice.to_string());
        reports.push(train_and_report(&mut m, &dir, &panel, &topology, &cfg)?.report);
    }
    let data = prepare(&panel, &base)?;
    let persistence = evaluate(
        &Forecaster::Baseline(Baseline::Persistence),
        &data.test,
        base.hyper.input_horizon,
        base.hyper.output_horizon,
        base.mape_floor,
        &base.hash(),
    )?;
    reports.push(persistence);
    let mut table = String::from("model,overall_mape,overall_r2");
    for h in 1..=base.hyper.output_horizon {
        table.push_str(&format!(",mape_h{h}"));
    }
    table.push('\n');
    for r in &reports {
        table.push_str(&format!(
            "{},{},{}",
            r.model_kind,
            fmt_opt(r.overall_mape()),
            fmt_opt(r.overall_r2())
        ));
        for v in r.horizon_mape() {
            table.push(',');
            table.push_str(&fmt_opt(v));
        }
        table.push('\n');
    }
    write_output(&mut m, &cli.out.join("ablation.csv"), &table)?;
    let (dynamic, stat) = (reports[0].overall_mape(), reports[1].overall_mape());
    eprintln!("dynamic MAPE {}, static MAPE {}", fmt_pct(dynamic), fmt_pct(stat));
    if base.decoder == DecoderChoice::Autoregressive {
        eprintln!("note: both variants used the autoregressive decoder");
    }
    m.finish(&cli.out)?;
    Ok(())
}

fn cmd_characterize(cli: &Cli, panel_path: &Path, lags: usize) -> Result<()> {
    let mut m = start_manifest(cli, "characterize", cli.seed.unwrap_or(0))?;
    m.set_config("lags", lags);
    let panel = read_panel(panel_path)?;
    m.add_input(panel_path)?;
    let profiles = characterize(&panel.values, &panel.node_ids, lags)?;
    write_output(&mut m, &cli.out.join("acf.csv"), &acf_profiles_csv(&profiles))?;
    write_output(&mut m, &cli.out.join("ranking.csv"), &ranking_csv(&profiles))?;
    for p in profiles.iter().filter(|p| p.mean_acf.is_none()) {
        eprintln!("warning: node {} is constant; its autocorrelation is undefined", p.node);
    }
    m.finish(&cli.out)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| crate::evaluation::UNDEFINED.to_string(), |x| format!("{x:?}"))
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.3}%"))
}
