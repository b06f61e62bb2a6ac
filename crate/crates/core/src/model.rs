//! Diffusion-convolutional GRU encoder-decoder.
//!
//! Every GRU gate replaces its dense affine map with a bidirectional
//! diffusion convolution over the graph. The graph is either recomputed from
//! each input window (Pearson correlation) or fixed (hop-distance kernel).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{
    diffusion_powers, pearson_adjacency, transition_pair, AdjacencyKind, AdjacencyMatrix,
};
use crate::ingest::ScalerParams;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper {
    /// Maximum diffusion step `K`.
    pub k: usize,
    pub num_layers: usize,
    pub units: usize,
    pub input_horizon: usize,
    pub output_horizon: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            k: 2,
            num_layers: 2,
            units: 16,
            input_horizon: 30,
            output_horizon: 24,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("k", self.k),
            ("num_layers", self.num_layers),
            ("units", self.units),
            ("input_horizon", self.input_horizon),
            ("output_horizon", self.output_horizon),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.input_horizon < 2 {
            return Err(Error::validation(
                "input_horizon must be at least 2 for correlation adjacency",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Learnable filters of one diffusion convolution.
///
/// `weights` stacks the per-order blocks vertically in the order
/// `W_O,0 … W_O,K−1, W_I,0 … W_I,K−1`, each `F × U`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFilter {
    pub weights: Matrix,
    pub bias: Matrix,
    pub k: usize,
}

impl DiffusionFilter {
    pub fn zeros(k: usize, features: usize, units: usize) -> Self {
        DiffusionFilter {
            weights: Matrix::zeros(2 * k * features, units),
            bias: Matrix::zeros(1, units),
            k,
        }
    }

    pub fn features(&self) -> usize {
        self.weights.rows() / (2 * self.k)
    }

    pub fn units(&self) -> usize {
        self.weights.cols()
    }

    pub fn block(&self, dir: Direction, d: usize) -> Matrix {
        let f = self.features();
        let offset = match dir {
            Direction::Forward => d,
            Direction::Reverse => self.k + d,
        } * f;
        self.weights.row_range(offset, offset + f)
    }

    pub fn set_block(&mut self, dir: Direction, d: usize, block: &Matrix) {
        let f = self.features();
        let offset = match dir {
            Direction::Forward => d,
            Direction::Reverse => self.k + d,
        } * f;
        for i in 0..f {
            self.weights.row_mut(offset + i).copy_from_slice(block.row(i));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcgruCell {
    pub reset: DiffusionFilter,
    pub update: DiffusionFilter,
    pub candidate: DiffusionFilter,
    pub input_dim: usize,
    pub units: usize,
}

impl DcgruCell {
    pub fn zeros(k: usize, input_dim: usize, units: usize) -> Self {
        let f = input_dim + units;
        DcgruCell {
            reset: DiffusionFilter::zeros(k, f, units),
            update: DiffusionFilter::zeros(k, f, units),
            candidate: DiffusionFilter::zeros(k, f, units),
            input_dim,
            units,
        }
    }
}

/// Where the graph used by diffusion convolution comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphMode {
    /// Pearson correlation of each input window, optionally masked to a
    /// 0/1 connectivity matrix.
    Dynamic { mask: Option<Matrix>, signed: bool },
    /// One fixed adjacency for every window.
    Static { adjacency: Matrix, signed: bool },
}

impl GraphMode {
    pub fn num_nodes(&self) -> Option<usize> {
        match self {
            GraphMode::Dynamic { mask, .. } => mask.as_ref().map(Matrix::rows),
            GraphMode::Static { adjacency, .. } => Some(adjacency.rows()),
        }
    }

    pub fn adjacency(&self, window: &Matrix) -> Result<AdjacencyMatrix> {
        match self {
            GraphMode::Dynamic { mask, .. } => pearson_adjacency(window, mask.as_ref()),
            GraphMode::Static { adjacency, .. } => Ok(AdjacencyMatrix {
                weights: adjacency.clone(),
                kind: AdjacencyKind::StaticHop,
            }),
        }
    }

    fn signed(&self) -> bool {
        match self {
            GraphMode::Dynamic { signed, .. } | GraphMode::Static { signed, .. } => *signed,
        }
    }

    pub fn powers(&self, adj: &AdjacencyMatrix, k: usize) -> Result<Vec<Matrix>> {
        diffusion_powers(&transition_pair(adj, self.signed())?, k)
    }
}

/// Adam moments persisted alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hyper: Hyper,
    pub encoder: Vec<DcgruCell>,
    pub decoder: Vec<DcgruCell>,
    /// `units × 1`, shared across nodes.
    pub proj_weight: Matrix,
    /// `1 × 1`.
    pub proj_bias: Matrix,
    pub graph: GraphMode,
    pub scaler: Option<ScalerParams>,
    pub moments: Option<Moments>,
}

/// One training or evaluation window in scaled units.
#[derive(Debug, Clone)]
pub struct Sample {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub adjacency: AdjacencyMatrix,
    pub powers: Vec<Matrix>,
}

impl Sample {
    pub fn new(inputs: Matrix, targets: Matrix, graph: &GraphMode, k: usize) -> Result<Self> {
        let adjacency = graph.adjacency(&inputs)?;
        let powers = graph.powers(&adjacency, k)?;
        Ok(Sample {
            inputs,
            targets,
            adjacency,
            powers,
        })
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

impl ModelState {
    /// Model with every weight and bias zero.
    pub fn zeros(hyper: Hyper, graph: GraphMode) -> Result<Self> {
        hyper.validate()?;
        let cells = |_: ()| {
            (0..hyper.num_layers)
                .map(|l| {
                    let input_dim = if l == 0 { 1 } else { hyper.units };
                    DcgruCell::zeros(hyper.k, input_dim, hyper.units)
                })
                .collect::<Vec<_>>()
        };
        Ok(ModelState {
            hyper,
            encoder: cells(()),
            decoder: cells(()),
            proj_weight: Matrix::zeros(hyper.units, 1),
            proj_bias: Matrix::zeros(1, 1),
            graph,
            scaler: None,
            moments: None,
        })
    }

    /// Glorot-uniform weights, zero biases, reproducible from `seed`.
    pub fn init(hyper: Hyper, graph: GraphMode, seed: u64) -> Result<Self> {
        let mut model = ModelState::zeros(hyper, graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, p) in model.named_params_mut() {
            if name.ends_with(".w") {
                *p = glorot(&mut rng, p.rows(), p.cols());
            }
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (prefix, cells) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (l, c) in cells.iter().enumerate() {
                for (gate, f) in [("reset", &c.reset), ("update", &c.update), ("candidate", &c.candidate)] {
                    out.push((format!("{prefix}.{l}.{gate}.w"), &f.weights));
                    out.push((format!("{prefix}.{l}.{gate}.b"), &f.bias));
                }
            }
        }
        out.push(("proj.w".into(), &self.proj_weight));
        out.push(("proj.b".into(), &self.proj_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (prefix, cells) in [("enc", &mut self.encoder), ("dec", &mut self.decoder)] {
            for (l, c) in cells.iter_mut().enumerate() {
                for (gate, f) in [
                    ("reset", &mut c.reset),
                    ("update", &mut c.update),
                    ("candidate", &mut c.candidate),
                ] {
                    out.push((format!("{prefix}.{l}.{gate}.w"), &mut f.weights));
                    out.push((format!("{prefix}.{l}.{gate}.b"), &mut f.bias));
                }
            }
        }
        out.push(("proj.w".into(), &mut self.proj_weight));
        out.push(("proj.b".into(), &mut self.proj_bias));
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.named_params().into_iter().map(|(_, m)| m).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.named_params_mut().into_iter().map(|(_, m)| m).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    fn check_nodes(&self, n: usize) -> Result<()> {
        if let Some(expected) = self.graph.num_nodes() {
            if expected != n {
                return Err(Error::validation(format!(
                    "model graph has {expected} nodes, input has {n}"
                )));
            }
        }
        Ok(())
    }

    /// Builds a sample whose adjacency comes from its own inputs.
    pub fn make_sample(&self, inputs: Matrix, targets: Matrix) -> Result<Sample> {
        self.check_nodes(inputs.cols())?;
        Sample::new(inputs, targets, &self.graph, self.hyper.k)
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let h = &self.hyper;
        if sample.inputs.rows() != h.input_horizon {
            return Err(Error::validation(format!(
                "model expects {} input steps, sample has {}",
                h.input_horizon,
                sample.inputs.rows()
            )));
        }
        if sample.targets.rows() != h.output_horizon {
            return Err(Error::validation(format!(
                "model forecasts {} steps, sample targets have {}",
                h.output_horizon,
                sample.targets.rows()
            )));
        }
        if sample.targets.cols() != sample.inputs.cols() {
            return Err(Error::validation("inputs and targets differ in node count"));
        }
        if sample.powers.len() != 2 * h.k {
            return Err(Error::validation(format!(
                "expected {} diffusion powers, got {}",
                2 * h.k,
                sample.powers.len()
            )));
        }
        self.check_nodes(sample.inputs.cols())
    }

    /// Full `T × N` forecast in scaled units.
    pub fn forward_nonautoregressive(&self, sample: &Sample) -> Result<Matrix> {
        self.check_sample(sample)?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(self, &mut tape, false);
        let out = self.forward_on_tape(&mut tape, &vars, sample, &mut NoTeacher)?;
        Ok(tape.value(out).transpose())
    }

    /// Forecast from raw scaled inputs, computing the adjacency on the fly.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let targets = Matrix::zeros(self.hyper.output_horizon, inputs.cols());
        let sample = self.make_sample(inputs.clone(), targets)?;
        self.forward_nonautoregressive(&sample)
    }

    /// Recursive forecasting with a one-step model: each prediction is
    /// appended to the window, the oldest step dropped, and the adjacency
    /// recomputed before the next step.
    pub fn forward_autoregressive(&self, inputs: &Matrix, steps: usize) -> Result<Matrix> {
        if self.hyper.output_horizon != 1 {
            return Err(Error::validation(format!(
                "autoregressive forecasting needs a one-step model, this one forecasts {}",
                self.hyper.output_horizon
            )));
        }
        let n = inputs.cols();
        let mut window = inputs.clone();
        let mut out = Matrix::zeros(steps, n);
        for s in 0..steps {
            let next = self.predict(&window)?;
            out.row_mut(s).copy_from_slice(next.row(0));
            let mut shifted = window.row_range(1, window.rows()).into_vec();
            shifted.extend_from_slice(next.row(0));
            window = Matrix::from_vec(window.rows(), n, shifted)?;
        }
        Ok(out)
    }

    /// MAE loss on one sample and its gradient for every parameter, in
    /// [`ModelState::params`] order.
    pub fn loss_and_grads(
        &self,
        sample: &Sample,
        teacher: Option<(f64, u64)>,
    ) -> Result<(f64, Vec<Matrix>)> {
        self.check_sample(sample)?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(self, &mut tape, true);
        let pred = match teacher {
            Some((p, seed)) if p > 0.0 => {
                let mut tf = TeacherForcing {
                    prob: p,
                    rng: ChaCha8Rng::seed_from_u64(seed),
                    targets: &sample.targets,
                };
                self.forward_on_tape(&mut tape, &vars, sample, &mut tf)?
            }
            _ => self.forward_on_tape(&mut tape, &vars, sample, &mut NoTeacher)?,
        };
        let target = tape.constant(sample.targets.transpose());
        let loss = mae_on_tape(&mut tape, pred, target)?;
        let value = tape.value(loss).get(0, 0);
        let mut grads = tape.backward(loss)?;
        let out = vars
            .all()
            .into_iter()
            .zip(self.params())
            .map(|(v, p)| grads.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, out))
    }

    /// MAE loss only (no gradient), in scaled units.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let pred = self.forward_nonautoregressive(sample)?;
        crate::training::mae_loss(&pred, &sample.targets)
    }

    /// Returns `N × T` predictions as a tape variable.
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        sample: &Sample,
        teacher: &mut dyn DecoderFeed,
    ) -> Result<Var> {
        let h = self.hyper;
        let n = sample.inputs.cols();
        let powers = register_powers(tape, &sample.powers);

        let mut hidden: Vec<Var> = (0..h.num_layers)
            .map(|_| tape.constant(Matrix::zeros(n, h.units)))
            .collect();
        for t in 0..h.input_horizon {
            let x = Matrix::from_vec(n, 1, sample.inputs.row(t).to_vec())?;
            let mut input = tape.constant(x);
            for (l, cell) in vars.encoder.iter().enumerate() {
                hidden[l] = cell.step(tape, &powers, input, hidden[l])?;
                input = hidden[l];
            }
        }

        let mut dec_input = tape.constant(Matrix::zeros(n, 1));
        let mut outputs = Vec::with_capacity(h.output_horizon);
        for t in 0..h.output_horizon {
            let mut input = dec_input;
            for (l, cell) in vars.decoder.iter().enumerate() {
                hidden[l] = cell.step(tape, &powers, input, hidden[l])?;
                input = hidden[l];
            }
            let y = tape.matmul(input, vars.proj_weight)?;
            let y = tape.add_row_bias(y, vars.proj_bias)?;
            outputs.push(y);
            dec_input = teacher.next_input(tape, t, y)?;
        }
        tape.concat_cols(&outputs)
    }
}

pub(crate) fn mae_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean_all(abs))
}

/// Chooses the decoder input for the step after `t`.
trait DecoderFeed {
    fn next_input(&mut self, tape: &mut Tape, t: usize, prediction: Var) -> Result<Var>;
}

struct NoTeacher;

impl DecoderFeed for NoTeacher {
    fn next_input(&mut self, _: &mut Tape, _: usize, prediction: Var) -> Result<Var> {
        Ok(prediction)
    }
}

struct TeacherForcing<'a> {
    prob: f64,
    rng: ChaCha8Rng,
    targets: &'a Matrix,
}

impl DecoderFeed for TeacherForcing<'_> {
    fn next_input(&mut self, tape: &mut Tape, t: usize, prediction: Var) -> Result<Var> {
        if self.rng.random::<f64>() < self.prob {
            let truth = Matrix::from_vec(self.targets.cols(), 1, self.targets.row(t).to_vec())?;
            Ok(tape.constant(truth))
        } else {
            Ok(prediction)
        }
    }
}

/// Diffusion powers on the tape; zeroth powers are identities and map to `None`.
fn register_powers(tape: &mut Tape, powers: &[Matrix]) -> Vec<Option<Var>> {
    let k = powers.len() / 2;
    powers
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i % k == 0 {
                None
            } else {
                Some(tape.constant(p.clone()))
            }
        })
        .collect()
}

/// `[P₀X, P₁X, …]` concatenated along the feature axis.
fn diffusion_features(tape: &mut Tape, powers: &[Option<Var>], x: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(powers.len());
    for p in powers {
        parts.push(match p {
            None => x,
            Some(p) => tape.matmul(*p, x)?,
        });
    }
    tape.concat_cols(&parts)
}

#[derive(Debug, Clone, Copy)]
struct FilterVars {
    w: Var,
    b: Var,
}

impl FilterVars {
    fn apply(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let y = tape.matmul(features, self.w)?;
        tape.add_row_bias(y, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
struct CellVars {
    reset: FilterVars,
    update: FilterVars,
    candidate: FilterVars,
}

impl CellVars {
    fn step(&self, tape: &mut Tape, powers: &[Option<Var>], x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat_cols(&[x, h])?;
        let z = diffusion_features(tape, powers, xh)?;
        let r = self.reset.apply(tape, z)?;
        let r = tape.sigmoid(r);
        let u = self.update.apply(tape, z)?;
        let u = tape.sigmoid(u);
        let rh = tape.hadamard(r, h)?;
        let xrh = tape.concat_cols(&[x, rh])?;
        let z2 = diffusion_features(tape, powers, xrh)?;
        let c = self.candidate.apply(tape, z2)?;
        let c = tape.tanh(c);
        // u⊙h + (1−u)⊙c  ==  c + u⊙(h − c)
        let hc = tape.sub(h, c)?;
        let uhc = tape.hadamard(u, hc)?;
        tape.add(c, uhc)
    }
}

struct ParamVars {
    encoder: Vec<CellVars>,
    decoder: Vec<CellVars>,
    proj_weight: Var,
    proj_bias: Var,
}

impl ParamVars {
    fn register(model: &ModelState, tape: &mut Tape, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let mut cells = |cs: &[DcgruCell]| {
            cs.iter()
                .map(|c| {
                    let mut f = |d: &DiffusionFilter| FilterVars {
                        w: leaf(&d.weights),
                        b: leaf(&d.bias),
                    };
                    CellVars {
                        reset: f(&c.reset),
                        update: f(&c.update),
                        candidate: f(&c.candidate),
                    }
                })
                .collect::<Vec<_>>()
        };
        let encoder = cells(&model.encoder);
        let decoder = cells(&model.decoder);
        let proj_weight = leaf(&model.proj_weight);
        let proj_bias = leaf(&model.proj_bias);
        ParamVars {
            encoder,
            decoder,
            proj_weight,
            proj_bias,
        }
    }

    /// Same order as [`ModelState::params`].
    fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in self.encoder.iter().chain(&self.decoder) {
            for f in [c.reset, c.update, c.candidate] {
                out.push(f.w);
                out.push(f.b);
            }
        }
        out.push(self.proj_weight);
        out.push(self.proj_bias);
        out
    }
}

/// One diffusion convolution of `x` (`N × F`) with `filter`, returning `N × U`.
pub fn diffusion_conv(filter: &DiffusionFilter, powers: &[Matrix], x: &Matrix) -> Result<Matrix> {
    if powers.len() != 2 * filter.k {
        return Err(Error::validation(format!(
            "filter has K={} but {} powers were supplied",
            filter.k,
            powers.len()
        )));
    }
    if x.cols() != filter.features() {
        return Err(Error::Shape {
            op: "diffusion_conv",
            left: x.shape(),
            right: (filter.features(), filter.units()),
        });
    }
    let mut tape = Tape::new();
    let pv = register_powers(&mut tape, powers);
    let xv = tape.constant(x.clone());
    let fv = FilterVars {
        w: tape.constant(filter.weights.clone()),
        b: tape.constant(filter.bias.clone()),
    };
    let z = diffusion_features(&mut tape, &pv, xv)?;
    let y = fv.apply(&mut tape, z)?;
    Ok(tape.value(y).clone())
}

/// One DCGRU update `h_prev → h_t`.
pub fn dcgru_step(cell: &DcgruCell, powers: &[Matrix], x: &Matrix, h_prev: &Matrix) -> Result<Matrix> {
    if x.cols() != cell.input_dim || h_prev.cols() != cell.units || x.rows() != h_prev.rows() {
        return Err(Error::Shape {
            op: "dcgru_step",
            left: x.shape(),
            right: h_prev.shape(),
        });
    }
    let mut tape = Tape::new();
    let pv = register_powers(&mut tape, powers);
    let mut f = |d: &DiffusionFilter| FilterVars {
        w: tape.constant(d.weights.clone()),
        b: tape.constant(d.bias.clone()),
    };
    let vars = CellVars {
        reset: f(&cell.reset),
        update: f(&cell.update),
        candidate: f(&cell.candidate),
    };
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let out = vars.step(&mut tape, &pv, xv, hv)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// checkpoint mapping

pub const MODEL_KIND: &str = "ddcrnn-model";

impl ModelState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let h = self.hyper;
        let mut ck = Checkpoint::new(MODEL_KIND);
        ck.set_meta("k", h.k);
        ck.set_meta("num_layers", h.num_layers);
        ck.set_meta("units", h.units);
        ck.set_meta("input_horizon", h.input_horizon);
        ck.set_meta("output_horizon", h.output_horizon);
        match &self.graph {
            GraphMode::Dynamic { mask, signed } => {
                ck.set_meta("graph", "dynamic");
                ck.set_meta("signed", signed);
                if let Some(m) = mask {
                    ck.push_matrix("graph.mask", m.clone());
                }
            }
            GraphMode::Static { adjacency, signed } => {
                ck.set_meta("graph", "static");
                ck.set_meta("signed", signed);
                ck.push_matrix("graph.static", adjacency.clone());
            }
        }
        if let Some(s) = &self.scaler {
            ck.set_meta("scaler.nodes", s.node_ids.join(","));
            ck.set_meta("scaler.fitted_on", &s.fitted_on);
            ck.push_matrix("scaler.min", Matrix::from_vec(1, s.min.len(), s.min.clone()).expect("row"));
            ck.push_matrix("scaler.max", Matrix::from_vec(1, s.max.len(), s.max.clone()).expect("row"));
        }
        for (name, m) in self.named_params() {
            ck.push_matrix(&format!("param.{name}"), m.clone());
        }
        if let Some(mo) = &self.moments {
            ck.set_meta("adam.step", mo.step);
            for ((name, _), (m, v)) in self.named_params().iter().zip(mo.first.iter().zip(&mo.second)) {
                ck.push_matrix(&format!("adam.m.{name}"), m.clone());
                ck.push_matrix(&format!("adam.v.{name}"), v.clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(MODEL_KIND)?;
        let hyper = Hyper {
            k: ck.meta_parse("k")?,
            num_layers: ck.meta_parse("num_layers")?,
            units: ck.meta_parse("units")?,
            input_horizon: ck.meta_parse("input_horizon")?,
            output_horizon: ck.meta_parse("output_horizon")?,
        };
        let signed: bool = ck.meta_parse("signed")?;
        let graph = match ck.meta("graph")? {
            "dynamic" => GraphMode::Dynamic {
                mask: ck.matrix_opt("graph.mask").cloned(),
                signed,
            },
            "static" => GraphMode::Static {
                adjacency: ck.matrix("graph.static")?.clone(),
                signed,
            },
            other => return Err(Error::Checkpoint(format!("unknown graph mode {other:?}"))),
        };
        let mut model = ModelState::zeros(hyper, graph)?;
        for (name, p) in model.named_params_mut() {
            let m = ck.matrix(&format!("param.{name}"))?;
            if m.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            *p = m.clone();
        }
        if let Ok(nodes) = ck.meta("scaler.nodes") {
            model.scaler = Some(ScalerParams {
                node_ids: nodes.split(',').map(str::to_string).collect(),
                min: ck.matrix("scaler.min")?.data().to_vec(),
                max: ck.matrix("scaler.max")?.data().to_vec(),
                fitted_on: ck.meta("scaler.fitted_on")?.to_string(),
            });
        }
        if let Ok(step) = ck.meta_parse::<u64>("adam.step") {
            let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
            let mut first = Vec::new();
            let mut second = Vec::new();
            for name in names {
                first.push(ck.matrix(&format!("adam.m.{name}"))?.clone());
                second.push(ck.matrix(&format!("adam.v.{name}"))?.clone());
            }
            model.moments = Some(Moments { step, first, second });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Topology;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = lcg(seed);
        Matrix::from_fn(rows, cols, |_, _| r())
    }

    fn path_powers(k: usize) -> Vec<Matrix> {
        let topo = Topology::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2), (2, 1)],
        )
        .unwrap();
        let adj = crate::graph::static_adjacency(&topo, 2.0, 4.0).unwrap();
        diffusion_powers(&transition_pair(&adj, false).unwrap(), k).unwrap()
    }

    #[test]
    fn half_identity_filters_pass_input_through() {
        let mut f = DiffusionFilter::zeros(1, 3, 3);
        let half = Matrix::identity(3).map(|x| 0.5 * x);
        f.set_block(Direction::Forward, 0, &half);
        f.set_block(Direction::Reverse, 0, &half);
        let x = random(4, 3, 1);
        let powers = vec![Matrix::identity(4), Matrix::identity(4)];
        let y = diffusion_conv(&f, &powers, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_filter_returns_bias() {
        let mut f = DiffusionFilter::zeros(2, 2, 3);
        f.bias = Matrix::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        let y = diffusion_conv(&f, &path_powers(2), &random(3, 2, 2)).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), f.bias.row(0));
        }
    }

    #[test]
    fn conv_matches_explicit_expansion() {
        let powers = path_powers(2);
        let mut f = DiffusionFilter::zeros(2, 2, 2);
        f.weights = random(8, 2, 3);
        let x = random(3, 2, 4);
        let y = diffusion_conv(&f, &powers, &x).unwrap();
        for node in 0..3 {
            for u in 0..2 {
                let mut acc = 0.0;
                for (dir, base) in [(Direction::Forward, 0), (Direction::Reverse, 2)] {
                    for d in 0..2 {
                        let w = f.block(dir, d);
                        for feat in 0..2 {
                            let mut diffused = 0.0;
                            for m in 0..3 {
                                diffused += powers[base + d].get(node, m) * x.get(m, feat);
                            }
                            acc += diffused * w.get(feat, u);
                        }
                    }
                }
                assert!((acc - y.get(node, u)).abs() < 1e-12);
            }
        }
        assert!(diffusion_conv(&f, &powers[..2], &x).is_err());
        assert!(diffusion_conv(&f, &powers, &random(3, 3, 1)).is_err());
    }

    #[test]
    fn zero_cell_halves_state() {
        let cell = DcgruCell::zeros(2, 1, 3);
        let h = random(3, 3, 5);
        let out = dcgru_step(&cell, &path_powers(2), &random(3, 1, 6), &h).unwrap();
        assert!(out.max_abs_diff(&h.map(|v| 0.5 * v)) < 1e-15);
        let zero = dcgru_step(&cell, &path_powers(2), &random(3, 1, 6), &Matrix::zeros(3, 3))
            .unwrap();
        assert_eq!(zero, Matrix::zeros(3, 3));
        assert!(dcgru_step(&cell, &path_powers(2), &random(3, 2, 6), &h).is_err());
    }

    #[test]
    fn step_matches_scalar_evaluation() {
        // independent, non-vectorised evaluation of the gate equations
        let k = 2;
        let powers = path_powers(k);
        let mut cell = DcgruCell::zeros(k, 1, 2);
        for (i, f) in [&mut cell.reset, &mut cell.update, &mut cell.candidate]
            .into_iter()
            .enumerate()
        {
            f.weights = random(2 * k * 3, 2, 10 + i as u64);
            f.bias = random(1, 2, 20 + i as u64);
        }
        let x = random(3, 1, 30);
        let h = random(3, 2, 31);
        let got = dcgru_step(&cell, &powers, &x, &h).unwrap();

        let conv = |f: &DiffusionFilter, feats: &dyn Fn(usize, usize) -> f64, node: usize, u: usize| {
            let mut acc = f.bias.get(0, u);
            for blk in 0..2 * k {
                for feat in 0..3 {
                    let mut diffused = 0.0;
                    for m in 0..3 {
                        diffused += powers[blk].get(node, m) * feats(m, feat);
                    }
                    acc += diffused * f.weights.get(blk * 3 + feat, u);
                }
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xh = |m: usize, f: usize| if f == 0 { x.get(m, 0) } else { h.get(m, f - 1) };
        let mut r = Matrix::zeros(3, 2);
        let mut u = Matrix::zeros(3, 2);
        for node in 0..3 {
            for j in 0..2 {
                r.set(node, j, sig(conv(&cell.reset, &xh, node, j)));
                u.set(node, j, sig(conv(&cell.update, &xh, node, j)));
            }
        }
        let xrh = |m: usize, f: usize| {
            if f == 0 {
                x.get(m, 0)
            } else {
                r.get(m, f - 1) * h.get(m, f - 1)
            }
        };
        for node in 0..3 {
            for j in 0..2 {
                let c = conv(&cell.candidate, &xrh, node, j).tanh();
                let expect = u.get(node, j) * h.get(node, j) + (1.0 - u.get(node, j)) * c;
                assert!((expect - got.get(node, j)).abs() < 1e-12);
            }
        }
    }

    fn small_hyper() -> Hyper {
        Hyper {
            k: 2,
            num_layers: 2,
            units: 4,
            input_horizon: 4,
            output_horizon: 2,
        }
    }

    fn dynamic() -> GraphMode {
        GraphMode::Dynamic {
            mask: None,
            signed: false,
        }
    }

    #[test]
    fn zero_model_predicts_projection_bias() {
        let mut m = ModelState::zeros(small_hyper(), dynamic()).unwrap();
        m.proj_bias.set(0, 0, 0.37);
        let pred = m.predict(&random(4, 3, 1)).unwrap();
        assert_eq!(pred.shape(), (2, 3));
        assert!(pred.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let m = ModelState::init(small_hyper(), dynamic(), 1).unwrap();
        let s = m.make_sample(random(5, 3, 1), Matrix::zeros(2, 3)).unwrap();
        assert!(m.forward_nonautoregressive(&s).is_err());
        assert!(m.forward_autoregressive(&random(4, 3, 1), 3).is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = ModelState::init(small_hyper(), dynamic(), 7).unwrap();
        let b = ModelState::init(small_hyper(), dynamic(), 7).unwrap();
        let c = ModelState::init(small_hyper(), dynamic(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.encoder[0].reset.weights.shape(), (2 * 2 * 5, 4));
        assert_eq!(a.encoder[1].candidate.weights.shape(), (2 * 2 * 8, 4));
        assert_eq!(a.decoder[0].update.bias.shape(), (1, 4));
        for (name, p) in a.named_params() {
            if name.ends_with(".b") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_mean_is_zero_within_three_standard_errors() {
        let hyper = Hyper {
            units: 64,
            ..small_hyper()
        };
        let m = ModelState::init(hyper, dynamic(), 3).unwrap();
        let w = &m.encoder[1].reset.weights;
        assert!(w.len() >= 10_000);
        let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
        let se = limit / 3f64.sqrt() / (w.len() as f64).sqrt();
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn one_layer_k1_ignores_graph_with_tied_filters() {
        let hyper = Hyper {
            k: 1,
            ..small_hyper()
        };
        let mut m = ModelState::init(hyper, dynamic(), 2).unwrap();
        for (_, p) in m.named_params_mut() {
            if p.rows() % 2 == 0 && p.rows() > 1 {
                let half = p.rows() / 2;
                let top = p.row_range(0, half);
                for i in 0..half {
                    p.row_mut(half + i).copy_from_slice(top.row(i));
                }
            }
        }
        let inputs = random(4, 3, 9);
        let a = m.make_sample(inputs.clone(), Matrix::zeros(2, 3)).unwrap();
        let other = GraphMode::Static {
            adjacency: random(3, 3, 4),
            signed: false,
        };
        let b = Sample::new(inputs, Matrix::zeros(2, 3), &other, 1).unwrap();
        assert_ne!(a.adjacency.weights, b.adjacency.weights);
        let pa = m.forward_nonautoregressive(&a).unwrap();
        let pb = m.forward_nonautoregressive(&b).unwrap();
        assert!(pa.max_abs_diff(&pb) < 1e-15);
    }

    #[test]
    fn permuting_nodes_permutes_outputs() {
        let m = ModelState::init(small_hyper(), dynamic(), 11).unwrap();
        let inputs = random(4, 3, 12);
        let perm = [2usize, 0, 1];
        let permuted = Matrix::from_fn(4, 3, |r, c| inputs.get(r, perm[c]));
        let a = m.predict(&inputs).unwrap();
        let b = m.predict(&permuted).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((b.get(r, c) - a.get(r, perm[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn autoregressive_base_case_and_window_bookkeeping() {
        let hyper = Hyper {
            output_horizon: 1,
            ..small_hyper()
        };
        let m = ModelState::init(hyper, dynamic(), 4).unwrap();
        let inputs = random(4, 3, 13);
        let one = m.forward_autoregressive(&inputs, 1).unwrap();
        assert_eq!(one, m.predict(&inputs).unwrap());
        let three = m.forward_autoregressive(&inputs, 3).unwrap();
        // step 3 sees the last observation followed by the first two predictions
        let mut window = inputs.row_range(2, 4).into_vec();
        window.extend_from_slice(three.row(0));
        window.extend_from_slice(three.row(1));
        let w = Matrix::from_vec(4, 3, window).unwrap();
        assert_eq!(m.predict(&w).unwrap().row(0), three.row(2));
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let m = ModelState::init(small_hyper(), dynamic(), 5).unwrap();
        let cell = &m.encoder[0];
        let powers = path_powers(2);
        let mut h = random(3, 4, 3);
        for t in 0..20 {
            h = dcgru_step(cell, &powers, &random(3, 1, 100 + t).map(|v| 50.0 * v), &h).unwrap();
            assert!(h.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let topo = Topology::new(vec!["a".into(), "b".into()], vec![(0, 1)]).unwrap();
        let mut m = ModelState::init(
            small_hyper(),
            GraphMode::Dynamic {
                mask: Some(topo.connectivity()),
                signed: false,
            },
            3,
        )
        .unwrap();
        m.scaler = Some(ScalerParams {
            node_ids: vec!["a".into(), "b".into()],
            min: vec![0.1, 0.2],
            max: vec![1.0, 3.0],
            fitted_on: "train".into(),
        });
        let text = m.to_checkpoint().to_text();
        let back = ModelState::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
