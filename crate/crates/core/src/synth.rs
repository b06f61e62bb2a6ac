//! Deterministic synthetic WAN traffic: graph-coupled AR dynamics with
//! regime-switching coupling and Poisson bursts.
//!
//! Each node fluctuates around a base level. Writing `y = x - level`,
//!
//! ```text
//! y[t+1] = phi * y[t] + (1 - phi) * gain * C * y[t] + sigma * e + bursts
//! ```
//!
//! where `C` is the regime's coupling matrix with its diagonal removed and
//! rows normalized to sum to one. Values are clamped at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::ingest::{TrafficPanel, SECONDS_PER_HOUR};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub duration: usize,
    pub coupling: Matrix,
    pub noise: f64,
    /// Weight with which a node's noise also lands on its coupled
    /// neighbors in the same step.
    pub noise_share: f64,
    /// Expected bursts per node per step.
    pub burst_rate: f64,
    pub burst_magnitude: f64,
    /// Strength of the neighbor pull, in [0, 1).
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub topology: Topology,
    pub length: usize,
    pub seed: u64,
    pub regimes: Vec<Regime>,
    /// Repeat the regime list until `length` steps are produced.
    pub cycle: bool,
    pub phi: Vec<f64>,
    pub level: Vec<f64>,
    pub start_time: i64,
}

fn normalized_offdiag(c: &Matrix) -> Matrix {
    let n = c.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let s: f64 = (0..n).filter(|&j| j != i).map(|j| c.get(i, j).abs()).sum();
        if s > 0.0 {
            for j in (0..n).filter(|&j| j != i) {
                out.set(i, j, c.get(i, j).abs() / s);
            }
        }
    }
    out
}

impl SynthConfig {
    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if n == 0 {
            return Err(Error::validation("synthetic topology has no nodes"));
        }
        if self.length == 0 {
            return Err(Error::validation("synthetic length must be positive"));
        }
        if self.regimes.is_empty() {
            return Err(Error::validation("at least one regime is required"));
        }
        if self.phi.len() != n || self.level.len() != n {
            return Err(Error::validation(format!(
                "phi and level need one entry per node ({n})"
            )));
        }
        if let Some(p) = self.phi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::validation(format!("phi {p} outside [0, 1]")));
        }
        if self.level.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::validation("levels must be finite and nonnegative"));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if r.coupling.shape() != (n, n) {
                return Err(Error::validation(format!("regime {i}: coupling must be {n}x{n}")));
            }
            if !r.coupling.is_finite() {
                return Err(Error::validation(format!("regime {i}: non-finite coupling")));
            }
            if r.duration == 0 {
                return Err(Error::validation(format!("regime {i}: duration must be positive")));
            }
            if !(r.noise >= 0.0 && r.noise_share >= 0.0 && r.burst_rate >= 0.0 && r.burst_magnitude >= 0.0) {
                return Err(Error::validation(format!(
                    "regime {i}: noise, noise share, burst rate and magnitude must be nonnegative"
                )));
            }
            if !(0.0..1.0).contains(&r.gain) {
                return Err(Error::validation(format!("regime {i}: gain outside [0, 1)")));
            }
        }
        let total: usize = self.regimes.iter().map(|r| r.duration).sum();
        if !self.cycle && total != self.length {
            return Err(Error::validation(format!(
                "regime durations sum to {total}, expected {}",
                self.length
            )));
        }
        Ok(())
    }

    /// Regime index active at each step.
    pub fn schedule(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.length);
        'outer: loop {
            for (i, r) in self.regimes.iter().enumerate() {
                for _ in 0..r.duration {
                    if out.len() == self.length {
                        break 'outer;
                    }
                    out.push(i);
                }
            }
            if !self.cycle || out.len() == self.length {
                break;
            }
        }
        out
    }
}

pub fn generate(config: &SynthConfig) -> Result<TrafficPanel> {
    config.validate()?;
    let n = config.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let coupling: Vec<Matrix> = config.regimes.iter().map(|r| normalized_offdiag(&r.coupling)).collect();
    let poisson: Vec<Option<Poisson<f64>>> = config
        .regimes
        .iter()
        .map(|r| (r.burst_rate > 0.0).then(|| Poisson::new(r.burst_rate).expect("positive rate")))
        .collect();
    let schedule = config.schedule();
    let mut values = Matrix::zeros(config.length, n);
    let mut y = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut z = vec![0.0; n];
    for (t, &ri) in schedule.iter().enumerate() {
        for i in 0..n {
            values.set(t, i, (config.level[i] + y[i]).max(0.0));
        }
        let r = &config.regimes[ri];
        let c = &coupling[ri];
        for zi in z.iter_mut() {
            *zi = std_normal.sample(&mut rng);
        }
        for i in 0..n {
            let pull: f64 = (0..n).map(|j| c.get(i, j) * y[j]).sum();
            let shared: f64 = (0..n).map(|j| c.get(i, j) * z[j]).sum();
            let phi = config.phi[i];
            let bursts = match &poisson[ri] {
                Some(p) => p.sample(&mut rng),
                None => 0.0,
            };
            let v = phi * y[i]
                + (1.0 - phi) * r.gain * pull
                + r.noise * (z[i] + r.noise_share * shared)
                + r.burst_magnitude * bursts;
            next[i] = (config.level[i] + v).max(0.0) - config.level[i];
        }
        std::mem::swap(&mut y, &mut next);
    }
    TrafficPanel::new(
        config.start_time,
        SECONDS_PER_HOUR,
        config.topology.node_ids().to_vec(),
        values,
    )
}

/// Symmetric coupling that links node `i` with `i ^ stride`.
pub fn paired_coupling(n: usize, stride: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i ^ stride == j && j < n { 1.0 } else { 0.0 })
}

/// Layout of the two-regime panel. Regime A pairs node `i` with `i ^ 1`,
/// regime B with `i ^ 2`; the topology carries both sets of links so only
/// the data reveals which one is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoRegime {
    pub nodes: usize,
    pub length: usize,
    pub regime_len: usize,
    pub seed: u64,
    pub phi: f64,
    pub gain: f64,
    pub noise: f64,
    pub noise_share: f64,
    pub burst_rate: f64,
    pub burst_magnitude: f64,
    pub base_level: f64,
    pub level_step: f64,
}

pub const ACCEPTANCE_SEED: u64 = 20_200_913;

impl Default for TwoRegime {
    fn default() -> Self {
        TwoRegime {
            nodes: 8,
            length: 4000,
            regime_len: 160,
            seed: ACCEPTANCE_SEED,
            phi: 0.5,
            gain: 0.95,
            noise: 0.03,
            noise_share: 1.0,
            burst_rate: 0.02,
            burst_magnitude: 2.0,
            base_level: 1.0,
            level_step: 0.25,
        }
    }
}

impl TwoRegime {
    pub fn config(&self) -> Result<SynthConfig> {
        let n = self.nodes;
        if n == 0 || !n.is_multiple_of(4) {
            return Err(Error::validation("two-regime layout needs a multiple of 4 nodes"));
        }
        let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((i, i ^ 1));
            edges.push((i, i ^ 2));
        }
        edges.sort_unstable();
        let regime = |stride| Regime {
            duration: self.regime_len,
            coupling: paired_coupling(n, stride),
            noise: self.noise,
            noise_share: self.noise_share,
            burst_rate: self.burst_rate,
            burst_magnitude: self.burst_magnitude,
            gain: self.gain,
        };
        Ok(SynthConfig {
            topology: Topology::new(ids, edges)?,
            length: self.length,
            seed: self.seed,
            regimes: vec![regime(1), regime(2)],
            cycle: true,
            phi: vec![self.phi; n],
            level: (0..n).map(|i| self.base_level + self.level_step * i as f64).collect(),
            start_time: 1_577_836_800,
        })
    }
}

pub fn two_regime_config(n: usize, length: usize, regime_len: usize, seed: u64) -> Result<SynthConfig> {
    TwoRegime {
        nodes: n,
        length,
        regime_len,
        seed,
        ..TwoRegime::default()
    }
    .config()
}

/// The fixed two-regime panel used for the model comparisons.
pub fn acceptance_config() -> SynthConfig {
    TwoRegime::default().config().expect("valid layout")
}

fn parse_pairs(s: &str, n: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(n, n);
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let (edge, w) = match item.split_once(':') {
            Some((e, w)) => (e, w.trim().parse::<f64>().map_err(|_| Error::validation(format!("bad weight in {item:?}")))?),
            None => (item, 1.0),
        };
        let (a, b) = edge
            .split_once('-')
            .ok_or_else(|| Error::validation(format!("expected i-j, got {item:?}")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v < n)
                .ok_or_else(|| Error::validation(format!("bad node index in {item:?}")))
        };
        m.set(parse(a)?, parse(b)?, w);
    }
    Ok(m)
}

fn format_pairs(m: &Matrix) -> String {
    let mut items = Vec::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let w = m.get(i, j);
            if w != 0.0 {
                items.push(if w == 1.0 { format!("{i}-{j}") } else { format!("{i}-{j}:{w:?}") });
            }
        }
    }
    items.join(",")
}

fn per_node(cfg: &FlatConfig, key: &str, n: usize, default: f64) -> Result<Vec<f64>> {
    match cfg.get_list::<f64>(key)? {
        None => Ok(vec![default; n]),
        Some(v) if v.len() == 1 => Ok(vec![v[0]; n]),
        Some(v) if v.len() == n => Ok(v),
        Some(v) => Err(Error::validation(format!(
            "{key} has {} entries, expected 1 or {n}",
            v.len()
        ))),
    }
}

impl SynthConfig {
    /// Reads the flat format:
    ///
    /// ```text
    /// nodes = 4
    /// edges = 0-1,1-0
    /// length = 1000
    /// seed = 1
    /// phi = 0.3            # one value or one per node
    /// level = 1.0
    /// cycle = true
    /// regimes = 2
    /// regime.0.duration = 100
    /// regime.0.coupling = 0-1,1-0
    /// regime.0.noise = 0.05
    /// regime.0.noise_share = 0.5
    /// regime.0.burst_rate = 0.05
    /// regime.0.burst_magnitude = 0.5
    /// regime.0.gain = 0.9
    /// ```
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let need = |k: &str| Error::validation(format!("synthetic config is missing {k}"));
        let n: usize = cfg.get("nodes")?.ok_or_else(|| need("nodes"))?;
        let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let adj = parse_pairs(cfg.raw("edges").unwrap_or(""), n)?;
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| adj.get(i, j) != 0.0)
            .collect();
        let count: usize = cfg.get("regimes")?.ok_or_else(|| need("regimes"))?;
        let mut regimes = Vec::with_capacity(count);
        for r in 0..count {
            let key = |f: &str| format!("regime.{r}.{f}");
            regimes.push(Regime {
                duration: cfg.get(&key("duration"))?.ok_or_else(|| need(&key("duration")))?,
                coupling: parse_pairs(cfg.raw(&key("coupling")).unwrap_or(""), n)?,
                noise: cfg.get(&key("noise"))?.unwrap_or(0.0),
                noise_share: cfg.get(&key("noise_share"))?.unwrap_or(0.0),
                burst_rate: cfg.get(&key("burst_rate"))?.unwrap_or(0.0),
                burst_magnitude: cfg.get(&key("burst_magnitude"))?.unwrap_or(0.0),
                gain: cfg.get(&key("gain"))?.unwrap_or(0.0),
            });
        }
        let c = SynthConfig {
            topology: Topology::new(ids, edges)?,
            length: cfg.get("length")?.ok_or_else(|| need("length"))?,
            seed: cfg.get("seed")?.unwrap_or(0),
            regimes,
            cycle: cfg.get("cycle")?.unwrap_or(false),
            phi: per_node(cfg, "phi", n, 0.5)?,
            level: per_node(cfg, "level", n, 1.0)?,
            start_time: cfg.get("start_time")?.unwrap_or(0),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let n = self.num_nodes();
        let mut cfg = FlatConfig::default();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        cfg.set("nodes", n);
        let mut adj = Matrix::zeros(n, n);
        for &(s, d) in self.topology.edges() {
            adj.set(s, d, 1.0);
        }
        cfg.set("edges", format_pairs(&adj));
        cfg.set("length", self.length);
        cfg.set("seed", self.seed);
        cfg.set("phi", join(&self.phi));
        cfg.set("level", join(&self.level));
        cfg.set("cycle", self.cycle);
        cfg.set("start_time", self.start_time);
        cfg.set("regimes", self.regimes.len());
        for (r, g) in self.regimes.iter().enumerate() {
            let key = |f: &str| format!("regime.{r}.{f}");
            cfg.set(&key("duration"), g.duration);
            cfg.set(&key("coupling"), format_pairs(&g.coupling));
            cfg.set(&key("noise"), format!("{:?}", g.noise));
            cfg.set(&key("noise_share"), format!("{:?}", g.noise_share));
            cfg.set(&key("burst_rate"), format!("{:?}", g.burst_rate));
            cfg.set(&key("burst_magnitude"), format!("{:?}", g.burst_magnitude));
            cfg.set(&key("gain"), format!("{:?}", g.gain));
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::acf;
    use crate::graph::pearson_adjacency;

    fn single(n: usize, length: usize, phi: f64, noise: f64, coupling: Matrix) -> SynthConfig {
        SynthConfig {
            topology: Topology::new((0..n).map(|i| format!("n{i}")).collect(), vec![]).unwrap(),
            length,
            seed: 9,
            regimes: vec![Regime {
                duration: length,
                coupling,
                noise,
                noise_share: 0.0,
                burst_rate: 0.0,
                burst_magnitude: 0.0,
                gain: 0.5,
            }],
            cycle: false,
            phi: vec![phi; n],
            level: vec![100.0; n],
            start_time: 0,
        }
    }

    #[test]
    fn frozen_dynamics_are_constant() {
        let c = single(3, 50, 1.0, 0.0, Matrix::identity(3));
        let p = generate(&c).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 100.0));
    }

    #[test]
    fn identity_coupling_gives_ar1() {
        let c = single(2, 10_000, 0.8, 0.5, Matrix::identity(2));
        let p = generate(&c).unwrap();
        for node in 0..2 {
            let r = acf(&p.node_series(node), 1).unwrap().unwrap();
            assert!((r[0] - 0.8).abs() < 0.05, "{}", r[0]);
        }
    }

    #[test]
    fn same_seed_same_panel_and_nonnegative() {
        let c = acceptance_config();
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.data().iter().all(|&v| v >= 0.0));
        assert_eq!(a.len(), 4000);
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(generate(&other).unwrap().values, a.values);
    }

    #[test]
    fn regimes_produce_distinct_correlation() {
        let c = acceptance_config();
        let p = generate(&c).unwrap();
        let len = c.regimes[0].duration;
        let a = pearson_adjacency(&p.values.row_range(10, 10 + len - 20), None).unwrap();
        let b = pearson_adjacency(&p.values.row_range(len + 10, 2 * len - 10), None).unwrap();
        let diff = a.weights.max_abs_diff(&b.weights);
        assert!(diff > 0.1, "{diff}");
        // Regime A links 0 with 1, regime B links 0 with 2.
        assert!(a.weights.get(0, 1) > a.weights.get(0, 2));
        assert!(b.weights.get(0, 2) > b.weights.get(0, 1));
    }

    #[test]
    fn schedule_cycles_and_checks_durations() {
        let mut c = two_regime_config(4, 25, 10, 1).unwrap();
        let s = c.schedule();
        assert_eq!(s.len(), 25);
        assert_eq!((s[9], s[10], s[20]), (0, 1, 0));
        c.cycle = false;
        assert!(c.validate().is_err());
        c.length = 20;
        assert!(c.validate().is_ok());
        assert!(two_regime_config(6, 10, 5, 1).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let c = two_regime_config(4, 300, 50, 3).unwrap();
        let back = SynthConfig::from_flat(&FlatConfig::parse(&c.to_flat().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = single(2, 10, 0.5, 0.1, Matrix::identity(2));
        c.phi[0] = 1.5;
        assert!(generate(&c).is_err());
        let mut c = single(2, 10, 0.5, 0.1, Matrix::identity(3));
        assert!(generate(&c).is_err());
        c.regimes[0].coupling = Matrix::identity(2);
        c.regimes[0].gain = 1.0;
        assert!(generate(&c).is_err());
    }
}
