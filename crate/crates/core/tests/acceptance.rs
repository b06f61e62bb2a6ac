//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are still evaluated and reported with
//! their measured numbers; they do not abort the run. Any other failure
//! exits nonzero.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ddcrnn::baselines::Baseline;
use ddcrnn::evaluation::{acf, characterize, mape, pacf, r_squared, rank_by_mean_acf, ForecastReport};
use ddcrnn::graph::{diffusion_powers, pearson_adjacency, transition_pair, AdjacencyKind, AdjacencyMatrix};
use ddcrnn::ingest::{aggregate_hourly, apply_scaler, fill_gaps, fit_scaler, invert_scaler, parse_traces};
use ddcrnn::model::{diffusion_conv, DiffusionFilter, GraphMode, Hyper, ModelState};
use ddcrnn::pipeline::{
    evaluate, prepare, train_model, AdjacencyChoice, DecoderChoice, ExperimentConfig, Forecaster,
};
use ddcrnn::synth::{acceptance_config, generate};
use ddcrnn::training::{clip_gradients, mae_loss};
use ddcrnn::Matrix;

const KNOWN_FAILURES: &[usize] = &[5, 6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let hyper = Hyper {
        k: 2,
        num_layers: 2,
        units: 4,
        input_horizon: 4,
        output_horizon: 2,
    };
    let h = 3e-3;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let graph = GraphMode::Dynamic {
            mask: None,
            signed: false,
        };
        let mut model = ModelState::init(hyper, graph, seed).unwrap();
        let inputs = Matrix::from_fn(4, 3, |_, _| rng.random_range(0.0..1.0));
        let targets = Matrix::from_fn(2, 3, |_, _| rng.random_range(0.0..1.0));
        let sample = model.make_sample(inputs, targets).unwrap();
        let (_, grads) = model.loss_and_grads(&sample, None).unwrap();
        for (p, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.cols(), idx % g.cols());
                let orig = model.params()[p].get(r, c);
                let mut at = |d: f64| {
                    model.params_mut()[p].set(r, c, orig + d);
                    let l = model.loss(&sample).unwrap();
                    model.params_mut()[p].set(r, c, orig);
                    l
                };
                // Fourth-order central stencil: second-order differences drown
                // partials near 1e-8 in rounding error.
                let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                let analytic = g.get(r, c);
                let scale = analytic.abs().max(numeric.abs());
                // Below this scale both are rounding noise of a zero gradient.
                let err = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("{checked} partials over 5 seeds, worst relative error {worst:.2e}"),
    )
}

/// Row-normalised `|a|` by explicit loops.
fn brute_transition(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut deg = 0.0;
        for j in 0..n {
            deg += a[i][j].abs();
        }
        for j in 0..n {
            out[i][j] = if deg > 0.0 {
                a[i][j].abs() / deg
            } else if i == j {
                1.0
            } else {
                0.0
            };
        }
    }
    out
}

fn brute_apply(p: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = p.len();
    let f = x[0].len();
    let mut out = vec![vec![0.0; f]; n];
    for i in 0..n {
        for j in 0..n {
            for c in 0..f {
                out[i][c] += p[i][j] * x[j][c];
            }
        }
    }
    out
}

fn diffusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, f, u) = (5, 3, 4);
    let mut worst = 0.0f64;
    for k in 1..=3usize {
        for _ in 0..20 {
            let a: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-1.0..1.0) }).collect())
                .collect();
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let filter = DiffusionFilter {
                weights: random_matrix(&mut rng, 2 * k * f, u),
                bias: random_matrix(&mut rng, 1, u),
                k,
            };
            let at: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect();
            let fwd = brute_transition(&a);
            let rev = brute_transition(&at);
            let mut expected = vec![vec![0.0; u]; n];
            for (dir, base) in [(0usize, &fwd), (1usize, &rev)] {
                let mut z = x.clone();
                for d in 0..k {
                    if d > 0 {
                        z = brute_apply(base, &z);
                    }
                    let offset = (dir * k + d) * f;
                    for i in 0..n {
                        for o in 0..u {
                            for c in 0..f {
                                expected[i][o] += z[i][c] * filter.weights.get(offset + c, o);
                            }
                        }
                    }
                }
            }
            let adj = AdjacencyMatrix {
                weights: Matrix::from_fn(n, n, |i, j| a[i][j]),
                kind: AdjacencyKind::StaticHop,
            };
            let powers = diffusion_powers(&transition_pair(&adj, false).unwrap(), k).unwrap();
            let xm = Matrix::from_fn(n, f, |i, c| x[i][c]);
            let got = diffusion_conv(&filter, &powers, &xm).unwrap();
            for i in 0..n {
                for o in 0..u {
                    let e = expected[i][o] + filter.bias.get(0, o);
                    worst = worst.max((got.get(i, o) - e).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("K in 1..=3, 60 graphs, max abs diff {worst:.2e}"))
}

fn two_pass_pearson(w: &Matrix) -> Vec<Vec<f64>> {
    let (t, n) = w.shape();
    let means: Vec<f64> = (0..n).map(|c| (0..t).map(|r| w.get(r, c)).sum::<f64>() / t as f64).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for r in 0..t {
                let dx = w.get(r, i) - means[i];
                let dy = w.get(r, j) - means[j];
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            out[i][j] = sxy / (sxx * syy).sqrt();
        }
    }
    out
}

fn pearson_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut props = true;
    for _ in 0..100 {
        let t = rng.random_range(3..40);
        let n = rng.random_range(2..9);
        let w = random_matrix(&mut rng, t, n);
        let got = pearson_adjacency(&w, None).unwrap().weights;
        let want = two_pass_pearson(&w);
        let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let moved = Matrix::from_fn(t, n, |r, c| scale[c] * w.get(r, c) + shift[c]);
        let moved_adj = pearson_adjacency(&moved, None).unwrap().weights;
        for i in 0..n {
            props &= got.get(i, i) == 1.0;
            for j in 0..n {
                worst = worst.max((got.get(i, j) - want[i][j]).abs());
                props &= got.get(i, j) == got.get(j, i);
                props &= got.get(i, j).abs() <= 1.0;
                props &= (moved_adj.get(i, j) - got.get(i, j)).abs() <= 1e-10;
            }
        }
    }
    outcome(
        worst <= 1e-10 && props,
        format!("100 windows, max abs diff {worst:.2e}, symmetry/diagonal/bound/affine {}", if props { "hold" } else { "violated" }),
    )
}

fn transition_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut negatives = 0usize;
    for trial in 0..1000 {
        let n = rng.random_range(2..12);
        let weights = if trial % 2 == 0 {
            let t = rng.random_range(3..20);
            pearson_adjacency(&random_matrix(&mut rng, t, n), None).unwrap().weights
        } else {
            let mut m = Matrix::from_fn(n, n, |_, _| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(-1.0..1.0) });
            let empty = rng.random_range(0..n);
            m.row_mut(empty).iter_mut().for_each(|x| *x = 0.0);
            m
        };
        negatives += weights.data().iter().filter(|&&x| x < 0.0).count();
        let adj = AdjacencyMatrix {
            weights,
            kind: AdjacencyKind::DynamicCorrelation,
        };
        let pair = transition_pair(&adj, false).unwrap();
        for m in [&pair.forward, &pair.reverse] {
            for i in 0..n {
                let s: f64 = m.row(i).iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    outcome(
        worst <= 1e-9 && negatives > 0,
        format!("1000 adjacencies ({negatives} negative weights), worst row-sum error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------

struct Comparison {
    persistence: ForecastReport,
    dynamic: ForecastReport,
    stat: ForecastReport,
    autoregressive: ForecastReport,
    seconds: [f64; 3],
}

fn run_comparison() -> Comparison {
    let cfg = acceptance_config();
    let panel = generate(&cfg).unwrap();
    let mut base = ExperimentConfig::default();
    base.hyper = Hyper {
        k: 2,
        num_layers: 2,
        units: 16,
        input_horizon: 12,
        output_horizon: 6,
    };
    base.train.epochs = 20;
    let data = prepare(&panel, &base).unwrap();
    let persistence = evaluate(&Forecaster::Baseline(Baseline::Persistence), &data.test, 12, 6, base.mape_floor, "")
        .unwrap();
    let mut seconds = [0.0; 3];
    let mut reports = Vec::new();
    for (i, (adjacency, decoder)) in [
        (AdjacencyChoice::Dynamic, DecoderChoice::NonAutoregressive),
        (AdjacencyChoice::Static, DecoderChoice::NonAutoregressive),
        (AdjacencyChoice::Dynamic, DecoderChoice::Autoregressive),
    ]
    .into_iter()
    .enumerate()
    {
        let start = Instant::now();
        let exp = ExperimentConfig {
            adjacency,
            decoder,
            ..base.clone()
        };
        let (model, _) = train_model(&data, &cfg.topology, &exp).unwrap();
        reports.push(evaluate(&Forecaster::Model(model), &data.test, 12, 6, exp.mape_floor, &exp.hash()).unwrap());
        seconds[i] = start.elapsed().as_secs_f64();
    }
    let autoregressive = reports.pop().unwrap();
    let stat = reports.pop().unwrap();
    let dynamic = reports.pop().unwrap();
    Comparison {
        persistence,
        dynamic,
        stat,
        autoregressive,
        seconds,
    }
}

fn curve(r: &ForecastReport) -> Vec<f64> {
    r.horizon_mape().into_iter().map(|v| v.expect("defined")).collect()
}

fn fmt_curve(c: &[f64]) -> String {
    c.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
}

fn dynamic_vs_static(c: &Comparison) -> Outcome {
    let d = c.dynamic.overall_mape().unwrap();
    let s = c.stat.overall_mape().unwrap();
    let p = c.persistence.overall_mape().unwrap();
    let gain = (s - d) / s;
    let minutes = (c.seconds[0] + c.seconds[1]) / 60.0;
    outcome(
        gain >= 0.10 && d < p && s < p && minutes < 15.0,
        format!(
            "test MAPE dynamic {d:.3}% static {s:.3}% persistence {p:.3}%, relative gain {:.1}% (need 10%), {minutes:.1} min",
            100.0 * gain
        ),
    )
}

fn nonautoregressive_vs_autoregressive(c: &Comparison) -> Outcome {
    let nar = curve(&c.dynamic);
    let ar = curve(&c.autoregressive);
    let last = nar.len() - 1;
    let slope_nar = nar[last] - nar[0];
    let slope_ar = ar[last] - ar[0];
    let minutes = (c.seconds[0] + c.seconds[2]) / 60.0;
    outcome(
        ar[last] > nar[last] && slope_ar > slope_nar && minutes < 15.0,
        format!(
            "final-step MAPE AR {:.3}% vs NAR {:.3}%, slope AR {slope_ar:.3} vs NAR {slope_nar:.3}, {minutes:.1} min",
            ar[last], nar[last]
        ),
    )
}

fn horizon_monotone(c: &Comparison) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for (name, r) in [("dynamic", &c.dynamic), ("static", &c.stat), ("autoregressive", &c.autoregressive)] {
        let v = curve(r);
        pass &= v.windows(2).all(|w| w[1] >= w[0] * 0.95);
        lines.push(format!("{name} [{}]", fmt_curve(&v)));
    }
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------------------

fn ar1(rng: &mut ChaCha8Rng, phi: f64, n: usize) -> Vec<f64> {
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            x = phi * x + e;
            x
        })
        .collect()
}

fn acf_analytics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let series = ar1(&mut rng, 0.8, 10_000);
    let r = acf(&series, 10).unwrap().unwrap();
    let p = pacf(&series, 10).unwrap().unwrap();
    let max_tail = p[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut wins = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let a = ar1(&mut rng, 0.8, 1000);
        let w: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let values = Matrix::from_fn(1000, 2, |t, c| if c == 0 { w[t] } else { a[t] });
        let profiles = characterize(&values, &["noise".into(), "ar".into()], 10).unwrap();
        if rank_by_mean_acf(&profiles)[0].node == "ar" {
            wins += 1;
        }
    }
    outcome(
        (r[0] - 0.8).abs() <= 0.02 && max_tail < 0.04 && wins == 100,
        format!("ACF(1) {:.4}, max |PACF(k>=2)| {max_tail:.4}, AR ranked first in {wins}/100", r[0]),
    )
}

fn determinism_and_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut text = String::from("timestamp,node,volume_bytes\n");
    for t in 0..(48 * 120) {
        for node in ["a_in", "a_out", "b_in"] {
            if rng.random_bool(0.97) {
                let v: u64 = rng.random_range(0..50_000_000_000);
                text.push_str(&format!("{},{node},{v}\n", 1_514_764_800 + 30 * t));
            }
        }
    }
    let panel = fill_gaps(&aggregate_hourly(&parse_traces(text.as_bytes()).unwrap()).unwrap()).unwrap();
    let scaler = fit_scaler(&panel, false).unwrap();
    let back = invert_scaler(&apply_scaler(&panel, &scaler).unwrap(), &scaler).unwrap();
    let round_trip = panel
        .values
        .data()
        .iter()
        .zip(back.values.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let cfg = ddcrnn::synth::two_regime_config(4, 400, 40, 11).unwrap();
    let synth_a = generate(&cfg).unwrap();
    let synth_b = generate(&cfg).unwrap();
    let mut exp = ExperimentConfig::default();
    exp.hyper = Hyper {
        k: 2,
        num_layers: 1,
        units: 4,
        input_horizon: 8,
        output_horizon: 3,
    };
    exp.train.epochs = 3;
    exp.train.seed = 5;
    let data = prepare(&synth_a, &exp).unwrap();
    let run = || {
        let (m, log) = train_model(&data, &cfg.topology, &exp).unwrap();
        let report = evaluate(&Forecaster::Model(m.clone()), &data.test, 8, 3, exp.mape_floor, &exp.hash()).unwrap();
        let losses: Vec<(u64, u64)> = log.epochs.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect();
        (m.to_checkpoint().to_text(), report.to_json(), losses)
    };
    let (ck1, rep1, log1) = run();
    let (ck2, rep2, log2) = run();
    let identical = synth_a == synth_b && ck1 == ck2 && rep1 == rep2 && log1 == log2;
    outcome(
        round_trip <= 1e-12 && identical,
        format!(
            "scale/invert max error {round_trip:.1e}; repeated synth, checkpoint, log losses and report {}",
            if identical { "bit-identical" } else { "differ" }
        ),
    )
}

fn metric_definitions() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("mape identity", mape(&[1.0, 2.0], &[1.0, 2.0], 1e-6).unwrap().value == Some(0.0));
    check(
        "mape hand example",
        close(mape(&[100.0, 200.0], &[110.0, 180.0], 1e-6).unwrap().value.unwrap(), 10.0),
    );
    let m = mape(&[0.0, 100.0], &[5.0, 100.0], 1e-6).unwrap();
    check("mape floor exclusion", m.value == Some(0.0) && m.excluded == 1);
    check("r2 perfect", r_squared(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap() == Some(1.0));
    check("r2 mean", r_squared(&[1.0, 2.0, 6.0], &[3.0, 3.0, 3.0]).unwrap() == Some(0.0));
    check(
        "r2 hand example",
        close(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap().unwrap(), 0.5),
    );
    let a = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
    let b = Matrix::from_vec(2, 1, vec![2.0, 2.0]).unwrap();
    check("mae identity", mae_loss(&a, &a).unwrap() == 0.0);
    check("mae offset", close(mae_loss(&a, &a.map(|x| x - 2.5)).unwrap(), 2.5));
    check("mae hand example", close(mae_loss(&a, &b).unwrap(), 1.0));
    let mut g = vec![Matrix::from_vec(1, 2, vec![0.0, 3.0]).unwrap()];
    clip_gradients(&mut g, 5.0);
    check("clip below", g[0].data() == [0.0, 3.0]);
    let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()];
    clip_gradients(&mut g, 5.0);
    check("clip boundary", g[0].data() == [3.0, 4.0]);
    let mut g = vec![Matrix::from_vec(1, 2, vec![6.0, 8.0]).unwrap()];
    clip_gradients(&mut g, 5.0);
    check("clip scaled", close(g[0].get(0, 0), 3.0) && close(g[0].get(0, 1), 4.0));
    outcome(
        failures.is_empty(),
        if failures.is_empty() { "12 worked examples exact".to_string() } else { format!("failed: {}", failures.join(", ")) },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let mut unexpected = Vec::new();
    let mut report = |id: usize, name: &str, limit_s: Option<f64>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let secs = start.elapsed().as_secs_f64();
        if let Some(limit) = limit_s {
            if secs >= limit {
                o.pass = false;
                o.detail.push_str(&format!(" (over the {limit} s budget)"));
            }
        }
        let tag = if o.pass {
            "PASS"
        } else if KNOWN_FAILURES.contains(&id) {
            "FAIL (known)"
        } else {
            unexpected.push(id);
            "FAIL"
        };
        println!("criterion {id:>2} {tag}: {name}: {} [{secs:.1} s]", o.detail);
    };

    report(1, "gradient check", Some(10.0), &mut gradient_check);
    report(2, "diffusion convolution oracle", Some(1.0), &mut diffusion_oracle);
    report(3, "pearson adjacency oracle", Some(1.0), &mut pearson_oracle);
    report(4, "transition row sums", Some(1.0), &mut transition_rows);
    let start = Instant::now();
    let comparison = run_comparison();
    println!("trained comparison models in {:.1} s", start.elapsed().as_secs_f64());
    println!(
        "  persistence [{}]",
        fmt_curve(&curve(&comparison.persistence))
    );
    report(5, "dynamic beats static", None, &mut || dynamic_vs_static(&comparison));
    report(6, "nonautoregressive beats autoregressive", None, &mut || {
        nonautoregressive_vs_autoregressive(&comparison)
    });
    report(7, "horizon monotonicity", None, &mut || horizon_monotone(&comparison));
    report(8, "autocorrelation analytics", Some(5.0), &mut acf_analytics);
    report(9, "determinism and round trips", None, &mut determinism_and_round_trips);
    report(10, "metric definitions", None, &mut metric_definitions);

    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance failures: {unexpected:?}");
        std::process::exit(1);
    }
}
