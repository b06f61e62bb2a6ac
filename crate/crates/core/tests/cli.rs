use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddcrnn::checkpoint::Checkpoint;
use ddcrnn::ingest::TrafficPanel;
use ddcrnn::manifest::file_digest;
use ddcrnn::pipeline::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddcrnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Two nodes reporting every 30 seconds over two hours; one cell is blank.
fn write_trace(dir: &Path) -> (PathBuf, PathBuf) {
    let mut text = String::from("timestamp,SACR_SUNN_in,SACR_SUNN_out\n");
    for i in 0..240 {
        let ts = 1_514_822_400 + 30 * i;
        let b = if i == 7 { String::new() } else { format!("{}", 14_110_930_202i64 + i) };
        text.push_str(&format!("{ts},{b},{}\n", 9_000_000_000i64 + 2 * i));
    }
    let traces = dir.join("trace.csv");
    std::fs::write(&traces, text).unwrap();
    let topo = dir.join("topo.txt");
    std::fs::write(&topo, "# one link\nSACR_SUNN_in SACR_SUNN_out\n").unwrap();
    (traces, topo)
}

fn synth(dir: &Path, nodes: &str, length: &str) -> (PathBuf, PathBuf) {
    let out = dir.join("synth");
    ok(&["synth", "--nodes", nodes, "--length", length, "--out", s(&out)]);
    (out.join("panel.csv"), out.join("topology.txt"))
}

const SMALL: &[&str] = &[
    "--epochs",
    "2",
    "--units",
    "4",
    "--num-layers",
    "1",
    "--input-horizon",
    "6",
    "--output-horizon",
    "3",
];

#[test]
fn ingest_builds_hourly_panel_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, topo) = write_trace(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["ingest", "--traces", s(&traces), "--topology", s(&topo), "--out", s(out)]);
    }
    let panel = TrafficPanel::read_csv(&a.join("panel.csv")).unwrap();
    assert_eq!(panel.node_ids, vec!["SACR_SUNN_in", "SACR_SUNN_out"]);
    assert_eq!((panel.len(), panel.step), (2, 3600));
    let first_hour: f64 = (0..120).map(|i| 9_000_000_000.0 + 2.0 * i as f64).sum();
    assert!((panel.values.get(0, 1) - first_hour / 3600.0 / 1e9).abs() < 1e-12);
    for f in ["panel.csv", "panel.mask.csv", "topology.txt"] {
        assert_eq!(file_digest(&a.join(f)).unwrap(), file_digest(&b.join(f)).unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 3);
}

#[test]
fn ingest_missing_topology_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (traces, _) = write_trace(dir.path());
    let missing = dir.path().join("nope.txt");
    let out = run(&["ingest", "--traces", s(&traces), "--topology", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["synth", "--nodes", "4", "--length", "200", "--seed", seed, "--out", s(&out)]);
        file_digest(&out.join("panel.csv")).unwrap()
    };
    assert_eq!(digest("a", "5"), digest("b", "5"));
    assert_ne!(digest("a", "5"), digest("c", "6"));
}

#[test]
fn synth_reads_its_own_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&["synth", "--nodes", "4", "--length", "120", "--out", s(&first)]);
    let second = dir.path().join("second");
    ok(&["synth", "--config", s(&first.join("synth.conf")), "--out", s(&second)]);
    assert_eq!(
        file_digest(&first.join("panel.csv")).unwrap(),
        file_digest(&second.join("panel.csv")).unwrap()
    );
}

#[test]
fn train_defaults_match_protocol() {
    let d = ExperimentConfig::default();
    assert_eq!(d.hyper.input_horizon, 30);
    assert_eq!(d.hyper.output_horizon, 24);
    assert_eq!(d.hyper.k, 2);
    assert_eq!(d.train.batch_size, 64);
    assert_eq!(d.train.epochs, 30);

    let dir = tempfile::tempdir().unwrap();
    let (panel, topo) = synth(dir.path(), "4", "600");
    let out = dir.path().join("t");
    ok(&[
        "train", "--panel", s(&panel), "--topology", s(&topo), "--epochs", "0", "--units", "2",
        "--out", s(&out),
    ]);
    let cfg = read(&out.join("config.txt"));
    for line in ["input_horizon = 30", "output_horizon = 24", "k = 2", "batch_size = 64"] {
        assert!(cfg.contains(line), "{line} missing from\n{cfg}");
    }
}

#[test]
fn train_variants_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, topo) = synth(dir.path(), "4", "300");
    let train = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--panel", s(&panel), "--topology", s(&topo), "--out", s(&out)];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = train("a", &["--seed", "3"]);
    let b = train("b", &["--seed", "3", "--threads", "2"]);
    for f in ["model.ckpt", "report.csv", "summary.csv", "report.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let log = read(&a.join("train_log.csv"));
    assert_eq!(log.lines().count(), 3);

    let st = train("static", &["--adjacency", "static"]);
    let ck = Checkpoint::load(&st.join("model.ckpt")).unwrap();
    assert_eq!(ck.meta("graph").unwrap(), "static");

    let ar = train("ar", &["--decoder", "autoregressive"]);
    let ck = Checkpoint::load(&ar.join("model.ckpt")).unwrap();
    assert_eq!(ck.meta("output_horizon").unwrap(), "1");
    let summary: serde_json::Value = serde_json::from_str(&read(&ar.join("report.json"))).unwrap();
    assert_eq!(summary["horizon"], 3);
    assert_eq!(summary["model_kind"], "ddcrnn-dynamic-autoregressive");
}

#[test]
fn evaluate_and_forecast_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, topo) = synth(dir.path(), "4", "300");
    let t = dir.path().join("t");
    let mut args = vec!["train", "--panel", s(&panel), "--topology", s(&topo), "--out", s(&t)];
    args.extend_from_slice(SMALL);
    ok(&args);

    let e = dir.path().join("e");
    let ck = t.join("model.ckpt");
    let mut args = vec!["evaluate", "--checkpoint", s(&ck), "--panel", s(&panel)];
    args.extend_from_slice(&["--out", s(&e)]);
    args.extend_from_slice(SMALL);
    ok(&args);
    assert_eq!(read(&e.join("report.csv")), read(&t.join("report.csv")));

    let f = dir.path().join("f");
    ok(&["forecast", "--checkpoint", s(&t.join("model.ckpt")), "--panel", s(&panel), "--out", s(&f)]);
    let text = read(&f.join("forecast.csv"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "timestamp,n0,n1,n2,n3");
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
}

#[test]
fn evaluate_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, _) = synth(dir.path(), "4", "800");
    let p = dir.path().join("p");
    ok(&["evaluate", "--baseline", "persistence", "--panel", s(&panel), "--out", s(&p)]);
    let summary = read(&p.join("summary.csv"));
    let horizons: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(horizons, vec!["1", "3", "6", "9", "12", "24"]);

    let l = dir.path().join("l");
    ok(&["evaluate", "--baseline", "linear-ar", "--ar-order", "4", "--panel", s(&panel), "--out", s(&l)]);
    assert!(l.join("linear_ar.ckpt").exists());
    let l2 = dir.path().join("l2");
    ok(&["evaluate", "--checkpoint", s(&l.join("linear_ar.ckpt")), "--panel", s(&panel), "--out", s(&l2)]);
    assert_eq!(read(&l.join("report.csv")), read(&l2.join("report.csv")));

    let sn = dir.path().join("sn");
    ok(&["evaluate", "--baseline", "seasonal-naive", "--season", "24", "--panel", s(&panel), "--out", s(&sn)]);

    let out = run(&["evaluate", "--baseline", "arima", "--panel", s(&panel), "--out", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["evaluate", "--panel", s(&panel), "--out", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn characterize_defaults_and_flags_constant_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("timestamp,ar,flat,noise\n");
    let mut x: f64 = 1.0;
    let mut state = 12345u64;
    for i in 0..400 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        x = 0.9 * x + u;
        let ts = ddcrnn::ingest::iso8601(3600 * i).unwrap();
        text.push_str(&format!("{ts},{:?},2.0,{:?}\n", x + 5.0, u + 5.0));
    }
    let panel = dir.path().join("p.csv");
    std::fs::write(&panel, text).unwrap();
    let out = dir.path().join("c");
    let res = ok(&["characterize", "--panel", s(&panel), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("flat"));
    let acf = read(&out.join("acf.csv"));
    let header = acf.lines().next().unwrap();
    assert!(header.contains("acf_10") && !header.contains("acf_11"));
    assert!(acf.lines().any(|l| l.starts_with("flat,undefined")));
    let ranking = read(&out.join("ranking.csv"));
    let order: Vec<&str> = ranking.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(order, vec!["ar", "noise", "flat"]);
}

#[test]
fn ablate_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, topo) = synth(dir.path(), "4", "300");
    let out = dir.path().join("ab");
    let mut args = vec!["ablate", "--panel", s(&panel), "--topology", s(&topo), "--out", s(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    let table = read(&out.join("ablation.csv"));
    let models: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, vec!["ddcrnn-dynamic", "ddcrnn-static", "persistence"]);
    assert!(out.join("dynamic/model.ckpt").exists() && out.join("static/model.ckpt").exists());
}

#[test]
fn config_file_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, topo) = synth(dir.path(), "4", "300");
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "epochs = 1\nunits = 3\nnum_layers = 1\ninput_horizon = 6\noutput_horizon = 2\n").unwrap();
    let out = dir.path().join("t");
    ok(&["train", "--config", s(&cfg), "--panel", s(&panel), "--topology", s(&topo), "--units", "5", "--out", s(&out)]);
    let resolved = read(&out.join("config.txt"));
    assert!(resolved.contains("units = 5") && resolved.contains("epochs = 1"));

    std::fs::write(&cfg, "epochz = 1\n").unwrap();
    let r = run(&["train", "--config", s(&cfg), "--panel", s(&panel), "--topology", s(&topo), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let r = run(&["train", "--panel", s(&panel), "--topology", s(&topo), "--adjacency", "hybrid"]);
    assert_eq!(r.status.code(), Some(2));

    let mut args = vec!["train", "--panel", s(&panel), "--topology", s(&topo), "--out", s(&out)];
    args.extend_from_slice(&["--units", "3", "--num-layers", "1", "--input-horizon", "6", "--output-horizon", "2"]);
    args.extend_from_slice(&["--lr", "1e308", "--epochs", "2"]);
    let r = run(&args);
    assert_eq!(r.status.code(), Some(1), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("non-finite loss"));
}
