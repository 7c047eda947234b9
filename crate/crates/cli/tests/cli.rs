use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "train": {"steps": 10, "eval_every": 5, "batch": 2, "sync_pretrain_steps": 5},
  "data": {"train_identities": 2, "train_frames": 24, "test_frames": 16}
}"#;

fn julkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_julkit")).args(args).output().expect("spawn julkit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    julkit(&args)
}

fn hist(o: &Output) -> Vec<(f64, f64)> {
    let text = stdout(o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("center,mass"));
    lines
        .map(|l| {
            let (c, m) = l.split_once(',').unwrap();
            (c.parse().unwrap(), m.parse().unwrap())
        })
        .collect()
}

#[test]
fn gradcheck_passes_with_csv_rows() {
    let o = julkit(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,error,threshold,pass"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() > 30);
    for r in &rows {
        assert_eq!(r.len(), 4);
        let (e, t): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!(e < t && r[3] == "true", "{r:?}");
    }
}

#[test]
fn injected_fault_fails_naming_op() {
    let o = julkit(&["gradcheck", "--inject-fault", "tanh"]);
    assert_eq!(o.status.code(), Some(1));
    let failed: Vec<String> =
        stdout(&o).lines().filter(|l| l.ends_with(",false")).map(|l| l.split(',').next().unwrap().into()).collect();
    // Composites built on tanh fail too; unrelated elementary ops do not.
    assert_eq!(failed[0], "tanh");
    assert!(!failed.iter().any(|op| ["add", "exp", "sigmoid"].contains(&op.as_str())), "{failed:?}");
    assert!(stderr(&o).contains("tanh"));
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    for (doc, field) in [
        (r#"{"train": {"lr": "fast"}}"#, "train.lr"),
        (r#"{"train": {"batch": 0}}"#, "train.batch"),
        (r#"{"train": {"hist": {"bin_count": 1}}}"#, "bin_count"),
    ] {
        let p = dir.path().join("bad.json");
        fs::write(&p, doc).unwrap();
        let o = julkit(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{doc}");
        assert!(stderr(&o).contains(field), "{doc}: {}", stderr(&o));
    }
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 1 + 10 / 5 + 1);
    assert_eq!(rows[0], "step,psnr,l1,sync_mae,uncert_corr,hist_kl");
    for t in [0, 2, 14] {
        for kind in ["source.ppm", "generated.ppm", "truth.ppm", "sigma.pgm", "error.pgm"] {
            assert!(run.join(format!("samples/{t:03}_{kind}")).is_file(), "{t} {kind}");
        }
    }
    assert!(run.join("sync.csv").is_file());

    let ck = run.join("checkpoint.julc");
    let e = julkit(&["eval", ck.to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let lines: Vec<String> = stdout(&e).lines().map(String::from).collect();
    assert_eq!(lines, vec![rows[0].to_string(), rows.last().unwrap().to_string()]);

    let train_split = julkit(&["eval", ck.to_str().unwrap(), "--split", "train"]);
    assert_eq!(train_split.status.code(), Some(0));
    assert_ne!(stdout(&train_split), stdout(&e));

    let other = julkit(&["eval", ck.to_str().unwrap(), "--dataset-seed", "99"]);
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(stdout(&other), stdout(&e));

    let bytes = fs::read(&ck).unwrap();
    let cut = dir.path().join("cut.julc");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    fs::copy(run.join("config.json"), dir.path().join("config.json")).unwrap();
    let t = julkit(&["eval", cut.to_str().unwrap()]);
    assert_eq!(t.status.code(), Some(2), "{}", stderr(&t));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&cut, &bad).unwrap();
    let m = julkit(&["eval", cut.to_str().unwrap()]);
    assert_eq!(m.status.code(), Some(2));
    assert!(stderr(&m).contains("magic"));
}

#[test]
fn ablation_leaves_uncert_corr_empty() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &["--enable_un1=false", "--enable_un2=false", "--enable_sync=false"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    for row in metrics.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[4], "", "{row}");
    }
    assert!(!dir.path().join("run/sync.csv").exists());
}

#[test]
fn hist_demo_laplacian_peaks_at_location() {
    let o = julkit(&["hist-demo"]);
    assert_eq!(o.status.code(), Some(0));
    let h = hist(&o);
    assert_eq!(h.len(), 11);
    assert!((h.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
    // Centers start at the sample mean, so the mode is the first center.
    assert!((h[0].0 - 0.2).abs() < 0.01, "{h:?}");
    assert!(h.windows(2).all(|w| w[1].1 <= w[0].1), "{h:?}");
}

#[test]
fn hist_demo_constant_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.txt");
    fs::write(&p, "0.3, 0.3 0.3\n0.3").unwrap();
    let h = hist(&julkit(&["hist-demo", "--input", p.to_str().unwrap()]));
    assert!((h.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(h[0].1 + h[1].1 > 2.0 / h.len() as f64, "{h:?}");
    assert!(h.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12));

    fs::write(&p, "0.1 nope").unwrap();
    assert_eq!(julkit(&["hist-demo", "--input", p.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(julkit(&["hist-demo", "--input", "/nonexistent/values"]).status.code(), Some(2));
}

#[test]
fn dataset_command_writes_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("data");
    let o = julkit(&["dataset", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 2 * 24 + 16);
}
