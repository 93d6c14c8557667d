use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TINY: &str = r#"
[corpus]
height = 16
width = 16
classes = 3
frames_per_class = 3

[model]
offloaded = 10
latent_dim = 6

[attack]
hidden = [8]
epochs = 2

[sweep]
ms = [10]
vs = [0.1]
"#;

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar-offload")).arg("--quiet").args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run_cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn csv_headers_match_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    fs::write(p("cfg.toml"), TINY).unwrap();
    let cfg = p("cfg.toml");
    let run = |out: &str, args: &[&str]| {
        let mut all = vec!["--config", &cfg, "--out"];
        let out = p(out);
        all.push(&out);
        all.extend(args);
        ok(&all)
    };
    run("c", &["gen-corpus"]);
    run("r", &["rank", "--corpus", &p("c")]);
    run("m", &["train-codec", "--corpus", &p("c")]);
    run("k", &["calibrate", "--plan", &p("m/plan.json"), "--corpus", &p("c"), "--v", "0.1"]);
    run("s", &["sweep", "--corpus", &p("c")]);
    run("a", &["attack", "--plan", &p("m/plan.json"), "--calib", &p("k/calib.pcal"), "--corpus", &p("c")]);
    run("f", &["perf"]);

    let mut server = Command::new(env!("CARGO_BIN_EXE_avatar-offload"))
        .args(["--quiet", "--out", &p("h"), "serve", "--listen", "127.0.0.1:0", "--sessions", "1", "--codec"])
        .arg(p("m/offloaded.pcdc"))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().trim_start_matches("listening on ").to_string();
    run("o", &["offload", "--connect", &addr, "--plan", &p("m/plan.json"), "--calib", &p("k/calib.pcal"), "--frames", &p("c")]);
    assert!(server.wait().unwrap().success());

    let actual = [
        ("index.csv", "c/index.csv"),
        ("ranking.csv", "r/ranking.csv"),
        ("sweep.csv", "s/sweep.csv"),
        ("attack.csv", "a/attack.csv"),
        ("perf.csv", "f/perf.csv"),
        ("host_log.csv", "h/host_log.csv"),
    ]
    .iter()
    .map(|(name, path)| format!("{name}: {}\n", first_line(&dir.path().join(path))))
    .collect::<String>();
    let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/csv_headers.txt")).unwrap();
    assert_eq!(actual, golden);
    assert_eq!(fs::read_to_string(p("o/index.csv")).unwrap().lines().count(), 10);
}

#[test]
fn bound_examples() {
    assert_eq!(ok(&["bound", "--v", "4", "--classes", "65"]), "v=4 classes=65 t_psr=0.9808\n");
    assert_eq!(ok(&["bound", "--v", "0"]), "v=0 classes=65 t_psr=0.0154\n");
    let inverse = ok(&["bound", "--psr", "0.827"]);
    let v: f64 = inverse.trim().rsplit('=').next().unwrap().parse().unwrap();
    assert!((v - 3.0).abs() < 0.05, "{inverse}");
    assert!(ok(&["bound"]).starts_with("v,t_psr\n4,0.9808\n3,0.8280\n1,0.3984\n0.1,0.0968\n0.01,0.0358\n"));
}

#[test]
fn perf_reports_baseline_users() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--out", dir.path().to_str().unwrap(), "perf", "--workload", "baseline"]);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    let users: f64 = row[5].parse().unwrap();
    assert!((users - 2.48).abs() <= 0.01);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[corpus]\nheight = 13\n").unwrap();
    for args in [
        vec!["bound", "--v", "1", "--psr", "0.5"],
        vec!["bound", "--classes", "1"],
        vec!["--config", bad.to_str().unwrap(), "perf"],
        vec!["perf", "--device", "no_such_device"],
        vec!["calibrate", "--plan", "/nonexistent/plan.json", "--corpus", "/nonexistent"],
        vec!["no-such-subcommand"],
    ] {
        assert_eq!(run_cli(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unreachable_host_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    fs::write(p("cfg.toml"), TINY).unwrap();
    ok(&["--config", &p("cfg.toml"), "--out", &p("c"), "gen-corpus"]);
    ok(&["--config", &p("cfg.toml"), "--out", &p("m"), "train-codec", "--corpus", &p("c")]);
    ok(&["--out", &p("k"), "calibrate", "--plan", &p("m/plan.json"), "--corpus", &p("c"), "--noise", "none"]);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let out = run_cli(&[
        "offload", "--connect", &addr, "--plan", &p("m/plan.json"), "--calib", &p("k/calib.pcal"), "--frames", &p("c"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
