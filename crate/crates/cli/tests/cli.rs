use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn otseg() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_otseg"));
    cmd.env("RUST_LOG", "warn").env_remove("OTSEG_THREADS");
    cmd
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn synth(dir: &Path) {
    ok(otseg()
        .args(["synth", "--width", "48", "--height", "48", "--stroke", "6", "--out"])
        .arg(dir)
        .output()
        .unwrap());
}

fn run(input: &Path, out: &Path, extra: &[&str]) -> Command {
    let mut cmd = otseg();
    cmd.arg("run")
        .arg("--image")
        .arg(input.join("image.png"))
        .arg("--scribbles")
        .arg(input.join("scribbles.png"))
        .args(["--bins", "8", "--iters", "80", "--step-balance", "1000", "--seed", "2", "--out"])
        .arg(out)
        .args(extra);
    cmd
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn local_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    synth(&input);
    for name in ["image.png", "scribbles.png", "truth.png"] {
        assert!(input.join(name).exists(), "{name}");
    }
    ok(run(&input, &dir.path().join("a"), &[]).output().unwrap());
    ok(run(&input, &dir.path().join("b"), &[]).env("OTSEG_THREADS", "1").output().unwrap());
    for name in ["u.png", "mask.png"] {
        assert!(read(dir.path().join("a").join(name)) == read(dir.path().join("b").join(name)), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path().join("a/summary.json"))).unwrap();
    assert_eq!(summary["params"]["bins"], 8);
    assert_eq!(summary["iterations"], 80);
    let lines = String::from_utf8(read(dir.path().join("a/diagnostics.jsonl"))).unwrap();
    assert_eq!(lines.lines().count(), 8);
}

#[test]
fn masks_replace_scribbles() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    synth(&input);
    // the truth and its complement as (generous) labels
    let truth = read(input.join("truth.png"));
    let decoded = otseg_core::pipeline::io::decode_mask(&truth, (48, 48)).unwrap();
    let inverse: Vec<bool> = decoded.iter().map(|v| !v).collect();
    std::fs::write(input.join("bg.png"), otseg_core::pipeline::io::encode_mask(&inverse, 48, 48).unwrap()).unwrap();
    ok(otseg()
        .arg("run")
        .arg("--image")
        .arg(input.join("image.png"))
        .arg("--fg")
        .arg(input.join("truth.png"))
        .arg("--bg")
        .arg(input.join("bg.png"))
        .args(["--bins", "8", "--iters", "40", "--backend", "l1", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap());
    assert!(dir.path().join("out/mask.png").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    synth(&input);
    let out = dir.path().join("out");
    for extra in [&["--t", "2"][..], &["--backend", "simplex"], &["--cost", "manhattan"], &["--rho", "-1"]] {
        let status = run(&input, &out, extra).output().unwrap().status;
        assert_eq!(status.code(), Some(2), "{extra:?}");
    }
    let status = run(&dir.path().join("missing"), &out, &[]).output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    let status = run(&input, &out, &[]).env("OTSEG_THREADS", "zero").output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    // scribbles and masks together
    let status = run(&input, &out, &["--fg", "a.png", "--bg", "b.png"]).output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn oracle_mk_prints_the_optimal_plan() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, json: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, json).unwrap();
        p
    };
    let a = write("a.json", "[0.75, 0.25]");
    let b = write("b.json", "[0.25, 0.75]");
    let c = write("c.json", "[[0, 2], [2, 0]]");
    let out = ok(otseg().args(["oracle", "mk"]).args([&a, &b, &c]).output().unwrap());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["cost"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v["plan"], serde_json::json!([[0.25, 0.5], [0.0, 0.25]]));

    let heavy = write("heavy.json", "[1.0, 1.0]");
    let status = otseg().args(["oracle", "mk"]).args([&heavy, &b, &c]).output().unwrap().status;
    assert_eq!(status.code(), Some(2));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn serve(data: &Path) -> (Server, String) {
    let port = free_port();
    let child = otseg()
        .args(["serve", "--port", &port.to_string(), "--data-dir"])
        .arg(data)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(30);
    while std::net::TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "service did not come up");
        std::thread::sleep(Duration::from_millis(20));
    }
    (server, format!("http://127.0.0.1:{port}"))
}

#[test]
fn remote_runs_match_local_runs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    synth(&input);
    let (_server, url) = serve(&dir.path().join("data"));

    ok(run(&input, &dir.path().join("remote"), &["--server", &url]).output().unwrap());
    ok(run(&input, &dir.path().join("local"), &[]).output().unwrap());
    for name in ["u.png", "mask.png"] {
        assert!(read(dir.path().join("remote").join(name)) == read(dir.path().join("local").join(name)), "{name}");
    }
    let lines = String::from_utf8(read(dir.path().join("remote/diagnostics.jsonl"))).unwrap();
    assert_eq!(lines.lines().count(), 8);

    // rejected by the service: scribbles of another size
    let other = dir.path().join("other");
    ok(otseg().args(["synth", "--width", "40", "--height", "40", "--stroke", "6", "--out"]).arg(&other).output().unwrap());
    let out = otseg()
        .arg("run")
        .arg("--image")
        .arg(input.join("image.png"))
        .arg("--scribbles")
        .arg(other.join("scribbles.png"))
        .args(["--server", &url, "--out"])
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("400"));
}
