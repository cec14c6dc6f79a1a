use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use tungstenite::Message;

fn toot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toot"))
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_small(dir: &Path) {
    ok(toot()
        .args([
            "gen",
            "--seed",
            "5",
            "--frames",
            "40",
            "--test-frames",
            "20",
            "--out",
        ])
        .arg(dir)
        .output()
        .unwrap());
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a);
    gen_small(&b);
    let fa = files(&a);
    assert!(fa.len() > 60);
    assert_eq!(fa, files(&b));
    let scenario = toot_core::scenario::load_scenario(&a).unwrap();
    assert_eq!(scenario.train.len(), 40);
    assert_eq!(scenario.test.len(), 20);
}

#[test]
fn gen_rejects_bad_params() {
    let tmp = tempfile::tempdir().unwrap();
    let out = toot()
        .args(["gen", "--test-frames", "7", "--out"])
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("test"));

    let params = tmp.path().join("p.json");
    std::fs::write(&params, "{\"frame_side\": \"big\"}").unwrap();
    let out = toot()
        .args(["gen", "--params"])
        .arg(&params)
        .arg("--out")
        .arg(tmp.path().join("y"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("p.json"));
}

#[test]
fn run_is_reproducible_and_covers_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("sc");
    gen_small(&sc);
    let run = |out: &Path| {
        ok(toot()
            .arg("run")
            .arg("--scenario")
            .arg(&sc)
            .args([
                "--runs", "1", "--seed", "42", "--jobs", "2", "--audit", "--out",
            ])
            .arg(out)
            .output()
            .unwrap())
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    let summaries = fa
        .iter()
        .filter(|(p, _)| p.starts_with("summaries"))
        .count();
    assert_eq!(summaries, 6);
    let traces = fa
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "csv") && p.starts_with("traces"))
        .count();
    assert_eq!(traces, 6);
    let csv = std::fs::read_to_string(a.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn run_selected_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("sc");
    gen_small(&sc);
    let out = tmp.path().join("out");
    ok(toot()
        .arg("run")
        .arg("--scenario")
        .arg(&sc)
        .args([
            "--runs",
            "2",
            "--strategy",
            "localized:2",
            "--strategy",
            "semi_online",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap());
    let mut names: Vec<_> = std::fs::read_dir(out.join("summaries"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["localized_b2.json", "semi_online_b8.json"]);
    assert!(out.join("traces/localized_b2_run01.csv").exists());
}

#[test]
fn run_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = toot()
        .args(["run", "--runs", "1", "--scenario"])
        .arg(tmp.path().join("missing"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    let out = toot()
        .args(["run", "--strategy", "greedy", "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("greedy"));

    let out = toot()
        .args(["run", "--strategy", "localized:3", "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn spawn_serve(sc: &Path, port: u16) -> std::process::Child {
    toot()
        .arg("serve")
        .arg("--scenario")
        .arg(sc)
        .args(["--paused", "--port", &port.to_string()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

#[test]
fn serve_steps_and_stops_on_interrupt() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("sc");
    gen_small(&sc);
    let mut child = spawn_serve(&sc, 0);
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();

    let (mut ws, _) = tungstenite::connect(url.as_str()).unwrap();
    ws.send(Message::text(r#"{"type":"control","action":"step"}"#))
        .unwrap();
    let msg = loop {
        match ws.read().unwrap() {
            Message::Text(t) => break t.to_string(),
            _ => continue,
        }
    };
    let v: serde_json::Value = serde_json::from_str(&msg).unwrap();
    assert_eq!(v["type"], "frame");
    assert_eq!(v["seq"], 1);
    ws.send(Message::text(r#"{"type":"click","seq":1,"u":0.5,"v":0.5}"#))
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));

    let status = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    let out = child.wait_with_output().unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{stderr}");
    assert!(stderr.contains("1 training events"), "{stderr}");
}

#[test]
fn serve_reports_occupied_port() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("sc");
    gen_small(&sc);
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let out = spawn_serve(&sc, port).wait_with_output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&port.to_string()), "{stderr}");
}
