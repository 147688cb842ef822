//! Drives the `iort` binary as separate processes over real sockets.

use std::io::{BufRead, BufReader, Read};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Output, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use futures::StreamExt;
use iort_core::protocol::{decode, encode_string, AckStatus, Message};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_iort");

fn iort() -> Command {
    let mut c = Command::new(BIN);
    c.env_remove("IORT_LOG");
    c
}

/// Child process killed on drop.
struct Proc {
    child: Child,
    stderr: Option<Receiver<String>>,
}

impl Proc {
    fn spawn(mut cmd: Command) -> Self {
        let mut child = cmd
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn iort");
        let err = child.stderr.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(err).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            child,
            stderr: Some(rx),
        }
    }

    fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Waits for a stderr line containing `needle`; returns everything read so far.
    fn wait_stderr(&mut self, needle: &str, timeout: Duration) -> Vec<String> {
        let rx = self.stderr.as_ref().expect("stderr captured");
        let end = Instant::now() + timeout;
        let mut seen = Vec::new();
        while Instant::now() < end {
            if let Ok(line) = rx.recv_timeout(Duration::from_millis(50)) {
                let hit = line.contains(needle);
                seen.push(line);
                if hit {
                    return seen;
                }
            }
        }
        panic!("no stderr line containing {needle:?}; got {seen:#?}");
    }

    fn drain_stderr(&mut self) -> Vec<String> {
        let rx = self.stderr.as_ref().expect("stderr captured");
        rx.try_iter().collect()
    }

    fn wait_exit(&mut self, timeout: Duration) -> ExitStatus {
        let end = Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait().expect("try_wait") {
                return status;
            }
            assert!(Instant::now() < end, "process {} did not exit", self.pid());
            thread::sleep(Duration::from_millis(20));
        }
    }

    fn stdout_string(&mut self) -> String {
        let mut s = String::new();
        if let Some(mut out) = self.child.stdout.take() {
            out.read_to_string(&mut s).expect("read stdout");
        }
        s
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        self.kill();
    }
}

struct BrokerProc {
    proc: Proc,
    tcp: String,
    http: String,
}

fn start_broker(journal: Option<&Path>) -> BrokerProc {
    let mut cmd = iort();
    cmd.args(["broker", "serve", "--port", "0", "--http-port", "0", "--no-fsync"]);
    if let Some(j) = journal {
        cmd.arg("--journal").arg(j);
    }
    let mut proc = Proc::spawn(cmd);
    let out = proc.child.stdout.take().expect("piped");
    let mut line = String::new();
    BufReader::new(out).read_line(&mut line).expect("listening line");
    let v: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad line {line:?}: {e}"));
    assert_eq!(v["event"], "listening");
    BrokerProc {
        proc,
        tcp: v["tcp"].as_str().unwrap().to_string(),
        http: format!("http://{}", v["http"].as_str().unwrap()),
    }
}

fn start_agent(broker: &BrokerProc, arm: &str, speed_scale: &str) -> Proc {
    let mut cmd = iort();
    cmd.args(["agent", "run", "--arm-id", arm, "--broker", &broker.tcp, "--speed-scale", speed_scale]);
    let mut p = Proc::spawn(cmd);
    p.wait_stderr("connected", Duration::from_secs(10));
    p
}

fn run(args: &[&str]) -> Output {
    iort().args(args).output().expect("run iort")
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
}

fn http_get(url: &str) -> Value {
    runtime().block_on(async {
        let r = reqwest::get(url).await.expect("GET");
        assert!(r.status().is_success(), "GET {url}: {}", r.status());
        serde_json::from_slice(&r.bytes().await.unwrap()).unwrap()
    })
}

fn http_post(url: &str, body: &Value) -> (u16, Value) {
    runtime().block_on(async {
        let r = reqwest::Client::new()
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .await
            .expect("POST");
        let status = r.status().as_u16();
        (status, serde_json::from_slice(&r.bytes().await.unwrap()).unwrap())
    })
}

fn command_body(id: u128, operator: &str, angles: [f64; 5], gripper: f64) -> Value {
    json!({
        "id": uuid::Uuid::from_u128(id).hyphenated().to_string(),
        "operator_id": operator,
        "base_deg": angles[0],
        "shoulder_deg": angles[1],
        "elbow_deg": angles[2],
        "wrist_pitch_deg": angles[3],
        "wrist_roll_deg": angles[4],
        "gripper_mm": gripper,
        "issued_at_ms": 1,
    })
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn help_lists_every_flag() {
    let cases: &[(&[&str], &[&str])] = &[
        (
            &["broker", "serve", "--help"],
            &["--port", "--http-port", "--journal", "--lease-ms", "--promote-k", "--idle-gap-s", "--profile", "--no-fsync", "--compact-every"],
        ),
        (
            &["agent", "run", "--help"],
            &["--arm-id", "--profile", "--broker", "--speed-scale", "--state-file"],
        ),
        (
            &["operator", "send", "--help"],
            &["--arm", "--angles", "--gripper", "--operator", "--broker"],
        ),
        (&["operator", "script", "--help"], &["--sim-clock", "--seed", "--broker", "--journal"]),
        (&["operator", "watch", "--help"], &["--topics", "--broker"]),
        (&["store", "stats", "--help"], &["--journal"]),
    ];
    for (args, flags) in cases {
        let out = run(args);
        assert!(out.status.success(), "{args:?}");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *flags {
            assert!(text.contains(flag), "{args:?} help lacks {flag}:\n{text}");
        }
        assert!(text.contains("IORT_"), "{args:?} help shows no env vars");
    }
}

#[test]
fn malformed_angles_is_a_usage_error() {
    for angles in ["1,2,3,4", "0,0,x,0,0", "", "1,2,3,4,5,6"] {
        let out = run(&["operator", "send", "--arm", "armA", "--angles", angles, "--broker", "127.0.0.1:1"]);
        assert_eq!(out.status.code(), Some(2), "angles {angles:?}");
    }
}

#[test]
fn busy_port_fails_to_start() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = run(&["broker", "serve", "--port", &port, "--http-port", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("binding"));
}

#[test]
fn fresh_store_stats_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.log");
    std::fs::write(&journal, "").unwrap();
    let out = run(&["store", "stats", "--journal", journal.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout_lines(&out), vec![r#"{"ongoing":0,"learning":0}"#]);
    let dump = run(&["store", "dump", "--journal", journal.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&dump.stdout).unwrap();
    let keys: Vec<&String> = v["root"].as_object().unwrap().keys().collect();
    assert_eq!(keys, vec!["learning", "ongoing"]);
}

#[test]
fn profile_dump_round_trips_through_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["profile", "dump"]);
    assert!(out.status.success());
    let path = dir.path().join("arm.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let check = run(&["profile", "check", path.to_str().unwrap()]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
    std::fs::write(&path, "name = 3\n").unwrap();
    assert_eq!(run(&["profile", "check", path.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn send_prints_wire_ack_with_zero_pose() {
    let broker = start_broker(None);
    let _agent = start_agent(&broker, "armA", "0");
    let out = run(&[
        "operator", "send", "--broker", &broker.tcp, "--arm", "armA", "--angles", "0,0,0,0,0", "--gripper", "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 1);
    let env = decode(lines[0].as_bytes()).unwrap();
    // printed bytes are exactly the wire encoding
    assert_eq!(encode_string(&env).unwrap().trim_end(), lines[0]);
    let Message::Ack(ack) = env.body else {
        panic!("not an ack: {}", lines[0]);
    };
    assert_eq!(ack.status, AckStatus::Ok);
    let pose = ack.final_pose.unwrap();
    assert_eq!((pose.x_cm, pose.y_cm, pose.z_cm), (0.0, 0.0, 21.0));
}

#[test]
fn out_of_range_send_prints_rejected_ack() {
    let broker = start_broker(None);
    let _agent = start_agent(&broker, "armA", "0");
    let out = run(&["operator", "send", "--broker", &broker.tcp, "--arm", "armA", "--angles", "61,0,0,0,0"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(&stdout_lines(&out)[0]).unwrap();
    assert_eq!(v["type"], "ack");
    assert_eq!(v["body"]["status"], "rejected");
    assert!(v["body"]["detail"].as_str().unwrap().contains("base_deg"));
}

#[test]
fn second_agent_for_same_arm_exits_1() {
    let broker = start_broker(None);
    let _first = start_agent(&broker, "armA", "0");
    let out = run(&["agent", "run", "--arm-id", "armA", "--broker", &broker.tcp]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("already"));
}

#[test]
fn unreachable_broker_retries_with_backoff() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cmd = iort();
    cmd.args(["agent", "run", "--arm-id", "armA", "--broker", &format!("127.0.0.1:{port}"), "--retry-max-ms", "50"]);
    let mut agent = Proc::spawn(cmd);
    agent.wait_stderr("retrying", Duration::from_secs(5));
    agent.wait_stderr("retrying", Duration::from_secs(5));
    assert!(agent.child.try_wait().unwrap().is_none(), "agent gave up");
}

fn learning_script() -> String {
    let seq = [[10.0, 0.0, 0.0, 0.0, 0.0], [10.0, 20.0, 0.0, 0.0, 0.0], [10.0, 20.0, 30.0, 0.0, 0.0], [10.0, 20.0, 30.0, 15.0, 45.0]];
    let send = |a: &[f64; 5]| json!({"ctl": "send", "arm": "armA", "operator": "op1", "angles": a, "gripper": 5.0}).to_string();
    let mut lines = Vec::new();
    for _ in 0..3 {
        lines.extend(seq.iter().map(send));
        lines.push(json!({"ctl": "expect", "operator": "op1", "type": "ack", "count": 4, "status": "ok"}).to_string());
        lines.push(json!({"ctl": "end", "arm": "armA", "operator": "op1"}).to_string());
    }
    lines.extend(seq[..2].iter().map(send));
    lines.push(json!({"ctl": "expect", "operator": "op1", "type": "pattern_prompt", "count": 1}).to_string());
    lines.join("\n") + "\n"
}

#[test]
fn repeated_sequence_prompts_in_watch_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.log");
    let broker = start_broker(Some(&journal));
    let _agent = start_agent(&broker, "armA", "0");

    let mut watch_cmd = iort();
    watch_cmd.args(["operator", "watch", "--broker", &broker.tcp, "--topics", "operator.*.prompt", "--count", "1", "--timeout-ms", "30000"]);
    let mut watch = Proc::spawn(watch_cmd);
    thread::sleep(Duration::from_millis(300));

    let script = dir.path().join("learn.jsonl");
    std::fs::write(&script, learning_script()).unwrap();
    let out = run(&["operator", "script", script.to_str().unwrap(), "--broker", &broker.tcp, "--seed", "7"]);
    assert!(out.status.success(), "script failed: {}", String::from_utf8_lossy(&out.stderr));

    assert!(watch.wait_exit(Duration::from_secs(10)).success());
    let printed = watch.stdout_string();
    let lines: Vec<&str> = printed.lines().collect();
    assert_eq!(lines.len(), 1, "{printed}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["type"], "pattern_prompt");
    assert_eq!(v["body"]["operator_id"], "op1");
    assert_eq!(v["body"]["matched_prefix_len"], 2);
    let remainder = v["body"]["remainder"].as_array().unwrap();
    assert_eq!(remainder.len(), 2);
    assert_eq!(remainder[1]["wrist_roll_deg"], 45.0);

    let stats = run(&["store", "stats", "--journal", journal.to_str().unwrap()]);
    let s: Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(s["learning"], 1);
    assert_eq!(s["patterns"][0]["use_count"], 3);
    assert_eq!(s["patterns"][0]["length"], 4);
}

#[test]
fn embedded_script_is_deterministic_on_sim_clock() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("learn.jsonl");
    let text = format!("{}\n{}", json!({"ctl": "agent", "arm": "armA"}), learning_script());
    std::fs::write(&script, text).unwrap();
    let go = |snap: &str| {
        let snap = dir.path().join(snap);
        let out = run(&["operator", "script", script.to_str().unwrap(), "--sim-clock", "--seed", "3", "--snapshot", snap.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (out.stdout, std::fs::read(snap).unwrap())
    };
    let (t1, s1) = go("a.json");
    let (t2, s2) = go("b.json");
    assert_eq!(t1, t2);
    assert_eq!(s1, s2);
    assert!(String::from_utf8_lossy(&t1).contains("\"type\":\"pattern_prompt\""));
}

#[test]
fn restarted_broker_recovers_queued_commands() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.log");
    let mut broker = start_broker(Some(&journal));
    // register the arm, then leave it offline so commands stay queued
    let mut agent = start_agent(&broker, "armA", "0");
    agent.kill();

    let targets = [[5.0, 0.0, 0.0, 0.0, 0.0], [5.0, 10.0, 0.0, 0.0, 0.0], [5.0, 10.0, 20.0, 0.0, 30.0]];
    for (i, a) in targets.iter().enumerate() {
        let (status, body) = http_post(&format!("{}/arms/armA/commands", broker.http), &command_body(i as u128 + 1, "web", *a, 0.0));
        assert_eq!(status, 202, "{body}");
        assert_eq!(body["receipt"]["position"], i as u64 + 1);
    }
    broker.proc.kill();

    let broker = start_broker(Some(&journal));
    let arms = http_get(&format!("{}/arms", broker.http));
    assert_eq!(arms["arms"][0]["arm_id"], "armA");
    assert_eq!(arms["arms"][0]["online"], false);

    let _agent = start_agent(&broker, "armA", "0");
    let end = Instant::now() + Duration::from_secs(10);
    loop {
        let arms = http_get(&format!("{}/arms", broker.http));
        let pose = &arms["arms"][0]["last_pose"];
        if pose["roll_deg"] == 30.0 {
            break;
        }
        assert!(Instant::now() < end, "queued commands never executed: {arms}");
        thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn gateway_rejects_with_422_and_pushes_over_websocket() {
    let broker = start_broker(None);
    let _agent = start_agent(&broker, "armA", "0");
    let ws_url = format!("{}/ws?client=web&topics=arm.armA.ack", broker.http.replace("http://", "ws://"));
    let http = broker.http.clone();
    runtime().block_on(async move {
        let (mut ws, _) = tokio_tungstenite::connect_async(ws_url).await.expect("ws connect");
        let first = ws.next().await.unwrap().unwrap().into_text().unwrap();
        let v: Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["body"]["event"], "registered");

        let client = reqwest::Client::new();
        let post = |body: Value| {
            let client = client.clone();
            let url = format!("{http}/arms/armA/commands");
            async move {
                let r = client.post(url).header("content-type", "application/json").body(body.to_string()).send().await.unwrap();
                let status = r.status().as_u16();
                (status, serde_json::from_slice::<Value>(&r.bytes().await.unwrap()).unwrap())
            }
        };
        let (status, body) = post(command_body(0xbad, "web", [0.0, 0.0, 0.0, 0.0, 95.0], 0.0)).await;
        assert_eq!(status, 422);
        assert_eq!(body["violations"][0]["field"], "wrist_roll_deg");

        let (status, _) = post(command_body(0x900d, "web", [0.0, 30.0, 0.0, 0.0, 0.0], 0.0)).await;
        assert_eq!(status, 202);

        let (status, _) = post(json!({"id": "nope"})).await;
        assert_eq!(status, 400);

        let mut statuses = Vec::new();
        while statuses.len() < 2 {
            let frame = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("ws frame").unwrap().unwrap();
            let v: Value = serde_json::from_str(&frame.into_text().unwrap()).unwrap();
            assert_eq!(v["type"], "ack");
            statuses.push(v["body"]["status"].as_str().unwrap().to_string());
        }
        assert_eq!(statuses, ["rejected", "ok"]);
    });
    let patterns = http_get(&format!("{}/arms/armA/patterns", broker.http));
    assert_eq!(patterns["patterns"], json!([]));
}

#[test]
fn interrupted_agent_finishes_motion_before_exit() {
    let broker = start_broker(None);
    // 60 degrees of wrist roll at 10x: 1.8 s
    let mut agent = start_agent(&broker, "armA", "10");
    let tcp = broker.tcp.clone();
    let sender = thread::spawn(move || {
        run(&["operator", "send", "--broker", &tcp, "--arm", "armA", "--angles", "0,0,0,0,60"])
    });
    agent.wait_stderr("motion started", Duration::from_secs(10));
    let interrupted = Instant::now();
    let status = Command::new("kill").args(["-INT", &agent.pid().to_string()]).status().unwrap();
    assert!(status.success());

    assert!(agent.wait_exit(Duration::from_secs(10)).success());
    assert!(interrupted.elapsed() >= Duration::from_millis(1500), "agent left mid-motion");
    let log = agent.drain_stderr().join("\n");
    let complete = log.find("motion complete").expect("motion completed");
    let stopped = log.find("agent stopped").expect("agent stopped");
    assert!(complete < stopped);

    let out = sender.join().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&stdout_lines(&out)[0]).unwrap();
    assert_eq!(v["body"]["status"], "ok");
    assert_eq!(v["body"]["final_pose"]["roll_deg"], 60.0);
}
