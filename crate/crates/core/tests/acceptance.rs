//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use uuid::Uuid;

use iort_core::arm_model::{
    forward_kinematics, is_liftable, plan_motion, shoulder_torque, ArmProfile, Joint, JointConfig,
};
use iort_core::broker::{command_queue, Broker, BrokerConfig, BrokerError};
use iort_core::clock::{Clock, SimClock};
use iort_core::device_agent::{AgentConfig, CommandLink, DeviceAgent, InProcessLink};
use iort_core::journal::{parse_journal, Journal, JournalRecord};
use iort_core::pattern_store::{CloseReason, PatternStore, QuantizedCommand, StoreConfig, StoreTree};
use iort_core::protocol::{validate_command, Ack, AckStatus, ClientKind, JointCommand, Message, PatternResponse};

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 9] = [
        ("fk_oracle_equivalence", fk_oracle_equivalence),
        ("joint_limit_gate", joint_limit_gate),
        ("motion_timing", motion_timing),
        ("torque_model", torque_model),
        ("no_loss_under_faults", no_loss_under_faults),
        ("fifo_per_arm", fifo_per_arm),
        ("learning_loop_end_to_end", learning_loop_end_to_end),
        ("crash_recovery", crash_recovery),
        ("store_tree_shape", store_tree_shape),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.2} s)"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} ({secs:.2} s)");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn profile() -> ArmProfile {
    ArmProfile::default()
}

fn random_config(rng: &mut impl Rng) -> JointConfig {
    let mut angles = [0.0; 5];
    angles[..4].iter_mut().for_each(|a| *a = rng.random_range(-60.0..=60.0));
    angles[4] = rng.random_range(-90.0..=90.0);
    JointConfig::new(angles, rng.random_range(0.0..=50.8))
}

fn command(n: u128, arm: &str, op: &str, target: JointConfig, at: u64) -> JointCommand {
    JointCommand::new(Uuid::from_u128(n), arm, op, target, at)
}

// ---------------------------------------------------------------------------

fn rot_z(deg: f64) -> Matrix4<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix4::new(c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(deg: f64) -> Matrix4<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix4::new(c, 0.0, s, 0.0, 0.0, 1.0, 0.0, 0.0, -s, 0.0, c, 0.0, 0.0, 0.0, 0.0, 1.0)
}

fn trans_z(d: f64) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m[(2, 3)] = d;
    m
}

/// Tip position as a product of homogeneous transforms.
fn fk_oracle(q: &JointConfig) -> [f64; 3] {
    let t = rot_z(q.base_deg)
        * rot_y(q.shoulder_deg)
        * trans_z(6.5)
        * rot_y(q.elbow_deg)
        * trans_z(10.0)
        * rot_y(q.wrist_pitch_deg)
        * trans_z(4.5)
        * rot_z(q.wrist_roll_deg);
    let tip = t * Vector4::new(0.0, 0.0, 0.0, 1.0);
    [tip.x, tip.y, tip.z]
}

fn fk_oracle_equivalence() -> Result<String, String> {
    let start = Instant::now();
    let p = profile();
    let zero = forward_kinematics(&JointConfig::default(), &p).map_err(|e| e.to_string())?;
    ensure!(
        (zero.x_cm, zero.y_cm, zero.z_cm) == (0.0, 0.0, 21.0),
        "zero config gave {zero:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let mut max_err: f64 = 0.0;
    for _ in 0..10_000 {
        let q = random_config(&mut rng);
        let pose = forward_kinematics(&q, &p).map_err(|e| e.to_string())?;
        let o = fk_oracle(&q);
        let err = [pose.x_cm - o[0], pose.y_cm - o[1], pose.z_cm - o[2]]
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        max_err = max_err.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(max_err <= 1e-9, "max error {max_err:e} cm");
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!("max error {max_err:.1e} cm over 10000 configs, zero config (0,0,21)"))
}

fn joint_limit_gate() -> Result<String, String> {
    let p = profile();
    let mut checked = 0;
    let joints = [Joint::Base, Joint::Shoulder, Joint::Elbow, Joint::WristPitch];
    for (k, joint) in joints.iter().enumerate() {
        for bound in [-60.0f64, 60.0] {
            let mut angles = [0.0; 5];
            angles[k] = bound;
            let cmd = command(1, "armA", "op", JointConfig::new(angles, 0.0), 0);
            ensure!(validate_command(&cmd, &p).is_ok(), "{} = {bound} rejected", joint.field());
            let beyond = if bound > 0.0 { bound.next_up() } else { bound.next_down() };
            angles[k] = beyond;
            let cmd = command(2, "armA", "op", JointConfig::new(angles, 0.0), 0);
            let v = validate_command(&cmd, &p).violations;
            ensure!(
                v.len() == 1 && v[0].field == joint.field(),
                "{} = {beyond:e} gave {v:?}",
                joint.field()
            );
            checked += 2;
        }
    }
    let grip = |mm| validate_command(&command(3, "armA", "op", JointConfig::new([0.0; 5], mm), 0), &p);
    ensure!(grip(50.8).is_ok(), "gripper 50.8 rejected");
    let v = grip(50.9).violations;
    ensure!(v.len() == 1 && v[0].field == "gripper_mm", "gripper 50.9 gave {v:?}");

    // The broker applies the same gate.
    let clock = Arc::new(SimClock::new());
    let mut b = Broker::in_memory(BrokerConfig::default(), clock);
    b.register(ClientKind::Robot, "armA").map_err(|e| e.to_string())?;
    let bad = command(4, "armA", "op", JointConfig::new([0.0, 60f64.next_up(), 0.0, 0.0, 0.0], 0.0), 0);
    match b.submit_command(bad, None) {
        Err(BrokerError::Rejected(v)) if v[0].field == "shoulder_deg" => {}
        other => return Err(format!("broker accepted an out-of-range shoulder: {other:?}")),
    }
    Ok(format!("{checked} joint boundary cases plus gripper 50.8/50.9"))
}

fn motion_timing() -> Result<String, String> {
    let p = profile();
    let roll = |deg: f64| -> Result<u64, String> {
        let clock = Arc::new(SimClock::new());
        let mut agent = DeviceAgent::new(AgentConfig::new("armA", p.clone()), clock.clone())
            .map_err(|e| e.to_string())?;
        let ex = agent.execute_one(&command(1, "armA", "op", JointConfig::new([0.0, 0.0, 0.0, 0.0, deg], 0.0), 0));
        ensure!(ex.ack.status == AckStatus::Ok, "ack {:?}", ex.ack);
        Ok(clock.now_us())
    };
    let t60 = roll(60.0)?;
    let t90 = roll(90.0)?;
    ensure!(t60 == 180_000, "60 deg wrist roll took {t60} us");
    ensure!(t90 == 270_000, "90 deg wrist roll took {t90} us");

    // Multi-joint: every moving joint is strictly between start and target
    // until the last sample, where all of them arrive together.
    let clock = Arc::new(SimClock::new());
    let mut agent = DeviceAgent::new(AgentConfig::new("armA", p.clone()), clock.clone())
        .map_err(|e| e.to_string())?;
    let samples = Arc::new(Mutex::new(Vec::new()));
    let sink = samples.clone();
    agent.on_sample(move |t, q| sink.lock().unwrap().push((t, *q)));
    let target = JointConfig::new([45.0, -30.0, 20.0, 10.0, 80.0], 25.0);
    let plan = plan_motion(&JointConfig::default(), &target, &p).map_err(|e| e.to_string())?;
    agent.execute_one(&command(2, "armA", "op", target, 0));
    ensure!(clock.now_us() == plan.duration_us, "clock {} vs plan {}", clock.now_us(), plan.duration_us);
    let samples = samples.lock().unwrap();
    let (last_t, last_q) = *samples.last().ok_or("no samples")?;
    ensure!(last_t == plan.duration_us && last_q == target, "final sample {last_t} {last_q:?}");
    for (t, q) in &samples[..samples.len() - 1] {
        for j in Joint::ALL {
            let (a, b) = (0.0, target.angle(j));
            let x = q.angle(j);
            ensure!(
                x.abs() > a && x.abs() < b.abs(),
                "{} at {t} us was {x} (target {b})",
                j.field()
            );
        }
    }
    Ok(format!(
        "60 deg = 180000 us, 90 deg = 270000 us, 5-joint move arrives together at {} us",
        plan.duration_us
    ))
}

/// Moment sum from first principles: each mass sits at the horizontal
/// projection of the chain point it is mounted on.
fn torque_oracle(shoulder: f64, elbow: f64, wrist: f64, payload_g: f64) -> f64 {
    let a1 = shoulder.to_radians();
    let a2 = (shoulder + elbow).to_radians();
    let a3 = (shoulder + elbow + wrist).to_radians();
    let r_elbow = 6.5 * a1.sin();
    let r_wrist = r_elbow + 10.0 * a2.sin();
    let r_tip = r_wrist + 4.5 * a3.sin();
    (55.0 * r_elbow.abs() + 55.0 * r_wrist.abs() + (40.0 + payload_g) * r_tip.abs()) / 1000.0
}

fn torque_model() -> Result<String, String> {
    let p = profile();
    ensure!(p.shoulder_stall_torque_kgfcm == 2.0 * 10.0, "stall budget {}", p.shoulder_stall_torque_kgfcm);
    let q = JointConfig::new([0.0, 60.0, 30.0, 0.0, 0.0], 0.0);
    let model = shoulder_torque(&q, 0.0, &p).map_err(|e| e.to_string())?;
    let oracle = torque_oracle(60.0, 30.0, 0.0, 0.0);
    ensure!((model - oracle).abs() <= 1e-4, "model {model} vs oracle {oracle}");

    let lever = torque_oracle(60.0, 30.0, 0.0, 1.0) - oracle;
    let threshold_g = (p.shoulder_stall_torque_kgfcm - oracle) / lever;
    let below = is_liftable(&q, threshold_g - 1.0, &p).map_err(|e| e.to_string())?;
    let above = is_liftable(&q, threshold_g + 1.0, &p).map_err(|e| e.to_string())?;
    ensure!(below && !above, "liftable at {threshold_g:.1}+-1 g: {below} / {above}");
    Ok(format!(
        "torque {model:.4} kgf.cm (oracle {oracle:.4}), lift threshold {threshold_g:.1} g, stall 20 kgf.cm"
    ))
}

fn no_loss_under_faults() -> Result<String, String> {
    let start = Instant::now();
    let p = profile();
    let clock = Arc::new(SimClock::starting_at_ms(1_000));
    let config = BrokerConfig {
        lease_ms: 5_000,
        ..BrokerConfig::default()
    };
    let broker = Arc::new(Mutex::new(Broker::in_memory(config.clone(), clock.clone())));
    let mut rng = ChaCha8Rng::seed_from_u64(20);

    let mut link = InProcessLink::connect(broker.clone(), "armA").map_err(|e| e.to_string())?;
    let new_agent = || DeviceAgent::new(AgentConfig::new("armA", p.clone()), clock.clone()).unwrap();
    let mut agent = new_agent();

    let n = 1_000u128;
    let mut last = JointConfig::default();
    for i in 0..n {
        last = random_config(&mut rng);
        let cmd = command(i + 1, "armA", "op1", last, clock.now_ms());
        broker.lock().unwrap().submit_command(cmd, None).map_err(|e| e.to_string())?;
    }

    // 20 kills and 40 stalls at seeded points of the delivery stream.
    let mut kill_at = HashSet::new();
    while kill_at.len() < 20 {
        kill_at.insert(rng.random_range(0..1_000u64));
    }
    let mut stall_at = HashSet::new();
    while stall_at.len() < 40 {
        stall_at.insert(rng.random_range(0..1_000u64));
    }

    let mut executed: HashMap<String, u32> = HashMap::new();
    let (mut kills, mut stalls, mut deliveries, mut redeliveries) = (0, 0, 0u64, 0u64);
    while let Some(delivery) = link.next_command().map_err(|e| e.to_string())? {
        if delivery.delivery_count > 1 {
            redeliveries += 1;
        }
        let ex = agent.execute_one(&delivery.command);
        if !ex.duplicate {
            *executed.entry(delivery.command.id.clone()).or_default() += 1;
        }
        let step = deliveries;
        deliveries += 1;
        if kill_at.remove(&step) {
            // crash after moving, before acking; the state file survives
            kills += 1;
            let state = agent.state();
            link.disconnect();
            agent = new_agent();
            agent.load_state(state);
            link = InProcessLink::connect(broker.clone(), "armA").map_err(|e| e.to_string())?;
            continue;
        }
        if stall_at.remove(&step) {
            stalls += 1;
            clock.advance_ms(config.lease_ms + 1);
        }
        link.complete(&delivery, &ex.ack).map_err(|e| e.to_string())?;
    }

    let b = broker.lock().unwrap();
    ensure!(kills == 20, "only {kills} kills happened");
    ensure!(executed.len() == n as usize, "{} distinct commands executed", executed.len());
    ensure!(executed.values().all(|&c| c == 1), "a command executed twice");
    ensure!(b.queue("cmd.armA").unwrap().is_empty(), "command records left unacked");
    ensure!(b.pending_commands() == 0, "{} commands never acked", b.pending_commands());
    ensure!(agent.current() == last, "final config {:?} != last command {last:?}", agent.current());
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!(
        "1000 commands executed once each; {kills} kills, {stalls} lease expiries, {redeliveries} redeliveries"
    ))
}

fn fifo_per_arm() -> Result<String, String> {
    let clock = Arc::new(SimClock::new());
    let mut b = Broker::new(BrokerConfig::default(), clock, Journal::disabled());
    let arms = ["armA", "armB", "armC", "armD"];
    for a in arms {
        b.register(ClientKind::Robot, a).map_err(|e| e.to_string())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut enqueued: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut delivered: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut sent = 0u128;
    while sent < 10_000 || arms.iter().any(|a| !b.queue(&command_queue(a)).unwrap().is_empty()) {
        if sent < 10_000 && rng.random_bool(0.6) {
            let arm = arms[rng.random_range(0..4)];
            sent += 1;
            let cmd = command(sent, arm, "op", JointConfig::default(), 0);
            enqueued.entry(arm).or_default().push(cmd.id.clone());
            b.submit_command(cmd, None).map_err(|e| e.to_string())?;
        } else {
            let arm = arms[rng.random_range(0..4)];
            let q = command_queue(arm);
            if let Some(d) = b.next(&q, "c", 1_000).map_err(|e| e.to_string())? {
                let Message::Command(c) = d.message else {
                    return Err("non-command on command queue".into());
                };
                if seen.insert(c.id.clone()) {
                    delivered.entry(arm).or_default().push(c.id);
                }
                b.ack_record(&q, "c", d.record_id).map_err(|e| e.to_string())?;
            }
        }
    }
    ensure!(seen.len() == 10_000, "{} distinct deliveries", seen.len());
    for a in arms {
        ensure!(enqueued.get(a) == delivered.get(a), "order differs on {a}");
    }
    let sizes: Vec<usize> = arms.iter().map(|a| enqueued[a].len()).collect();
    Ok(format!("10000 commands, per-arm counts {sizes:?}, first-delivery order = enqueue order"))
}

// ---------------------------------------------------------------------------
// Learning loop

fn pattern_commands() -> [JointConfig; 4] {
    [
        JointConfig::new([10.0, 0.0, 0.0, 0.0, 0.0], 0.0),
        JointConfig::new([10.0, 25.0, 0.0, 0.0, 0.0], 0.0),
        JointConfig::new([10.0, 25.0, -20.0, 0.0, 0.0], 30.0),
        JointConfig::new([-15.0, 25.0, -20.0, 5.0, 45.0], 12.5),
    ]
}

struct Rig {
    clock: Arc<SimClock>,
    broker: Arc<Mutex<Broker>>,
    agent: DeviceAgent,
    link: InProcessLink,
    next_id: u128,
    executed: Vec<JointConfig>,
}

impl Rig {
    fn new(broker: Broker, clock: Arc<SimClock>) -> Self {
        let broker = Arc::new(Mutex::new(broker));
        let link = InProcessLink::connect(broker.clone(), "armA").unwrap();
        let agent = DeviceAgent::new(AgentConfig::new("armA", profile()), clock.clone()).unwrap();
        Self {
            clock,
            broker,
            agent,
            link,
            next_id: 0,
            executed: Vec::new(),
        }
    }

    fn send(&mut self, target: JointConfig) -> Result<Option<iort_core::protocol::PatternPrompt>, BrokerError> {
        self.next_id += 1;
        let cmd = command(self.next_id, "armA", "op1", target, self.clock.now_ms());
        let sub = self.broker.lock().unwrap().submit_command(cmd, None)?;
        Ok(sub.prompt)
    }

    fn drain(&mut self) {
        while let Some(d) = self.link.next_command().unwrap() {
            let ex = self.agent.execute_one(&d.command);
            if !ex.duplicate {
                self.executed.push(d.command.target);
            }
            self.link.complete(&d, &ex.ack).unwrap();
        }
    }

    fn end(&mut self) {
        self.drain();
        self.clock.advance_ms(500);
        self.broker
            .lock()
            .unwrap()
            .end_sequence("armA", "op1", CloseReason::ExplicitEnd)
            .unwrap();
    }
}

fn learning_loop_end_to_end() -> Result<String, String> {
    let clock = Arc::new(SimClock::starting_at_ms(1_000));
    let mut rig = Rig::new(Broker::in_memory(BrokerConfig::default(), clock.clone()), clock);
    let cmds = pattern_commands();
    for _ in 0..3 {
        for c in cmds {
            ensure!(rig.send(c).map_err(|e| e.to_string())?.is_none(), "prompt before promotion");
        }
        rig.end();
    }
    let patterns = rig.broker.lock().unwrap().patterns("armA");
    ensure!(patterns.len() == 1, "{} patterns after 3 repetitions", patterns.len());
    ensure!(patterns[0].use_count == 3, "use_count {}", patterns[0].use_count);

    let first = rig.send(cmds[0]).map_err(|e| e.to_string())?;
    ensure!(first.is_none(), "prompt after a single command");
    let prompt = rig.send(cmds[1]).map_err(|e| e.to_string())?.ok_or("no prompt after 2 commands")?;
    ensure!(prompt.matched_prefix_len == 2, "prefix len {}", prompt.matched_prefix_len);
    let want: Vec<QuantizedCommand> = cmds[2..].iter().map(QuantizedCommand::of).collect();
    let got: Vec<QuantizedCommand> = prompt.remainder.iter().map(QuantizedCommand::of).collect();
    ensure!(got == want, "remainder {:?}", prompt.remainder);

    rig.drain();
    let before = rig.executed.len();
    let receipts = rig
        .broker
        .lock()
        .unwrap()
        .respond_to_prompt(&PatternResponse {
            pattern_id: prompt.pattern_id.clone(),
            arm_id: "armA".into(),
            operator_id: "op1".into(),
            accepted: true,
        })
        .map_err(|e| e.to_string())?;
    ensure!(receipts.len() == 2, "{} receipts", receipts.len());
    rig.drain();
    let tail: Vec<QuantizedCommand> = rig.executed[before..].iter().map(QuantizedCommand::of).collect();
    ensure!(tail == want, "remainder executed as {tail:?}");
    let use_count = rig.broker.lock().unwrap().patterns("armA")[0].use_count;
    ensure!(use_count == 4, "use_count after accept {use_count}");

    // Same three repetitions, but the robot rejects one command once.
    let clock = Arc::new(SimClock::starting_at_ms(1_000));
    let mut rig = Rig::new(Broker::in_memory(BrokerConfig::default(), clock.clone()), clock);
    for rep in 0..3 {
        for (i, c) in cmds.iter().enumerate() {
            if rep == 1 && i == 2 {
                rig.drain();
                rig.send(*c).map_err(|e| e.to_string())?;
                let d = rig.link.next_command().unwrap().unwrap();
                let ack = Ack::rejected(d.command.id.clone(), "gripper stalled", rig.clock.now_ms());
                rig.link.complete(&d, &ack).unwrap();
            } else {
                rig.send(*c).map_err(|e| e.to_string())?;
            }
        }
        rig.end();
    }
    let b = rig.broker.lock().unwrap();
    let tree = b.store().tree();
    let same_shape = tree.ongoing.iter().all(|s| s.quantized() == tree.ongoing[0].quantized());
    ensure!(same_shape, "repetitions differ after quantization");
    let failed: Vec<bool> = tree.ongoing.iter().map(|s| !s.is_successful()).collect();
    ensure!(failed == [false, true, false], "sequence outcomes {failed:?}");
    ensure!(b.patterns("armA").is_empty(), "promoted despite a rejected command");
    Ok("promoted at use_count 3, one prompt with 2-command remainder, accepted -> use_count 4; rejected run never promotes".into())
}

// ---------------------------------------------------------------------------
// Crash recovery

/// Runs the learning loop against a journal file and returns its bytes.
fn journaled_learning_loop(path: &std::path::Path) -> Vec<u8> {
    let clock = Arc::new(SimClock::starting_at_ms(1_000));
    let config = BrokerConfig {
        compact_every: 0,
        ..BrokerConfig::default()
    };
    let broker = Broker::open(config, clock.clone(), path, false).unwrap();
    let mut rig = Rig::new(broker, clock);
    let cmds = pattern_commands();
    for _ in 0..3 {
        for c in cmds {
            rig.send(c).unwrap();
        }
        rig.end();
    }
    rig.send(cmds[0]).unwrap();
    let prompt = rig.send(cmds[1]).unwrap().unwrap();
    rig.broker
        .lock()
        .unwrap()
        .respond_to_prompt(&PatternResponse {
            pattern_id: prompt.pattern_id,
            arm_id: "armA".into(),
            operator_id: "op1".into(),
            accepted: true,
        })
        .unwrap();
    // leave the last two commands queued but unacked
    rig.send(cmds[0]).unwrap();
    std::fs::read(path).unwrap()
}

#[derive(Debug, PartialEq)]
struct Recount {
    /// (command ids, outcomes, closed) per sequence, in opening order.
    sequences: Vec<(Vec<String>, Vec<String>, bool)>,
    /// (quantized key, use_count) per pattern.
    patterns: Vec<(Vec<QuantizedCommand>, u64)>,
    unacked: Vec<String>,
}

/// Independent reading of the surviving journal records.
fn oracle_recount(records: &[JournalRecord], k: usize) -> Recount {
    let mut seqs: Vec<(Vec<String>, Vec<String>, bool, Vec<QuantizedCommand>)> = Vec::new();
    let mut open: Option<usize> = None;
    let mut outcome_of: HashMap<String, String> = HashMap::new();
    let mut accepted = 0u64;
    let mut unacked: Vec<String> = Vec::new();
    let observe = |cmd: &JointCommand, seqs: &mut Vec<(Vec<String>, Vec<String>, bool, Vec<QuantizedCommand>)>, open: &mut Option<usize>| {
        let i = *open.get_or_insert_with(|| {
            seqs.push((Vec::new(), Vec::new(), false, Vec::new()));
            seqs.len() - 1
        });
        seqs[i].0.push(cmd.id.clone());
        seqs[i].3.push(QuantizedCommand::of(&cmd.target));
    };
    for r in records {
        match r {
            JournalRecord::Submit { command, .. } => {
                observe(command, &mut seqs, &mut open);
                unacked.push(command.id.clone());
            }
            JournalRecord::Reject { command, ack, .. } => {
                observe(command, &mut seqs, &mut open);
                outcome_of.insert(ack.command_id.clone(), "rejected".into());
            }
            JournalRecord::Accept { commands, .. } => {
                accepted += 1;
                for m in commands {
                    observe(&m.command, &mut seqs, &mut open);
                    unacked.push(m.command.id.clone());
                }
            }
            JournalRecord::RouteAck { ack, .. } => {
                let s = match ack.status {
                    AckStatus::Ok => "ok",
                    AckStatus::Rejected => "rejected",
                    AckStatus::Fault => "fault",
                };
                outcome_of.entry(ack.command_id.clone()).or_insert_with(|| s.into());
                unacked.retain(|id| id != &ack.command_id);
            }
            JournalRecord::Close { .. } => {
                if let Some(i) = open.take() {
                    seqs[i].2 = true;
                }
            }
            _ => {}
        }
    }
    let sequences: Vec<_> = seqs
        .iter()
        .map(|(ids, _, closed, _)| {
            let outcomes: Vec<String> = ids
                .iter()
                .map(|id| outcome_of.get(id).cloned().unwrap_or_else(|| "pending".into()))
                .collect();
            (ids.clone(), outcomes, *closed)
        })
        .collect();
    let mut classes: Vec<(Vec<QuantizedCommand>, u64)> = Vec::new();
    for ((_, outcomes, closed), (_, _, _, key)) in sequences.iter().zip(&seqs) {
        if !closed || outcomes.iter().any(|o| o != "ok") {
            continue;
        }
        match classes.iter_mut().find(|(k, _)| k == key) {
            Some(c) => c.1 += 1,
            None => classes.push((key.clone(), 1)),
        }
    }
    let patterns = classes
        .into_iter()
        .filter(|(_, n)| *n as usize >= k)
        .map(|(key, n)| (key, n + accepted))
        .collect();
    Recount {
        sequences,
        patterns,
        unacked,
    }
}

fn recount_of(store: &PatternStore) -> (Vec<(Vec<String>, Vec<String>, bool)>, Vec<(Vec<QuantizedCommand>, u64)>) {
    let tree = store.tree();
    let sequences = tree
        .ongoing
        .iter()
        .map(|s| {
            let ids = s.commands.iter().map(|e| e.command.id.clone()).collect();
            let outcomes = s
                .commands
                .iter()
                .map(|e| serde_json::to_value(e.outcome).unwrap().as_str().unwrap().to_string())
                .collect();
            (ids, outcomes, s.is_closed())
        })
        .collect();
    let patterns = tree
        .learning
        .iter()
        .map(|p| (p.canonical_commands.iter().map(QuantizedCommand::of).collect(), p.use_count))
        .collect();
    (sequences, patterns)
}

fn crash_recovery() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = journaled_learning_loop(&dir.path().join("full.log"));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut offsets: Vec<usize> = (0..10).map(|_| rng.random_range(1..full.len())).collect();
    offsets.sort_unstable();
    let k = StoreConfig::default().promote_k;
    for &cut in &offsets {
        let path = dir.path().join(format!("cut-{cut}.log"));
        std::fs::write(&path, &full[..cut]).map_err(|e| e.to_string())?;
        let text = String::from_utf8_lossy(&full[..cut]).into_owned();
        let survivors = parse_journal(&text).map_err(|e| e.to_string())?.records;
        let oracle = oracle_recount(&survivors, k);

        let clock = Arc::new(SimClock::starting_at_ms(1_000_000));
        let config = BrokerConfig {
            compact_every: 0,
            ..BrokerConfig::default()
        };
        let broker = Broker::open(config, clock.clone(), &path, false).map_err(|e| format!("cut {cut}: {e}"))?;
        let (sequences, patterns) = recount_of(broker.store());
        ensure!(sequences == oracle.sequences, "cut {cut}: sequences differ from recount");
        ensure!(patterns == oracle.patterns, "cut {cut}: patterns {patterns:?} vs {:?}", oracle.patterns);
        for id in &oracle.unacked {
            ensure!(broker.is_pending(id), "cut {cut}: unacked command {id} lost");
        }
        let queued = broker.queue("cmd.armA").map_or(0, |q| q.len());
        ensure!(queued == oracle.unacked.len(), "cut {cut}: {queued} queued vs {} unacked", oracle.unacked.len());

        // A fresh agent finishes the backlog.
        let mut rig = Rig::new(broker, clock);
        rig.drain();
        let b = rig.broker.lock().unwrap();
        ensure!(b.pending_commands() == 0, "cut {cut}: backlog not drained");
        let replay_ok = oracle.unacked.iter().all(|id| b.store().sequence_of(id).is_some());
        ensure!(replay_ok, "cut {cut}: recovered command missing from store");
    }
    Ok(format!("10 cuts of a {}-byte journal at offsets {offsets:?}", full.len()))
}

fn store_tree_shape() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clock = Arc::new(SimClock::starting_at_ms(1_000));
    let mut rig = Rig::new(Broker::in_memory(BrokerConfig::default(), clock.clone()), clock);
    let mut snapshots = vec![rig.broker.lock().unwrap().store().snapshot_string()];
    for _ in 0..3 {
        for c in pattern_commands() {
            rig.send(c).map_err(|e| e.to_string())?;
        }
        rig.end();
        snapshots.push(rig.broker.lock().unwrap().store().snapshot_string());
    }
    rig.send(pattern_commands()[0]).map_err(|e| e.to_string())?;
    snapshots.push(rig.broker.lock().unwrap().store().snapshot_string());

    for (i, snap) in snapshots.iter().enumerate() {
        let doc: Value = serde_json::from_str(snap).map_err(|e| e.to_string())?;
        let top: Vec<&String> = doc.as_object().ok_or("not an object")?.keys().collect();
        ensure!(top == ["root"], "snapshot {i} top level {top:?}");
        let mut root: Vec<&String> = doc["root"].as_object().ok_or("root not an object")?.keys().collect();
        root.sort();
        ensure!(root == ["learning", "ongoing"], "snapshot {i} root children {root:?}");

        let path = dir.path().join(format!("snap-{i}.json"));
        let store = PatternStore::from_tree(StoreConfig::default(), StoreTree::from_json(snap).map_err(|e| e.to_string())?);
        store.snapshot(&path).map_err(|e| e.to_string())?;
        let restored = PatternStore::restore(&path, StoreConfig::default()).map_err(|e| e.to_string())?;
        ensure!(&restored.snapshot_string() == snap, "snapshot {i} changed across restore");
    }
    Ok(format!("{} snapshots with root {{ongoing, learning}}, byte-identical after restore", snapshots.len()))
}
