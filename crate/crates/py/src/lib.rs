//! Python module `iort`: arm model, wire codec, pattern store and
//! simulated scenarios. Structured results cross the boundary as plain
//! dicts and lists.

use std::sync::Arc;

use iort_core::arm_model::{self, ArmProfile, JointConfig};
use iort_core::pattern_store::{CloseReason, Outcome, PatternStore, StoreConfig};
use iort_core::protocol::{self, JointCommand};
use iort_core::scenario::{self, ScenarioOptions};
use iort_core::SimClock;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde_json::Value;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts through Python's `json` so nested data arrives as dicts and lists.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_str_enum<T: serde::de::DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(name.to_string())).map_err(|_| err(format!("unknown value {name:?}")))
}

fn profile_or_default(p: Option<&PyArmProfile>) -> ArmProfile {
    p.map(|p| p.inner.clone()).unwrap_or_default()
}

#[pyclass(name = "ArmProfile", module = "iort", from_py_object)]
#[derive(Clone)]
struct PyArmProfile {
    inner: ArmProfile,
}

#[pymethods]
impl PyArmProfile {
    /// The built-in profile.
    #[new]
    fn new() -> Self {
        Self {
            inner: ArmProfile::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ArmProfile::from_toml_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ArmProfile::load(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn reach_cm(&self) -> f64 {
        self.inner.links.total()
    }

    #[getter]
    fn stall_torque_kgfcm(&self) -> f64 {
        self.inner.shoulder_stall_torque_kgfcm
    }

    /// Limit violations of a configuration; empty when it is reachable.
    #[pyo3(signature = (angles, gripper_mm = 0.0))]
    fn violations<'py>(
        &self,
        py: Python<'py>,
        angles: [f64; 5],
        gripper_mm: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.violations(&JointConfig::new(angles, gripper_mm)))
    }

    fn __repr__(&self) -> String {
        format!("ArmProfile(name={:?})", self.inner.name)
    }
}

/// End-effector pose in cm and degrees.
#[pyfunction]
#[pyo3(signature = (angles, gripper_mm = 0.0, profile = None))]
fn forward_kinematics<'py>(
    py: Python<'py>,
    angles: [f64; 5],
    gripper_mm: f64,
    profile: Option<PyRef<'_, PyArmProfile>>,
) -> PyResult<Bound<'py, PyAny>> {
    let p = profile_or_default(profile.as_deref());
    let pose = arm_model::forward_kinematics(&JointConfig::new(angles, gripper_mm), &p).map_err(err)?;
    to_py(py, &pose)
}

/// Duration and per-joint rates of a synchronized move.
#[pyfunction]
#[pyo3(signature = (start, target, profile = None))]
fn plan_motion<'py>(
    py: Python<'py>,
    start: [f64; 5],
    target: [f64; 5],
    profile: Option<PyRef<'_, PyArmProfile>>,
) -> PyResult<Bound<'py, PyAny>> {
    let p = profile_or_default(profile.as_deref());
    let plan = arm_model::plan_motion(&JointConfig::new(start, 0.0), &JointConfig::new(target, 0.0), &p)
        .map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "duration_s": plan.duration_s,
            "duration_us": plan.duration_us,
            "rates_deg_per_s": plan.rates_deg_per_s,
        }),
    )
}

/// Static shoulder load in kgf·cm.
#[pyfunction]
#[pyo3(signature = (angles, payload_g = 0.0, profile = None))]
fn shoulder_torque(angles: [f64; 5], payload_g: f64, profile: Option<PyRef<'_, PyArmProfile>>) -> PyResult<f64> {
    let p = profile_or_default(profile.as_deref());
    arm_model::shoulder_torque(&JointConfig::new(angles, 0.0), payload_g, &p).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (angles, payload_g, profile = None))]
fn is_liftable(angles: [f64; 5], payload_g: f64, profile: Option<PyRef<'_, PyArmProfile>>) -> PyResult<bool> {
    let p = profile_or_default(profile.as_deref());
    arm_model::is_liftable(&JointConfig::new(angles, 0.0), payload_g, &p).map_err(err)
}

/// Validates an envelope given as JSON text and returns its wire line.
#[pyfunction]
fn encode(envelope_json: &str) -> PyResult<String> {
    let value: Value = serde_json::from_str(envelope_json).map_err(err)?;
    let env = protocol::decode_value(&value).map_err(err)?;
    protocol::encode_string(&env).map_err(err)
}

/// Parses one wire line into a dict.
#[pyfunction]
fn decode<'py>(py: Python<'py>, line: &str) -> PyResult<Bound<'py, PyAny>> {
    let env = protocol::decode(line.as_bytes()).map_err(err)?;
    to_py(py, &env)
}

/// Violations of a command body (JSON text) against a profile.
#[pyfunction]
#[pyo3(signature = (command_json, profile = None))]
fn validate<'py>(
    py: Python<'py>,
    command_json: &str,
    profile: Option<PyRef<'_, PyArmProfile>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cmd: JointCommand = serde_json::from_str(command_json).map_err(err)?;
    let p = profile_or_default(profile.as_deref());
    to_py(py, &protocol::validate_command(&cmd, &p).violations)
}

#[pyclass(name = "PatternStore", module = "iort")]
struct PyPatternStore {
    inner: PatternStore,
}

#[pymethods]
impl PyPatternStore {
    #[new]
    #[pyo3(signature = (promote_k = 3, idle_gap_ms = 10_000, min_prompt_prefix = 2))]
    fn new(promote_k: usize, idle_gap_ms: u64, min_prompt_prefix: usize) -> Self {
        Self {
            inner: PatternStore::new(StoreConfig {
                promote_k,
                idle_gap_ms,
                min_prompt_prefix,
            }),
        }
    }

    /// Restores from snapshot text, with the default configuration.
    #[staticmethod]
    fn restore(snapshot: &str) -> PyResult<Self> {
        let tree = iort_core::pattern_store::StoreTree::from_json(snapshot).map_err(err)?;
        Ok(Self {
            inner: PatternStore::from_tree(StoreConfig::default(), tree),
        })
    }

    /// Records a command (JSON body); returns a prompt dict or None.
    fn observe<'py>(&mut self, py: Python<'py>, command_json: &str, now_ms: u64) -> PyResult<Bound<'py, PyAny>> {
        let cmd: JointCommand = serde_json::from_str(command_json).map_err(err)?;
        let prompt = self.inner.observe_command(&cmd, now_ms);
        to_py(py, &prompt)
    }

    /// `status` is one of ok, rejected, fault. Returns newly promoted patterns.
    fn record_outcome<'py>(
        &mut self,
        py: Python<'py>,
        command_id: &str,
        status: &str,
        now_ms: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let outcome: Outcome = from_str_enum(status)?;
        to_py(py, &self.inner.record_outcome(command_id, outcome, now_ms))
    }

    /// Closes the open sequence; returns whether there was one.
    #[pyo3(signature = (arm_id, operator_id, now_ms, reason = "explicit_end"))]
    fn close(&mut self, arm_id: &str, operator_id: &str, now_ms: u64, reason: &str) -> PyResult<bool> {
        let reason: CloseReason = from_str_enum(reason)?;
        Ok(self.inner.close_sequence(arm_id, operator_id, reason, now_ms).is_some())
    }

    /// Resolves a prompt; returns the remainder when accepted.
    fn answer_prompt<'py>(
        &mut self,
        py: Python<'py>,
        operator_id: &str,
        pattern_id: &str,
        accepted: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let rest = self.inner.accept_prompt(operator_id, pattern_id, accepted).map_err(err)?;
        to_py(py, &rest)
    }

    fn patterns<'py>(&self, py: Python<'py>, arm_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let list: Vec<_> = self.inner.patterns_for(arm_id).collect();
        to_py(py, &list)
    }

    /// `(ongoing, learning)` node sizes.
    fn counts(&self) -> (usize, usize) {
        let t = self.inner.tree();
        (t.ongoing.len(), t.learning.len())
    }

    fn snapshot(&self) -> String {
        self.inner.snapshot_string()
    }
}

/// Runs a scenario on simulated time. Returns transcript lines, failures,
/// the final store snapshot and the broker journal.
#[pyfunction]
#[pyo3(signature = (text, seed = 0, promote_k = 3))]
fn run_scenario<'py>(py: Python<'py>, text: &str, seed: u64, promote_k: usize) -> PyResult<Bound<'py, PyAny>> {
    let mut opts = ScenarioOptions {
        seed,
        ..ScenarioOptions::default()
    };
    opts.broker.store.promote_k = promote_k;
    let report = scenario::run_scenario(text, opts, Arc::new(SimClock::new())).map_err(err)?;
    let transcript: Vec<&str> = report.transcript.iter().map(|l| l.line.trim_end()).collect();
    to_py(
        py,
        &serde_json::json!({
            "passed": report.passed(),
            "transcript": transcript,
            "failures": report.failures,
            "snapshot": report.snapshot,
            "journal": report.journal,
            "motions": report.motions,
        }),
    )
}

#[pymodule]
fn iort(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PROTOCOL_VERSION", protocol::PROTOCOL_VERSION)?;
    m.add_class::<PyArmProfile>()?;
    m.add_class::<PyPatternStore>()?;
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(plan_motion, m)?)?;
    m.add_function(wrap_pyfunction!(shoulder_torque, m)?)?;
    m.add_function(wrap_pyfunction!(is_liftable, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
