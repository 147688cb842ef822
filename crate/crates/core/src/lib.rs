//! Networked control stack for a 5-DoF hobby-servo robot arm.
//!
//! The crate is organised around the path a command travels:
//!
//! - [`protocol`]: the versioned, newline-delimited JSON wire format.
//! - [`arm_model`]: kinematics, motion timing and static shoulder load of the arm.
//! - [`broker`]: per-arm durable queues with lease-based at-least-once delivery,
//!   ack routing and push fan-out.
//! - [`pattern_store`]: the "ongoing"/"learning" tree that promotes repeated
//!   successful command sequences and offers their remainder for reuse.
//! - [`device_agent`]: the robot-side loop that executes commands on the
//!   simulated arm and acknowledges them.
//! - [`scenario`]: deterministic, simulated-clock replay of scripted sessions.
//!
//! All timing goes through [`clock::Clock`] so the whole system can run on
//! simulated time.

pub mod arm_model;
pub mod broker;
pub mod client;
pub mod clock;
pub mod device_agent;
pub mod journal;
pub mod pattern_store;
pub mod protocol;
pub mod scenario;

pub use arm_model::{ArmProfile, CartesianPose, JointConfig, MotionPlan};
pub use broker::{Broker, BrokerConfig, BrokerError};
pub use clock::{Clock, SimClock, SystemClock};
pub use device_agent::DeviceAgent;
pub use pattern_store::PatternStore;
pub use protocol::{Ack, AckStatus, Envelope, JointCommand, Message};
