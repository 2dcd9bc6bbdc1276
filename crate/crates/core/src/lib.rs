//! Recomputation scheduling for pipeline-parallel training.
//!
//! The crate is organised bottom-up:
//!
//! * [`profile`] loads operator profiles and expands layer templates.
//! * [`ilp`] is a small exact 0/1 integer-program engine.
//! * [`optsched`] builds the whole-stage MILP and decodes its schedules.
//! * [`heusched`] builds the per-layer five-phase program and turns a layer
//!   plan into a stage program.
//! * [`pipesim`] replays stage programs in a 1F1B discrete-event simulator.
//! * [`partition`] searches layer-to-stage assignments.
//! * [`oracle`] holds brute-force reference solvers used for verification.

pub mod heusched;
pub mod ilp;
pub mod optsched;
pub mod oracle;
pub mod partition;
pub mod pipesim;
pub mod profile;
pub mod rational;

pub use profile::{
    HardwareProfile, LayerTemplate, ModelProfile, OpId, OpKind, OperatorGraph, OperatorSpec, PipelineConfig, Profile,
};
pub use rational::Rational;
