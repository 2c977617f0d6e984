//! Minimal CPU neural-network engine: array ops with explicit backward
//! passes, a reverse-mode tape, and named parameter storage with Adam.

pub mod exec;
pub mod ops;
pub mod params;

pub use exec::{EvalExec, Exec, Id, ShapeExec, TapeExec};
pub use params::{Adam, ParamGrads, ParamId, ParamStore};
