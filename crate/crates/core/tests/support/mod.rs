//! Shared fixtures, straight-line reference implementations and the
//! acceptance checks used by the integration tests.

#![allow(dead_code)]

pub mod criteria;
pub mod e2e;
pub mod fixtures;
pub mod oracles;
