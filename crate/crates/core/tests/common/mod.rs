//! Shared helpers for the integration-test targets. Each target uses a
//! subset, so silence per-target dead-code lints.
#![allow(dead_code)]

pub mod fd;
pub mod oracles;
