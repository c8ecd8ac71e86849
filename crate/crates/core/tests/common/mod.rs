//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod grad;
pub mod mdp;
