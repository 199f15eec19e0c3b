//! Modulated-intervention preference optimization on a desk-scale language
//! model.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`diffcore`]), a
//! character-level causal transformer ([`tinylm`]), the preference objectives
//! ([`objectives`]), a synthetic preference corpus ([`data`]), SFT and
//! alignment training ([`trainer`]) and the analysis and command-line layer
//! ([`analysis`], [`cli`]).

pub mod diffcore;
pub mod objectives;
pub mod tinylm;
pub mod data;
pub mod trainer;
pub mod analysis;
pub mod cli;
