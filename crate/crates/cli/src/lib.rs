//! Desk-scale experiment harness around `gapa-core`: pipeline stages, toy
//! dataset generators, a tiny MLP trainer for demo backbones, and sweep
//! runners producing plot-ready CSV.

pub mod config;
pub mod dataset;
pub mod gentoy;
pub mod pipeline;
pub mod seeds;
pub mod sweep;
pub mod toytrain;
