//! Simulation and long-run-behaviour verification toolkit for a three-factor
//! CIR short-rate model: a rate factor reverting to a stochastic mean, itself
//! mean-reverting, with a common CIR volatility factor driving both.

pub mod analytics;
pub mod engine;
pub mod experiments;
pub mod generator;
pub mod noise;
pub mod params;
pub mod transport;
