//! Grid traffic simulation and cooperative multi-agent signal control.
//!
//! Agents learn with a locally centralized critic whose advantages subtract
//! a counterfactual baseline that marginalizes each agent's own action while
//! holding its neighbors' actions fixed.

pub mod advantage;
pub mod config;
pub mod controllers;
pub mod env;
pub mod error;
pub mod flows;
pub mod mdp;
pub mod netmodel;
pub mod nn;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
