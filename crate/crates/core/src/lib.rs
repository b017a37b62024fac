//! Front-door adjusted chain-of-thought prompting for implicit sentiment
//! analysis.

pub mod backend;
pub mod clustering;
pub mod config;
pub mod encoder;
pub mod estimator;
pub mod eval;
pub mod model;
pub mod prompting;
pub mod retrieval;
pub mod scm;
pub mod synthetic;
pub mod transport;
