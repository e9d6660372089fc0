//! GDPR violation detection benchmark: corpus handling, task construction,
//! rule-based and model-based detectors, and evaluation.

pub mod corpus;
pub mod engine;
pub mod facts;
pub mod harness;
pub mod knowledge;
pub mod methods;
pub mod metrics;
pub mod par;
pub mod taskgen;
