//! Panoramic activity recognition: spatio-temporal proximity relation
//! encoding, social group detection and a dual-path activity transformer.

pub mod cli;
pub mod config;
pub mod dpatr;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod relation;
pub mod synthdata;
pub mod tensor;
pub mod training;
