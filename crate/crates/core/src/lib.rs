//! Video pose estimation: a spatial stage that detects people per frame and a
//! temporal stage that refines keyframe poses with neighbouring frames.

pub mod attention;
pub mod clipfile;
pub mod config;
pub mod gradsuite;
pub mod harness;
pub mod nn;
pub mod skeleton;
pub mod spatial;
pub mod synth;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod temporal;
pub mod train;
