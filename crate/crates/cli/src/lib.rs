//! Experiment runner, oracle checks and file formats for the attention
//! limit laboratory.

pub mod experiment;
pub mod oracle;
pub mod samplefile;
pub mod selfcheck;
pub mod svg;
