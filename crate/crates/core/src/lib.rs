pub mod asmmodel;
pub mod cli;
pub mod depcore;
pub mod exec;
pub mod liftstats;
pub mod oracle;
pub mod semantics;
pub mod synth;
