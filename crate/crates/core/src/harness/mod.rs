pub mod config;
pub mod dataset;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod similarity;
