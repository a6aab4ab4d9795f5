pub mod composition;
pub mod encoder;
pub mod evalsuite;
pub mod objective;
pub mod synth;
pub mod treebank;
