pub mod eval;
pub mod experiment;
pub mod gen_data;
pub mod gradcheck;
pub mod report;
pub mod train;
