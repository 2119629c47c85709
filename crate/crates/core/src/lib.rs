pub mod numerics;
pub mod losses;
pub mod merge;
pub mod chem;
pub mod data;
pub mod eval;
pub mod policy;
pub mod train;
