pub mod clip_bounds;
pub mod equivalence;
pub mod report;
pub mod train;
pub mod variance;
