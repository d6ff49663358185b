pub mod checkpoint;
pub mod curation;
pub mod data;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;
