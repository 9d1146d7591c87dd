pub mod analysis;
pub mod data;
pub mod envs;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
