pub mod numerics;
pub mod envs;
pub mod safety;
pub mod trainer;
pub mod continual;
pub mod experiment;
