pub mod autodiff;
pub mod data;
pub mod distribution;
pub mod network;
pub mod checkpoint;
pub mod training;
pub mod prediction;
pub mod baselines;
pub mod evaluation;
