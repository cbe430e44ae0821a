pub mod data;
pub mod detector;
pub mod diffusion;
pub mod metrics;
pub mod numerics;
pub mod predictor;
pub mod scoring_np;
pub mod scoring_p;
pub mod trainer;
