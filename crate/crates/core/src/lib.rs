pub mod genetic;
pub mod orchestrator;
pub mod policytoy;
pub mod population;
pub mod rating;
pub mod reflect;
pub mod rollout;
pub mod seed;
pub mod transport;
