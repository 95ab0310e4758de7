pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dcaa;
pub mod diffusion;
pub mod error;
pub mod gfw;
pub mod gradcheck;
pub mod imgproc;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod stage1;
pub mod synth;
pub mod tensor;
pub mod warp;
