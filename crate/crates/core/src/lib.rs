pub mod autograd;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod model;
pub mod uvit;
pub mod codec;
pub mod data;
pub mod flow;
pub mod prompt;
pub mod edit;
pub mod io;
pub mod config;
pub mod eval;
pub mod engine;
pub mod server;
