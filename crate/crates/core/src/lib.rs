pub mod acoustic_sim;
pub mod doa_model;
pub mod error;
pub mod grad_engine;
pub mod harness;
pub mod ico_grid;
pub mod ico_nn;
pub mod srp_phat;

pub use error::{Error, Result};
