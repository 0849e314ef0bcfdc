pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod experiment;
mod fft;
pub mod ib;
pub mod image;
pub mod info;
pub mod mss;
pub mod net;
pub mod noise;
pub mod par;
pub mod seed;

pub use error::{Error, Result};
