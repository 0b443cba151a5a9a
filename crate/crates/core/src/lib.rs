//! Spectral Galerkin tools for Schrödinger equations with convolution-type
//! nonlinearities on the circle.

pub mod dynamics;
pub mod diagnostics;
pub mod error;
pub mod floer;
pub mod model;
pub mod smalldiv;
pub mod spectral;

pub use error::{Error, Result};
