//! Spatio-temporal deep learning on 4D volumetric time series.

pub mod error;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{DType, Real, Rng, Shape, Tensor};
pub mod autodiff;
pub mod nn;
pub mod gru;
pub mod models;
pub mod data;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/convolution.md")]
    mod convolution {}
    #[doc = include_str!("../../../book/src/convgru.md")]
    mod convgru {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
