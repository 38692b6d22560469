//! Loss-landscape surfaces around trained networks, and lottery tickets found
//! by iterative magnitude pruning.
//!
//! The pieces compose as a pipeline: build and [`optim::train`] a
//! [`nn::Network`], sample a [`directions::DirectionPair`] normalized filter by
//! filter against the trained weights, evaluate a [`surface::SurfaceGrid`] over
//! a fixed evaluation subset, and persist or render the result with
//! [`artifact`] and [`render`]. [`pruning`] produces sparse tickets whose
//! surfaces can be compared the same way, and [`harness`] wires all of it to
//! config files.

pub mod artifact;
pub mod data;
pub mod directions;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod pruning;
pub mod render;
pub mod rng;
pub mod surface;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{build_network, ArchSpec, LayerSpec, Mode, Network, Params};
pub use pruning::Mask;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/directions.md")]
    mod directions {}
    #[doc = include_str!("../../../book/src/surfaces.md")]
    mod surfaces {}
    #[doc = include_str!("../../../book/src/tickets.md")]
    mod tickets {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
