//! The network engine: a fixed set of layer kinds with exact gradients.

mod arch;
mod kernels;
mod loss;
mod network;
mod params;

pub use arch::{ArchSpec, Architecture, LayerSpec, ParamLayout, ParamRole, ParamSlot};
pub use kernels::{BnStats, Mode};
pub use loss::cross_entropy;
pub use network::{build_network, Network, BN_MOMENTUM};
pub use params::{filter_view, FilterRef, Gradients, Params};

pub(crate) use loss::{argmax, nll_sum};
