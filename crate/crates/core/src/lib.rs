//! Hybrid spatio-temporal convolution for video recognition.
//!
//! A hybrid layer splits each output channel's input channels into a group
//! seen through a temporal `K_T×1×1` kernel and a group seen through a
//! spatial `1×K_H×K_W` kernel. An optional attention head reweights the two
//! branch outputs per channel.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub(crate) mod gemm;
pub(crate) mod im2col;
pub mod layout;
pub mod network;
pub mod norm;
pub mod param;
pub mod rng;
pub mod sth;
pub mod tensor;
pub mod tensor_io;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use layout::{build_layout, build_merge_layout, HybridLayout, Proportion, Variant};
pub use network::{build_sth_network, consensus, network_forward, Network, NetworkConfig};
pub use sth::{attentive_integrate, sth_forward, KernelType, SthLayer};
pub use tensor::{Shape, Tensor};
