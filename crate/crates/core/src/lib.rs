//! Simulation laboratory for average consensus over directed graphs with
//! quantized communication.
//!
//! A network of nodes, each holding a noisy scalar measurement, agrees on the
//! network-wide average while exchanging only quantized values. The protocol
//! runs in two stages: first every node estimates its component of the
//! Laplacian's left eigenvector through a quantized consensus recursion with a
//! running average on top, then a correction sequence built from that estimate
//! steers the measurement consensus so the running average of the states
//! converges to the true average in mean square.
//!
//! The crate provides the graph machinery ([`graph`]), the quantization
//! schemes ([`quantizer`]), the spectral constants and error bounds that the
//! convergence guarantees are made of ([`spectral`]), the node update rules
//! ([`protocol`]), and a Monte Carlo harness with deterministic parallel
//! ensembles ([`harness`]). The `quorum-ra` binary exposes all of it behind a
//! TOML-configured command line.

pub mod cli;
pub mod config;
pub mod graph;
pub mod harness;
pub mod plot;
pub mod protocol;
pub mod quantizer;
pub mod rng;
pub mod spectral;

pub use graph::{Digraph, GraphError, Laplacian, LeftEigenvector};
pub use quantizer::{QuantizerError, QuantizerKind, QuantizerSpec};
pub use rng::{RandomStream, StreamPurpose};
