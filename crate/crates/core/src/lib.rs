//! Sparse gradient exchange for synchronous data-parallel SGD.
//!
//! Each node keeps a local accumulation of the gradient mass it has not yet
//! sent, corrects that accumulation for momentum, and transmits only the
//! largest entries every iteration. The crate contains the per-node state
//! machine ([`engine`]), top-k selection ([`sparsify`]), a run-length wire
//! format ([`codec`]), a deterministic multi-node training simulator
//! ([`sim`]) and an analytic speedup model ([`perfmodel`]).

pub mod codec;
pub mod engine;
pub mod error;
pub mod kv;
pub mod perfmodel;
pub mod rng;
pub mod sim;
pub mod sparsify;
pub mod vector;

pub use codec::{decode, encode, EncodedUpdate, SparseUpdate};
pub use engine::{ClipConfig, DgcNodeState, SparsitySchedule, Variant};
pub use error::{DgcError, Result};
pub use rng::{derive_stream, Purpose, RngStream};
pub use sparsify::{SelectionMethod, SparsityConfig};
pub use vector::{l2_norm, saxpy, GradientVector, LayerLayout};
