//! Minimal dense-tensor neural substrate.
//!
//! Computations are recorded on a [`Graph`] (a tape of operations over
//! row-major `f64` buffers) and differentiated in reverse mode. Parameters
//! live in a [`ParamStore`] outside the graph, are bound into a fresh graph
//! for every forward pass, and are updated by [`Adam`].
//!
//! ```
//! use isac_nn::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::from_vec(vec![1, 2], vec![1.0, -2.0]).unwrap());
//! let y = g.sigmoid(x);
//! let loss = g.mse(y, &[0.5, 0.5]).unwrap();
//! g.backward(loss).unwrap();
//! assert!(g.grad(x).unwrap()[0] > 0.0);
//! ```

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use error::NnError;
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tensor::Tensor;

pub type Result<T, E = NnError> = std::result::Result<T, E>;
