//! Minimal neural-network toolkit: dense arrays, a parameter store with
//! Adam, a reverse-mode tape over a fixed kernel set, layer wrappers
//! (MLP, GRU cell, 2-D convolution), and a finite-difference gradient
//! checker.
//!
//! Everything is `f64` and single-threaded; determinism comes from seeded
//! RNG and fixed iteration order throughout.

pub mod array;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use array::{standard_normal, NdArray};
pub use gradcheck::{check_gradients, GradCheckReport, FD_STEP, KINK_REJECT};
pub use layers::{Conv2dLayer, GruCell, Mlp, MlpSpec};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{BilinearTaps, Grads, NllBreakdown, Tape, Var, WaypointTargets};
