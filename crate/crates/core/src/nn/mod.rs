//! Numerical substrate: parameters, a reverse-mode tape, recurrent cells,
//! Adam, finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{dropout_mask, GruCell, Linear, LnLstmCell, LstmVars, Norm};
pub use ops::{cosine, layer_norm, linear_forward, softmax, LAYER_NORM_EPS};
pub use optim::{adam_step, AdamConfig};
pub use params::{Init, ParamId, ParamMatrix, ParamStore};
pub use rng::RngState;
pub use tape::{huber, Graph, Var, HUBER_DELTA};
