//! Re-ID driven bounding-box refinement at desk scale.
//!
//! Pipeline: synthesize person-search scenes ([`synth`]), pretrain a small
//! embedding network on ground-truth crops ([`embed`]), then refine perturbed
//! boxes by backpropagating a re-ID loss (identity classification plus proxy
//! triplet, [`proxy`]) through the differentiable ROI transform ([`roi`]) to
//! the box coordinates ([`refine`]), and score the result with retrieval
//! metrics ([`eval`]).

pub mod error;
pub mod eval;
pub mod exec;
pub mod embed;
pub mod grid;
pub mod gradcheck;
pub mod harness;
pub mod pipeline;
pub mod ppm;
pub mod rng;
pub mod proxy;
pub mod refine;
pub mod roi;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{BorderMode, Grid2D};
pub use rng::Rng;
