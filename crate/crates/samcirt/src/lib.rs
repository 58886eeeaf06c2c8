//! Desk-scale 4D computed tomography: simultaneous image reconstruction and
//! affine motion estimation.
//!
//! The toolkit couples a parallel-beam projector with exact adjoint
//! ([`projector`]), affine warp operators with analytic adjoints and
//! parameter derivatives ([`warp`]), the joint data-fidelity objective and
//! its partial gradients ([`model`]), a split gradient method with
//! Barzilai-Borwein step sizes ([`optimizer`]), an SSIM-driven subscan
//! partitioner ([`partition`]) and a dynamic-scan simulator ([`simulation`]).
//!
//! All heavy operators are bit-deterministic across thread counts: parallel
//! scatters accumulate per-chunk partials over a fixed partition and reduce
//! them in a fixed order.

pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod partition;
pub mod projector;
pub mod simulation;
pub mod verify;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{Geometry, ProjStack};
pub use model::{JointState, ScanModel};
pub use optimizer::{OptConfig, RunHistory, SamcirtResult};
pub use partition::{SsimParams, SubscanPlan};
pub use volume::{GridSpec, Volume};
pub use warp::{AffineParams, InterpKernel, MotionKind, MotionModel};
