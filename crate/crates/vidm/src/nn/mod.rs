//! Hand-rolled neural-network layers with explicit forward/backward passes.
//!
//! Single-threaded kernels with fixed reduction order make every pass
//! bitwise reproducible; the finite-difference tests in each submodule are
//! the correctness oracle for the gradients.

pub mod layers;
pub mod ops;
pub mod param;
pub mod posgn;
pub mod unet;

pub use layers::{AttnBlock, CondCtx, CondGrads, Conv2d, Linear, NormMode, NormUnit, ResBlock, TimeEmbed};
pub use ops::GN_EPS;
pub use param::{Init, ParamEntry, ParamId, ParamStore};
pub use posgn::{normalize_frame_index, normalize_timestep, CoordCache, CoordMlp};
pub use unet::{CondInput, UNet, UNetCfg};
