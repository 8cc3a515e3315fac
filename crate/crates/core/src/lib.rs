//! Semantic-guided retransmission over a simulated 16-QAM link.
//!
//! An image is encoded to a latent, a random fraction of latent blocks is
//! withheld, and the receiver inpaints the gaps with caption-guided diffusion.
//! When the caption of its reconstruction drifts from the transmitted caption
//! it requests more blocks.

pub mod backends;
pub mod control;
pub mod diffusion;
pub mod latent;
pub mod metrics;
pub mod phy;
pub mod selftest;
pub mod session;
pub mod sweep;

pub use backends::{BackendError, BackendSuite, Image};
pub use control::{
    rouge_l, run_scheme, run_session, run_session_with, RequestPolicy, RoundRecord, Scheme,
    SessionConfig, SessionError, SessionResult, TerminatedBy,
};
pub use latent::{BlockIndex, BlockMask, LatentTensor, RateReport, TensorDims};
pub use phy::{ChannelConfig, LinkModel};
pub use sweep::{ExperimentGrid, Format, ResultRow, SweepContext, SweepSummary};
