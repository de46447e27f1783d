//! Emulation mode: in-process node servers exchanging framed bundles over
//! loopback TCP, with per-link shaping driven by a wall-clock contact schedule.

mod clock;
mod node;
mod scenario;
mod shaping;
mod wire;

use thiserror::Error;

use crate::bsp::BspError;
use crate::bundle::BundleError;
use crate::fragment::FragmentError;
use crate::sim::SimError;

pub use clock::GlobalSchedule;
pub use node::SendRecord;
pub use scenario::{
    emu_profile_names, run_emulation, run_emulation_sweep, EmuReport, EmuSpec, RawAttempt, RawSpec,
};
pub use shaping::{shaped_send, Delivery, LinkEffect, LinkShape, LinkTable, SendReport, ShapedLinkConfig, TokenBucket};
pub use wire::{frame, read_frame, write_frame, WireError, WireMessage, MAX_FRAME};

#[derive(Debug, Error)]
pub enum EmuError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed to start node {node}: {source}")]
    Bind {
        node: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Security(#[from] BspError),
}
