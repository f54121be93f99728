//! Control application for the simulated PCIe-SpaceWire card: opens the
//! driver by interface GUID, issues device I/O control requests and serves
//! them over a CLI and an HTTP/WebSocket API.

pub mod api;
pub mod cli;
pub mod config;
pub mod service;
pub mod sim;

pub use cli::{run_cli, Backend, RemoteBackend};
pub use config::ServiceConfig;
pub use service::{CommandResult, CommandStatus, ControlService, DeviceHandle, FailureReason, ServiceError};
pub use sim::SimHandle;

/// Link training takes five ticks from reset; bring-up waits this long.
pub const BRING_UP_TICKS: u64 = 5;
