//! Desk-scale PCIe-SpaceWire interface card stack: an emulated card behind a
//! simulated kernel, an event-driven driver framework hosting the Spw
//! driver, the IOCTL/GUID codec shared with applications, and a tick-based
//! SpaceWire network.

pub mod device;
pub mod driver;
pub mod ioctl;
pub mod kernel;
pub mod net;
pub mod testbed;
pub mod wdf;

pub use ioctl::{Guid, SpwCommand, SpwResponse};
pub use testbed::{DeliveredSample, Testbed, TestbedConfig, TestbedError};
