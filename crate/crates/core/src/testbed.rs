//! The verification bench in one value: simulated kernel, framework with the
//! Spw driver registered, the card on its BARs and the SpaceWire network.
//!
//! Single-threaded; build and drive it from one thread.

use std::cell::RefCell;
use std::rc::Rc;

use serde::Serialize;
use thiserror::Error;

use crate::device::{CardDiagnostics, RegisterSnapshot, SharedCard, SharedNetwork, SpwCard, BAR0_LEN, BAR2_LEN};
use crate::driver::{spw_driver_callbacks, SpwDriverConfig};
use crate::ioctl::Guid;
use crate::kernel::{BarAssignment, DeviceDescriptor, DeviceId, IoRegion, Kernel, KernelError, SharedDevice};
use crate::net::{NetError, Network, Topology, Waveform, DEFAULT_SAMPLE_PERIOD};
use crate::wdf::{Callback, DeviceLifecycleState, DriverHandle, Framework, FrameworkError, IoRequest, IoResponse};

pub const DEFAULT_BAR0_BASE: u64 = 0xD210_0000;
pub const DEFAULT_BAR2_BASE: u64 = 0xD200_0000;
/// Interface GUID used when none is configured.
pub const DEFAULT_INTERFACE_GUID: Guid = Guid::from_u128(0x6b4c0d4a_3c9e_4e8b_9e33_2b0f7e1c5a10);
pub const CARD_DEVICE_ID: DeviceId = DeviceId(0);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestbedConfig {
    pub bar0_base: u64,
    pub bar0_len: u64,
    pub bar2_base: u64,
    pub bar2_len: u64,
    pub topology: Topology,
    pub sample_period: u64,
    pub waveform: Waveform,
    pub driver: SpwDriverConfig,
    pub auto_cleanup: bool,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            bar0_base: DEFAULT_BAR0_BASE,
            bar0_len: BAR0_LEN,
            bar2_base: DEFAULT_BAR2_BASE,
            bar2_len: BAR2_LEN,
            topology: Topology::verification(),
            sample_period: DEFAULT_SAMPLE_PERIOD,
            waveform: Waveform::default(),
            driver: SpwDriverConfig::new(DEFAULT_INTERFACE_GUID),
            auto_cleanup: true,
        }
    }
}

impl TestbedConfig {
    pub fn descriptor(&self) -> DeviceDescriptor {
        DeviceDescriptor {
            id: CARD_DEVICE_ID,
            hardware_id: self.driver.hardware_id.clone(),
            bars: vec![
                BarAssignment {
                    index: 0,
                    phys_base: self.bar0_base,
                    length: self.bar0_len,
                },
                BarAssignment {
                    index: 2,
                    phys_base: self.bar2_base,
                    length: self.bar2_len,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TestbedError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Framework(#[from] FrameworkError),
}

/// One accelerometer sample that reached the card FIFO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeliveredSample {
    pub tick: u64,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

pub struct Testbed {
    config: TestbedConfig,
    kernel: Kernel,
    framework: Framework,
    network: SharedNetwork,
    card: SharedCard,
    driver: DriverHandle,
}

impl Testbed {
    /// Builds the bench, registers the driver and plugs the card.
    pub fn new(config: TestbedConfig) -> Result<Self, TestbedError> {
        let mut tb = Self::unplugged(config)?;
        tb.plug()?;
        Ok(tb)
    }

    /// Like [`Testbed::new`] but leaves the card out of the slot.
    pub fn unplugged(config: TestbedConfig) -> Result<Self, TestbedError> {
        let network = Network::build(config.topology.clone())?
            .with_sample_period(config.sample_period)
            .with_waveform(config.waveform);
        let network = Rc::new(RefCell::new(network));
        let card = SpwCard::attached(Rc::clone(&network)).into_shared();
        let mut kernel = Kernel::new();
        let mut framework = Framework::new();
        framework.set_auto_cleanup(config.auto_cleanup);
        let driver = framework.register_driver(&mut kernel, spw_driver_callbacks(config.driver.clone()))?;
        Ok(Self {
            config,
            kernel,
            framework,
            network,
            card,
            driver,
        })
    }

    pub fn config(&self) -> &TestbedConfig {
        &self.config
    }

    pub fn device(&self) -> DeviceId {
        CARD_DEVICE_ID
    }

    pub fn driver(&self) -> DriverHandle {
        self.driver
    }

    pub fn plug(&mut self) -> Result<Vec<Callback>, TestbedError> {
        let handler: SharedDevice = self.card.clone();
        let events = self.kernel.plug_device(self.config.descriptor(), handler)?;
        let mut trace = Vec::new();
        for ev in &events {
            trace.extend(self.framework.on_pnp_event(&mut self.kernel, ev)?);
        }
        Ok(trace)
    }

    pub fn unplug(&mut self) -> Result<Vec<Callback>, TestbedError> {
        let events = self.kernel.unplug_device(CARD_DEVICE_ID)?;
        let mut trace = Vec::new();
        for ev in &events {
            trace.extend(self.framework.on_pnp_event(&mut self.kernel, ev)?);
        }
        Ok(trace)
    }

    pub fn lifecycle(&self) -> DeviceLifecycleState {
        self.framework.state(CARD_DEVICE_ID)
    }

    pub fn dispatch(&mut self, request: IoRequest) -> Result<IoResponse, FrameworkError> {
        self.framework.dispatch_request(&mut self.kernel, CARD_DEVICE_ID, request)
    }

    /// Advances simulated time; samples reaching the card are written to its
    /// FIFO and returned.
    pub fn tick(&mut self, n: u64) -> Vec<DeliveredSample> {
        let deliveries = self.network.borrow_mut().tick(n);
        let mut card = self.card.borrow_mut();
        deliveries
            .into_iter()
            .filter_map(|d| {
                card.deliver_packet(d.port, &d.payload).ok()?;
                Some(DeliveredSample {
                    tick: d.sample.tick,
                    x: d.sample.x,
                    y: d.sample.y,
                    z: d.sample.z,
                })
            })
            .collect()
    }

    pub fn now(&self) -> u64 {
        self.network.borrow().now()
    }

    pub fn inject_sample(&mut self, x: i32, y: i32, z: i32) {
        self.network.borrow_mut().set_injected_sample(x, y, z);
    }

    pub fn clear_injection(&mut self) {
        self.network.borrow_mut().clear_injected_sample();
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn framework(&self) -> &Framework {
        &self.framework
    }

    pub fn network(&self) -> std::cell::Ref<'_, Network> {
        self.network.borrow()
    }

    pub fn network_mut(&self) -> std::cell::RefMut<'_, Network> {
        self.network.borrow_mut()
    }

    /// Direct access to the card, bypassing kernel and driver. For oracles
    /// and inspectors only.
    pub fn card(&self) -> std::cell::RefMut<'_, SpwCard> {
        self.card.borrow_mut()
    }

    pub fn register_snapshot(&self) -> RegisterSnapshot {
        self.card.borrow().snapshot()
    }

    pub fn card_diagnostics(&self) -> CardDiagnostics {
        self.card.borrow().diagnostics().clone()
    }

    pub fn leak_report(&self) -> Vec<(DeviceId, IoRegion)> {
        self.kernel.leak_report()
    }
}
