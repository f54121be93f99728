//! Event-driven driver framework. The framework owns the device lifecycle
//! and the flow of I/O requests; a driver only registers callbacks.
//!
//! Arrival runs `evt_device_add` then `evt_prepare_hardware` and leaves the
//! device `Started`. Removal runs `evt_release_hardware`, leaves the device
//! `Removed`, withdraws its interfaces and, with auto-cleanup on, unmaps
//! whatever the driver left mapped (the kernel still reports it as a leak).

pub mod manifest;

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ioctl::Guid;
use crate::kernel::{BarAssignment, Bugcheck, DeviceId, Irql, Kernel, KernelError, Outcome, PnpEvent, RoutineAttributes};

pub use manifest::{parse_install_manifest, DriverVersion, InstallManifest, ManifestError};

/// Completion status of a callback or request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Success,
    InvalidParameter,
    NotSupported,
    BufferTooSmall,
    InsufficientResources,
    ConflictingAddresses,
    DeviceConfigurationError,
    Unsuccessful,
}

impl Status {
    pub fn is_success(self) -> bool {
        self == Status::Success
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Success => "STATUS_SUCCESS",
            Status::InvalidParameter => "STATUS_INVALID_PARAMETER",
            Status::NotSupported => "STATUS_NOT_SUPPORTED",
            Status::BufferTooSmall => "STATUS_BUFFER_TOO_SMALL",
            Status::InsufficientResources => "STATUS_INSUFFICIENT_RESOURCES",
            Status::ConflictingAddresses => "STATUS_CONFLICTING_ADDRESSES",
            Status::DeviceConfigurationError => "STATUS_DEVICE_CONFIGURATION_ERROR",
            Status::Unsuccessful => "STATUS_UNSUCCESSFUL",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceLifecycleState {
    Absent,
    Added,
    HardwarePrepared,
    Started,
    Removed,
}

impl DeviceLifecycleState {
    pub fn can_transition_to(self, next: DeviceLifecycleState) -> bool {
        use DeviceLifecycleState::*;
        matches!(
            (self, next),
            (Absent, Added)
                | (Added, HardwarePrepared)
                | (HardwarePrepared, Started)
                | (Started, Removed)
                | (Removed, Absent)
                // failed start
                | (Added, Removed)
                | (HardwarePrepared, Removed)
        )
    }
}

impl fmt::Display for DeviceLifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Callback {
    DriverEntry,
    EvtDeviceAdd,
    EvtPrepareHardware,
    EvtReleaseHardware,
    EvtIoDeviceControl,
}

impl Callback {
    pub fn name(self) -> &'static str {
        match self {
            Callback::DriverEntry => "driver_entry",
            Callback::EvtDeviceAdd => "evt_device_add",
            Callback::EvtPrepareHardware => "evt_prepare_hardware",
            Callback::EvtReleaseHardware => "evt_release_hardware",
            Callback::EvtIoDeviceControl => "evt_io_device_control",
        }
    }

    /// PnP callbacks run at passive level and are conventionally pageable;
    /// the I/O callback is resident.
    fn default_attributes(self) -> RoutineAttributes {
        match self {
            Callback::EvtIoDeviceControl => RoutineAttributes::nonpaged(self.name()),
            _ => RoutineAttributes::paged(self.name()),
        }
    }
}

impl fmt::Display for Callback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueueKind {
    Read,
    Write,
    IoControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MajorFunction {
    Read,
    Write,
    DeviceControl,
}

impl MajorFunction {
    fn queue_kind(self) -> QueueKind {
        match self {
            MajorFunction::Read => QueueKind::Read,
            MajorFunction::Write => QueueKind::Write,
            MajorFunction::DeviceControl => QueueKind::IoControl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRequest {
    pub major: MajorFunction,
    pub ctl_code: u32,
    pub input: Vec<u8>,
    pub output_len: usize,
}

impl IoRequest {
    pub fn device_control(ctl_code: u32, input: Vec<u8>, output_len: usize) -> Self {
        Self {
            major: MajorFunction::DeviceControl,
            ctl_code,
            input,
            output_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoResponse {
    pub status: Status,
    pub output: Vec<u8>,
    pub bytes_returned: usize,
}

impl IoResponse {
    pub fn success(output: Vec<u8>) -> Self {
        Self {
            status: Status::Success,
            bytes_returned: output.len(),
            output,
        }
    }

    pub fn error(status: Status) -> Self {
        Self {
            status,
            output: Vec::new(),
            bytes_returned: 0,
        }
    }
}

#[derive(Debug)]
pub struct IoQueue {
    pub kind: QueueKind,
    pub dispatch_irql: Irql,
    pub pending: VecDeque<IoRequest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DriverHandle(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QueueHandle {
    pub device: DeviceId,
    pub kind: QueueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameworkError {
    #[error("missing callback {0}")]
    MissingCallback(&'static str),
    #[error("no driver for hardware id {0:?}")]
    NoDriver(String),
    #[error("{device}: illegal transition from {from} on {event}")]
    IllegalTransition {
        device: DeviceId,
        from: DeviceLifecycleState,
        event: &'static str,
    },
    #[error("{device} failed to start: {callback} returned {status}")]
    StartFailed {
        device: DeviceId,
        callback: Callback,
        status: Status,
        trace: Vec<Callback>,
    },
    #[error("{0} is not started")]
    DeviceNotStarted(DeviceId),
    #[error("{0:?} queue already exists")]
    DuplicateQueueKind(QueueKind),
    #[error("no queue accepts {0:?} requests")]
    NoQueueForRequest(MajorFunction),
    #[error("interface {0} already registered")]
    DuplicateInterface(Guid),
    #[error("no interface registered for {0}")]
    NotFound(Guid),
    #[error("bugcheck: {0}")]
    Bugcheck(Box<Bugcheck>),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type DriverEntryFn = Box<dyn FnMut() -> Status>;
pub type DeviceAddFn = Box<dyn FnMut(&mut DeviceInit<'_>) -> Status>;
pub type PrepareHardwareFn = Box<dyn FnMut(&mut DeviceContext<'_>, &[BarAssignment]) -> Status>;
pub type ReleaseHardwareFn = Box<dyn FnMut(&mut DeviceContext<'_>) -> Status>;
pub type IoDeviceControlFn = Box<dyn FnMut(&mut DeviceContext<'_>, &IoRequest) -> IoResponse>;

/// Callbacks a driver hands to [`Framework::register_driver`].
pub struct DriverCallbacks {
    /// Arriving devices with this hardware id bind to the driver.
    pub hardware_id: String,
    pub driver_entry: Option<DriverEntryFn>,
    pub evt_device_add: Option<DeviceAddFn>,
    pub evt_prepare_hardware: Option<PrepareHardwareFn>,
    pub evt_release_hardware: Option<ReleaseHardwareFn>,
    pub evt_io_device_control: Option<IoDeviceControlFn>,
    pub attributes: BTreeMap<Callback, RoutineAttributes>,
}

impl DriverCallbacks {
    pub fn new(hardware_id: impl Into<String>) -> Self {
        Self {
            hardware_id: hardware_id.into(),
            driver_entry: None,
            evt_device_add: None,
            evt_prepare_hardware: None,
            evt_release_hardware: None,
            evt_io_device_control: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn attributes(&self, cb: Callback) -> RoutineAttributes {
        self.attributes
            .get(&cb)
            .cloned()
            .unwrap_or_else(|| cb.default_attributes())
    }

    fn validate(&self) -> Result<(), FrameworkError> {
        if self.evt_device_add.is_none() {
            return Err(FrameworkError::MissingCallback(Callback::EvtDeviceAdd.name()));
        }
        if self.evt_prepare_hardware.is_none() {
            return Err(FrameworkError::MissingCallback(Callback::EvtPrepareHardware.name()));
        }
        if self.evt_release_hardware.is_none() {
            return Err(FrameworkError::MissingCallback(Callback::EvtReleaseHardware.name()));
        }
        Ok(())
    }
}

type ContextSlot = Option<Box<dyn Any>>;

/// What a callback sees of its device: the kernel and the driver's
/// per-device context.
pub struct DeviceContext<'a> {
    pub kernel: &'a mut Kernel,
    device: DeviceId,
    slot: &'a mut ContextSlot,
}

impl<'a> DeviceContext<'a> {
    pub fn new(kernel: &'a mut Kernel, device: DeviceId, slot: &'a mut ContextSlot) -> Self {
        Self { kernel, device, slot }
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn context<T: 'static>(&mut self) -> Option<&mut T> {
        self.slot.as_mut().and_then(|b| b.downcast_mut())
    }

    pub fn set_context<T: 'static>(&mut self, value: T) {
        *self.slot = Some(Box::new(value));
    }
}

/// Handed to `evt_device_add`: create queues, register interfaces and set up
/// the device context.
pub struct DeviceInit<'a> {
    device: DeviceId,
    queues: &'a mut Vec<IoQueue>,
    directory: &'a mut InterfaceDirectory,
    interfaces: &'a mut Vec<Guid>,
    slot: &'a mut ContextSlot,
    has_io_control: bool,
}

impl DeviceInit<'_> {
    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn create_queue(&mut self, kind: QueueKind, dispatch_irql: Irql) -> Result<QueueHandle, FrameworkError> {
        add_queue(self.queues, self.device, kind, dispatch_irql, self.has_io_control)
    }

    pub fn register_device_interface(&mut self, guid: Guid) -> Result<String, FrameworkError> {
        let path = self.directory.register(self.device, guid)?;
        self.interfaces.push(guid);
        Ok(path)
    }

    pub fn set_context<T: 'static>(&mut self, value: T) {
        *self.slot = Some(Box::new(value));
    }
}

fn add_queue(
    queues: &mut Vec<IoQueue>,
    device: DeviceId,
    kind: QueueKind,
    dispatch_irql: Irql,
    has_io_control: bool,
) -> Result<QueueHandle, FrameworkError> {
    if queues.iter().any(|q| q.kind == kind) {
        return Err(FrameworkError::DuplicateQueueKind(kind));
    }
    if kind == QueueKind::IoControl && !has_io_control {
        return Err(FrameworkError::MissingCallback(Callback::EvtIoDeviceControl.name()));
    }
    queues.push(IoQueue {
        kind,
        dispatch_irql,
        pending: VecDeque::new(),
    });
    Ok(QueueHandle { device, kind })
}

/// Device interfaces by GUID.
#[derive(Debug, Default)]
pub struct InterfaceDirectory {
    entries: BTreeMap<Guid, (DeviceId, String)>,
}

impl InterfaceDirectory {
    pub fn path_for(guid: &Guid) -> String {
        format!("\\\\interface\\{{{guid}}}\\0")
    }

    fn register(&mut self, device: DeviceId, guid: Guid) -> Result<String, FrameworkError> {
        if self.entries.contains_key(&guid) {
            return Err(FrameworkError::DuplicateInterface(guid));
        }
        let path = Self::path_for(&guid);
        self.entries.insert(guid, (device, path.clone()));
        Ok(path)
    }

    fn deregister(&mut self, guid: &Guid) {
        self.entries.remove(guid);
    }

    pub fn lookup(&self, guid: &Guid) -> Result<(DeviceId, &str), FrameworkError> {
        self.entries
            .get(guid)
            .map(|(d, p)| (*d, p.as_str()))
            .ok_or(FrameworkError::NotFound(*guid))
    }

    pub fn device_for_path(&self, path: &str) -> Option<DeviceId> {
        self.entries.values().find(|(_, p)| p == path).map(|(d, _)| *d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub driver: DriverHandle,
    pub device: Option<DeviceId>,
    pub callback: Callback,
}

struct DeviceObject {
    driver: DriverHandle,
    state: DeviceLifecycleState,
    queues: Vec<IoQueue>,
    interfaces: Vec<Guid>,
    context: ContextSlot,
}

pub struct Framework {
    drivers: Vec<DriverCallbacks>,
    devices: BTreeMap<DeviceId, DeviceObject>,
    directory: InterfaceDirectory,
    trace: Vec<TraceEntry>,
    auto_cleanup: bool,
    requests_dispatched: u64,
}

impl Default for Framework {
    fn default() -> Self {
        Self::new()
    }
}

fn run_callback<R>(kernel: &mut Kernel, attrs: &RoutineAttributes, irql: Irql, body: impl FnOnce(&mut Kernel) -> R) -> Result<R, FrameworkError> {
    match kernel.invoke_at_irql(attrs, irql, body)? {
        Outcome::Normal(r) => Ok(r),
        Outcome::Halted(bc) => Err(FrameworkError::Bugcheck(Box::new(bc))),
    }
}

impl Framework {
    pub fn new() -> Self {
        Self {
            drivers: Vec::new(),
            devices: BTreeMap::new(),
            directory: InterfaceDirectory::default(),
            trace: Vec::new(),
            auto_cleanup: true,
            requests_dispatched: 0,
        }
    }

    /// Whether regions a driver leaves mapped at removal are unmapped by the
    /// framework. On by default.
    pub fn set_auto_cleanup(&mut self, on: bool) {
        self.auto_cleanup = on;
    }

    pub fn auto_cleanup(&self) -> bool {
        self.auto_cleanup
    }

    /// Lifecycle callbacks invoked so far, across all drivers and devices.
    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn requests_dispatched(&self) -> u64 {
        self.requests_dispatched
    }

    pub fn interfaces(&self) -> &InterfaceDirectory {
        &self.directory
    }

    pub fn lookup_interface(&self, guid: &Guid) -> Result<(DeviceId, &str), FrameworkError> {
        self.directory.lookup(guid)
    }

    pub fn state(&self, device: DeviceId) -> DeviceLifecycleState {
        self.devices
            .get(&device)
            .map_or(DeviceLifecycleState::Absent, |d| d.state)
    }

    /// Registers a driver and runs its entry routine once.
    pub fn register_driver(&mut self, kernel: &mut Kernel, mut callbacks: DriverCallbacks) -> Result<DriverHandle, FrameworkError> {
        callbacks.validate()?;
        let handle = DriverHandle(self.drivers.len());
        let attrs = callbacks.attributes(Callback::DriverEntry);
        if let Some(entry) = callbacks.driver_entry.as_mut() {
            let status = run_callback(kernel, &attrs, Irql::Passive, |_| entry())?;
            self.trace.push(TraceEntry {
                driver: handle,
                device: None,
                callback: Callback::DriverEntry,
            });
            if !status.is_success() {
                return Err(FrameworkError::StartFailed {
                    device: DeviceId(u32::MAX),
                    callback: Callback::DriverEntry,
                    status,
                    trace: vec![Callback::DriverEntry],
                });
            }
        }
        self.drivers.push(callbacks);
        Ok(handle)
    }

    /// Delivers a PnP event and returns the callbacks it triggered, in order.
    pub fn on_pnp_event(&mut self, kernel: &mut Kernel, event: &PnpEvent) -> Result<Vec<Callback>, FrameworkError> {
        match event {
            PnpEvent::DeviceArrival {
                device,
                hardware_id,
                resources,
            } => self.arrive(kernel, *device, hardware_id, resources),
            PnpEvent::DeviceRemoval { device } => self.remove(kernel, *device),
        }
    }

    fn transition(&mut self, device: DeviceId, next: DeviceLifecycleState) {
        let obj = self.devices.get_mut(&device).expect("device object");
        debug_assert!(obj.state.can_transition_to(next), "{:?} -> {next:?}", obj.state);
        obj.state = next;
    }

    fn record(&mut self, driver: DriverHandle, device: DeviceId, callback: Callback, trace: &mut Vec<Callback>) {
        self.trace.push(TraceEntry {
            driver,
            device: Some(device),
            callback,
        });
        trace.push(callback);
    }

    fn arrive(
        &mut self,
        kernel: &mut Kernel,
        device: DeviceId,
        hardware_id: &str,
        resources: &[BarAssignment],
    ) -> Result<Vec<Callback>, FrameworkError> {
        match self.state(device) {
            DeviceLifecycleState::Absent => {}
            DeviceLifecycleState::Removed => {
                self.transition(device, DeviceLifecycleState::Absent);
                self.devices.remove(&device);
            }
            from => {
                return Err(FrameworkError::IllegalTransition {
                    device,
                    from,
                    event: "DeviceArrival",
                })
            }
        }
        let driver = self
            .drivers
            .iter()
            .position(|d| d.hardware_id.eq_ignore_ascii_case(hardware_id))
            .map(DriverHandle)
            .ok_or_else(|| FrameworkError::NoDriver(hardware_id.to_string()))?;
        let mut trace = Vec::new();

        let mut obj = DeviceObject {
            driver,
            state: DeviceLifecycleState::Absent,
            queues: Vec::new(),
            interfaces: Vec::new(),
            context: None,
        };
        let cbs = &mut self.drivers[driver.0];
        let attrs = cbs.attributes(Callback::EvtDeviceAdd);
        let has_io_control = cbs.evt_io_device_control.is_some();
        let add = cbs.evt_device_add.as_mut().expect("validated at registration");
        let directory = &mut self.directory;
        let status = run_callback(kernel, &attrs, Irql::Passive, |_| {
            add(&mut DeviceInit {
                device,
                queues: &mut obj.queues,
                directory,
                interfaces: &mut obj.interfaces,
                slot: &mut obj.context,
                has_io_control,
            })
        });
        self.record(driver, device, Callback::EvtDeviceAdd, &mut trace);
        let status = match status {
            Ok(s) => s,
            Err(e) => {
                self.withdraw_interfaces(&obj.interfaces);
                return Err(e);
            }
        };
        if !status.is_success() {
            self.withdraw_interfaces(&obj.interfaces);
            return Err(FrameworkError::StartFailed {
                device,
                callback: Callback::EvtDeviceAdd,
                status,
                trace,
            });
        }
        obj.state = DeviceLifecycleState::Added;
        self.devices.insert(device, obj);

        let status = self.invoke_hardware_callback(kernel, device, Callback::EvtPrepareHardware, resources)?;
        self.record(driver, device, Callback::EvtPrepareHardware, &mut trace);
        if !status.is_success() {
            // A failed prepare is undone through the release callback.
            self.invoke_hardware_callback(kernel, device, Callback::EvtReleaseHardware, &[])?;
            self.record(driver, device, Callback::EvtReleaseHardware, &mut trace);
            self.transition(device, DeviceLifecycleState::Removed);
            self.withdraw_device(device);
            return Err(FrameworkError::StartFailed {
                device,
                callback: Callback::EvtPrepareHardware,
                status,
                trace,
            });
        }
        self.transition(device, DeviceLifecycleState::HardwarePrepared);
        self.transition(device, DeviceLifecycleState::Started);
        Ok(trace)
    }

    fn remove(&mut self, kernel: &mut Kernel, device: DeviceId) -> Result<Vec<Callback>, FrameworkError> {
        let state = self.state(device);
        if !matches!(state, DeviceLifecycleState::Started | DeviceLifecycleState::HardwarePrepared) {
            return Err(FrameworkError::IllegalTransition {
                device,
                from: state,
                event: "DeviceRemoval",
            });
        }
        let driver = self.devices[&device].driver;
        let mut trace = Vec::new();
        let status = self.invoke_hardware_callback(kernel, device, Callback::EvtReleaseHardware, &[]);
        self.record(driver, device, Callback::EvtReleaseHardware, &mut trace);
        status?;
        self.transition(device, DeviceLifecycleState::Removed);
        self.withdraw_device(device);
        let leaked = kernel.complete_removal(device)?;
        if self.auto_cleanup {
            for region in &leaked {
                kernel.unmap_io_space(region)?;
            }
        }
        Ok(trace)
    }

    fn withdraw_interfaces(&mut self, guids: &[Guid]) {
        for g in guids {
            self.directory.deregister(g);
        }
    }

    fn withdraw_device(&mut self, device: DeviceId) {
        let obj = self.devices.get_mut(&device).expect("device object");
        let guids = std::mem::take(&mut obj.interfaces);
        obj.queues.clear();
        self.withdraw_interfaces(&guids);
    }

    fn invoke_hardware_callback(
        &mut self,
        kernel: &mut Kernel,
        device: DeviceId,
        which: Callback,
        resources: &[BarAssignment],
    ) -> Result<Status, FrameworkError> {
        let obj = self.devices.get_mut(&device).expect("device object");
        let cbs = &mut self.drivers[obj.driver.0];
        let attrs = cbs.attributes(which);
        let slot = &mut obj.context;
        match which {
            Callback::EvtPrepareHardware => {
                let f = cbs.evt_prepare_hardware.as_mut().expect("validated");
                run_callback(kernel, &attrs, Irql::Passive, |k| {
                    f(&mut DeviceContext::new(k, device, slot), resources)
                })
            }
            Callback::EvtReleaseHardware => {
                let f = cbs.evt_release_hardware.as_mut().expect("validated");
                run_callback(kernel, &attrs, Irql::Passive, |k| f(&mut DeviceContext::new(k, device, slot)))
            }
            other => unreachable!("{other} is not a hardware callback"),
        }
    }

    pub fn create_queue(&mut self, device: DeviceId, kind: QueueKind, dispatch_irql: Irql) -> Result<QueueHandle, FrameworkError> {
        let obj = match self.devices.get_mut(&device) {
            Some(o) if !matches!(o.state, DeviceLifecycleState::Absent | DeviceLifecycleState::Removed) => o,
            _ => {
                return Err(FrameworkError::IllegalTransition {
                    device,
                    from: self.state(device),
                    event: "create_queue",
                })
            }
        };
        let has_io_control = self.drivers[obj.driver.0].evt_io_device_control.is_some();
        add_queue(&mut obj.queues, device, kind, dispatch_irql, has_io_control)
    }

    pub fn register_device_interface(&mut self, device: DeviceId, guid: Guid) -> Result<String, FrameworkError> {
        let obj = match self.devices.get_mut(&device) {
            Some(o) if !matches!(o.state, DeviceLifecycleState::Absent | DeviceLifecycleState::Removed) => o,
            _ => {
                return Err(FrameworkError::IllegalTransition {
                    device,
                    from: self.state(device),
                    event: "register_device_interface",
                })
            }
        };
        let path = self.directory.register(device, guid)?;
        obj.interfaces.push(guid);
        Ok(path)
    }

    pub fn queue_irql(&self, device: DeviceId, kind: QueueKind) -> Option<Irql> {
        self.devices
            .get(&device)?
            .queues
            .iter()
            .find(|q| q.kind == kind)
            .map(|q| q.dispatch_irql)
    }

    /// Queues `request` on the device's matching queue and dispatches the
    /// queue in FIFO order. I/O control requests run the driver's
    /// `evt_io_device_control` at the queue's dispatch IRQL.
    pub fn dispatch_request(&mut self, kernel: &mut Kernel, device: DeviceId, request: IoRequest) -> Result<IoResponse, FrameworkError> {
        let obj = match self.devices.get_mut(&device) {
            Some(o) if o.state == DeviceLifecycleState::Started => o,
            _ => return Err(FrameworkError::DeviceNotStarted(device)),
        };
        let kind = request.major.queue_kind();
        let queue = obj
            .queues
            .iter_mut()
            .find(|q| q.kind == kind)
            .ok_or(FrameworkError::NoQueueForRequest(request.major))?;
        queue.pending.push_back(request);
        let request = queue.pending.pop_front().expect("just queued");
        let irql = queue.dispatch_irql;
        self.requests_dispatched += 1;

        let cbs = &mut self.drivers[obj.driver.0];
        let response = match kind {
            QueueKind::IoControl => {
                let attrs = cbs.attributes(Callback::EvtIoDeviceControl);
                let f = cbs.evt_io_device_control.as_mut().expect("checked at queue creation");
                let slot = &mut obj.context;
                run_callback(kernel, &attrs, irql, |k| f(&mut DeviceContext::new(k, device, slot), &request))?
            }
            QueueKind::Read | QueueKind::Write => IoResponse::error(Status::NotSupported),
        };
        if response.status.is_success() && response.output.len() > request.output_len {
            return Ok(IoResponse::error(Status::BufferTooSmall));
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AccessWidth, DeviceDescriptor, MmioDevice, MmioFault, SharedDevice};
    use std::cell::{Cell, RefCell};
    use std::rc::Rc;

    struct Null;

    impl MmioDevice for Null {
        fn mmio_read(&mut self, _: u8, _: u64, _: AccessWidth) -> Result<u64, MmioFault> {
            Ok(0)
        }
        fn mmio_write(&mut self, _: u8, _: u64, _: AccessWidth, _: u64) -> Result<(), MmioFault> {
            Ok(())
        }
    }

    fn descriptor() -> DeviceDescriptor {
        DeviceDescriptor {
            id: DeviceId(0),
            hardware_id: "PCI\\TEST".into(),
            bars: vec![BarAssignment { index: 0, phys_base: 0x1000, length: 0x1000 }],
        }
    }

    fn null() -> SharedDevice {
        Rc::new(RefCell::new(Null))
    }

    /// Minimal driver: one I/O control queue at `irql`, echoes its input.
    fn echo_driver(entries: Rc<Cell<u32>>, guid: Option<Guid>, irql: Irql) -> DriverCallbacks {
        let mut cbs = DriverCallbacks::new("pci\\test");
        cbs.driver_entry = Some(Box::new(move || {
            entries.set(entries.get() + 1);
            Status::Success
        }));
        cbs.evt_device_add = Some(Box::new(move |init| {
            init.create_queue(QueueKind::IoControl, irql).unwrap();
            if let Some(g) = guid {
                init.register_device_interface(g).unwrap();
            }
            Status::Success
        }));
        cbs.evt_prepare_hardware = Some(Box::new(|_, _| Status::Success));
        cbs.evt_release_hardware = Some(Box::new(|_| Status::Success));
        cbs.evt_io_device_control = Some(Box::new(|_, req| IoResponse::success(req.input.clone())));
        cbs
    }

    fn started() -> (Kernel, Framework) {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        fw.register_driver(&mut k, echo_driver(Rc::default(), None, Irql::Dispatch)).unwrap();
        for ev in k.plug_device(descriptor(), null()).unwrap() {
            fw.on_pnp_event(&mut k, &ev).unwrap();
        }
        (k, fw)
    }

    #[test]
    fn driver_entry_runs_once_per_registration() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let n = Rc::new(Cell::new(0));
        let a = fw.register_driver(&mut k, echo_driver(n.clone(), None, Irql::Passive)).unwrap();
        assert_eq!(n.get(), 1);
        let m = Rc::new(Cell::new(0));
        let b = fw.register_driver(&mut k, echo_driver(m.clone(), None, Irql::Passive)).unwrap();
        assert_ne!(a, b);
        assert_eq!((n.get(), m.get()), (1, 1));
    }

    #[test]
    fn missing_callback() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let mut cbs = echo_driver(Rc::default(), None, Irql::Passive);
        cbs.evt_device_add = None;
        assert!(matches!(
            fw.register_driver(&mut k, cbs),
            Err(FrameworkError::MissingCallback("evt_device_add"))
        ));
    }

    #[test]
    fn arrival_and_removal_trace() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        fw.register_driver(&mut k, echo_driver(Rc::default(), None, Irql::Passive)).unwrap();
        let ev = k.plug_device(descriptor(), null()).unwrap();
        let trace = fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        assert_eq!(trace, vec![Callback::EvtDeviceAdd, Callback::EvtPrepareHardware]);
        assert_eq!(fw.state(DeviceId(0)), DeviceLifecycleState::Started);
        let ev = k.unplug_device(DeviceId(0)).unwrap();
        let trace = fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        assert_eq!(trace, vec![Callback::EvtReleaseHardware]);
        assert_eq!(fw.state(DeviceId(0)), DeviceLifecycleState::Removed);
        // Second removal is an illegal transition.
        assert!(matches!(
            fw.on_pnp_event(&mut k, &ev[0]),
            Err(FrameworkError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn removal_before_arrival() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let err = fw
            .on_pnp_event(&mut k, &PnpEvent::DeviceRemoval { device: DeviceId(5) })
            .unwrap_err();
        assert!(matches!(
            err,
            FrameworkError::IllegalTransition {
                from: DeviceLifecycleState::Absent,
                ..
            }
        ));
    }

    #[test]
    fn unknown_hardware_id() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let mut d = descriptor();
        d.hardware_id = "USB\\OTHER".into();
        let ev = k.plug_device(d, null()).unwrap();
        assert!(matches!(fw.on_pnp_event(&mut k, &ev[0]), Err(FrameworkError::NoDriver(_))));
    }

    #[test]
    fn queues() {
        let (mut k, mut fw) = started();
        assert_eq!(
            fw.create_queue(DeviceId(0), QueueKind::IoControl, Irql::Passive),
            Err(FrameworkError::DuplicateQueueKind(QueueKind::IoControl))
        );
        fw.create_queue(DeviceId(0), QueueKind::Read, Irql::Passive).unwrap();
        let read = IoRequest {
            major: MajorFunction::Read,
            ctl_code: 0,
            input: vec![],
            output_len: 0,
        };
        assert_eq!(fw.dispatch_request(&mut k, DeviceId(0), read).unwrap().status, Status::NotSupported);
        let write = IoRequest {
            major: MajorFunction::Write,
            ctl_code: 0,
            input: vec![],
            output_len: 0,
        };
        assert_eq!(
            fw.dispatch_request(&mut k, DeviceId(0), write),
            Err(FrameworkError::NoQueueForRequest(MajorFunction::Write))
        );
        assert!(fw.create_queue(DeviceId(9), QueueKind::Read, Irql::Passive).is_err());
    }

    #[test]
    fn io_control_not_routed_to_read_queue() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let mut cbs = echo_driver(Rc::default(), None, Irql::Passive);
        cbs.evt_device_add = Some(Box::new(|init| {
            init.create_queue(QueueKind::Read, Irql::Passive).unwrap();
            Status::Success
        }));
        fw.register_driver(&mut k, cbs).unwrap();
        let ev = k.plug_device(descriptor(), null()).unwrap();
        fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        assert_eq!(
            fw.dispatch_request(&mut k, DeviceId(0), IoRequest::device_control(1, vec![], 0)),
            Err(FrameworkError::NoQueueForRequest(MajorFunction::DeviceControl))
        );
    }

    #[test]
    fn io_control_queue_needs_callback() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let seen = Rc::new(RefCell::new(None));
        let mut cbs = echo_driver(Rc::default(), None, Irql::Passive);
        cbs.evt_io_device_control = None;
        let s = seen.clone();
        cbs.evt_device_add = Some(Box::new(move |init| {
            *s.borrow_mut() = Some(init.create_queue(QueueKind::IoControl, Irql::Passive));
            Status::Success
        }));
        fw.register_driver(&mut k, cbs).unwrap();
        let ev = k.plug_device(descriptor(), null()).unwrap();
        fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        assert_eq!(
            seen.borrow_mut().take(),
            Some(Err(FrameworkError::MissingCallback("evt_io_device_control")))
        );
    }

    #[test]
    fn dispatch_rules() {
        let (mut k, mut fw) = started();
        let req = IoRequest::device_control(7, vec![1, 2, 3], 3);
        let resp = fw.dispatch_request(&mut k, DeviceId(0), req).unwrap();
        assert_eq!(resp, IoResponse::success(vec![1, 2, 3]));
        let small = IoRequest::device_control(7, vec![1, 2, 3], 2);
        assert_eq!(
            fw.dispatch_request(&mut k, DeviceId(0), small).unwrap().status,
            Status::BufferTooSmall
        );
        assert_eq!(
            fw.dispatch_request(&mut k, DeviceId(1), IoRequest::device_control(7, vec![], 0)),
            Err(FrameworkError::DeviceNotStarted(DeviceId(1)))
        );
        assert_eq!(fw.requests_dispatched(), 2);
    }

    #[test]
    fn pageable_io_callback_at_dispatch_bugchecks() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let mut cbs = echo_driver(Rc::default(), None, Irql::Dispatch);
        cbs.attributes.insert(
            Callback::EvtIoDeviceControl,
            RoutineAttributes::paged("evt_io_device_control"),
        );
        fw.register_driver(&mut k, cbs).unwrap();
        let ev = k.plug_device(descriptor(), null()).unwrap();
        fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        match fw.dispatch_request(&mut k, DeviceId(0), IoRequest::device_control(1, vec![], 0)) {
            Err(FrameworkError::Bugcheck(bc)) => {
                assert_eq!(bc.code, crate::kernel::BugcheckCode::PagedCodeAtElevatedIrql)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            fw.dispatch_request(&mut k, DeviceId(0), IoRequest::device_control(1, vec![], 0)),
            Err(FrameworkError::Kernel(KernelError::KernelHalted))
        );
    }

    #[test]
    fn interface_directory() {
        let mut k = Kernel::new();
        let mut fw = Framework::new();
        let g = Guid::generate(Some(1));
        fw.register_driver(&mut k, echo_driver(Rc::default(), Some(g), Irql::Passive)).unwrap();
        let ev = k.plug_device(descriptor(), null()).unwrap();
        fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        let (dev, path) = fw.lookup_interface(&g).unwrap();
        assert_eq!(dev, DeviceId(0));
        assert_eq!(path, format!("\\\\interface\\{{{g}}}\\0"));
        assert_eq!(
            fw.register_device_interface(DeviceId(0), g),
            Err(FrameworkError::DuplicateInterface(g))
        );
        let other = Guid::generate(Some(2));
        assert_eq!(fw.lookup_interface(&other), Err(FrameworkError::NotFound(other)));

        let ev = k.unplug_device(DeviceId(0)).unwrap();
        fw.on_pnp_event(&mut k, &ev[0]).unwrap();
        assert_eq!(fw.lookup_interface(&g), Err(FrameworkError::NotFound(g)));
        assert!(fw.register_device_interface(DeviceId(0), g).is_err());
    }

    #[test]
    fn lifecycle_transitions() {
        use DeviceLifecycleState::*;
        assert!(Absent.can_transition_to(Added));
        assert!(Started.can_transition_to(Removed));
        assert!(Removed.can_transition_to(Absent));
        assert!(!Absent.can_transition_to(Started));
        assert!(!Removed.can_transition_to(Started));
    }
}
