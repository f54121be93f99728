//! Application layer: finds the driver by interface GUID and talks to it
//! only through device I/O control requests.
//!
//! Each command runs as its own unit: a panic or error inside one command
//! is turned into a `Failure` result and the service carries on.

use std::collections::VecDeque;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Serialize;
use spw_core::device::RegisterSnapshot;
use spw_core::ioctl::{decode_response, encode_command, Guid, SpwCommand, SpwResponse};
use spw_core::kernel::{Bugcheck, KernelError};
use spw_core::net::NodeKind;
use spw_core::testbed::{DeliveredSample, Testbed, TestbedConfig, TestbedError};
use spw_core::wdf::{Callback, DeviceLifecycleState, FrameworkError, InterfaceDirectory, IoRequest, Status};
use thiserror::Error;

/// Samples kept for late subscribers.
pub const SAMPLE_RING: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("no device interface registered for {0}")]
    NotFound(Guid),
    #[error("handle is closed")]
    HandleClosed,
    #[error("device is not started ({0})")]
    DeviceNotStarted(DeviceLifecycleState),
    #[error("no router port {0}")]
    NoSuchPort(u32),
    #[error("{0}")]
    Lifecycle(String),
    #[error(transparent)]
    Testbed(#[from] TestbedError),
}

/// An open interface, as returned by [`ControlService::open_device`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceHandle {
    pub interface_path: String,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FailureReason {
    /// Rejected by the driver, or by the request encoder before submission.
    Status(Status),
    Bugcheck(Bugcheck),
    /// Framework refusal or a panic inside the command.
    Fault(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::Status(s) => f.write_str(s.as_str()),
            FailureReason::Bugcheck(bc) => write!(f, "bugcheck {bc}"),
            FailureReason::Fault(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum CommandStatus {
    Success,
    Failure(FailureReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommandResult {
    pub command: SpwCommand,
    pub status: CommandStatus,
    pub payload: Option<SpwResponse>,
    /// Simulated time spent in the command. Requests complete within the
    /// tick they are issued in.
    pub duration_ticks: u64,
}

impl CommandResult {
    pub fn is_success(&self) -> bool {
        self.status == CommandStatus::Success
    }

    pub fn failure(&self) -> Option<&FailureReason> {
        match &self.status {
            CommandStatus::Failure(r) => Some(r),
            CommandStatus::Success => None,
        }
    }
}

/// One request as it crossed the application/driver boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IoctlRecord {
    pub ctl_code: u32,
    #[serde(serialize_with = "hex_bytes")]
    pub input: Vec<u8>,
    pub output_len: usize,
    pub status: Option<Status>,
    #[serde(serialize_with = "hex_bytes")]
    pub output: Vec<u8>,
}

fn hex_bytes<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&bytes.iter().map(|b| format!("{b:02x}")).collect::<String>())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceInfo {
    pub guid: Guid,
    pub interface_path: Option<String>,
    pub bar0_phys: Option<u64>,
    pub lifecycle: DeviceLifecycleState,
    pub tick: u64,
}

/// Register traffic as counted by the kernel mappings, the card itself and
/// the framework. All three agree while nothing bypasses the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessAudit {
    pub requests_dispatched: u64,
    pub ioctls_recorded: u64,
    pub kernel_reads: u64,
    pub kernel_writes: u64,
    pub card_reads: u64,
    pub card_writes: u64,
}

impl AccessAudit {
    pub fn consistent(&self) -> bool {
        self.kernel_reads == self.card_reads
            && self.kernel_writes == self.card_writes
            && self.requests_dispatched <= self.ioctls_recorded
    }
}

pub struct ControlService {
    testbed: Testbed,
    trace: Vec<IoctlRecord>,
    recent: VecDeque<DeliveredSample>,
    outbox: Vec<DeliveredSample>,
}

impl ControlService {
    pub fn new(config: TestbedConfig) -> Result<Self, ServiceError> {
        Ok(Self {
            testbed: Testbed::new(config)?,
            trace: Vec::new(),
            recent: VecDeque::new(),
            outbox: Vec::new(),
        })
    }

    pub fn guid(&self) -> Guid {
        self.testbed.config().driver.interface_guid
    }

    pub fn router_ports(&self) -> u8 {
        self.testbed.config().topology.router_ports
    }

    pub fn open_device(&self, guid: &Guid) -> Result<DeviceHandle, ServiceError> {
        let (_, path) = self
            .testbed
            .framework()
            .lookup_interface(guid)
            .map_err(|_| ServiceError::NotFound(*guid))?;
        Ok(DeviceHandle {
            interface_path: path.to_string(),
            open: true,
        })
    }

    pub fn close(&self, handle: &mut DeviceHandle) {
        handle.open = false;
    }

    /// Encodes `cmd`, submits it to the driver and decodes the reply.
    pub fn device_io_control(&mut self, handle: &DeviceHandle, cmd: &SpwCommand) -> Result<CommandResult, ServiceError> {
        if !handle.open {
            return Err(ServiceError::HandleClosed);
        }
        if self.testbed.framework().interfaces().device_for_path(&handle.interface_path).is_none() {
            return Err(ServiceError::DeviceNotStarted(self.testbed.lifecycle()));
        }
        let result = |status, payload| CommandResult {
            command: cmd.clone(),
            status,
            payload,
            duration_ticks: 0,
        };
        let (word, input) = match encode_command(cmd) {
            Ok(x) => x,
            Err(_) => return Ok(result(CommandStatus::Failure(FailureReason::Status(Status::InvalidParameter)), None)),
        };
        let request = IoRequest::device_control(word, input.clone(), cmd.output_len());
        let started = self.testbed.now();
        let testbed = &mut self.testbed;
        let outcome = catch_unwind(AssertUnwindSafe(|| testbed.dispatch(request)));
        let mut record = IoctlRecord {
            ctl_code: word,
            input,
            output_len: cmd.output_len(),
            status: None,
            output: Vec::new(),
        };
        let status = match outcome {
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                CommandStatus::Failure(FailureReason::Fault(format!("command aborted: {msg}")))
            }
            Ok(Err(FrameworkError::Bugcheck(bc))) => CommandStatus::Failure(FailureReason::Bugcheck(*bc)),
            Ok(Err(FrameworkError::Kernel(KernelError::KernelHalted))) => {
                let bc = self.testbed.kernel().bugcheck().cloned().expect("halted kernel has a bugcheck");
                CommandStatus::Failure(FailureReason::Bugcheck(bc))
            }
            Ok(Err(e)) => CommandStatus::Failure(FailureReason::Fault(e.to_string())),
            Ok(Ok(resp)) => {
                record.status = Some(resp.status);
                record.output = resp.output.clone();
                if resp.status.is_success() {
                    match decode_response(cmd, &resp.output) {
                        Ok(payload) => {
                            self.trace.push(record);
                            return Ok(CommandResult {
                                duration_ticks: self.testbed.now() - started,
                                ..result(CommandStatus::Success, Some(payload))
                            });
                        }
                        Err(e) => CommandStatus::Failure(FailureReason::Fault(format!("malformed reply: {e}"))),
                    }
                } else {
                    CommandStatus::Failure(FailureReason::Status(resp.status))
                }
            }
        };
        self.trace.push(record);
        Ok(result(status, None))
    }

    /// Open, one request, close: the per-command flow of the control
    /// application.
    pub fn execute(&mut self, cmd: &SpwCommand) -> Result<CommandResult, ServiceError> {
        let mut handle = self.open_device(&self.guid())?;
        let r = self.device_io_control(&handle, cmd);
        self.close(&mut handle);
        r
    }

    /// Rejects ports outside the router before anything is sent.
    pub fn check_port(&self, port: u32) -> Result<(), ServiceError> {
        if port == 0 || port > self.router_ports() as u32 {
            Err(ServiceError::NoSuchPort(port))
        } else {
            Ok(())
        }
    }

    /// Enables every router port with something attached, then runs `ticks`.
    pub fn bring_up(&mut self, ticks: u64) -> Result<(), ServiceError> {
        let ports: Vec<u32> = {
            let topo = &self.testbed.config().topology;
            (1..=topo.router_ports)
                .filter(|p| topo.attachment(*p) != NodeKind::Empty)
                .map(u32::from)
                .collect()
        };
        for port in ports {
            let r = self.execute(&SpwCommand::LinkEnable { port })?;
            if let Some(reason) = r.failure() {
                return Err(ServiceError::Lifecycle(format!("enable link {port}: {reason}")));
            }
        }
        self.tick(ticks);
        Ok(())
    }

    pub fn tick(&mut self, n: u64) -> Vec<DeliveredSample> {
        let delivered = self.testbed.tick(n);
        for s in &delivered {
            if self.recent.len() == SAMPLE_RING {
                self.recent.pop_front();
            }
            self.recent.push_back(*s);
        }
        self.outbox.extend_from_slice(&delivered);
        delivered
    }

    pub fn now(&self) -> u64 {
        self.testbed.now()
    }

    /// Samples delivered since the last call.
    pub fn take_outbox(&mut self) -> Vec<DeliveredSample> {
        std::mem::take(&mut self.outbox)
    }

    pub fn recent_samples(&self) -> impl Iterator<Item = &DeliveredSample> {
        self.recent.iter()
    }

    pub fn inject(&mut self, x: i32, y: i32, z: i32) {
        self.testbed.inject_sample(x, y, z);
    }

    pub fn clear_injection(&mut self) {
        self.testbed.clear_injection();
    }

    pub fn plug(&mut self) -> Result<Vec<Callback>, ServiceError> {
        self.testbed.plug().map_err(lifecycle_error)
    }

    pub fn unplug(&mut self) -> Result<Vec<Callback>, ServiceError> {
        self.testbed.unplug().map_err(lifecycle_error)
    }

    pub fn lifecycle(&self) -> DeviceLifecycleState {
        self.testbed.lifecycle()
    }

    pub fn info(&self) -> DeviceInfo {
        let lifecycle = self.testbed.lifecycle();
        let started = lifecycle == DeviceLifecycleState::Started;
        let bar0_phys = self
            .testbed
            .kernel()
            .descriptor(self.testbed.device())
            .filter(|_| started)
            .and_then(|d| d.bars.iter().find(|b| b.index == 0))
            .map(|b| b.phys_base);
        DeviceInfo {
            guid: self.guid(),
            interface_path: started.then(|| InterfaceDirectory::path_for(&self.guid())),
            bar0_phys,
            lifecycle,
            tick: self.testbed.now(),
        }
    }

    pub fn trace(&self) -> &[IoctlRecord] {
        &self.trace
    }

    pub fn audit(&self) -> AccessAudit {
        let k = self.testbed.kernel().stats();
        let d = self.testbed.card_diagnostics();
        AccessAudit {
            requests_dispatched: self.testbed.framework().requests_dispatched(),
            ioctls_recorded: self.trace.len() as u64,
            kernel_reads: k.region_reads,
            kernel_writes: k.region_writes,
            card_reads: d.mmio_reads,
            card_writes: d.mmio_writes,
        }
    }

    /// Inspection only: reads card state without bus traffic.
    pub fn register_snapshot(&self) -> RegisterSnapshot {
        self.testbed.register_snapshot()
    }

    /// Inspection only: current FIFO bytes in BAR2.
    pub fn fifo_bytes(&self) -> Vec<u8> {
        self.testbed.card().fifo_bytes().to_vec()
    }

    pub fn testbed(&self) -> &Testbed {
        &self.testbed
    }
}

fn lifecycle_error(e: TestbedError) -> ServiceError {
    match e {
        TestbedError::Framework(FrameworkError::IllegalTransition { .. })
        | TestbedError::Kernel(KernelError::DuplicateDevice(_))
        | TestbedError::Kernel(KernelError::NoSuchDevice(_)) => ServiceError::Lifecycle(e.to_string()),
        other => ServiceError::Testbed(other),
    }
}

/// Little-endian integer from 1 to 4 response bytes.
pub fn le_value(data: &[u8]) -> u32 {
    let mut b = [0u8; 4];
    let n = data.len().min(4);
    b[..n].copy_from_slice(&data[..n]);
    u32::from_le_bytes(b)
}
