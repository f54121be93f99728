//! The Spw_PCIe driver: maps BAR0/BAR2 on prepare, unmaps them on release
//! and serves the seven Spw control words from one I/O control queue.

use crate::device::{whole_frames_prefix, REG_FIFO_CONSUME, REG_FIFO_LEVEL, REG_LINK_ENABLE, REG_LINK_RESET, REG_PORT_COUNT, REG_PORT_STATUS};
use crate::ioctl::{decode_command, encode_response, Guid, ProtocolError, SpwCommand, SpwResponse};
use crate::kernel::{AccessWidth, BarAssignment, IoRegion, Irql, Kernel, KernelError, MmioFault, RoutineAttributes};
use crate::wdf::{Callback, DeviceContext, DriverCallbacks, IoRequest, IoResponse, QueueKind, Status};

pub const SPW_HARDWARE_ID: &str = "PCI\\VEN_1172&DEV_5057";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpwDriverConfig {
    pub hardware_id: String,
    pub interface_guid: Guid,
    pub io_queue_irql: Irql,
    /// Marks the I/O control callback pageable. Only safe with a passive
    /// queue; at `Dispatch` the first request bugchecks.
    pub pageable_io_control: bool,
    /// When false, the release callback leaves both BARs mapped.
    pub release_regions: bool,
}

impl SpwDriverConfig {
    pub fn new(interface_guid: Guid) -> Self {
        Self {
            hardware_id: SPW_HARDWARE_ID.to_string(),
            interface_guid,
            io_queue_irql: Irql::Dispatch,
            pageable_io_control: false,
            release_regions: true,
        }
    }
}

/// Per-device state; the regions are live exactly between prepare and release.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpwDeviceContext {
    pub bar0_region: Option<IoRegion>,
    pub bar2_region: Option<IoRegion>,
    pub bar0_phys_base: u64,
    pub interface_guid: Guid,
}

impl SpwDeviceContext {
    pub fn new(interface_guid: Guid) -> Self {
        Self {
            bar0_region: None,
            bar2_region: None,
            bar0_phys_base: 0,
            interface_guid,
        }
    }
}

pub fn spw_driver_callbacks(config: SpwDriverConfig) -> DriverCallbacks {
    let mut cbs = DriverCallbacks::new(config.hardware_id.clone());
    let guid = config.interface_guid;
    let irql = config.io_queue_irql;
    cbs.driver_entry = Some(Box::new(|| Status::Success));
    cbs.evt_device_add = Some(Box::new(move |init| {
        if init.create_queue(QueueKind::IoControl, irql).is_err() {
            return Status::Unsuccessful;
        }
        if init.register_device_interface(guid).is_err() {
            return Status::Unsuccessful;
        }
        init.set_context(SpwDeviceContext::new(guid));
        Status::Success
    }));
    cbs.evt_prepare_hardware = Some(Box::new(spw_evt_prepare_hardware));
    let release = config.release_regions;
    cbs.evt_release_hardware = Some(Box::new(move |ctx| {
        if release {
            spw_evt_release_hardware(ctx)
        } else {
            Status::Success
        }
    }));
    cbs.evt_io_device_control = Some(Box::new(spw_evt_io_device_control));
    if config.pageable_io_control {
        cbs.attributes.insert(
            Callback::EvtIoDeviceControl,
            RoutineAttributes::paged(Callback::EvtIoDeviceControl.name()),
        );
    }
    cbs
}

fn map_status(e: &KernelError) -> Status {
    match e {
        KernelError::Overlap { .. } => Status::ConflictingAddresses,
        KernelError::RangeNotAssigned { .. } => Status::DeviceConfigurationError,
        KernelError::Device(MmioFault::UndefinedRegister) => Status::InvalidParameter,
        _ => Status::Unsuccessful,
    }
}

pub fn spw_evt_prepare_hardware(ctx: &mut DeviceContext<'_>, resources: &[BarAssignment]) -> Status {
    let find = |i: u8| resources.iter().find(|b| b.index == i).copied();
    let (Some(bar0), Some(bar2)) = (find(0), find(2)) else {
        return Status::InsufficientResources;
    };
    let device = ctx.device();
    let bar0_region = match ctx.kernel.map_io_space(device, bar0.phys_base, bar0.length) {
        Ok(r) => r,
        Err(e) => return map_status(&e),
    };
    let bar2_region = match ctx.kernel.map_io_space(device, bar2.phys_base, bar2.length) {
        Ok(r) => r,
        Err(e) => {
            let _ = ctx.kernel.unmap_io_space(&bar0_region);
            return map_status(&e);
        }
    };
    let Some(state) = ctx.context::<SpwDeviceContext>() else {
        return Status::Unsuccessful;
    };
    state.bar0_region = Some(bar0_region);
    state.bar2_region = Some(bar2_region);
    state.bar0_phys_base = bar0.phys_base;
    Status::Success
}

/// Unmaps whatever is mapped; a second call finds nothing and succeeds.
pub fn spw_evt_release_hardware(ctx: &mut DeviceContext<'_>) -> Status {
    let Some(state) = ctx.context::<SpwDeviceContext>() else {
        return Status::Success;
    };
    let regions = [state.bar0_region.take(), state.bar2_region.take()];
    let mut status = Status::Success;
    for region in regions.into_iter().flatten() {
        if ctx.kernel.unmap_io_space(&region).is_err() {
            status = Status::Unsuccessful;
        }
    }
    status
}

pub fn spw_evt_io_device_control(ctx: &mut DeviceContext<'_>, req: &IoRequest) -> IoResponse {
    let cmd = match decode_command(req.ctl_code, &req.input) {
        Ok(c) => c,
        Err(ProtocolError::UnknownControlCode(_)) => return IoResponse::error(Status::NotSupported),
        Err(_) => return IoResponse::error(Status::InvalidParameter),
    };
    if req.output_len < cmd.output_len() {
        return IoResponse::error(Status::BufferTooSmall);
    }
    let Some(state) = ctx.context::<SpwDeviceContext>().cloned() else {
        return IoResponse::error(Status::Unsuccessful);
    };
    let (Some(bar0), Some(bar2)) = (state.bar0_region, state.bar2_region) else {
        return IoResponse::error(Status::Unsuccessful);
    };
    let kernel = &mut *ctx.kernel;
    let result = match cmd {
        SpwCommand::GetBar0Addr => Ok(SpwResponse::Bar0Addr {
            phys: state.bar0_phys_base,
        }),
        SpwCommand::ReadReg { offset, length } => read_reg(kernel, &bar0, offset, length).map(|v| SpwResponse::Register {
            data: v.to_le_bytes()[..length as usize].to_vec(),
        }),
        SpwCommand::WriteReg { offset, length, data } => {
            let mut buf = [0u8; 4];
            buf[..data.len()].copy_from_slice(&data);
            write_reg(kernel, &bar0, offset, length, u32::from_le_bytes(buf)).map(|()| SpwResponse::Written { bytes: length })
        }
        SpwCommand::LinkEnable { port } => link_enable(kernel, &bar0, port).map(|()| SpwResponse::LinkStatus { status: 0 }),
        SpwCommand::LinkReset { port } => link_reset(kernel, &bar0, port).map(|()| SpwResponse::LinkStatus { status: 0 }),
        SpwCommand::PortDiscovery => read_reg(kernel, &bar0, REG_PORT_STATUS, 4).map(|mask| SpwResponse::PortMask { mask }),
        SpwCommand::AcquireData { max_bytes } => {
            acquire(kernel, &bar0, &bar2, max_bytes as usize).map(|frames| SpwResponse::Data { frames })
        }
    };
    match result {
        Ok(resp) => IoResponse::success(encode_response(&resp)),
        Err(status) => IoResponse::error(status),
    }
}

/// Bounds, width and alignment are checked here so that no well-formed
/// request can reach the kernel's fault path.
fn check_register_access(region: &IoRegion, offset: u32, length: u32) -> Result<AccessWidth, Status> {
    let width = AccessWidth::from_bytes(length)
        .filter(|w| *w != AccessWidth::Qword)
        .ok_or(Status::InvalidParameter)?;
    if offset as u64 + length as u64 > region.length || !offset.is_multiple_of(length) {
        return Err(Status::InvalidParameter);
    }
    Ok(width)
}

fn read_reg(kernel: &mut Kernel, bar0: &IoRegion, offset: u32, length: u32) -> Result<u32, Status> {
    let width = check_register_access(bar0, offset, length)?;
    kernel
        .read(bar0, offset as u64, width)
        .map(|v| v as u32)
        .map_err(|e| map_status(&e))
}

fn write_reg(kernel: &mut Kernel, bar0: &IoRegion, offset: u32, length: u32, value: u32) -> Result<(), Status> {
    let width = check_register_access(bar0, offset, length)?;
    kernel
        .write(bar0, offset as u64, width, value as u64)
        .map_err(|e| map_status(&e))
}

fn port_bit(kernel: &mut Kernel, bar0: &IoRegion, port: u32) -> Result<u32, Status> {
    let ports = read_reg(kernel, bar0, REG_PORT_COUNT, 4)?;
    if port == 0 || port > ports {
        return Err(Status::InvalidParameter);
    }
    Ok(1 << (port - 1))
}

fn link_enable(kernel: &mut Kernel, bar0: &IoRegion, port: u32) -> Result<(), Status> {
    let bit = port_bit(kernel, bar0, port)?;
    let current = read_reg(kernel, bar0, REG_LINK_ENABLE, 4)?;
    write_reg(kernel, bar0, REG_LINK_ENABLE, 4, current | bit)
}

fn link_reset(kernel: &mut Kernel, bar0: &IoRegion, port: u32) -> Result<(), Status> {
    let bit = port_bit(kernel, bar0, port)?;
    write_reg(kernel, bar0, REG_LINK_RESET, 4, bit)
}

/// Copies out the longest run of whole frames fitting in `max_bytes` and
/// tells the card to drop them.
fn acquire(kernel: &mut Kernel, bar0: &IoRegion, bar2: &IoRegion, max_bytes: usize) -> Result<Vec<u8>, Status> {
    let level = (read_reg(kernel, bar0, REG_FIFO_LEVEL, 4)? as usize).min(bar2.length as usize);
    let limit = level.min(max_bytes);
    let mut bytes = Vec::with_capacity(limit);
    let mut pos = 0;
    // Headers first, then only the payload bytes that will be returned.
    let mut take = 0;
    while pos + 4 <= limit {
        let len = kernel.read(bar2, pos as u64, AccessWidth::Dword).map_err(|e| map_status(&e))? as usize;
        let next = pos + 4 + len;
        if next > limit {
            break;
        }
        pos = next;
        take = next;
    }
    let mut off = 0;
    while off < take {
        let (w, n) = if take - off >= 4 {
            (AccessWidth::Dword, 4)
        } else {
            (AccessWidth::Byte, 1)
        };
        let v = kernel.read(bar2, off as u64, w).map_err(|e| map_status(&e))?;
        bytes.extend_from_slice(&v.to_le_bytes()[..n]);
        off += n;
    }
    debug_assert_eq!(whole_frames_prefix(&bytes, take), take);
    if take > 0 {
        kernel
            .write(bar0, REG_FIFO_CONSUME as u64, AccessWidth::Dword, take as u64)
            .map_err(|e| map_status(&e))?;
    }
    Ok(bytes)
}
