//! Deterministic stand-in for the parts of the kernel a PnP driver touches:
//! IRQL, pageable routines, I/O-space mappings and device arrival/removal.
//!
//! A fault that would crash a real kernel (paged code at `Dispatch`, an
//! access outside a mapping, an access after unmap) is recorded as a
//! [`Bugcheck`] and halts this instance. Every later call returns
//! [`KernelError::KernelHalted`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Irql {
    Passive = 0,
    Apc = 1,
    Dispatch = 2,
}

impl Irql {
    pub const ALL: [Irql; 3] = [Irql::Passive, Irql::Apc, Irql::Dispatch];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

/// One memory BAR as assigned by the PnP manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarAssignment {
    pub index: u8,
    pub phys_base: u64,
    pub length: u64,
}

impl BarAssignment {
    fn contains(&self, base: u64, length: u64) -> bool {
        base >= self.phys_base
            && base
                .checked_add(length)
                .is_some_and(|end| end <= self.phys_base + self.length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceDescriptor {
    pub id: DeviceId,
    pub hardware_id: String,
    pub bars: Vec<BarAssignment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PnpEvent {
    DeviceArrival {
        device: DeviceId,
        hardware_id: String,
        resources: Vec<BarAssignment>,
    },
    DeviceRemoval {
        device: DeviceId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessWidth {
    Byte = 1,
    Word = 2,
    Dword = 4,
    Qword = 8,
}

impl AccessWidth {
    pub const ALL: [AccessWidth; 4] = [
        AccessWidth::Byte,
        AccessWidth::Word,
        AccessWidth::Dword,
        AccessWidth::Qword,
    ];

    pub fn from_bytes(n: u32) -> Option<Self> {
        match n {
            1 => Some(AccessWidth::Byte),
            2 => Some(AccessWidth::Word),
            4 => Some(AccessWidth::Dword),
            8 => Some(AccessWidth::Qword),
            _ => None,
        }
    }

    pub fn bytes(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write(u64),
}

/// Fault reported by a device's MMIO handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MmioFault {
    #[error("offset outside the BAR")]
    OutOfRange,
    #[error("no register at offset")]
    UndefinedRegister,
    #[error("access wider than the register")]
    UnsupportedWidth,
}

/// MMIO side of an emulated device; offsets are relative to the BAR.
pub trait MmioDevice {
    fn mmio_read(&mut self, bar: u8, offset: u64, width: AccessWidth) -> Result<u64, MmioFault>;
    fn mmio_write(&mut self, bar: u8, offset: u64, width: AccessWidth, value: u64) -> Result<(), MmioFault>;
}

pub type SharedDevice = Rc<RefCell<dyn MmioDevice>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionHandle(pub u64);

/// A live or released I/O-space mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoRegion {
    pub handle: RegionHandle,
    pub device: DeviceId,
    pub phys_base: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutineAttributes {
    pub name: String,
    pub pageable: bool,
}

impl RoutineAttributes {
    pub fn paged(name: impl Into<String>) -> Self {
        Self { name: name.into(), pageable: true }
    }

    pub fn nonpaged(name: impl Into<String>) -> Self {
        Self { name: name.into(), pageable: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BugcheckCode {
    PagedCodeAtElevatedIrql,
    OutOfBoundsAccess,
    AccessAfterRelease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bugcheck {
    pub code: BugcheckCode,
    pub detail: String,
    pub routine: Option<String>,
    pub irql: Irql,
    pub address: Option<u64>,
}

impl fmt::Display for Bugcheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {} at {:?}", self.code, self.detail, self.irql)?;
        if let Some(r) = &self.routine {
            write!(f, " in {r}")?;
        }
        if let Some(a) = self.address {
            write!(f, " address {a:#x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("kernel halted")]
    KernelHalted,
    #[error("bugcheck: {0}")]
    Bugcheck(Box<Bugcheck>),
    #[error("range {base:#x}+{length:#x} not assigned to {device}")]
    RangeNotAssigned { device: DeviceId, base: u64, length: u64 },
    #[error("range {base:#x}+{length:#x} overlaps a live mapping")]
    Overlap { base: u64, length: u64 },
    #[error("device {0} already present")]
    DuplicateDevice(DeviceId),
    #[error("device {0} not present")]
    NoSuchDevice(DeviceId),
    #[error("descriptor for {0} has no BAR")]
    NoResources(DeviceId),
    #[error("unknown region {0:?}")]
    NoSuchRegion(RegionHandle),
    #[error("region {0:?} already released")]
    AlreadyReleased(RegionHandle),
    #[error("device rejected access: {0}")]
    Device(MmioFault),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome<R> {
    Normal(R),
    Halted(Bugcheck),
}

impl<R> Outcome<R> {
    pub fn is_halted(&self) -> bool {
        matches!(self, Outcome::Halted(_))
    }
}

struct Slot {
    descriptor: DeviceDescriptor,
    handler: SharedDevice,
    instance: u64,
    present: bool,
}

struct RegionRecord {
    region: IoRegion,
    bar: BarAssignment,
    instance: u64,
    released: bool,
}

/// Access counters, used to check that all device traffic goes through
/// kernel mappings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub region_reads: u64,
    pub region_writes: u64,
    pub regions_mapped: u64,
    pub regions_released: u64,
}

pub struct Kernel {
    slots: BTreeMap<DeviceId, Slot>,
    regions: BTreeMap<RegionHandle, RegionRecord>,
    leaks: Vec<(DeviceId, IoRegion)>,
    next_handle: u64,
    next_instance: u64,
    irql: Irql,
    routine_stack: Vec<String>,
    bugcheck: Option<Bugcheck>,
    stats: KernelStats,
}

impl Default for Kernel {
    fn default() -> Self {
        Self::new()
    }
}

impl Kernel {
    pub fn new() -> Self {
        Self {
            slots: BTreeMap::new(),
            regions: BTreeMap::new(),
            leaks: Vec::new(),
            next_handle: 1,
            next_instance: 1,
            irql: Irql::Passive,
            routine_stack: Vec::new(),
            bugcheck: None,
            stats: KernelStats::default(),
        }
    }

    pub fn is_halted(&self) -> bool {
        self.bugcheck.is_some()
    }

    pub fn bugcheck(&self) -> Option<&Bugcheck> {
        self.bugcheck.as_ref()
    }

    pub fn current_irql(&self) -> Irql {
        self.irql
    }

    pub fn stats(&self) -> KernelStats {
        self.stats
    }

    fn ensure_running(&self) -> Result<(), KernelError> {
        if self.is_halted() {
            Err(KernelError::KernelHalted)
        } else {
            Ok(())
        }
    }

    fn raise_bugcheck(&mut self, code: BugcheckCode, detail: String, address: Option<u64>) -> KernelError {
        let bc = Bugcheck {
            code,
            detail,
            routine: self.routine_stack.last().cloned(),
            irql: self.irql,
            address,
        };
        self.bugcheck = Some(bc.clone());
        KernelError::Bugcheck(Box::new(bc))
    }

    /// Announces a new device; the returned events go to the driver framework.
    pub fn plug_device(
        &mut self,
        descriptor: DeviceDescriptor,
        handler: SharedDevice,
    ) -> Result<Vec<PnpEvent>, KernelError> {
        self.ensure_running()?;
        let id = descriptor.id;
        if self.slots.get(&id).is_some_and(|s| s.present) {
            return Err(KernelError::DuplicateDevice(id));
        }
        if descriptor.bars.is_empty() {
            return Err(KernelError::NoResources(id));
        }
        let instance = self.next_instance;
        self.next_instance += 1;
        let event = PnpEvent::DeviceArrival {
            device: id,
            hardware_id: descriptor.hardware_id.clone(),
            resources: descriptor.bars.clone(),
        };
        self.slots.insert(
            id,
            Slot {
                descriptor,
                handler,
                instance,
                present: true,
            },
        );
        Ok(vec![event])
    }

    /// Surprise-free removal. BARs stop being mappable immediately; existing
    /// mappings stay live until the driver releases them.
    pub fn unplug_device(&mut self, id: DeviceId) -> Result<Vec<PnpEvent>, KernelError> {
        self.ensure_running()?;
        match self.slots.get_mut(&id) {
            Some(slot) if slot.present => {
                slot.present = false;
                Ok(vec![PnpEvent::DeviceRemoval { device: id }])
            }
            _ => Err(KernelError::NoSuchDevice(id)),
        }
    }

    pub fn is_present(&self, id: DeviceId) -> bool {
        self.slots.get(&id).is_some_and(|s| s.present)
    }

    pub fn descriptor(&self, id: DeviceId) -> Option<&DeviceDescriptor> {
        self.slots.get(&id).map(|s| &s.descriptor)
    }

    /// Called once the driver's release callback has returned. Any region of
    /// the removed instance that is still live is recorded as a leak.
    pub fn complete_removal(&mut self, id: DeviceId) -> Result<Vec<IoRegion>, KernelError> {
        self.ensure_running()?;
        let instance = self
            .slots
            .get(&id)
            .filter(|s| !s.present)
            .map(|s| s.instance)
            .ok_or(KernelError::NoSuchDevice(id))?;
        let leaked: Vec<IoRegion> = self
            .regions
            .values()
            .filter(|r| r.instance == instance && !r.released)
            .map(|r| r.region)
            .collect();
        self.leaks.extend(leaked.iter().map(|r| (id, *r)));
        Ok(leaked)
    }

    /// Maps `[phys_base, phys_base + length)` of a BAR assigned to `device`.
    pub fn map_io_space(&mut self, device: DeviceId, phys_base: u64, length: u64) -> Result<IoRegion, KernelError> {
        self.ensure_running()?;
        let not_assigned = KernelError::RangeNotAssigned {
            device,
            base: phys_base,
            length,
        };
        let slot = match self.slots.get(&device) {
            Some(s) if s.present => s,
            _ => return Err(not_assigned),
        };
        if length == 0 {
            return Err(not_assigned);
        }
        let bar = *slot
            .descriptor
            .bars
            .iter()
            .find(|b| b.contains(phys_base, length))
            .ok_or(not_assigned)?;
        let instance = slot.instance;
        let end = phys_base + length;
        let overlaps = self.regions.values().any(|r| {
            r.instance == instance
                && !r.released
                && r.region.phys_base < end
                && phys_base < r.region.phys_base + r.region.length
        });
        if overlaps {
            return Err(KernelError::Overlap { base: phys_base, length });
        }
        let handle = RegionHandle(self.next_handle);
        self.next_handle += 1;
        let region = IoRegion {
            handle,
            device,
            phys_base,
            length,
        };
        self.regions.insert(
            handle,
            RegionRecord {
                region,
                bar,
                instance,
                released: false,
            },
        );
        self.stats.regions_mapped += 1;
        Ok(region)
    }

    pub fn unmap_io_space(&mut self, region: &IoRegion) -> Result<(), KernelError> {
        self.ensure_running()?;
        let rec = self
            .regions
            .get_mut(&region.handle)
            .ok_or(KernelError::NoSuchRegion(region.handle))?;
        if rec.released {
            return Err(KernelError::AlreadyReleased(region.handle));
        }
        rec.released = true;
        self.stats.regions_released += 1;
        Ok(())
    }

    pub fn is_released(&self, region: &IoRegion) -> bool {
        self.regions.get(&region.handle).is_none_or(|r| r.released)
    }

    pub fn live_regions(&self, device: DeviceId) -> Vec<IoRegion> {
        self.regions
            .values()
            .filter(|r| r.region.device == device && !r.released)
            .map(|r| r.region)
            .collect()
    }

    /// Regions still live when their device finished removal, in removal order.
    pub fn leak_report(&self) -> Vec<(DeviceId, IoRegion)> {
        self.leaks.clone()
    }

    /// Reads or writes through a mapping. Returns the value read, or 0 for a
    /// write.
    pub fn region_access(
        &mut self,
        region: &IoRegion,
        offset: u64,
        width: AccessWidth,
        access: Access,
    ) -> Result<u64, KernelError> {
        self.ensure_running()?;
        let (released, bar, phys_base, length) = match self.regions.get(&region.handle) {
            Some(r) => (r.released, r.bar, r.region.phys_base, r.region.length),
            None => return Err(KernelError::NoSuchRegion(region.handle)),
        };
        let address = phys_base.wrapping_add(offset);
        if released {
            return Err(self.raise_bugcheck(
                BugcheckCode::AccessAfterRelease,
                format!("access to released region {:?}", region.handle),
                Some(address),
            ));
        }
        if offset.checked_add(width.bytes()).is_none_or(|end| end > length) {
            return Err(self.raise_bugcheck(
                BugcheckCode::OutOfBoundsAccess,
                format!("{}-byte access at offset {offset:#x} of {length:#x}-byte region", width.bytes()),
                Some(address),
            ));
        }
        let handler = self
            .slots
            .get(&region.device)
            .map(|s| Rc::clone(&s.handler))
            .ok_or(KernelError::NoSuchDevice(region.device))?;
        let bar_offset = phys_base - bar.phys_base + offset;
        let result = match access {
            Access::Read => {
                self.stats.region_reads += 1;
                handler.borrow_mut().mmio_read(bar.index, bar_offset, width)
            }
            Access::Write(v) => {
                self.stats.region_writes += 1;
                handler
                    .borrow_mut()
                    .mmio_write(bar.index, bar_offset, width, v)
                    .map(|()| 0)
            }
        };
        match result {
            Ok(v) => Ok(v),
            Err(MmioFault::UndefinedRegister) => Err(KernelError::Device(MmioFault::UndefinedRegister)),
            Err(fault) => Err(self.raise_bugcheck(
                BugcheckCode::OutOfBoundsAccess,
                format!("{}-byte access at BAR{} offset {bar_offset:#x}: {fault}", width.bytes(), bar.index),
                Some(address),
            )),
        }
    }

    pub fn read(&mut self, region: &IoRegion, offset: u64, width: AccessWidth) -> Result<u64, KernelError> {
        self.region_access(region, offset, width, Access::Read)
    }

    pub fn write(&mut self, region: &IoRegion, offset: u64, width: AccessWidth, value: u64) -> Result<(), KernelError> {
        self.region_access(region, offset, width, Access::Write(value)).map(|_| ())
    }

    /// Runs `body` as `routine` at `irql`. Paged code at `Dispatch` or above
    /// bugchecks before the body runs. A bugcheck raised inside the body also
    /// yields [`Outcome::Halted`].
    ///
    /// IRQL only rises: a nested call at a lower level runs at the current one.
    pub fn invoke_at_irql<R>(
        &mut self,
        routine: &RoutineAttributes,
        irql: Irql,
        body: impl FnOnce(&mut Kernel) -> R,
    ) -> Result<Outcome<R>, KernelError> {
        self.ensure_running()?;
        let effective = irql.max(self.irql);
        let saved = self.irql;
        self.irql = effective;
        self.routine_stack.push(routine.name.clone());
        let outcome = if routine.pageable && effective >= Irql::Dispatch {
            self.raise_bugcheck(
                BugcheckCode::PagedCodeAtElevatedIrql,
                format!("pageable routine {} entered", routine.name),
                None,
            );
            Outcome::Halted(self.bugcheck.clone().expect("just raised"))
        } else {
            let r = body(self);
            match &self.bugcheck {
                Some(bc) => Outcome::Halted(bc.clone()),
                None => Outcome::Normal(r),
            }
        };
        self.routine_stack.pop();
        self.irql = saved;
        Ok(outcome)
    }
}
