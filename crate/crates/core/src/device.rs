//! The emulated PCIe-SpaceWire interface card.
//!
//! BAR0 is a file of little-endian 32-bit registers, BAR2 a 64 KiB packet
//! buffer holding `[len: u32 LE][payload]` frames written by the receive path.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{AccessWidth, MmioDevice, MmioFault};
use crate::net::{AccelSample, LinkCommand, Network};

pub type SharedNetwork = Rc<RefCell<Network>>;
pub type SharedCard = Rc<RefCell<SpwCard>>;

pub const BAR0_LEN: u64 = 4096;
pub const BAR2_LEN: u64 = 65536;
pub const FRAME_HEADER_LEN: usize = 4;

pub const REG_DEVICE_ID: u32 = 0x000;
pub const REG_VERSION: u32 = 0x004;
pub const REG_PORT_STATUS: u32 = 0x008;
pub const REG_LINK_ENABLE: u32 = 0x00C;
pub const REG_LINK_RESET: u32 = 0x010;
pub const REG_PORT_COUNT: u32 = 0x014;
pub const REG_ACC_X: u32 = 0x020;
pub const REG_ACC_Y: u32 = 0x024;
pub const REG_ACC_Z: u32 = 0x028;
pub const REG_SAMPLE_COUNT: u32 = 0x02C;
pub const REG_FIFO_LEVEL: u32 = 0x030;
pub const REG_DROP_COUNT: u32 = 0x034;
pub const REG_FIFO_CONSUME: u32 = 0x038;
pub const REG_SCRATCH: u32 = 0x100;

/// "SPWC"
pub const DEVICE_ID_VALUE: u32 = 0x5350_5743;
pub const VERSION_VALUE: u32 = 0x0001_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegisterKind {
    ReadOnly,
    ReadWrite,
    /// Writing triggers an action; reads return 0.
    WriteOneSelfClear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegisterSpec {
    pub offset: u32,
    pub kind: RegisterKind,
    pub reset_value: u32,
    pub name: &'static str,
}

const fn reg(offset: u32, kind: RegisterKind, reset_value: u32, name: &'static str) -> RegisterSpec {
    RegisterSpec {
        offset,
        kind,
        reset_value,
        name,
    }
}

pub const REGISTER_MAP: &[RegisterSpec] = &[
    reg(REG_DEVICE_ID, RegisterKind::ReadOnly, DEVICE_ID_VALUE, "DEVICE_ID"),
    reg(REG_VERSION, RegisterKind::ReadOnly, VERSION_VALUE, "VERSION"),
    reg(REG_PORT_STATUS, RegisterKind::ReadOnly, 0, "PORT_STATUS"),
    reg(REG_LINK_ENABLE, RegisterKind::ReadWrite, 0, "LINK_ENABLE"),
    reg(REG_LINK_RESET, RegisterKind::WriteOneSelfClear, 0, "LINK_RESET"),
    // Reset value is the configured router port count.
    reg(REG_PORT_COUNT, RegisterKind::ReadOnly, 0, "PORT_COUNT"),
    reg(REG_ACC_X, RegisterKind::ReadOnly, 0, "ACC_X"),
    reg(REG_ACC_Y, RegisterKind::ReadOnly, 0, "ACC_Y"),
    reg(REG_ACC_Z, RegisterKind::ReadOnly, 0, "ACC_Z"),
    reg(REG_SAMPLE_COUNT, RegisterKind::ReadOnly, 0, "SAMPLE_COUNT"),
    reg(REG_FIFO_LEVEL, RegisterKind::ReadOnly, 0, "FIFO_LEVEL"),
    reg(REG_DROP_COUNT, RegisterKind::ReadOnly, 0, "DROP_COUNT"),
    reg(REG_FIFO_CONSUME, RegisterKind::WriteOneSelfClear, 0, "FIFO_CONSUME"),
    reg(REG_SCRATCH, RegisterKind::ReadWrite, 0, "SCRATCH"),
];

pub fn register_spec(offset: u32) -> Option<&'static RegisterSpec> {
    REGISTER_MAP.iter().find(|r| r.offset == offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("no register at BAR0 offset {0:#x}")]
    UndefinedRegister(u64),
    #[error("access outside BAR{bar} at offset {offset:#x}")]
    OutOfRange { bar: u8, offset: u64 },
    #[error("unsupported access width {0} bytes")]
    BadWidth(u64),
    #[error("packet of {len} bytes does not fit ({free} bytes free)")]
    FifoOverflow { len: usize, free: usize },
}

impl From<DeviceError> for MmioFault {
    fn from(e: DeviceError) -> Self {
        match e {
            DeviceError::UndefinedRegister(_) => MmioFault::UndefinedRegister,
            DeviceError::OutOfRange { .. } => MmioFault::OutOfRange,
            DeviceError::BadWidth(_) | DeviceError::FifoOverflow { .. } => MmioFault::UnsupportedWidth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CardDiagnostics {
    pub dropped_packets: u32,
    pub rx_packets: BTreeMap<u8, u64>,
    pub mmio_reads: u64,
    pub mmio_writes: u64,
}

/// Immutable copy of the register file, keyed by register name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegisterSnapshot {
    pub registers: BTreeMap<&'static str, u32>,
    pub fifo_level: usize,
}

pub struct SpwCard {
    ports: u8,
    network: Option<SharedNetwork>,
    link_enable: u32,
    scratch: u32,
    sample_latch: (i32, i32, i32),
    sample_count: u32,
    bar2: Vec<u8>,
    fifo_write_cursor: usize,
    diag: CardDiagnostics,
}

impl SpwCard {
    /// A card with `ports` link ports and nothing attached.
    pub fn standalone(ports: u8) -> Self {
        Self {
            ports: ports.min(32),
            network: None,
            link_enable: 0,
            scratch: 0,
            sample_latch: (0, 0, 0),
            sample_count: 0,
            bar2: vec![0; BAR2_LEN as usize],
            fifo_write_cursor: 0,
            diag: CardDiagnostics::default(),
        }
    }

    /// A card driving the router ports of `network`.
    pub fn attached(network: SharedNetwork) -> Self {
        let ports = network.borrow().router_ports();
        Self {
            network: Some(network),
            ..Self::standalone(ports)
        }
    }

    pub fn into_shared(self) -> SharedCard {
        Rc::new(RefCell::new(self))
    }

    pub fn ports(&self) -> u8 {
        self.ports
    }

    fn port_mask(&self) -> u32 {
        if self.ports >= 32 {
            u32::MAX
        } else {
            (1u32 << self.ports) - 1
        }
    }

    pub fn diagnostics(&self) -> &CardDiagnostics {
        &self.diag
    }

    pub fn fifo_level(&self) -> usize {
        self.fifo_write_cursor
    }

    /// Valid FIFO bytes, left in place.
    pub fn fifo_bytes(&self) -> &[u8] {
        &self.bar2[..self.fifo_write_cursor]
    }

    fn port_status(&self) -> u32 {
        self.network
            .as_ref()
            .map_or(0, |n| n.borrow().discovery_mask() & self.port_mask())
    }

    /// Current value of the 32-bit register at `offset`.
    pub fn register_value(&self, offset: u32) -> Option<u32> {
        Some(match offset {
            REG_DEVICE_ID => DEVICE_ID_VALUE,
            REG_VERSION => VERSION_VALUE,
            REG_PORT_STATUS => self.port_status(),
            REG_LINK_ENABLE => self.link_enable,
            REG_LINK_RESET | REG_FIFO_CONSUME => 0,
            REG_PORT_COUNT => self.ports as u32,
            REG_ACC_X => self.sample_latch.0 as u32,
            REG_ACC_Y => self.sample_latch.1 as u32,
            REG_ACC_Z => self.sample_latch.2 as u32,
            REG_SAMPLE_COUNT => self.sample_count,
            REG_FIFO_LEVEL => self.fifo_write_cursor as u32,
            REG_DROP_COUNT => self.diag.dropped_packets,
            REG_SCRATCH => self.scratch,
            _ => return None,
        })
    }

    pub fn snapshot(&self) -> RegisterSnapshot {
        RegisterSnapshot {
            registers: REGISTER_MAP
                .iter()
                .map(|r| (r.name, self.register_value(r.offset).expect("mapped")))
                .collect(),
            fifo_level: self.fifo_write_cursor,
        }
    }

    /// Locates the register holding `[offset, offset + width)`; returns its
    /// spec and the byte position of `offset` within it.
    fn locate(offset: u64, width: u64) -> Result<(&'static RegisterSpec, u32), DeviceError> {
        if offset + width > BAR0_LEN {
            return Err(DeviceError::OutOfRange { bar: 0, offset });
        }
        let base = (offset & !3) as u32;
        let spec = register_spec(base).ok_or(DeviceError::UndefinedRegister(offset))?;
        let lane = (offset & 3) as u32;
        if lane as u64 + width > 4 {
            return Err(DeviceError::BadWidth(width));
        }
        Ok((spec, lane))
    }

    fn check_width(width: u64) -> Result<(), DeviceError> {
        if matches!(width, 1 | 2 | 4) {
            Ok(())
        } else {
            Err(DeviceError::BadWidth(width))
        }
    }

    pub fn mmio_read(&mut self, bar: u8, offset: u64, width: u64) -> Result<u64, DeviceError> {
        Self::check_width(width)?;
        self.diag.mmio_reads += 1;
        match bar {
            0 => {
                let (spec, lane) = Self::locate(offset, width)?;
                let value = self.register_value(spec.offset).expect("mapped");
                let shifted = (value >> (lane * 8)) as u64;
                Ok(shifted & width_mask(width))
            }
            2 => {
                let o = bar2_range(offset, width)?;
                let mut b = [0u8; 8];
                b[..width as usize].copy_from_slice(&self.bar2[o..o + width as usize]);
                Ok(u64::from_le_bytes(b))
            }
            _ => Err(DeviceError::OutOfRange { bar, offset }),
        }
    }

    pub fn mmio_write(&mut self, bar: u8, offset: u64, width: u64, value: u64) -> Result<(), DeviceError> {
        Self::check_width(width)?;
        self.diag.mmio_writes += 1;
        match bar {
            0 => {
                let (spec, lane) = Self::locate(offset, width)?;
                let shift = lane * 8;
                let lane_mask = (width_mask(width) as u32) << shift;
                let bits = ((value & width_mask(width)) as u32) << shift;
                match spec.kind {
                    RegisterKind::ReadOnly => {}
                    RegisterKind::ReadWrite => {
                        let old = self.register_value(spec.offset).expect("mapped");
                        let new = (old & !lane_mask) | bits;
                        match spec.offset {
                            REG_LINK_ENABLE => self.set_link_enable(new),
                            REG_SCRATCH => self.scratch = new,
                            _ => unreachable!("no other read-write registers"),
                        }
                    }
                    RegisterKind::WriteOneSelfClear => match spec.offset {
                        REG_LINK_RESET => self.pulse_link_reset(bits),
                        REG_FIFO_CONSUME => {
                            self.consume_fifo(bits as usize);
                        }
                        _ => unreachable!("no other action registers"),
                    },
                }
                Ok(())
            }
            2 => {
                let o = bar2_range(offset, width)?;
                let n = width as usize;
                self.bar2[o..o + n].copy_from_slice(&value.to_le_bytes()[..n]);
                Ok(())
            }
            _ => Err(DeviceError::OutOfRange { bar, offset }),
        }
    }

    fn set_link_enable(&mut self, requested: u32) {
        let new = requested & self.port_mask();
        let changed = new ^ self.link_enable;
        self.link_enable = new;
        if let Some(net) = &self.network {
            let mut net = net.borrow_mut();
            for bit in 0..self.ports as u32 {
                if changed & (1 << bit) != 0 {
                    let cmd = if new & (1 << bit) != 0 {
                        LinkCommand::Enable
                    } else {
                        LinkCommand::Disable
                    };
                    net.link_command(bit + 1, cmd).expect("port within router");
                }
            }
        }
    }

    fn pulse_link_reset(&mut self, bits: u32) {
        let bits = bits & self.port_mask();
        if let Some(net) = &self.network {
            let mut net = net.borrow_mut();
            for bit in 0..self.ports as u32 {
                if bits & (1 << bit) != 0 {
                    net.link_command(bit + 1, LinkCommand::Reset).expect("port within router");
                }
            }
        }
    }

    /// Appends a `[len][payload]` frame to BAR2. A 12-byte payload is also
    /// latched as an accelerometer sample.
    pub fn deliver_packet(&mut self, port: u8, payload: &[u8]) -> Result<(), DeviceError> {
        let free = BAR2_LEN as usize - self.fifo_write_cursor;
        let frame_len = FRAME_HEADER_LEN + payload.len();
        if frame_len > free {
            self.diag.dropped_packets += 1;
            return Err(DeviceError::FifoOverflow {
                len: payload.len(),
                free: free.saturating_sub(FRAME_HEADER_LEN),
            });
        }
        let c = self.fifo_write_cursor;
        self.bar2[c..c + FRAME_HEADER_LEN].copy_from_slice(&(payload.len() as u32).to_le_bytes());
        self.bar2[c + FRAME_HEADER_LEN..c + frame_len].copy_from_slice(payload);
        self.fifo_write_cursor += frame_len;
        *self.diag.rx_packets.entry(port).or_default() += 1;
        if let Some(xyz) = AccelSample::parse_payload(payload) {
            self.sample_latch = xyz;
            self.sample_count = self.sample_count.wrapping_add(1);
        }
        Ok(())
    }

    /// Returns every valid FIFO byte and empties the FIFO.
    pub fn drain_fifo(&mut self) -> Vec<u8> {
        let out = self.bar2[..self.fifo_write_cursor].to_vec();
        self.fifo_write_cursor = 0;
        out
    }

    /// Drops the longest run of whole leading frames totalling at most
    /// `limit` bytes and moves the rest to the front. Returns bytes dropped.
    pub fn consume_fifo(&mut self, limit: usize) -> usize {
        let taken = whole_frames_prefix(&self.bar2[..self.fifo_write_cursor], limit);
        self.bar2.copy_within(taken..self.fifo_write_cursor, 0);
        self.fifo_write_cursor -= taken;
        taken
    }
}

/// Length of the longest prefix of `frames` made of whole frames and no
/// longer than `limit`.
pub fn whole_frames_prefix(frames: &[u8], limit: usize) -> usize {
    let mut pos = 0;
    while pos + FRAME_HEADER_LEN <= frames.len() {
        let len = u32::from_le_bytes(frames[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let next = pos + FRAME_HEADER_LEN + len;
        if next > frames.len() || next > limit {
            break;
        }
        pos = next;
    }
    pos
}

/// Splits framed FIFO bytes into payloads. Trailing partial frames are ignored.
pub fn split_frames(frames: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + FRAME_HEADER_LEN <= frames.len() {
        let len = u32::from_le_bytes(frames[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + FRAME_HEADER_LEN;
        if start + len > frames.len() {
            break;
        }
        out.push(&frames[start..start + len]);
        pos = start + len;
    }
    out
}

fn width_mask(width: u64) -> u64 {
    if width >= 8 {
        u64::MAX
    } else {
        (1u64 << (width * 8)) - 1
    }
}

fn bar2_range(offset: u64, width: u64) -> Result<usize, DeviceError> {
    if offset.checked_add(width).is_none_or(|e| e > BAR2_LEN) {
        return Err(DeviceError::OutOfRange { bar: 2, offset });
    }
    Ok(offset as usize)
}

impl MmioDevice for SpwCard {
    fn mmio_read(&mut self, bar: u8, offset: u64, width: AccessWidth) -> Result<u64, MmioFault> {
        SpwCard::mmio_read(self, bar, offset, width.bytes()).map_err(Into::into)
    }

    fn mmio_write(&mut self, bar: u8, offset: u64, width: AccessWidth, value: u64) -> Result<(), MmioFault> {
        SpwCard::mmio_write(self, bar, offset, width.bytes(), value).map_err(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LinkState, Topology};

    fn attached() -> (SpwCard, SharedNetwork) {
        let net = Rc::new(RefCell::new(Network::build(Topology::verification()).unwrap()));
        (SpwCard::attached(net.clone()), net)
    }

    #[test]
    fn register_map_is_aligned_and_disjoint() {
        let mut offsets: Vec<u32> = REGISTER_MAP.iter().map(|r| r.offset).collect();
        assert!(offsets.iter().all(|o| o % 4 == 0 && (*o as u64) < BAR0_LEN));
        offsets.sort();
        offsets.dedup();
        assert_eq!(offsets.len(), REGISTER_MAP.len());
    }

    #[test]
    fn reset_values() {
        let mut card = SpwCard::standalone(3);
        assert_eq!(card.mmio_read(0, 0x100, 4), Ok(0));
        assert_eq!(card.mmio_read(0, 0x000, 4), Ok(0x5350_5743));
        assert_eq!(card.mmio_read(0, 0x004, 4), Ok(0x0001_0000));
        assert_eq!(card.mmio_read(0, 0x014, 4), Ok(3));
        for r in REGISTER_MAP.iter().filter(|r| r.offset != REG_PORT_COUNT) {
            assert_eq!(card.register_value(r.offset), Some(r.reset_value), "{}", r.name);
        }
    }

    #[test]
    fn scratch_round_trip_and_sub_word() {
        let mut card = SpwCard::standalone(3);
        card.mmio_write(0, 0x100, 4, 2222).unwrap();
        assert_eq!(card.mmio_read(0, 0x100, 4), Ok(2222));
        card.mmio_write(0, 0x100, 4, 0x1122_3344).unwrap();
        assert_eq!(card.mmio_read(0, 0x100, 1), Ok(0x44));
        assert_eq!(card.mmio_read(0, 0x101, 1), Ok(0x33));
        assert_eq!(card.mmio_read(0, 0x102, 2), Ok(0x1122));
        card.mmio_write(0, 0x103, 1, 0xAB).unwrap();
        assert_eq!(card.mmio_read(0, 0x100, 4), Ok(0xAB22_3344));
        assert_eq!(card.mmio_read(0, 0x000, 2), Ok(0x5743));
    }

    #[test]
    fn read_only_ignores_writes() {
        let mut card = SpwCard::standalone(3);
        card.mmio_write(0, 0x000, 4, 0xDEAD_BEEF).unwrap();
        assert_eq!(card.mmio_read(0, 0x000, 4), Ok(0x5350_5743));
    }

    #[test]
    fn faults() {
        let mut card = SpwCard::standalone(3);
        assert_eq!(card.mmio_read(0, 0x018, 4), Err(DeviceError::UndefinedRegister(0x18)));
        assert_eq!(card.mmio_read(0, 0x0FFC, 4), Err(DeviceError::UndefinedRegister(0xFFC)));
        assert_eq!(card.mmio_read(0, 0x1000, 4), Err(DeviceError::OutOfRange { bar: 0, offset: 0x1000 }));
        assert_eq!(card.mmio_read(0, 0x002, 4), Err(DeviceError::BadWidth(4)));
        assert_eq!(card.mmio_read(0, 0x000, 8), Err(DeviceError::BadWidth(8)));
        assert_eq!(card.mmio_read(0, 0x000, 3), Err(DeviceError::BadWidth(3)));
        assert_eq!(card.mmio_read(2, 65534, 4), Err(DeviceError::OutOfRange { bar: 2, offset: 65534 }));
        assert_eq!(card.mmio_read(1, 0, 4), Err(DeviceError::OutOfRange { bar: 1, offset: 0 }));
    }

    #[test]
    fn link_enable_and_reset_drive_network() {
        let (mut card, net) = attached();
        card.mmio_write(0, 0x00C, 4, 0b101).unwrap();
        net.borrow_mut().tick(5);
        assert_eq!(card.mmio_read(0, 0x008, 4), Ok(0x05));

        card.mmio_write(0, 0x010, 4, 0x1).unwrap();
        assert_eq!(card.mmio_read(0, 0x010, 4), Ok(0));
        assert_eq!(net.borrow().link_state(1), Ok(LinkState::ErrorReset));
        assert_eq!(card.mmio_read(0, 0x008, 4), Ok(0x04));
        // Bits beyond the port count are not writable.
        card.mmio_write(0, 0x00C, 4, 0xFFFF_FFFF).unwrap();
        assert_eq!(card.mmio_read(0, 0x00C, 4), Ok(0b111));
    }

    #[test]
    fn deliver_sample_latches() {
        let mut card = SpwCard::standalone(3);
        let sample = AccelSample { x: 5, y: 0, z: 0, tick: 0 }.to_payload();
        card.deliver_packet(1, &sample).unwrap();
        assert_eq!(card.mmio_read(0, REG_ACC_X as u64, 4), Ok(5));
        assert_eq!(card.mmio_read(0, REG_SAMPLE_COUNT as u64, 4), Ok(1));
        assert_eq!(card.mmio_read(0, REG_FIFO_LEVEL as u64, 4), Ok(16));
        let neg = AccelSample { x: 0, y: -7, z: 0, tick: 0 }.to_payload();
        card.deliver_packet(1, &neg).unwrap();
        assert_eq!(card.mmio_read(0, REG_ACC_Y as u64, 4), Ok((-7i32) as u32 as u64));
    }

    #[test]
    fn empty_packet_and_drain() {
        let mut card = SpwCard::standalone(3);
        card.deliver_packet(3, &[]).unwrap();
        assert_eq!(card.fifo_level(), 4);
        assert_eq!(card.drain_fifo(), vec![0, 0, 0, 0]);
        assert!(card.drain_fifo().is_empty());
        assert!(card.drain_fifo().is_empty());
    }

    #[test]
    fn two_samples_drain_to_32_bytes() {
        let mut card = SpwCard::standalone(3);
        let p = AccelSample { x: 1, y: 2, z: 3, tick: 0 }.to_payload();
        card.deliver_packet(3, &p).unwrap();
        card.deliver_packet(3, &p).unwrap();
        let bytes = card.drain_fifo();
        assert_eq!(bytes.len(), 32);
        assert_eq!(split_frames(&bytes), vec![&p[..], &p[..]]);
        assert_eq!(card.fifo_level(), 0);
    }

    #[test]
    fn overflow_drops_packet() {
        let mut card = SpwCard::standalone(3);
        // 65532-byte payload fills the buffer exactly.
        card.deliver_packet(3, &vec![7u8; 65532]).unwrap();
        assert_eq!(card.fifo_level(), 65536);
        let err = card.deliver_packet(3, &[]).unwrap_err();
        assert!(matches!(err, DeviceError::FifoOverflow { len: 0, free: 0 }));
        assert_eq!(card.fifo_level(), 65536);
        assert_eq!(card.diagnostics().dropped_packets, 1);

        let mut card = SpwCard::standalone(3);
        card.deliver_packet(3, &vec![1u8; 65000]).unwrap();
        assert!(card.deliver_packet(3, &vec![1u8; 600]).is_err());
        assert_eq!(card.fifo_level(), 65004);
        card.deliver_packet(3, &vec![1u8; 500]).unwrap();
        assert_eq!(card.fifo_level(), 65508);
        assert_eq!(card.mmio_read(0, REG_DROP_COUNT as u64, 4), Ok(1));
    }

    #[test]
    fn consume_keeps_frames_whole() {
        let mut card = SpwCard::standalone(3);
        card.deliver_packet(3, &[1; 12]).unwrap();
        card.deliver_packet(3, &[2; 3]).unwrap();
        card.deliver_packet(3, &[3; 12]).unwrap();
        // 16 + 7 = 23 fits in 30, the third frame does not.
        card.mmio_write(0, REG_FIFO_CONSUME as u64, 4, 30).unwrap();
        assert_eq!(card.fifo_level(), 16);
        assert_eq!(card.mmio_read(0, REG_FIFO_CONSUME as u64, 4), Ok(0));
        assert_eq!(split_frames(&card.drain_fifo()), vec![&[3u8; 12][..]]);
    }

    #[test]
    fn whole_frame_prefix() {
        let frames = [3, 0, 0, 0, 9, 9, 9, 0, 0, 0, 0];
        assert_eq!(whole_frames_prefix(&frames, 0), 0);
        assert_eq!(whole_frames_prefix(&frames, 6), 0);
        assert_eq!(whole_frames_prefix(&frames, 7), 7);
        assert_eq!(whole_frames_prefix(&frames, 100), 11);
    }
}
