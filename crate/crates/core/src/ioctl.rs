//! I/O control words, interface GUIDs and the buffer layouts shared by the
//! Spw driver and its applications.
//!
//! A control word packs four fields into 32 bits:
//!
//! ```text
//!  31              16 15 14 13                  2 1  0
//! +------------------+-----+---------------------+----+
//! |   device type    | acc |      function       | mt |
//! +------------------+-----+---------------------+----+
//! ```
//!
//! Every multi-byte integer in a request or response buffer is little-endian.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEVICE_TYPE_SHIFT: u32 = 16;
pub const ACCESS_SHIFT: u32 = 14;
pub const FUNCTION_SHIFT: u32 = 2;

pub const ACCESS_MAX: u32 = 0x3;
pub const FUNCTION_MAX: u32 = 0xFFF;
pub const METHOD_MAX: u32 = 0x3;
pub const DEVICE_TYPE_MAX: u32 = 0xFFFF;

pub const METHOD_BUFFERED: u8 = 0;
pub const FILE_ANY_ACCESS: u8 = 0;

/// Device type of the Spw card; first value of the vendor-defined range.
pub const FILE_DEVICE_SPW: u16 = 0x8000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("{field} value {value:#x} exceeds {max:#x}")]
    FieldOutOfRange {
        field: &'static str,
        value: u32,
        max: u32,
    },
    #[error("{what}: expected {expected} bytes, got {actual}")]
    BadLength {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unknown control code {0:#010x}")]
    UnknownControlCode(u32),
    #[error("malformed GUID {0:?}")]
    BadGuid(String),
}

/// A decoded control word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CtlCode {
    pub device_type: u16,
    pub access: u8,
    pub function: u16,
    pub method: u8,
}

impl CtlCode {
    pub fn new(device_type: u32, access: u32, function: u32, method: u32) -> Result<Self, ProtocolError> {
        check_field("device_type", device_type, DEVICE_TYPE_MAX)?;
        check_field("access", access, ACCESS_MAX)?;
        check_field("function", function, FUNCTION_MAX)?;
        check_field("method", method, METHOD_MAX)?;
        Ok(Self {
            device_type: device_type as u16,
            access: access as u8,
            function: function as u16,
            method: method as u8,
        })
    }

    /// Spw control word for `function` (buffered, any access).
    pub const fn spw(function: u16) -> Self {
        Self {
            device_type: FILE_DEVICE_SPW,
            access: FILE_ANY_ACCESS,
            function,
            method: METHOD_BUFFERED,
        }
    }

    pub const fn word(self) -> u32 {
        (self.device_type as u32) << DEVICE_TYPE_SHIFT
            | (self.access as u32) << ACCESS_SHIFT
            | (self.function as u32) << FUNCTION_SHIFT
            | self.method as u32
    }

    pub const fn from_word(word: u32) -> Self {
        Self {
            device_type: (word >> DEVICE_TYPE_SHIFT) as u16,
            access: ((word >> ACCESS_SHIFT) & ACCESS_MAX) as u8,
            function: ((word >> FUNCTION_SHIFT) & FUNCTION_MAX) as u16,
            method: (word & METHOD_MAX) as u8,
        }
    }
}

impl fmt::Display for CtlCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.word())
    }
}

fn check_field(field: &'static str, value: u32, max: u32) -> Result<(), ProtocolError> {
    if value > max {
        Err(ProtocolError::FieldOutOfRange { field, value, max })
    } else {
        Ok(())
    }
}

pub fn encode_ctl_code(device_type: u32, access: u32, function: u32, method: u32) -> Result<u32, ProtocolError> {
    CtlCode::new(device_type, access, function, method).map(CtlCode::word)
}

/// Total: every 32-bit word decodes.
pub fn decode_ctl_code(word: u32) -> (u32, u32, u32, u32) {
    let c = CtlCode::from_word(word);
    (c.device_type as u32, c.access as u32, c.function as u32, c.method as u32)
}

/// 128-bit interface identifier, formatted as lowercase hyphenated hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Guid(uuid::Uuid);

impl Guid {
    pub const fn from_u128(v: u128) -> Self {
        Self(uuid::Uuid::from_u128(v))
    }

    pub fn as_u128(&self) -> u128 {
        self.0.as_u128()
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        self.0.as_bytes()
    }

    /// Random-layout GUID: 122 random bits, version nibble 4, variant `10`.
    /// A seed makes the draw reproducible.
    pub fn generate(seed: Option<u64>) -> Self {
        let mut bytes = [0u8; 16];
        match seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes),
            None => rand::rng().fill(&mut bytes),
        }
        Self(uuid::Builder::from_random_bytes(bytes).into_uuid())
    }

    pub fn version(&self) -> u8 {
        self.as_bytes()[6] >> 4
    }

    /// Top two bits of byte 8.
    pub fn variant_bits(&self) -> u8 {
        self.as_bytes()[8] >> 6
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0.hyphenated(), f)
    }
}

impl FromStr for Guid {
    type Err = ProtocolError;

    /// Accepts the canonical 36-character form, optionally wrapped in braces,
    /// in either case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let inner = t
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .unwrap_or(t);
        if inner.len() != 36 {
            return Err(ProtocolError::BadGuid(s.to_string()));
        }
        uuid::Uuid::try_parse(inner)
            .map(Guid)
            .map_err(|_| ProtocolError::BadGuid(s.to_string()))
    }
}

impl Serialize for Guid {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Guid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Function numbers of the Spw control words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum SpwFunction {
    GetBar0Addr = 0x800,
    ReadReg = 0x801,
    WriteReg = 0x802,
    LinkEnable = 0x803,
    LinkReset = 0x804,
    PortDiscovery = 0x805,
    AcquireData = 0x806,
}

impl SpwFunction {
    pub const ALL: [SpwFunction; 7] = [
        SpwFunction::GetBar0Addr,
        SpwFunction::ReadReg,
        SpwFunction::WriteReg,
        SpwFunction::LinkEnable,
        SpwFunction::LinkReset,
        SpwFunction::PortDiscovery,
        SpwFunction::AcquireData,
    ];

    pub const fn ctl_code(self) -> CtlCode {
        CtlCode::spw(self as u16)
    }

    pub fn from_word(word: u32) -> Option<Self> {
        let code = CtlCode::from_word(word);
        if code.device_type != FILE_DEVICE_SPW
            || code.method != METHOD_BUFFERED
            || code.access != FILE_ANY_ACCESS
        {
            return None;
        }
        Self::ALL.into_iter().find(|f| *f as u16 == code.function)
    }
}

pub const IOCTL_SPW_GET_BAR0_ADDR: u32 = SpwFunction::GetBar0Addr.ctl_code().word();
pub const IOCTL_SPW_READ_REG: u32 = SpwFunction::ReadReg.ctl_code().word();
pub const IOCTL_SPW_WRITE_REG: u32 = SpwFunction::WriteReg.ctl_code().word();
pub const IOCTL_SPW_LINK_ENABLE: u32 = SpwFunction::LinkEnable.ctl_code().word();
pub const IOCTL_SPW_LINK_RESET: u32 = SpwFunction::LinkReset.ctl_code().word();
pub const IOCTL_SPW_PORT_DISCOVERY: u32 = SpwFunction::PortDiscovery.ctl_code().word();
pub const IOCTL_SPW_ACQUIRE_DATA: u32 = SpwFunction::AcquireData.ctl_code().word();

/// Application-level request to the Spw driver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum SpwCommand {
    GetBar0Addr,
    ReadReg { offset: u32, length: u32 },
    WriteReg { offset: u32, length: u32, data: Vec<u8> },
    LinkEnable { port: u32 },
    LinkReset { port: u32 },
    PortDiscovery,
    AcquireData { max_bytes: u32 },
}

impl SpwCommand {
    /// Register write of the low `length` bytes of `value`.
    pub fn write_value(offset: u32, length: u32, value: u32) -> Self {
        let data = value.to_le_bytes()[..(length as usize).min(4)].to_vec();
        SpwCommand::WriteReg { offset, length, data }
    }

    pub fn function(&self) -> SpwFunction {
        match self {
            SpwCommand::GetBar0Addr => SpwFunction::GetBar0Addr,
            SpwCommand::ReadReg { .. } => SpwFunction::ReadReg,
            SpwCommand::WriteReg { .. } => SpwFunction::WriteReg,
            SpwCommand::LinkEnable { .. } => SpwFunction::LinkEnable,
            SpwCommand::LinkReset { .. } => SpwFunction::LinkReset,
            SpwCommand::PortDiscovery => SpwFunction::PortDiscovery,
            SpwCommand::AcquireData { .. } => SpwFunction::AcquireData,
        }
    }

    /// Output buffer size the application supplies for this command.
    pub fn output_len(&self) -> usize {
        match self {
            SpwCommand::GetBar0Addr => 8,
            SpwCommand::ReadReg { length, .. } => *length as usize,
            SpwCommand::WriteReg { .. }
            | SpwCommand::LinkEnable { .. }
            | SpwCommand::LinkReset { .. }
            | SpwCommand::PortDiscovery => 4,
            SpwCommand::AcquireData { max_bytes } => *max_bytes as usize,
        }
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            SpwCommand::ReadReg { length, .. } => check_access_length(*length),
            SpwCommand::WriteReg { length, data, .. } => {
                check_access_length(*length)?;
                if data.len() != *length as usize {
                    return Err(ProtocolError::BadLength {
                        what: "write data",
                        expected: *length as usize,
                        actual: data.len(),
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn check_access_length(length: u32) -> Result<(), ProtocolError> {
    if matches!(length, 1 | 2 | 4) {
        Ok(())
    } else {
        Err(ProtocolError::FieldOutOfRange {
            field: "length",
            value: length,
            max: 4,
        })
    }
}

/// Control word and input buffer for `cmd`.
pub fn encode_command(cmd: &SpwCommand) -> Result<(u32, Vec<u8>), ProtocolError> {
    cmd.validate()?;
    let mut input = Vec::new();
    match cmd {
        SpwCommand::GetBar0Addr | SpwCommand::PortDiscovery => {}
        SpwCommand::ReadReg { offset, length } => {
            input.extend_from_slice(&offset.to_le_bytes());
            input.extend_from_slice(&length.to_le_bytes());
        }
        SpwCommand::WriteReg { offset, length, data } => {
            input.extend_from_slice(&offset.to_le_bytes());
            input.extend_from_slice(&length.to_le_bytes());
            input.extend_from_slice(data);
        }
        SpwCommand::LinkEnable { port } | SpwCommand::LinkReset { port } => {
            input.extend_from_slice(&port.to_le_bytes());
        }
        SpwCommand::AcquireData { max_bytes } => input.extend_from_slice(&max_bytes.to_le_bytes()),
    }
    Ok((cmd.function().ctl_code().word(), input))
}

/// Driver-side inverse of [`encode_command`].
pub fn decode_command(word: u32, input: &[u8]) -> Result<SpwCommand, ProtocolError> {
    let function = SpwFunction::from_word(word).ok_or(ProtocolError::UnknownControlCode(word))?;
    let cmd = match function {
        SpwFunction::GetBar0Addr => {
            expect_len("GetBar0Addr input", input, 0)?;
            SpwCommand::GetBar0Addr
        }
        SpwFunction::PortDiscovery => {
            expect_len("PortDiscovery input", input, 0)?;
            SpwCommand::PortDiscovery
        }
        SpwFunction::ReadReg => {
            expect_len("ReadReg input", input, 8)?;
            SpwCommand::ReadReg {
                offset: le_u32(&input[0..4]),
                length: le_u32(&input[4..8]),
            }
        }
        SpwFunction::WriteReg => {
            if input.len() < 8 {
                return Err(ProtocolError::BadLength {
                    what: "WriteReg input",
                    expected: 8,
                    actual: input.len(),
                });
            }
            let length = le_u32(&input[4..8]);
            check_access_length(length)?;
            expect_len("WriteReg input", input, 8 + length as usize)?;
            SpwCommand::WriteReg {
                offset: le_u32(&input[0..4]),
                length,
                data: input[8..].to_vec(),
            }
        }
        SpwFunction::LinkEnable => {
            expect_len("LinkEnable input", input, 4)?;
            SpwCommand::LinkEnable { port: le_u32(input) }
        }
        SpwFunction::LinkReset => {
            expect_len("LinkReset input", input, 4)?;
            SpwCommand::LinkReset { port: le_u32(input) }
        }
        SpwFunction::AcquireData => {
            expect_len("AcquireData input", input, 4)?;
            SpwCommand::AcquireData { max_bytes: le_u32(input) }
        }
    };
    cmd.validate()?;
    Ok(cmd)
}

/// Typed result of a completed command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpwResponse {
    Bar0Addr { phys: u64 },
    Register { data: Vec<u8> },
    Written { bytes: u32 },
    LinkStatus { status: u32 },
    PortMask { mask: u32 },
    Data { frames: Vec<u8> },
}

impl SpwResponse {
    /// Little-endian value of a register read.
    pub fn register_value(&self) -> Option<u32> {
        match self {
            SpwResponse::Register { data } if data.len() <= 4 => {
                let mut buf = [0u8; 4];
                buf[..data.len()].copy_from_slice(data);
                Some(u32::from_le_bytes(buf))
            }
            _ => None,
        }
    }
}

pub fn encode_response(resp: &SpwResponse) -> Vec<u8> {
    match resp {
        SpwResponse::Bar0Addr { phys } => phys.to_le_bytes().to_vec(),
        SpwResponse::Register { data } => data.clone(),
        SpwResponse::Written { bytes: v }
        | SpwResponse::LinkStatus { status: v }
        | SpwResponse::PortMask { mask: v } => v.to_le_bytes().to_vec(),
        SpwResponse::Data { frames } => frames.clone(),
    }
}

/// Parses the output buffer of `cmd`, checking its length against the layout.
pub fn decode_response(cmd: &SpwCommand, output: &[u8]) -> Result<SpwResponse, ProtocolError> {
    Ok(match cmd {
        SpwCommand::GetBar0Addr => {
            expect_len("GetBar0Addr output", output, 8)?;
            let mut b = [0u8; 8];
            b.copy_from_slice(output);
            SpwResponse::Bar0Addr { phys: u64::from_le_bytes(b) }
        }
        SpwCommand::ReadReg { length, .. } => {
            expect_len("ReadReg output", output, *length as usize)?;
            SpwResponse::Register { data: output.to_vec() }
        }
        SpwCommand::WriteReg { .. } => {
            expect_len("WriteReg output", output, 4)?;
            SpwResponse::Written { bytes: le_u32(output) }
        }
        SpwCommand::LinkEnable { .. } | SpwCommand::LinkReset { .. } => {
            expect_len("link output", output, 4)?;
            SpwResponse::LinkStatus { status: le_u32(output) }
        }
        SpwCommand::PortDiscovery => {
            expect_len("PortDiscovery output", output, 4)?;
            SpwResponse::PortMask { mask: le_u32(output) }
        }
        SpwCommand::AcquireData { max_bytes } => {
            if output.len() > *max_bytes as usize {
                return Err(ProtocolError::BadLength {
                    what: "AcquireData output",
                    expected: *max_bytes as usize,
                    actual: output.len(),
                });
            }
            SpwResponse::Data { frames: output.to_vec() }
        }
    })
}

fn expect_len(what: &'static str, buf: &[u8], expected: usize) -> Result<(), ProtocolError> {
    if buf.len() == expected {
        Ok(())
    } else {
        Err(ProtocolError::BadLength {
            what,
            expected,
            actual: buf.len(),
        })
    }
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}
