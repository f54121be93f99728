//! `spwctl` command line. Output lines are stable for scripts:
//!
//! ```text
//! > read --offset 100 --len 4
//! read data:2222
//! datasize:4
//! ```
//!
//! Offsets are hexadecimal without a prefix; data values are decimal.
//! Exit status is 0 on success, 1 when the command fails, 2 on usage errors.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use spw_core::device::split_frames;
use spw_core::ioctl::{SpwCommand, SpwResponse};
use spw_core::net::AccelSample;

use crate::service::{le_value, ControlService};

#[derive(Debug, Parser)]
#[command(name = "spwctl", version, about = "Control the simulated PCIe-SpaceWire card")]
pub struct Cli {
    /// Service configuration file (defaults to $SPW_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Talk to a running `spwctl serve` at this base URL.
    #[arg(long, global = true)]
    pub remote: Option<String>,
    /// Advance simulated time by this many ticks before the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub ticks: u64,
    /// Skip link bring-up on a freshly started simulation.
    #[arg(long, global = true)]
    pub cold: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the BAR0 physical base address.
    Bar0,
    /// Read a register.
    Read {
        #[arg(long, value_parser = parse_hex)]
        offset: u32,
        #[arg(long, default_value_t = 4)]
        len: u32,
    },
    /// Write a register.
    Write {
        #[arg(long, value_parser = parse_hex)]
        offset: u32,
        #[arg(long)]
        data: u32,
        #[arg(long, default_value_t = 4)]
        len: u32,
    },
    /// Enable or reset a router link.
    Link {
        #[command(subcommand)]
        action: LinkAction,
    },
    /// Print the mask of ports whose link is running.
    Discover,
    /// Drain received packets from the card FIFO.
    Acquire {
        #[arg(long, default_value_t = 4096)]
        max_bytes: u32,
    },
    /// Advance simulated time.
    Tick { n: u64 },
    /// Override the accelerometer output.
    Inject {
        #[arg(allow_hyphen_values = true)]
        x: i32,
        #[arg(allow_hyphen_values = true)]
        y: i32,
        #[arg(allow_hyphen_values = true)]
        z: i32,
    },
    /// Run the HTTP/WebSocket API.
    Serve {
        /// Listen address; overrides the config file.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Read commands from standard input, one per line, against one
    /// simulation.
    Shell,
}

#[derive(Debug, Subcommand)]
pub enum LinkAction {
    Enable { port: u32 },
    Reset { port: u32 },
}

fn parse_hex(s: &str) -> Result<u32, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(digits, 16).map_err(|_| format!("{s:?} is not a hexadecimal offset"))
}

/// Something that can carry commands to the driver.
pub trait Backend {
    /// `Err` carries the failure reason.
    fn execute(&mut self, cmd: &SpwCommand) -> Result<SpwResponse, String>;
    /// Returns the tick count afterwards.
    fn tick(&mut self, n: u64) -> Result<u64, String>;
    fn inject(&mut self, x: i32, y: i32, z: i32) -> Result<(), String>;
}

impl Backend for ControlService {
    fn execute(&mut self, cmd: &SpwCommand) -> Result<SpwResponse, String> {
        let r = ControlService::execute(self, cmd).map_err(|e| e.to_string())?;
        match r.failure() {
            Some(reason) => Err(reason.to_string()),
            None => Ok(r.payload.expect("successful command has a payload")),
        }
    }

    fn tick(&mut self, n: u64) -> Result<u64, String> {
        ControlService::tick(self, n);
        Ok(self.now())
    }

    fn inject(&mut self, x: i32, y: i32, z: i32) -> Result<(), String> {
        ControlService::inject(self, x, y, z);
        Ok(())
    }
}

/// Drives a remote service through its HTTP API.
pub struct RemoteBackend {
    base: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Value, String> {
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| e.to_string())?;
        if status.is_success() {
            Ok(body)
        } else {
            Err(body["error"].as_str().map_or_else(|| status.to_string(), str::to_string))
        }
    }

    fn get(&self, path: &str) -> Result<Value, String> {
        self.send(self.client.get(format!("{}{path}", self.base)))
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, String> {
        self.send(self.client.post(format!("{}{path}", self.base)).json(&body))
    }
}

fn field_u64(v: &Value, key: &str) -> Result<u64, String> {
    v[key].as_u64().ok_or_else(|| format!("reply has no {key}"))
}

fn unhex(s: &str) -> Result<Vec<u8>, String> {
    (0..s.len())
        .step_by(2)
        .map(|i| s.get(i..i + 2).and_then(|b| u8::from_str_radix(b, 16).ok()).ok_or("bad hex in reply".to_string()))
        .collect()
}

impl Backend for RemoteBackend {
    fn execute(&mut self, cmd: &SpwCommand) -> Result<SpwResponse, String> {
        Ok(match cmd {
            SpwCommand::GetBar0Addr => {
                let v = self.get("/api/device")?;
                SpwResponse::Bar0Addr {
                    phys: v["bar0_phys"].as_u64().ok_or("device is not started")?,
                }
            }
            SpwCommand::ReadReg { offset, length } => {
                let v = self.get(&format!("/api/registers?offset={offset}&len={length}"))?;
                let data = field_u64(&v, "data")? as u32;
                SpwResponse::Register {
                    data: data.to_le_bytes()[..*length as usize].to_vec(),
                }
            }
            SpwCommand::WriteReg { offset, length, data } => {
                self.post("/api/registers", json!({ "offset": offset, "len": length, "data": le_value(data) }))?;
                SpwResponse::Written { bytes: *length }
            }
            SpwCommand::LinkEnable { port } => {
                self.post(&format!("/api/links/{port}/enable"), Value::Null)?;
                SpwResponse::LinkStatus { status: 0 }
            }
            SpwCommand::LinkReset { port } => {
                self.post(&format!("/api/links/{port}/reset"), Value::Null)?;
                SpwResponse::LinkStatus { status: 0 }
            }
            SpwCommand::PortDiscovery => SpwResponse::PortMask {
                mask: field_u64(&self.get("/api/ports")?, "mask")? as u32,
            },
            SpwCommand::AcquireData { max_bytes } => {
                let v = self.post("/api/acquire", json!({ "max_bytes": max_bytes }))?;
                SpwResponse::Data {
                    frames: unhex(v["frames"].as_str().ok_or("reply has no frames")?)?,
                }
            }
        })
    }

    fn tick(&mut self, n: u64) -> Result<u64, String> {
        field_u64(&self.post("/api/tick", json!({ "n": n }))?, "tick")
    }

    fn inject(&mut self, x: i32, y: i32, z: i32) -> Result<(), String> {
        self.post("/api/inject", json!({ "x": x, "y": y, "z": z })).map(|_| ())
    }
}

/// Prints `clap`'s message and returns the exit status it implies.
fn usage(e: clap::Error, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let text = e.render().to_string();
    if e.use_stderr() {
        let _ = write!(err, "{text}");
        2
    } else {
        let _ = write!(out, "{text}");
        0
    }
}

/// Parses `args` (without the program name) and runs one command against
/// `backend`. `serve` and `shell` are handled by the binary and rejected
/// here.
pub fn run_cli(backend: &mut dyn Backend, args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("spwctl".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) => return usage(e, out, err),
    };
    run_parsed(backend, &cli, out, err)
}

pub fn run_parsed(backend: &mut dyn Backend, cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if cli.ticks > 0 {
        if let Err(e) = backend.tick(cli.ticks) {
            let _ = writeln!(err, "error: {e}");
            return 1;
        }
    }
    match execute(backend, &cli.command, out) {
        Ok(()) => 0,
        Err(CliFailure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(CliFailure::Command(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

enum CliFailure {
    Usage(String),
    Command(String),
}

impl From<String> for CliFailure {
    fn from(s: String) -> Self {
        CliFailure::Command(s)
    }
}

fn execute(backend: &mut dyn Backend, command: &Command, out: &mut dyn Write) -> Result<(), CliFailure> {
    let mut emit = |line: String| {
        let _ = writeln!(out, "{line}");
    };
    match command {
        Command::Bar0 => {
            if let SpwResponse::Bar0Addr { phys } = backend.execute(&SpwCommand::GetBar0Addr)? {
                emit(format!("bar0 address:0x{phys:08X}"));
            }
        }
        Command::Read { offset, len } => {
            let r = backend.execute(&SpwCommand::ReadReg {
                offset: *offset,
                length: *len,
            })?;
            let data = r.register_value().ok_or_else(|| "unexpected reply".to_string())?;
            emit(format!("read data:{data}"));
            emit(format!("datasize:{len}"));
        }
        Command::Write { offset, data, len } => {
            if !matches!(len, 1 | 2 | 4) {
                return Err(CliFailure::Command("STATUS_INVALID_PARAMETER".into()));
            }
            if *len < 4 && data >> (len * 8) != 0 {
                return Err(CliFailure::Usage(format!("data {data} does not fit in {len} bytes")));
            }
            backend.execute(&SpwCommand::write_value(*offset, *len, *data))?;
            emit(format!("write data:{data}"));
            emit(format!("datasize:{len}"));
        }
        Command::Link { action } => {
            let (cmd, port, verb) = match action {
                LinkAction::Enable { port } => (SpwCommand::LinkEnable { port: *port }, port, "enabled"),
                LinkAction::Reset { port } => (SpwCommand::LinkReset { port: *port }, port, "reset"),
            };
            backend.execute(&cmd)?;
            emit(format!("link {port} {verb}"));
        }
        Command::Discover => {
            if let SpwResponse::PortMask { mask } = backend.execute(&SpwCommand::PortDiscovery)? {
                emit(format!("port status:{}", format_mask(mask)));
            }
        }
        Command::Acquire { max_bytes } => {
            if let SpwResponse::Data { frames } = backend.execute(&SpwCommand::AcquireData { max_bytes: *max_bytes })? {
                for payload in split_frames(&frames) {
                    match AccelSample::parse_payload(payload) {
                        Some((x, y, z)) => emit(format!("sample x:{x} y:{y} z:{z}")),
                        None => emit(format!("packet {} bytes", payload.len())),
                    }
                }
                emit(format!("datasize:{}", frames.len()));
            }
        }
        Command::Tick { n } => {
            let now = backend.tick(*n)?;
            emit(format!("tick:{now}"));
        }
        Command::Inject { x, y, z } => {
            backend.inject(*x, *y, *z)?;
            emit(format!("inject x:{x} y:{y} z:{z}"));
        }
        Command::Serve { .. } | Command::Shell => {
            return Err(CliFailure::Usage("serve and shell are only available from the spwctl binary".into()));
        }
    }
    Ok(())
}

/// `0x05(101B)`: hex byte plus the binary digits.
pub fn format_mask(mask: u32) -> String {
    format!("0x{mask:02X}({mask:b}B)")
}
