//! Service configuration: UTF-8 `key=value` lines, `#` comments.
//!
//! ```text
//! bar0_base=0xD2100000
//! bar2_base=0xD2000000
//! guid=6b4c0d4a-3c9e-4e8b-9e33-2b0f7e1c5a10
//! topology=default
//! sample_period=10
//! listen=127.0.0.1:8080
//! auto_tick=on
//! ```

use std::path::{Path, PathBuf};

use spw_core::ioctl::Guid;
use spw_core::net::{NetError, Topology, Waveform};
use spw_core::testbed::{TestbedConfig, DEFAULT_BAR0_BASE, DEFAULT_BAR2_BASE, DEFAULT_INTERFACE_GUID};
use thiserror::Error;

pub const CONFIG_ENV: &str = "SPW_CONFIG";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_AUTO_TICK_RATE: u32 = 50;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: &'static str, value: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("topology {}: {source}", path.display())]
    Topology {
        path: PathBuf,
        #[source]
        source: NetError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologySource {
    Default,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub bar0_base: u64,
    pub bar2_base: u64,
    pub guid: Guid,
    pub topology: TopologySource,
    pub sample_period: u64,
    pub waveform: Waveform,
    pub listen: String,
    pub auto_tick: bool,
    /// Ticks per second while auto-tick is on.
    pub auto_tick_rate: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bar0_base: DEFAULT_BAR0_BASE,
            bar2_base: DEFAULT_BAR2_BASE,
            guid: DEFAULT_INTERFACE_GUID,
            topology: TopologySource::Default,
            sample_period: spw_core::net::DEFAULT_SAMPLE_PERIOD,
            waveform: Waveform::default(),
            listen: DEFAULT_LISTEN.to_string(),
            auto_tick: false,
            auto_tick_rate: DEFAULT_AUTO_TICK_RATE,
        }
    }
}

fn parse_u64(key: &'static str, v: &str) -> Result<u64, ConfigError> {
    let bad = || ConfigError::BadValue {
        key,
        value: v.to_string(),
    };
    match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).map_err(|_| bad()),
        None => v.replace('_', "").parse().map_err(|_| bad()),
    }
}

fn parse_switch(key: &'static str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key,
            value: v.to_string(),
        }),
    }
}

/// `zero`, `constant,<x>,<y>,<z>` or `square,<amplitude>,<half_period>`.
fn parse_waveform(v: &str) -> Result<Waveform, ConfigError> {
    let bad = || ConfigError::BadValue {
        key: "waveform",
        value: v.to_string(),
    };
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let int = |s: &str| s.parse::<i32>().map_err(|_| bad());
    match parts[..] {
        ["zero"] => Ok(Waveform::default()),
        ["constant", x, y, z] => Ok(Waveform::Constant {
            x: int(x)?,
            y: int(y)?,
            z: int(z)?,
        }),
        ["square", a, hp] => {
            let half_period: u64 = hp.parse().map_err(|_| bad())?;
            if half_period == 0 {
                return Err(bad());
            }
            Ok(Waveform::SquareX {
                amplitude: int(a)?,
                half_period,
            })
        }
        _ => Err(bad()),
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "expected key=value".into(),
                });
            };
            let value = value.trim();
            match key.trim() {
                "bar0_base" => cfg.bar0_base = parse_u64("bar0_base", value)?,
                "bar2_base" => cfg.bar2_base = parse_u64("bar2_base", value)?,
                "guid" => {
                    cfg.guid = value.parse().map_err(|_| ConfigError::BadValue {
                        key: "guid",
                        value: value.to_string(),
                    })?
                }
                "topology" => {
                    cfg.topology = match value {
                        "default" => TopologySource::Default,
                        path => TopologySource::File(PathBuf::from(path)),
                    }
                }
                "sample_period" => {
                    cfg.sample_period = parse_u64("sample_period", value)?;
                    if cfg.sample_period == 0 {
                        return Err(ConfigError::BadValue {
                            key: "sample_period",
                            value: value.to_string(),
                        });
                    }
                }
                "waveform" => cfg.waveform = parse_waveform(value)?,
                "listen" => cfg.listen = value.to_string(),
                "auto_tick" => cfg.auto_tick = parse_switch("auto_tick", value)?,
                "auto_tick_rate" => {
                    let rate = parse_u64("auto_tick_rate", value)?;
                    if rate == 0 || rate > 10_000 {
                        return Err(ConfigError::BadValue {
                            key: "auto_tick_rate",
                            value: value.to_string(),
                        });
                    }
                    cfg.auto_tick_rate = rate as u32;
                }
                other => {
                    return Err(ConfigError::UnknownKey {
                        line: i + 1,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(cfg)
    }

    /// Reads `path`; a relative topology path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let TopologySource::File(p) = &cfg.topology {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.topology = TopologySource::File(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    /// Loads the file named by `SPW_CONFIG`, or the defaults when unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn testbed_config(&self) -> Result<TestbedConfig, ConfigError> {
        let topology = match &self.topology {
            TopologySource::Default => Topology::verification(),
            TopologySource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                Topology::parse(&text).map_err(|source| ConfigError::Topology {
                    path: path.clone(),
                    source,
                })?
            }
        };
        let mut tb = TestbedConfig {
            bar0_base: self.bar0_base,
            bar2_base: self.bar2_base,
            topology,
            sample_period: self.sample_period,
            waveform: self.waveform,
            ..TestbedConfig::default()
        };
        tb.driver.interface_guid = self.guid;
        Ok(tb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ServiceConfig::parse("").unwrap();
        assert_eq!(cfg, ServiceConfig::default());
        let cfg = ServiceConfig::parse(
            "# bench\nbar0_base=0xD2100000\nbar2_base = 3523215360\nsample_period=5\nauto_tick=on\nlisten=0.0.0.0:9000\nwaveform=square,500,20\n",
        )
        .unwrap();
        assert_eq!(cfg.bar0_base, 0xD210_0000);
        assert_eq!(cfg.bar2_base, 0xD200_0000);
        assert_eq!(cfg.sample_period, 5);
        assert!(cfg.auto_tick);
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(
            cfg.waveform,
            Waveform::SquareX {
                amplitude: 500,
                half_period: 20
            }
        );
    }

    #[test]
    fn rejects() {
        assert!(matches!(ServiceConfig::parse("bar0_base"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ServiceConfig::parse("\ncolour=red"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(ServiceConfig::parse("bar0_base=0xZZ"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ServiceConfig::parse("guid=nope"), Err(ConfigError::BadValue { key: "guid", .. })));
        assert!(matches!(ServiceConfig::parse("auto_tick=maybe"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ServiceConfig::parse("sample_period=0"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ServiceConfig::parse("waveform=square,1,0"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn testbed_mapping() {
        let cfg = ServiceConfig::parse("bar0_base=0xE0000000\nguid={0E3B6F4C-9A51-4D2E-8C07-55AA33CC1122}").unwrap();
        let tb = cfg.testbed_config().unwrap();
        assert_eq!(tb.bar0_base, 0xE000_0000);
        assert_eq!(tb.driver.interface_guid.to_string(), "0e3b6f4c-9a51-4d2e-8c07-55aa33cc1122");
        assert_eq!(tb.topology, Topology::verification());
    }
}
