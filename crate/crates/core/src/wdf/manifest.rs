//! Install manifest: the INI subset a driver package uses to declare its
//! device class, provider, version and interface GUID.
//!
//! ```text
//! [Version]
//! Class=Multifunction
//! Provider=SpwLab
//! DriverVer=06/01/2014,1.0.0.0
//!
//! [Interface]
//! Guid={...}
//! ```
//!
//! Section and key names are case-insensitive, `;` starts a comment, values
//! may be double-quoted, unknown sections and keys are ignored.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ioctl::Guid;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("missing [{0}] section")]
    MissingSection(&'static str),
    #[error("missing {key} in [{section}]")]
    MissingKey { section: &'static str, key: &'static str },
    #[error("bad DriverVer {0:?}, expected MM/DD/YYYY,a.b.c.d")]
    BadVersionFormat(String),
    #[error("bad interface GUID {0:?}")]
    BadGuid(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DriverVersion {
    pub month: u8,
    pub day: u8,
    pub year: u16,
    pub version: [u16; 4],
}

impl FromStr for DriverVersion {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ManifestError::BadVersionFormat(s.to_string());
        let (date, version) = s.split_once(',').ok_or_else(bad)?;
        let date: Vec<&str> = date.trim().split('/').collect();
        let [m, d, y] = date[..] else { return Err(bad()) };
        if m.len() != 2 || d.len() != 2 || y.len() != 4 {
            return Err(bad());
        }
        let month: u8 = m.parse().map_err(|_| bad())?;
        let day: u8 = d.parse().map_err(|_| bad())?;
        let year: u16 = y.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
            return Err(bad());
        }
        let parts: Vec<&str> = version.trim().split('.').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut v = [0u16; 4];
        for (slot, p) in v.iter_mut().zip(parts) {
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            *slot = p.parse().map_err(|_| bad())?;
        }
        Ok(Self {
            month,
            day,
            year,
            version: v,
        })
    }
}

impl fmt::Display for DriverVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.version;
        write!(f, "{:02}/{:02}/{:04},{a}.{b}.{c}.{d}", self.month, self.day, self.year)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallManifest {
    pub device_class: String,
    pub provider: String,
    pub driver_version: DriverVersion,
    pub interface_guid: Guid,
}

impl InstallManifest {
    /// Canonical text form; parses back to an equal manifest.
    pub fn to_canonical_string(&self) -> String {
        format!(
            "[Version]\r\nClass={}\r\nProvider={}\r\nDriverVer={}\r\n\r\n[Interface]\r\nGuid={{{}}}\r\n",
            self.device_class, self.provider, self.driver_version, self.interface_guid
        )
    }
}

impl FromStr for InstallManifest {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_install_manifest(s)
    }
}

type Sections = HashMap<String, HashMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections, ManifestError> {
    let mut sections: Sections = HashMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ManifestError::Syntax {
                line: i + 1,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim().to_ascii_lowercase();
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ManifestError::Syntax {
                line: i + 1,
                msg: "expected key=value".into(),
            });
        };
        // Keys outside any section are ignored, like unknown keys.
        if let Some(section) = &current {
            sections
                .get_mut(section)
                .expect("created on header")
                .insert(key.trim().to_ascii_lowercase(), unquote(value.trim()).to_string());
        }
    }
    Ok(sections)
}

/// Strips a `;` comment, ignoring semicolons inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            ';' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(v)
}

fn required<'a>(
    sections: &'a Sections,
    section: &'static str,
    key: &'static str,
) -> Result<&'a str, ManifestError> {
    let s = sections
        .get(&section.to_ascii_lowercase())
        .ok_or(ManifestError::MissingSection(section))?;
    s.get(&key.to_ascii_lowercase())
        .map(String::as_str)
        .ok_or(ManifestError::MissingKey { section, key })
}

pub fn parse_install_manifest(text: &str) -> Result<InstallManifest, ManifestError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let sections = parse_sections(text)?;
    let device_class = required(&sections, "Version", "Class")?;
    if device_class.is_empty() {
        return Err(ManifestError::MissingKey {
            section: "Version",
            key: "Class",
        });
    }
    let provider = required(&sections, "Version", "Provider")?;
    let driver_version = required(&sections, "Version", "DriverVer")?.parse()?;
    let guid = required(&sections, "Interface", "Guid")?;
    let interface_guid = guid.parse().map_err(|_| ManifestError::BadGuid(guid.to_string()))?;
    Ok(InstallManifest {
        device_class: device_class.to_string(),
        provider: provider.to_string(),
        driver_version,
        interface_guid,
    })
}
