// SPDX-License-Identifier: Apache-2.0

//! Guest build manifest.
//!
//! Maps workload names to a binary, entry mode, memory size and the
//! hypercalls the workload needs:
//!
//! ```toml
//! [workload.fib64]
//! binary = "bin/fib64.bin"      # relative to the manifest
//! entry_mode = "long64"
//! mem_size = "64K"              # or an integer byte count
//! hypercalls = ["return_data"]  # names or numbers; exit is implied
//!
//! [workload.hlt]
//! builtin = "hlt"               # one of the embedded hardware guests
//! entry_mode = "real16"
//! mem_size = 65536
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::hypercall::{HypercallNr, HypercallPolicy, MAX_NR};
use crate::image::{ImageError, VirtineImage};
use crate::platform::ProcessorMode;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing manifest: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("workload {workload:?}: {reason}")]
    Invalid { workload: String, reason: String },
    #[error("no workload named {0:?}")]
    Unknown(String),
    #[error("workload {workload:?}: {source}")]
    Image {
        workload: String,
        source: ImageError,
    },
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(untagged)]
enum Size {
    Bytes(u64),
    Text(String),
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(untagged)]
enum CallName {
    Nr(u64),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    binary: Option<PathBuf>,
    builtin: Option<String>,
    entry_mode: ProcessorMode,
    mem_size: Size,
    #[serde(default)]
    hypercalls: Vec<CallName>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    workload: BTreeMap<String, RawEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageSource {
    Binary(PathBuf),
    Builtin(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkloadEntry {
    pub name: String,
    pub source: ImageSource,
    pub entry_mode: ProcessorMode,
    pub mem_size: usize,
    /// Bit `n` set means hypercall `n` is required.
    pub hypercall_mask: u64,
}

impl WorkloadEntry {
    pub fn image(&self) -> Result<VirtineImage, ManifestError> {
        let code = match &self.source {
            ImageSource::Binary(path) => std::fs::read(path).map_err(|source| ManifestError::Io {
                path: path.clone(),
                source,
            })?,
            ImageSource::Builtin(name) => VirtineImage::builtin(name)
                .ok_or_else(|| ManifestError::Invalid {
                    workload: self.name.clone(),
                    reason: format!("unknown builtin {name:?}"),
                })?
                .code()
                .to_vec(),
        };
        VirtineImage::new(&self.name, code, self.entry_mode, self.mem_size).map_err(|source| {
            ManifestError::Image {
                workload: self.name.clone(),
                source,
            }
        })
    }

    /// Policy allowing exactly the required hypercalls.
    pub fn policy(&self) -> HypercallPolicy {
        HypercallPolicy::builder().mask(self.hypercall_mask).build()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub workloads: BTreeMap<String, WorkloadEntry>,
}

fn parse_size(s: &Size) -> Option<u64> {
    match s {
        Size::Bytes(n) => Some(*n),
        Size::Text(t) => {
            let t = t.trim();
            let (num, mult) = match t.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
                None => (t, 1),
                Some((i, _)) => {
                    let mult = match t[i..].trim().to_ascii_uppercase().as_str() {
                        "K" | "KB" | "KIB" => 1 << 10,
                        "M" | "MB" | "MIB" => 1 << 20,
                        "G" | "GB" | "GIB" => 1 << 30,
                        _ => return None,
                    };
                    (&t[..i], mult)
                }
            };
            num.parse::<u64>().ok()?.checked_mul(mult)
        }
    }
}

impl Manifest {
    /// Parses manifest text; relative binary paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ManifestError> {
        let raw: RawManifest = toml::from_str(text)?;
        let mut workloads = BTreeMap::new();
        for (name, e) in raw.workload {
            let invalid = |reason: String| ManifestError::Invalid {
                workload: name.clone(),
                reason,
            };
            let source = match (e.binary, e.builtin) {
                (Some(p), None) => ImageSource::Binary(base_dir.join(p)),
                (None, Some(b)) => ImageSource::Builtin(b),
                _ => return Err(invalid("exactly one of `binary` or `builtin` is required".into())),
            };
            let mem_size = parse_size(&e.mem_size)
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| invalid(format!("bad mem_size {:?}", e.mem_size)))?;
            let mut mask = HypercallNr::Exit.bit();
            for call in &e.hypercalls {
                let nr = match call {
                    CallName::Nr(n) if *n < MAX_NR => *n,
                    CallName::Name(s) => HypercallNr::from_name(s)
                        .ok_or_else(|| invalid(format!("unknown hypercall {s:?}")))?
                        as u64,
                    CallName::Nr(n) => return Err(invalid(format!("hypercall {n} out of range"))),
                };
                mask |= 1 << nr;
            }
            workloads.insert(
                name.clone(),
                WorkloadEntry {
                    name,
                    source,
                    entry_mode: e.entry_mode,
                    mem_size,
                    hypercall_mask: mask,
                },
            );
        }
        Ok(Manifest { workloads })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn get(&self, name: &str) -> Result<&WorkloadEntry, ManifestError> {
        self.workloads
            .get(name)
            .ok_or_else(|| ManifestError::Unknown(name.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
        [workload.fib64]
        binary = "bin/fib64.bin"
        entry_mode = "long64"
        mem_size = "64K"
        hypercalls = ["return_data", 11]

        [workload.hlt]
        builtin = "hlt"
        entry_mode = "real16"
        mem_size = 65536
    "#;

    #[test]
    fn parses() {
        let m = Manifest::parse(TEXT, Path::new("/guests")).unwrap();
        let fib = m.get("fib64").unwrap();
        assert_eq!(fib.source, ImageSource::Binary("/guests/bin/fib64.bin".into()));
        assert_eq!(fib.entry_mode, ProcessorMode::Long64);
        assert_eq!(fib.mem_size, 65536);
        assert_eq!(fib.hypercall_mask, 1 | 1 << 3 | 1 << 11);
        assert!(fib.policy().allows(3) && !fib.policy().allows(4));
        let hlt = m.get("hlt").unwrap();
        assert_eq!(hlt.image().unwrap().code(), &[0xf4]);
        assert!(matches!(m.get("nope"), Err(ManifestError::Unknown(_))));
    }

    #[test]
    fn rejects_bad_entries() {
        let both = "[workload.x]\nbinary = \"a\"\nbuiltin = \"hlt\"\nentry_mode = \"long64\"\nmem_size = 1";
        assert!(matches!(Manifest::parse(both, Path::new(".")), Err(ManifestError::Invalid { .. })));
        let bad_call = "[workload.x]\nbuiltin = \"hlt\"\nentry_mode = \"long64\"\nmem_size = 1\nhypercalls = [\"fork\"]";
        assert!(Manifest::parse(bad_call, Path::new(".")).is_err());
        let bad_mode = "[workload.x]\nbuiltin = \"hlt\"\nentry_mode = \"v86\"\nmem_size = 1";
        assert!(matches!(Manifest::parse(bad_mode, Path::new(".")), Err(ManifestError::Parse(_))));
        assert_eq!(parse_size(&Size::Text("16 MiB".into())), Some(16 << 20));
        assert_eq!(parse_size(&Size::Text("3X".into())), None);
    }

    #[test]
    fn missing_binary_is_io_error() {
        let m = Manifest::parse("[workload.x]\nbinary = \"nope.bin\"\nentry_mode = \"long64\"\nmem_size = 65536", Path::new("/nonexistent")).unwrap();
        assert!(matches!(m.get("x").unwrap().image(), Err(ManifestError::Io { .. })));
    }
}
