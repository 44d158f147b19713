//! Versioned JSON checkpoints. Floats are written with 17 significant digits so
//! every value round-trips exactly.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cfgstack-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: M,
    pub params: BTreeMap<String, Matrix>,
}

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn new(kind: impl Into<String>, meta: M, params: &ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta,
            params: params.to_record(),
        }
    }

    pub fn to_string(&self) -> Result<String> {
        to_json_string(self)
    }

    /// Parses and checks the format tag, version and expected kind.
    pub fn parse(text: &str, expected_kind: &str) -> Result<Self> {
        let ckpt: Checkpoint<M> = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format `{}`",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds `{}`, expected `{expected_kind}`",
                ckpt.kind
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_string()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected_kind)
    }

    pub fn param_store(&self) -> ParamStore {
        ParamStore::from_record(self.params.clone())
    }
}

/// JSON formatter that prints every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sig17Formatter;

impl serde_json::ser::Formatter for Sig17Formatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{:.16e}", f64::from(value))
    }
}

/// Compact JSON with [`Sig17Formatter`] float formatting.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17Formatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
