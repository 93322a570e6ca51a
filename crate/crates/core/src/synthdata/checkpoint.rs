//! Checkpoint container for the four parameter groups.
//!
//! Layout (integers little-endian):
//! `GSCK`, version u8, config length u32, config UTF-8, config SHA-256
//! (32 bytes), group count u8, then per group: name length u8, name, entry
//! count u32, element count u64, and per entry a u16-length-prefixed UTF-8
//! label followed by a GSTN blob. A SHA-256 of every preceding byte closes
//! the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::gstn::{write_tensor, Cursor};
use crate::autodiff::{GroupName, ParamGroup};
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: [u8; 4] = *b"GSCK";
const VERSION: u8 = 1;

pub fn config_digest(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Resolved configuration the parameters were trained under.
    pub config: String,
    pub g: ParamGroup<T>,
    pub h: ParamGroup<T>,
    pub s: ParamGroup<T>,
    pub a: ParamGroup<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn groups(&self) -> [&ParamGroup<T>; 4] {
        [&self.g, &self.h, &self.s, &self.a]
    }

    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.config)
    }

    /// A warning when the stored config differs from `config_text`.
    pub fn config_warning(&self, config_text: &str) -> Option<String> {
        (self.digest() != config_digest(config_text))
            .then(|| "checkpoint was written under a different configuration".to_string())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.push(VERSION);
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.digest());
        b.push(4);
        for (name, group) in GroupName::ALL.iter().zip(self.groups()) {
            if group.name() != *name {
                return Err(Error::invalid(format!("group {} stored in the {name} slot", group.name())));
            }
            let label = name.as_str().as_bytes();
            b.push(label.len() as u8);
            b.extend_from_slice(label);
            b.extend_from_slice(&(group.len() as u32).to_le_bytes());
            b.extend_from_slice(&(group.numel() as u64).to_le_bytes());
            for (label, t) in group.entries() {
                let label = label.as_bytes();
                let len = u16::try_from(label.len()).map_err(|_| Error::invalid("tensor label too long"))?;
                b.extend_from_slice(&len.to_le_bytes());
                b.extend_from_slice(label);
                write_tensor(&mut b, t)?;
            }
        }
        let trailer = Sha256::digest(&b);
        b.extend_from_slice(&trailer);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Format { offset: 0, msg: format!("checkpoint of {} bytes is too short", bytes.len()) });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Format {
                offset: body.len() as u64,
                msg: "checksum mismatch, checkpoint is corrupt".into(),
            });
        }
        let mut cur = Cursor::new(body, 0);
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, not a checkpoint".into() });
        }
        let version = cur.u8("version")?;
        if version != VERSION {
            return cur.fail(format!("unsupported checkpoint version {version}"));
        }
        let n = cur.u32("config length")? as usize;
        let config = match std::str::from_utf8(cur.take(n, "config")?) {
            Ok(s) => s.to_string(),
            Err(_) => return cur.fail("config text is not UTF-8"),
        };
        let digest = cur.take(32, "config digest")?;
        if digest != config_digest(&config) {
            return cur.fail("config digest does not match the stored config");
        }
        let count = cur.u8("group count")?;
        let mut groups: Vec<Option<ParamGroup<T>>> = vec![None, None, None, None];
        for _ in 0..count {
            let at = cur.offset();
            let len = cur.u8("group name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "group name")?).ok().and_then(GroupName::parse);
            let Some(name) = name else {
                return Err(Error::Format { offset: at, msg: "unknown group name".into() });
            };
            let entries = cur.u32("entry count")?;
            let numel = cur.u64("element count")?;
            let mut group = ParamGroup::new(name);
            for _ in 0..entries {
                let len = u16::from_le_bytes(cur.take(2, "label length")?.try_into().unwrap()) as usize;
                let label = match std::str::from_utf8(cur.take(len, "label")?) {
                    Ok(s) => s.to_string(),
                    Err(_) => return cur.fail("label is not UTF-8"),
                };
                group.push(label, cur.tensor()?);
            }
            if group.numel() as u64 != numel {
                return cur.fail(format!("group {name} holds {} elements, header says {numel}", group.numel()));
            }
            let slot = GroupName::ALL.iter().position(|g| *g == name).unwrap();
            if groups[slot].replace(group).is_some() {
                return Err(Error::Format { offset: at, msg: format!("group {name} appears twice") });
            }
        }
        if cur.rest() != 0 {
            return cur.fail(format!("{} unexpected bytes before the checksum", cur.rest()));
        }
        let mut take = |i: usize| {
            groups[i]
                .take()
                .ok_or_else(|| Error::Format { offset: body.len() as u64, msg: format!("missing group {}", GroupName::ALL[i]) })
        };
        Ok(Self { config, g: take(0)?, h: take(1)?, s: take(2)?, a: take(3)? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
