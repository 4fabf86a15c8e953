//! Binary checkpoint format. See `docs/FORMATS.md` for the byte layout.

use std::fs;
use std::path::Path;

use super::params::{EncoderConfig, ModularEncoderParams, ParamGroup, Stage};
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::scoring::LanguageId;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CXMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModularEncoderParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.hidden_dim,
            c.bottleneck_dim,
            c.num_layers,
            c.output_dim,
            c.max_positions,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.stage.to_byte());
        out.extend_from_slice(&(self.weights.adapters.len() as u32).to_le_bytes());
        for lang in self.weights.adapters.keys() {
            let name = lang.as_str().as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(self.extension_languages.contains(lang) as u8);
        }
        for group in self.weights.groups() {
            for slice in self.weights.group_slices(&group) {
                for v in slice {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let config = EncoderConfig {
            vocab_size: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            bottleneck_dim: r.u32()? as usize,
            num_layers: r.u32()? as usize,
            output_dim: r.u32()? as usize,
            max_positions: r.u32()? as usize,
        };
        config.validate()?;
        let stage = Stage::from_byte(r.u8()?)?;
        let count = r.u32()? as usize;
        let mut langs = Vec::with_capacity(count);
        let mut extension = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("checkpoint: language name is not utf-8".into()))?;
            let lang = LanguageId::new(name);
            if r.u8()? != 0 {
                extension.push(lang.clone());
            }
            langs.push(lang);
        }
        // allocate the right shapes, then overwrite every value in order
        let mut params = ModularEncoderParams::new(config, &langs, 0)?;
        params.stage = stage;
        params.extension_languages = extension.into_iter().collect();
        let groups: Vec<ParamGroup> = params.weights.groups();
        for group in groups {
            for slice in params.weights.group_slices_mut(&group) {
                for v in slice.iter_mut() {
                    *v = r.f64()?;
                }
            }
        }
        r.finish()?;
        params.check_finite()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
