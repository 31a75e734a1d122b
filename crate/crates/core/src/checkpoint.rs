//! Safetensors checkpoints. Every parameter is stored as `group/name`; the
//! codec configuration and the completed stages travel in the metadata.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Device;

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::pipeline::model::{HdcModel, Stage};

pub const FORMAT: &str = "hdc-checkpoint";
pub const VERSION: &str = "1";

/// Conventional file name of the checkpoint written after `stage`.
pub fn stage_file(dir: impl AsRef<Path>, stage: Stage) -> PathBuf {
    dir.as_ref().join(format!("stage-{}.safetensors", stage.number()))
}

pub fn to_bytes(model: &HdcModel) -> Result<Vec<u8>> {
    let stages: Vec<&str> = model.trained.iter().map(|s| s.name()).collect();
    let meta: HashMap<String, String> = [
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("stages".to_string(), stages.join(",")),
        ("config".to_string(), model.cfg.to_toml_string()?),
    ]
    .into();
    let tensors = model.named_tensors();
    safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes atomically: a crash never leaves a truncated checkpoint behind.
pub fn save(model: &HdcModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, to_bytes(model)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<HdcModel> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k:?}")))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("not an {FORMAT} file")));
    }
    if field("version")? != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", field("version")?)));
    }
    let cfg = CodecConfig::from_toml_str(field("config")?)?;
    let mut model = HdcModel::new(&cfg)?;
    let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
    model.load_tensors(&tensors)?;
    model.trained = field("stages")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<HdcModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_group() {
        let cfg = CodecConfig::toy();
        let mut model = HdcModel::new(&cfg).unwrap();
        model.trained = vec![Stage::BasePretrain, Stage::Enhancer];
        let dir = tempfile::tempdir().unwrap();
        let path = stage_file(dir.path(), Stage::Enhancer);
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.fingerprints().unwrap(), model.fingerprints().unwrap());
        assert_eq!(back.trained, model.trained);
        assert_eq!(back.cfg, cfg);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(load(dir.path().join("missing.safetensors")).is_err());
    }
}
