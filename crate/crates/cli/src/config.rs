//! TOML run configuration layered over the built-in defaults.

use std::path::Path;

use jointdiff_core::pipeline::PipelineConfig;
use jointdiff_core::{io, Error, Result};

/// Builds the run configuration: defaults for `seed`, then every key present
/// in the optional TOML file, then `seed_override` for the global seed.
///
/// The TOML mirrors the JSON config recorded in manifests, e.g.
///
/// ```toml
/// seed = 7
/// eval_samples = 1000
/// [disc_train]
/// steps = 500
/// ```
///
/// A file that sets `seed` re-derives every per-stage seed it does not set
/// explicitly.
pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<PipelineConfig> {
    let overlay = match path {
        Some(p) => {
            let text = io::read_to_string(p)?;
            let value: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?;
            Some(value)
        }
        None => None,
    };
    let file_seed = overlay
        .as_ref()
        .and_then(|v| v.get("seed"))
        .map(|s| {
            s.as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))
        })
        .transpose()?;
    let seed = seed_override.or(file_seed).unwrap_or(0);

    let mut base = serde_json::to_value(PipelineConfig::new(seed)).expect("config serializes");
    if let Some(o) = overlay {
        let o = serde_json::to_value(o).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, o, "")?;
    }
    if let Some(s) = seed_override {
        base["seed"] = serde_json::Value::from(s);
    }
    let cfg: PipelineConfig =
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value, at: &str) -> Result<()> {
    use serde_json::Value;
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown config key {path}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults_without_file() {
        assert_eq!(load(None, Some(3)).unwrap(), PipelineConfig::new(3));
        assert_eq!(load(None, None).unwrap(), PipelineConfig::new(0));
    }

    #[test]
    fn overlay_keeps_other_defaults() {
        let f = write("seed = 5\neval_samples = 10\n[disc_train]\nsteps = 3\n");
        let cfg = load(Some(f.path()), None).unwrap();
        let mut want = PipelineConfig::new(5);
        want.eval_samples = 10;
        want.disc_train.steps = 3;
        assert_eq!(cfg, want);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["eval_samples = \"many\"", "nonsense = 1", "seed = -1", "[[["] {
            let f = write(text);
            assert!(matches!(load(Some(f.path()), None), Err(Error::Config(_))), "{text}");
        }
    }
}
