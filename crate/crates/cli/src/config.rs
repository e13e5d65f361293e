//! The `--config key=value` override layer. Explicit flags win; config fills
//! anything left unset; built-in defaults cover the rest.

use std::collections::BTreeMap;
use std::path::Path;

use drnet::{Error, Result};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArg(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { values })
    }

    /// Fill `slot` from the config when the flag was not given.
    pub fn fill<T: std::str::FromStr>(&self, slot: &mut Option<T>, key: &str) -> Result<()> {
        if slot.is_none() {
            if let Some(raw) = self.values.get(key) {
                let v = raw.parse().map_err(|_| {
                    Error::InvalidArg(format!("config {key}={raw}: cannot parse"))
                })?;
                *slot = Some(v);
            }
        }
        Ok(())
    }

    /// Boolean flags: config can switch them on when the flag is absent.
    pub fn fill_flag(&self, slot: &mut bool, key: &str) -> Result<()> {
        if !*slot {
            if let Some(raw) = self.values.get(key) {
                *slot = match raw.as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::InvalidArg(format!(
                            "config {key}={other}: want true or false"
                        )))
                    }
                };
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn fills_only_unset_slots() {
        let f = write_cfg("epochs = 7\n# comment\nseed=3\ndilated=true\n");
        let cfg = Config::load(Some(f.path())).unwrap();
        let mut epochs = Some(20usize);
        let mut seed: Option<u64> = None;
        cfg.fill(&mut epochs, "epochs").unwrap();
        cfg.fill(&mut seed, "seed").unwrap();
        assert_eq!(epochs, Some(20));
        assert_eq!(seed, Some(3));
        let mut dilated = false;
        cfg.fill_flag(&mut dilated, "dilated").unwrap();
        assert!(dilated);
    }

    #[test]
    fn rejects_malformed_lines_and_values() {
        let f = write_cfg("just-a-word\n");
        assert!(Config::load(Some(f.path())).is_err());

        let f = write_cfg("epochs=ten\n");
        let cfg = Config::load(Some(f.path())).unwrap();
        let mut epochs: Option<usize> = None;
        assert!(cfg.fill(&mut epochs, "epochs").is_err());

        let f = write_cfg("dilated=maybe\n");
        let cfg = Config::load(Some(f.path())).unwrap();
        let mut dilated = false;
        assert!(cfg.fill_flag(&mut dilated, "dilated").is_err());
    }

    #[test]
    fn no_file_means_empty() {
        let cfg = Config::load(None).unwrap();
        let mut v: Option<usize> = None;
        cfg.fill(&mut v, "anything").unwrap();
        assert_eq!(v, None);
    }
}
