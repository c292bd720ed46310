use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cobl::io::write_json;
use serde_json::{json, Value};

use crate::config::{to_toml, RunConfig};
use crate::Failure;

/// Where an output lives and how its run metadata is stored next to it.
pub(crate) enum Output {
    /// A directory that receives `config.toml` and `run.json`.
    Dir(PathBuf),
    /// A file whose metadata goes to `<file>.config.toml` and
    /// `<file>.run.json`.
    File(PathBuf),
}

impl Output {
    /// Refuses to reuse an existing output unless `overwrite` is set, in
    /// which case the old output is removed.
    pub(crate) fn prepare(&self, overwrite: bool) -> Result<(), Failure> {
        match self {
            Output::Dir(d) => {
                let occupied = d.exists()
                    && fs::read_dir(d)
                        .map_err(|e| Failure::io(d, e))?
                        .next()
                        .is_some();
                if occupied {
                    if !overwrite {
                        return Err(Failure::Usage(format!(
                            "{} already exists and is not empty; pass --overwrite to replace it",
                            d.display()
                        )));
                    }
                    fs::remove_dir_all(d).map_err(|e| Failure::io(d, e))?;
                }
                fs::create_dir_all(d).map_err(|e| Failure::io(d, e))
            }
            Output::File(f) => {
                if f.exists() && !overwrite {
                    return Err(Failure::Usage(format!(
                        "{} already exists; pass --overwrite to replace it",
                        f.display()
                    )));
                }
                if let Some(parent) = f.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
                }
                Ok(())
            }
        }
    }

    fn meta_paths(&self) -> (PathBuf, PathBuf) {
        match self {
            Output::Dir(d) => (d.join("config.toml"), d.join("run.json")),
            Output::File(f) => {
                let with = |suffix: &str| {
                    let mut s = f.as_os_str().to_owned();
                    s.push(suffix);
                    PathBuf::from(s)
                };
                (with(".config.toml"), with(".run.json"))
            }
        }
    }
}

/// Environment and provenance written next to every output.
pub(crate) struct Stamp<'a> {
    pub command: &'a str,
    pub args: &'a [String],
    pub threads: usize,
    pub config: &'a RunConfig,
    /// Input name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub extra: Value,
}

impl Stamp<'_> {
    pub(crate) fn write(&self, out: &Output) -> Result<(), Failure> {
        let (toml_path, json_path) = out.meta_paths();
        fs::write(&toml_path, to_toml(self.config)).map_err(|e| Failure::io(&toml_path, e))?;
        let doc = json!({
            "command": self.command,
            "args": self.args,
            "config": self.config,
            "environment": {
                "version": env!("CARGO_PKG_VERSION"),
                "os": std::env::consts::OS,
                "arch": std::env::consts::ARCH,
                "threads": self.threads,
            },
            "inputs": self.inputs,
            "result": self.extra,
        });
        write_json(&json_path, &doc)?;
        Ok(())
    }
}

pub(crate) fn hash_input(inputs: &mut BTreeMap<String, String>, name: &str, path: &Path) -> Result<(), Failure> {
    inputs.insert(name.to_string(), cobl::diffusion::checkpoint::file_hash(path)?);
    Ok(())
}
