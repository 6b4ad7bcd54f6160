use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dmp_core::{Error, Result};

use crate::config::RunConfig;

pub const RUN_ROOT_ENV: &str = "DMP_RUN_ROOT";

/// One directory per invocation, holding the config echo, the log and all outputs.
pub struct RunDir {
    root: PathBuf,
    log: std::cell::RefCell<File>,
}

fn fresh(path: &Path) -> Result<()> {
    match fs::create_dir(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            let empty = fs::read_dir(path).map_err(|e| Error::io(path, e))?.next().is_none();
            if empty {
                Ok(())
            } else {
                Err(Error::config(format!("refusing to overwrite non-empty run directory {}", path.display())))
            }
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

impl RunDir {
    pub fn create(command: &str, seed: u64, out: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        let root = match out {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                fresh(p)?;
                p.to_path_buf()
            }
            None => {
                let base = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
                fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
                let name = format!("{command}-{stamp}-seed{seed}");
                let mut path = base.join(&name);
                let mut n = 1;
                while fs::create_dir(&path).is_err() {
                    if n > 1000 {
                        return Err(Error::config(format!("cannot create a run directory under {}", base.display())));
                    }
                    path = base.join(format!("{name}-{n}"));
                    n += 1;
                }
                path
            }
        };
        let cfg_path = root.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = root.join("log.txt");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let run = RunDir {
            root,
            log: std::cell::RefCell::new(log),
        };
        run.log(&format!("dmp {command} -> {}", run.root.display()));
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes a timestamped line to log.txt and the message to stderr.
    pub fn log(&self, msg: &str) {
        eprintln!("{msg}");
        let stamp = chrono::Local::now().format("%Y-%m-%dT%H:%M:%S%.3f");
        let _ = writeln!(self.log.borrow_mut(), "[{stamp}] {msg}");
    }
}
