//! Task runner for the soft-ocp studies: configuration, problem building and
//! artifact output.

pub mod config;
pub mod output;
pub mod tasks;

use std::path::{Path, PathBuf};

pub use config::{ConfigError, TaskConfig};
pub use tasks::{run, TaskError, TaskOutcome};

/// Directory holding the bundled task files.
pub fn bundled_tasks_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tasks")
}

/// Bundled task names, sorted.
pub fn bundled_tasks() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(bundled_tasks_dir())
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension()? == "toml").then(|| p.file_stem()?.to_str().map(String::from))?
                })
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

/// A config path, or the name of a bundled task.
pub fn resolve_config(arg: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.exists() {
        return p;
    }
    let bundled = bundled_tasks_dir().join(format!("{arg}.toml"));
    if bundled.exists() {
        bundled
    } else {
        p
    }
}

pub fn load_bundled(name: &str) -> Result<TaskConfig, ConfigError> {
    TaskConfig::load(&bundled_tasks_dir().join(format!("{name}.toml")))
}
