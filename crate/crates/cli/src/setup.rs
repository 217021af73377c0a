//! Config resolution, run directories and error classes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bella_core::config::RunConfig;
use bella_core::dataset::Dataset;
use bella_core::BellaError;

pub const CONFIG_FILE: &str = "config.json";
pub const SEED_ENV: &str = "BELLA_SEED";

#[derive(Debug)]
pub enum CliError {
    /// Malformed or unknown configuration (exit 2).
    Schema(String),
    /// A referenced checkpoint file does not exist (exit 3).
    MissingCheckpoint(String),
    /// Anything else (exit 1).
    Runtime(String),
}

impl From<BellaError> for CliError {
    fn from(e: BellaError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<bella_numcore::NumError> for CliError {
    fn from(e: bella_numcore::NumError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn log(msg: impl AsRef<str>) {
    eprintln!("bella: {}", msg.as_ref());
}

pub fn config_keys_help() -> String {
    let keys = RunConfig::default_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set with --set KEY=VALUE or in --config FILE), with defaults:\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s.push_str(&format!(
        "\nEnvironment:\n  {SEED_ENV}  overrides data.seed for `gen`, train.seed otherwise\n"
    ));
    s
}

fn value_of(cfg: &RunConfig, key: &str) -> String {
    let doc = serde_json::to_value(cfg).expect("config serializes");
    key.split_once('.')
        .and_then(|(s, f)| doc.get(s).and_then(|v| v.get(f)))
        .map(|v| v.to_string())
        .unwrap_or_else(|| "?".into())
}

fn apply(cfg: &mut RunConfig, key: &str, value: &str, source: &str) -> CliResult<()> {
    let before = value_of(cfg, key);
    cfg.set(key, value)
        .map_err(|e| CliError::Schema(format!("{source}: {e}")))?;
    let after = value_of(cfg, key);
    if before != after {
        log(format!("{key}: {before} -> {after} ({source})"));
    }
    Ok(())
}

/// Config file, then `--set` overrides, then `BELLA_SEED` on `seed_key`, then
/// command flags. Every change is logged.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[String],
    seed_key: &str,
    flags: &[(&str, String)],
) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Schema(e.to_string()))?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Schema(format!("--set `{o}` must look like key=value")))?;
        apply(&mut cfg, k.trim(), v.trim(), "--set")?;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        v.trim()
            .parse::<u64>()
            .map_err(|_| CliError::Schema(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        apply(&mut cfg, seed_key, v.trim(), SEED_ENV)?;
    }
    for (k, v) in flags {
        apply(&mut cfg, k, v, "flag")?;
    }
    for w in cfg.train.warnings() {
        log(format!("warning: {w}"));
    }
    Ok(cfg)
}

fn is_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_none()).unwrap_or(false)
}

/// An explicit directory must not exist or be empty; otherwise a fresh
/// `<root>/<cmd>-<unix seconds>-s<seed>[-n]` is created.
pub fn run_dir(explicit: Option<&Path>, root: &Path, cmd: &str, seed: u64) -> CliResult<PathBuf> {
    let dir = match explicit {
        Some(p) => {
            if p.exists() && !is_empty_dir(p) {
                return Err(CliError::Runtime(format!(
                    "{} is not empty; refusing to overwrite",
                    p.display()
                )));
            }
            p.to_path_buf()
        }
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let base = format!("{cmd}-{secs}-s{seed}");
            let mut p = root.join(&base);
            let mut n = 2;
            while p.exists() {
                p = root.join(format!("{base}-{n}"));
                n += 1;
            }
            p
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn echo_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    write_text(&dir.join(CONFIG_FILE), &(cfg.to_json() + "\n"))
}

/// Reads the corpus and refuses one generated under a different `data`
/// section than the run's.
pub fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    let dir = Path::new(&cfg.paths.data_dir);
    if !dir.join(bella_core::dataset::QA_FILE).exists() {
        return Err(CliError::Runtime(format!(
            "no dataset in {}; run `bella gen` first",
            dir.display()
        )));
    }
    let recorded = dir.join(CONFIG_FILE);
    if recorded.exists() {
        let gen_cfg = RunConfig::load(&recorded).map_err(|e| CliError::Schema(e.to_string()))?;
        if gen_cfg.data != cfg.data {
            return Err(CliError::Runtime(format!(
                "{} was generated with data settings {} but this run uses {}; pass matching --set data.* values",
                dir.display(),
                serde_json::to_string(&gen_cfg.data).expect("serializes"),
                serde_json::to_string(&cfg.data).expect("serializes"),
            )));
        }
    }
    Ok(Dataset::read(dir)?)
}

pub fn require_file(p: &Path, what: &str) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingCheckpoint(format!("{what} {} not found", p.display())))
    }
}
