use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every setting a command can take. The JSON config file uses the same
/// keys; command-line flags take precedence over it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub grid: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub obs: Option<String>,
    pub threshold: Option<f64>,
    pub case: Option<String>,
    pub n: Option<usize>,
    pub phase_shift: Option<f64>,
    pub noise: Option<f64>,
    pub model: Option<String>,
    pub preset: Option<String>,
    pub topology: Option<String>,
    pub train_frac: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_final: Option<f64>,
    pub reg: Option<f64>,
    pub batch_size: Option<usize>,
    pub no_net: Option<bool>,
    pub net_width: Option<usize>,
    pub net_hidden: Option<usize>,
    pub units: Option<usize>,
    pub layers: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub ns: Option<Vec<usize>>,
    pub realizations: Option<usize>,
    pub per_node: Option<bool>,
}

macro_rules! prefer {
    ($a:ident, $b:ident, $($f:ident),*) => {
        RunConfig { $($f: $a.$f.or($b.$f)),* }
    };
}

impl RunConfig {
    /// Fill every unset field of `self` from `file`.
    pub fn over(self, file: RunConfig) -> RunConfig {
        prefer!(
            self,
            file,
            seed,
            grid,
            data,
            obs,
            threshold,
            case,
            n,
            phase_shift,
            noise,
            model,
            preset,
            topology,
            train_frac,
            epochs,
            lr,
            lr_final,
            reg,
            batch_size,
            no_net,
            net_width,
            net_hidden,
            units,
            layers,
            alphas,
            ns,
            realizations,
            per_node
        )
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
    }

    /// Short content hash identifying a run directory.
    pub fn run_id(&self, command: &str) -> String {
        let text = serde_json::to_string(&(command, self)).expect("config serialization cannot fail");
        hex::encode(&Sha256::digest(text.as_bytes())[..6])
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn grid(&self) -> Result<&Path, CliError> {
        self.grid.as_deref().ok_or(CliError::MissingSetting("grid"))
    }

    pub fn data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or(CliError::MissingSetting("data"))
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingPath(path.to_owned()),
        _ => CliError::Io {
            path: path.to_owned(),
            source: e,
        },
    })
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_owned(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialization cannot fail");
    s.push('\n');
    s
}
