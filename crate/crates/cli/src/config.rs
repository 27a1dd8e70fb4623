//! Command-line flags, the optional TOML file, and their merge (flags win).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rgflow::sampler::ChainConfig;

use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "rgflow", version, about = "Renormalization-group flows for the 2D Ising model")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML file with default values; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base seed of every random stream [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sweeps discarded at the start of each chain [default: 1000]
    #[arg(long = "burn-in", global = true)]
    pub burn_in: Option<usize>,
    /// Measured sweeps per chain [default: 2500]
    #[arg(long, global = true)]
    pub sweeps: Option<usize>,
    /// Sweeps between recorded configurations [default: 1]
    #[arg(long, global = true)]
    pub thinning: Option<usize>,
    /// Independent chains [default: 4]
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Also write SVG plots
    #[arg(long, global = true)]
    pub svg: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Coefficient flow from the bare coupling
    Flow {
        /// Temperatures, comma separated (required here or in the config file)
        #[arg(long = "T", value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
        /// Basis preset (full10, small6) or a function list [default: full10]
        #[arg(long)]
        basis: Option<String>,
        /// Rows of the flow, the bare one included [default: 5]
        #[arg(long)]
        iters: Option<usize>,
        /// Side of the sampled lattice [default: 64]
        #[arg(long = "L0")]
        l0: Option<usize>,
    },
    /// Second-moment trends over a temperature list and the bracket they give
    TcScan {
        /// Temperatures, comma separated [default: 2.10,2.15,...,2.40]
        #[arg(long = "T", value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
        /// Basis preset or function list [default: full10]
        #[arg(long)]
        basis: Option<String>,
        /// Flow rows per temperature [default: 5]
        #[arg(long)]
        iters: Option<usize>,
        /// Side of the sampled lattice [default: 64]
        #[arg(long = "L0")]
        l0: Option<usize>,
    },
    /// Magnetization with a +1 frame, bare or from a flow row
    Magnetization {
        /// `bare` or `FILE:rowN` (row N of every flow in a flow CSV) [default: bare]
        #[arg(long)]
        source: Option<String>,
        /// Temperatures; required for `bare`, filters the flows otherwise
        #[arg(long = "T", value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
        /// Side of the lattice, frame included [default: 20]
        #[arg(long = "L")]
        size: Option<usize>,
        /// Basis of the flow CSV [default: full10]
        #[arg(long)]
        basis: Option<String>,
        /// Boundary condition; only `fixed` breaks the symmetry [default: fixed]
        #[arg(long)]
        boundary: Option<String>,
    },
    /// Thermal exponent from two adjacent levels of one cascade
    Exponents {
        /// Temperature [default: 2.269]
        #[arg(long = "T")]
        temperature: Option<f64>,
        /// Two adjacent levels, e.g. 2,3 [default: 2,3]
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        /// Side of the sampled lattice [default: 64]
        #[arg(long = "L0")]
        l0: Option<usize>,
        /// Basis preset or function list [default: full10]
        #[arg(long)]
        basis: Option<String>,
    },
    /// Exact enumeration of a small periodic grid
    Oracle {
        /// Side of the grid, at most 4 [default: 4]
        #[arg(long = "L")]
        size: Option<usize>,
        /// Temperature [default: 2.27]
        #[arg(long = "T")]
        temperature: Option<f64>,
        /// Basis preset or function list [default: full10]
        #[arg(long)]
        basis: Option<String>,
        /// Write fixtures.json
        #[arg(long = "emit-fixtures")]
        emit_fixtures: bool,
    },
}

/// Keys accepted in the config file. Any key may be missing.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub burn_in: Option<usize>,
    pub sweeps: Option<usize>,
    pub thinning: Option<usize>,
    pub chains: Option<usize>,
    pub svg: Option<bool>,
    #[serde(rename = "T")]
    pub temperatures: Option<Temperatures>,
    pub basis: Option<String>,
    pub iters: Option<usize>,
    #[serde(rename = "L0")]
    pub l0: Option<usize>,
    #[serde(rename = "L")]
    pub size: Option<usize>,
    pub source: Option<String>,
    pub boundary: Option<String>,
    pub levels: Option<Vec<usize>>,
}

#[derive(Deserialize, Debug, Clone)]
#[serde(untagged)]
pub enum Temperatures {
    One(f64),
    Many(Vec<f64>),
}

impl Temperatures {
    fn into_vec(self) -> Vec<f64> {
        match self {
            Temperatures::One(t) => vec![t],
            Temperatures::Many(v) => v,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {}", path.display(), e.message())))
    }
}

/// Fully resolved settings, echoed into the manifest.
#[derive(Serialize, Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub chain: ChainConfig,
    pub svg: bool,
    pub temperatures: Vec<f64>,
    pub basis: String,
    pub iters: usize,
    #[serde(rename = "L0")]
    pub l0: usize,
    #[serde(rename = "L")]
    pub size: usize,
    pub source: String,
    pub boundary: String,
    pub levels: Vec<usize>,
    pub emit_fixtures: bool,
}

pub const DEFAULT_SCAN: [f64; 7] = [2.10, 2.15, 2.20, 2.25, 2.30, 2.35, 2.40];

impl RunConfig {
    pub fn resolve(cli: Cli) -> Result<RunConfig, CliError> {
        let file = match &cli.common.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let c = cli.common;
        let chain = ChainConfig {
            seed: c.seed.or(file.seed).unwrap_or(0),
            burn_in_sweeps: c.burn_in.or(file.burn_in).unwrap_or(1000),
            measure_sweeps: c.sweeps.or(file.sweeps).unwrap_or(2500),
            thinning: c.thinning.or(file.thinning).unwrap_or(1),
            n_chains: c.chains.or(file.chains).unwrap_or(4),
        };
        let file_t = file.temperatures.clone().map(Temperatures::into_vec);
        let mut cfg = RunConfig {
            command: String::new(),
            out: c.out.or(file.out).unwrap_or_else(|| PathBuf::from(".")),
            threads: c.threads.or(file.threads),
            chain,
            svg: c.svg || file.svg.unwrap_or(false),
            temperatures: Vec::new(),
            basis: file.basis.clone().unwrap_or_else(|| "full10".into()),
            iters: file.iters.unwrap_or(5),
            l0: file.l0.unwrap_or(64),
            size: file.size.unwrap_or(20),
            source: file.source.clone().unwrap_or_else(|| "bare".into()),
            boundary: file.boundary.clone().unwrap_or_else(|| "fixed".into()),
            levels: file.levels.clone().unwrap_or_else(|| vec![2, 3]),
            emit_fixtures: false,
        };
        let set = |slot: &mut String, v: Option<String>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        match cli.command {
            Command::Flow { temperatures, basis, iters, l0 } => {
                cfg.command = "flow".into();
                cfg.temperatures = temperatures
                    .or(file_t)
                    .ok_or_else(|| CliError::Usage("flow needs --T (or T in the config file)".into()))?;
                set(&mut cfg.basis, basis);
                cfg.iters = iters.unwrap_or(cfg.iters);
                cfg.l0 = l0.unwrap_or(cfg.l0);
            }
            Command::TcScan { temperatures, basis, iters, l0 } => {
                cfg.command = "tc-scan".into();
                cfg.temperatures = temperatures.or(file_t).unwrap_or_else(|| DEFAULT_SCAN.to_vec());
                set(&mut cfg.basis, basis);
                cfg.iters = iters.unwrap_or(cfg.iters);
                cfg.l0 = l0.unwrap_or(cfg.l0);
            }
            Command::Magnetization { source, temperatures, size, basis, boundary } => {
                cfg.command = "magnetization".into();
                set(&mut cfg.source, source);
                cfg.temperatures = temperatures.or(file_t).unwrap_or_default();
                cfg.size = size.unwrap_or(cfg.size);
                set(&mut cfg.basis, basis);
                set(&mut cfg.boundary, boundary);
            }
            Command::Exponents { temperature, levels, l0, basis } => {
                cfg.command = "exponents".into();
                cfg.temperatures = vec![temperature.or(file_t.and_then(|v| v.first().copied())).unwrap_or(2.269)];
                cfg.levels = levels.unwrap_or(cfg.levels);
                cfg.l0 = l0.unwrap_or(cfg.l0);
                set(&mut cfg.basis, basis);
            }
            Command::Oracle { size, temperature, basis, emit_fixtures } => {
                cfg.command = "oracle".into();
                cfg.size = size.or(file.size).unwrap_or(4);
                cfg.temperatures = vec![temperature.or(file_t.and_then(|v| v.first().copied())).unwrap_or(2.27)];
                set(&mut cfg.basis, basis);
                cfg.emit_fixtures = emit_fixtures;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if let Some(t) = self.temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return bad(format!("temperature must be positive, got {t}"));
        }
        if self.threads == Some(0) {
            return bad("--threads must be at least 1".into());
        }
        self.chain.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }
}
