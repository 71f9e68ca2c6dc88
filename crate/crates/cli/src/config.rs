//! TOML experiment files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmpda::exec::Mode;
use mmpda::synthdata::{benchmark_domains, generate_domain, load_domain_csv, DomainDataset, DomainSpec, Role};
use mmpda::trainer::AdaptConfig;

use crate::error::{CliError, CliResult};

/// Where one domain's samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainEntry {
    /// A feature CSV; relative paths resolve against the config file.
    Csv { path: PathBuf, widths: Vec<usize> },
    /// A generator spec written out in full.
    Spec(DomainSpec),
    /// One domain of a named benchmark family. Without `data_seed` the data
    /// follows the run seed.
    Benchmark {
        family: String,
        domain: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
    },
}

impl DomainEntry {
    pub fn load(&self, role: Role, base: &Path, seed: u64) -> mmpda::Result<DomainDataset> {
        let ds = match self {
            DomainEntry::Csv { path, widths } => return load_domain_csv(&base.join(path), role, widths),
            DomainEntry::Spec(spec) => generate_domain(spec)?,
            DomainEntry::Benchmark {
                family,
                domain,
                data_seed,
            } => {
                let bench = benchmark_domains(family, data_seed.unwrap_or(seed))?;
                generate_domain(bench.domain(domain)?)?
            }
        };
        ds.with_role(role)
    }

    /// The generator spec behind a non-CSV entry.
    pub fn spec(&self, seed: u64) -> mmpda::Result<Option<DomainSpec>> {
        Ok(match self {
            DomainEntry::Csv { .. } => None,
            DomainEntry::Spec(spec) => Some(spec.clone()),
            DomainEntry::Benchmark {
                family,
                domain,
                data_seed,
            } => Some(benchmark_domains(family, data_seed.unwrap_or(seed))?.domain(domain)?.clone()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepPreset {
    /// The twelve weight combinations of the sensitivity table: the λ=0
    /// baseline, ten λ=1 rows, and the best weights at λ=10.
    Sensitivity,
}

/// Grid over adaptation dials. The cross product runs in the fixed order
/// lambda, alpha, beta, gamma, eta, grl (last varies fastest); axes left out
/// keep the value from `[adapt]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<SweepPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grl: Option<Vec<bool>>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// One training run per seed; each run's `adapt.seed` is replaced.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// How independent runs are scheduled.
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub sources: Vec<DomainEntry>,
    pub target: DomainEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(CliError::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(CliError::config("run_id: must be a non-empty file-name-safe string"));
        }
        if self.sources.is_empty() {
            return Err(CliError::config("sources: at least one source entry is required"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds: at least one seed is required"));
        }
        self.adapt.validate().map_err(|e| CliError::config(format!("adapt: {e}")))?;
        if let Some(sweep) = &self.sweep {
            let axes = [&sweep.lambda, &sweep.alpha, &sweep.beta, &sweep.gamma, &sweep.eta];
            if axes.iter().any(|a| a.as_ref().is_some_and(|v| v.is_empty()))
                || sweep.grl.as_ref().is_some_and(|v| v.is_empty())
            {
                return Err(CliError::config("sweep: grid axes must list at least one value"));
            }
            if sweep.preset.is_some() && (axes.iter().any(|a| a.is_some()) || sweep.grl.is_some()) {
                return Err(CliError::config("sweep: a preset cannot be combined with grid axes"));
            }
        }
        Ok(())
    }

    /// Creates the output directory and checks that it accepts files.
    pub fn prepare_out_dir(&self) -> CliResult<()> {
        let probe = self.out_dir.join(".write-probe");
        std::fs::create_dir_all(&self.out_dir)
            .and_then(|_| std::fs::write(&probe, b""))
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| CliError::config(format!("out_dir: {} is not writable: {e}", self.out_dir.display())))
    }

    pub fn config_for(&self, seed: u64) -> AdaptConfig {
        AdaptConfig {
            seed,
            ..self.adapt.clone()
        }
    }
}

/// Sources and target for one seed.
pub fn load_domains(
    cfg: &ExperimentConfig,
    base: &Path,
    seed: u64,
) -> CliResult<(Vec<DomainDataset>, DomainDataset)> {
    let sources = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, e)| e.load(Role::Source, base, seed).map_err(|err| CliError::config(format!("sources[{i}]: {err}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let target = cfg
        .target
        .load(Role::Target, base, seed)
        .map_err(|err| CliError::config(format!("target: {err}")))?;
    Ok((sources, target))
}
