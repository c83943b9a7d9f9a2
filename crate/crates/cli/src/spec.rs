//! Experiment specifications: config file sections merged with CLI flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mirror_gossip::engine::RunConfig;
use serde::Deserialize;

/// Top-level config file. Every section is optional; `[run]` takes the
/// `RunConfig` field names and `[run.problem]` the problem description.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: Option<RunConfig>,
    pub sweep: SweepSection,
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub p: Vec<f64>,
    pub m: Vec<usize>,
    pub density: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eta: Vec<f64>,
    pub seeds: Vec<u64>,
    pub threshold: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub p: Vec<f64>,
    /// Replaces the measured run-wide ζ in the bounds.
    pub zeta: Option<f64>,
    pub trace: Option<PathBuf>,
    pub draws: Option<usize>,
}

pub fn load(path: &Path) -> Result<ConfigFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Base configuration plus sweep axes and replicate seeds.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub base: RunConfig,
    pub p: Vec<f64>,
    pub m: Vec<usize>,
    pub density: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eta: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Absolute loss target; `None` means 1.05 × the oracle's `F*`.
    pub threshold: Option<f64>,
}

/// One point of the sweep cross-product.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    /// Label without the seed: replicates share it.
    pub group: String,
    pub config: RunConfig,
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

impl ExperimentSpec {
    /// Axes missing from `sweep` fall back to the base value.
    pub fn new(base: RunConfig, sweep: &SweepSection) -> Self {
        Self {
            p: or_base(&sweep.p, base.p),
            m: or_base(&sweep.m, base.m),
            density: or_base(&sweep.density, base.density),
            alpha: or_base(&sweep.alpha, base.alpha),
            eta: or_base(&sweep.eta, base.eta),
            seeds: or_base(&sweep.seeds, base.seed),
            out: sweep.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            threshold: sweep.threshold,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("p", self.p.len()),
            ("m", self.m.len()),
            ("density", self.density.len()),
            ("alpha", self.alpha.len()),
            ("eta", self.eta.len()),
            ("seeds", self.seeds.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, n)| *n == 0) {
            bail!("sweep.{name}: axis is empty");
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0) {
                bail!("sweep.threshold: must be > 0, got {t}");
            }
        }
        for cell in self.cells() {
            cell.config
                .validate()
                .with_context(|| format!("cell {}", cell.label))?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &p in &self.p {
            for &m in &self.m {
                for &density in &self.density {
                    for &alpha in &self.alpha {
                        for &eta in &self.eta {
                            let group = format!("p{p}_m{m}_d{density}_a{alpha}_eta{eta}");
                            for &seed in &self.seeds {
                                let config = RunConfig {
                                    p,
                                    m,
                                    density,
                                    alpha,
                                    eta,
                                    seed,
                                    threshold: self.threshold,
                                    ..self.base.clone()
                                };
                                cells.push(Cell {
                                    label: format!("{group}_s{seed}"),
                                    group: group.clone(),
                                    config,
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_axes_fall_back_to_base() {
        let spec = ExperimentSpec::new(RunConfig::default(), &SweepSection::default());
        let cells = spec.cells();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].config, RunConfig::default());
        assert_eq!(cells[0].label, "p1_m10_d0.2_a0.1_eta0.05_s42");
    }

    #[test]
    fn cross_product_with_seeds() {
        let sweep = SweepSection {
            p: vec![1.0, 5.0],
            density: vec![0.2, 0.5, 1.0],
            seeds: vec![1, 2],
            ..SweepSection::default()
        };
        let spec = ExperimentSpec::new(RunConfig::default(), &sweep);
        let cells = spec.cells();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].group, cells[1].group);
        assert_ne!(cells[0].label, cells[1].label);
    }

    #[test]
    fn empty_axis_and_bad_threshold_are_rejected() {
        let mut spec = ExperimentSpec::new(RunConfig::default(), &SweepSection::default());
        spec.eta.clear();
        assert!(spec
            .validate()
            .unwrap_err()
            .to_string()
            .contains("sweep.eta"));
        let mut spec = ExperimentSpec::new(RunConfig::default(), &SweepSection::default());
        spec.threshold = Some(0.0);
        assert!(spec
            .validate()
            .unwrap_err()
            .to_string()
            .contains("threshold"));
    }

    #[test]
    fn invalid_cell_names_the_field() {
        let sweep = SweepSection {
            density: vec![0.5, 1.5],
            ..SweepSection::default()
        };
        let spec = ExperimentSpec::new(RunConfig::default(), &sweep);
        let msg = format!("{:#}", spec.validate().unwrap_err());
        assert!(msg.contains("density"), "{msg}");
    }

    #[test]
    fn config_file_sections_parse() {
        let text = r#"
            [run]
            m = 4
            iters = 50
            problem = { kind = "quadratic", dim = 3, rows = 4, spread = 0.5 }

            [sweep]
            p = [1.0, 3.0]
            seeds = [7, 8]
            threshold = 1.5

            [verify]
            zeta = 0.0
        "#;
        let file: ConfigFile = toml::from_str(text).unwrap();
        let run = file.run.unwrap();
        assert_eq!((run.m, run.iters), (4, 50));
        assert_eq!(file.sweep.p, vec![1.0, 3.0]);
        assert_eq!(file.verify.zeta, Some(0.0));
    }

    #[test]
    fn unknown_key_is_reported() {
        let err = toml::from_str::<ConfigFile>("[run]\nmm = 4\n").unwrap_err();
        assert!(err.to_string().contains("mm"), "{err}");
    }
}
