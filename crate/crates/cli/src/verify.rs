//! `verify`: runs the full inequality suite and emits a JSON report.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use mirror_gossip::analysis::{
    check_skew_correction, check_uniform_convexity, check_unrolled_trace, check_weighted_amgm,
    run_constants, verify_run_with, Check, TheoryConstants, TheoryReport,
};
use mirror_gossip::engine::{run, RunConfig, RunTrace};
use serde::Serialize;

pub struct VerifySpec {
    pub base: RunConfig,
    pub p: Vec<f64>,
    pub zeta: Option<f64>,
    pub trace: Option<PathBuf>,
    pub save_trace: Option<PathBuf>,
    pub draws: usize,
}

/// Desk-scale defaults: four devices, 100 iterations.
pub fn default_base() -> RunConfig {
    RunConfig {
        m: 4,
        iters: 100,
        density: 0.5,
        ..RunConfig::default()
    }
}

#[derive(Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub runs: Vec<TheoryReport>,
    /// Run-independent property suites and trace checks.
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn first_failure(&self) -> Option<&Check> {
        self.checks
            .iter()
            .chain(self.runs.iter().flat_map(|r| &r.checks))
            .find(|c| !c.passed)
    }
}

pub fn verify(spec: &VerifySpec) -> Result<VerifyReport> {
    let configs: Vec<RunConfig> = spec
        .p
        .iter()
        .map(|&p| RunConfig {
            p,
            record_bounds: false,
            ..spec.base.clone()
        })
        .collect();
    // Everything that can be rejected up front is, before any run starts.
    for c in &configs {
        c.validate()?;
        if let Some(zeta) = spec.zeta {
            TheoryConstants::new(
                c.m,
                zeta,
                c.window,
                &c.mirror_map()?,
                c.grad_clip,
                c.eta,
                c.iters,
            )
            .context("verify.zeta")?;
        }
    }
    let trace = spec
        .trace
        .as_ref()
        .map(|path| -> Result<RunTrace> {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunTrace::from_json(&text).with_context(|| format!("trace {}", path.display()))
        })
        .transpose()?;

    let mut runs = Vec::new();
    for (n, config) in configs.into_iter().enumerate() {
        let mut config = config;
        config.record_trace = n == 0 && spec.save_trace.is_some();
        let label = format!("p={} m={} T={}", config.p, config.m, config.iters);
        let output = run(&config).with_context(|| label.clone())?;
        if let (Some(path), Some(t)) = (&spec.save_trace, &output.trace) {
            fs::write(path, t.to_json()?).with_context(|| format!("writing {}", path.display()))?;
        }
        let constants = run_constants(&output, spec.zeta)?;
        runs.push(
            verify_run_with(&label, &output, constants, 1e-8).with_context(|| label.clone())?,
        );
    }

    let exponents: Vec<f64> = spec.p.iter().copied().filter(|&p| p > 1.0).collect();
    let mut checks = vec![
        check_uniform_convexity(&exponents, spec.draws, 1)?,
        check_weighted_amgm(spec.draws, 2),
        check_skew_correction(spec.draws, 3)?,
    ];
    if let Some(t) = &trace {
        checks.push(check_unrolled_trace(t)?);
    }
    let passed = checks.iter().all(|c| c.passed) && runs.iter().all(TheoryReport::passed);
    Ok(VerifyReport {
        passed,
        runs,
        checks,
    })
}
