use std::path::PathBuf;

use clap::Args;
use mergeforge::analysis::{verify, BoundCheckReport, CheckKind, VerifyConfig};
use mergeforge::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, CliResult};
use crate::output::{ensure_dir, load_config, write_json, RunClock};

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// theorem1, corollary1, weyl, wedin, surrogate or all.
    #[arg(long)]
    pub check: Option<String>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for per-check CSV reports and a summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyRunConfig {
    pub checks: Vec<CheckKind>,
    pub instances: usize,
    pub seed: u64,
    pub dims: VerifyConfig,
    pub out: Option<PathBuf>,
}

impl Default for VerifyRunConfig {
    fn default() -> Self {
        Self {
            checks: CheckKind::ALL.to_vec(),
            instances: 1000,
            seed: 0,
            dims: VerifyConfig::default(),
            out: None,
        }
    }
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    check: &'a str,
    instances: usize,
    skipped: usize,
    violations: usize,
    worst_margin: Option<f64>,
    mean_margin: Option<f64>,
    max_margin: Option<f64>,
}

fn resolve(args: &VerifyArgs) -> CliResult<VerifyRunConfig> {
    let mut cfg: VerifyRunConfig = load_config(args.config.as_deref())?;
    if let Some(c) = &args.check {
        cfg.checks = if c == "all" {
            CheckKind::ALL.to_vec()
        } else {
            vec![c.parse()?]
        };
    }
    if let Some(n) = args.instances {
        cfg.instances = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if cfg.checks.is_empty() {
        return Err(usage("no checks selected"));
    }
    Ok(cfg)
}

fn summarize(r: &BoundCheckReport) -> CheckSummary<'_> {
    CheckSummary {
        check: &r.check,
        instances: r.instances,
        skipped: r.skipped,
        violations: r.violations,
        worst_margin: r.worst_margin,
        mean_margin: r.mean_margin,
        max_margin: r.max_margin,
    }
}

fn fmt_margin(m: Option<f64>) -> String {
    m.map_or_else(|| "n/a".into(), |v| format!("{v:.3e}"))
}

pub fn run(args: &VerifyArgs) -> CliResult<()> {
    let clock = RunClock::start();
    let cfg = resolve(args)?;
    let mut reports = Vec::with_capacity(cfg.checks.len());
    for &kind in &cfg.checks {
        let r = verify(kind, cfg.instances, cfg.seed, &cfg.dims)?;
        println!(
            "{:<11} instances {:>5}  skipped {:>4}  violations {:>4}  worst margin {}",
            r.check,
            r.instances,
            r.skipped,
            r.violations,
            fmt_margin(r.worst_margin)
        );
        reports.push(r);
    }
    if let Some(out) = &cfg.out {
        ensure_dir(out)?;
        for r in &reports {
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            write_atomic(out.join(format!("{}.csv", r.check)), &buf)?;
        }
        let summary: Vec<CheckSummary> = reports.iter().map(summarize).collect();
        write_json(&out.join("summary.json"), &summary)?;
        write_json(&out.join("config.json"), &cfg)?;
        write_json(&out.join("log.json"), &clock.log("verify", serde_json::Value::Null))?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            let worst = r
                .records
                .iter()
                .filter(|x| x.violated())
                .min_by(|a, b| a.margin.total_cmp(&b.margin));
            match worst {
                Some(w) => format!(
                    "{}: {} violations; worst instance seed {} lhs {:.6e} rhs {:.6e} margin {:.3e}",
                    r.check, r.violations, w.instance_seed, w.lhs, w.rhs, w.margin
                ),
                None => format!("{}: {} violations", r.check, r.violations),
            }
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violations(failed.join("\n")))
    }
}
