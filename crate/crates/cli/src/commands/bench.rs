use std::path::PathBuf;

use clap::Args;
use mergeforge::checkpoint::{write_atomic, LayerSelector, LayerSelectorSpec};
use mergeforge::synth::{generate_suite, run_protocol, write_results_csv, MethodSummary, SuiteConfig};
use mergeforge::{MethodId, MethodParams};
use serde::{Deserialize, Serialize};

use super::merge::split_list;
use crate::error::{usage, CliResult};
use crate::output::{ensure_dir, load_config, write_json, RunClock};

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated method ids.
    #[arg(long)]
    pub methods: Option<String>,
    /// Order seeds: an inclusive range `42..51` or a comma list.
    #[arg(long)]
    pub orders: Option<String>,
    /// JSON synthetic-suite config.
    #[arg(long)]
    pub suite_config: Option<PathBuf>,
    /// Seeds both the suite and the engine's adapter streams.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<MethodId>,
    pub orders: Vec<u64>,
    pub suite: SuiteConfig,
    pub params: MethodParams,
    pub layers: LayerSelectorSpec,
    pub out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: MethodId::ALL.to_vec(),
            orders: (42..=51).collect(),
            suite: SuiteConfig::default(),
            params: MethodParams::default(),
            layers: LayerSelectorSpec::default(),
            out: None,
        }
    }
}

#[derive(Serialize)]
struct OrderRow {
    method: MethodId,
    order_seed: u64,
    order: Vec<usize>,
    acc: f64,
    bwt: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    methods: Vec<MethodSummary>,
    orders: Vec<OrderRow>,
}

pub fn parse_orders(s: &str) -> CliResult<Vec<u64>> {
    let bad = || usage(format!("bad --orders {s:?}; use 42..51 or 1,2,3"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Vec<u64> = split_list(s)
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn resolve(args: &BenchArgs) -> CliResult<BenchConfig> {
    let mut cfg: BenchConfig = load_config(args.config.as_deref())?;
    if let Some(m) = &args.methods {
        cfg.methods = split_list(m)
            .iter()
            .map(|id| id.parse::<MethodId>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(o) = &args.orders {
        cfg.orders = parse_orders(o)?;
    }
    if let Some(p) = &args.suite_config {
        cfg.suite = load_config(Some(p))?;
    }
    if let Some(s) = args.seed {
        cfg.suite.seed = s;
        cfg.params.nuwa.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if cfg.methods.is_empty() {
        return Err(usage("--methods is empty"));
    }
    if cfg.orders.is_empty() {
        return Err(usage("--orders is empty"));
    }
    Ok(cfg)
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    let clock = RunClock::start();
    let cfg = resolve(args)?;
    let sel = LayerSelector::from_spec(&cfg.layers)?;
    let suite = generate_suite(&cfg.suite)?;
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut timings = Vec::new();
    for &method in &cfg.methods {
        let res = run_protocol(method, &suite, &cfg.orders, &cfg.params, &sel)?;
        let s = &res.summary;
        match (s.bwt_mean, s.bwt_std) {
            (Some(b), Some(bs)) => println!(
                "{method:<16} ACC {:.4} ± {:.4}  BWT {b:+.4} ± {bs:.4}",
                s.acc_mean, s.acc_std
            ),
            _ => println!("{method:<16} ACC {:.4} ± {:.4}", s.acc_mean, s.acc_std),
        }
        for r in &res.results {
            rows.push(OrderRow {
                method,
                order_seed: r.order_seed,
                order: r.order.clone(),
                acc: r.acc,
                bwt: r.bwt,
            });
            timings.push(serde_json::json!({
                "method": method, "order_seed": r.order_seed, "wall_time_ms": r.wall_time_ms
            }));
        }
        summaries.push(res.summary);
        results.extend(res.results);
    }
    if let Some(out) = &cfg.out {
        ensure_dir(out)?;
        let mut buf = Vec::new();
        write_results_csv(&results, &mut buf)?;
        write_atomic(out.join("results.csv"), &buf)?;
        write_json(
            &out.join("summary.json"),
            &Summary {
                methods: summaries,
                orders: rows,
            },
        )?;
        write_json(&out.join("config.json"), &cfg)?;
        write_json(
            &out.join("log.json"),
            &clock.log("bench", serde_json::json!({ "timings": timings })),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_ranges_and_lists() {
        assert_eq!(parse_orders("42..51").unwrap(), (42..=51).collect::<Vec<_>>());
        assert_eq!(parse_orders("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_orders("7, 3,9").unwrap(), vec![7, 3, 9]);
        for bad in ["", "5..2", "a..b", "1,x"] {
            assert_eq!(parse_orders(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }
}
