use std::path::{Path, PathBuf};

use clap::Args;
use mergeforge::checkpoint::{load_checkpoint, save_checkpoint, LayerSelector, LayerSelectorSpec};
use mergeforge::nuwa::Ablation;
use mergeforge::{MethodId, MethodParams, SequentialMerger};
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};
use crate::output::{load_config, sibling, write_json, RunClock};

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// nuwa, wa, ta, ties, magmax, opcm, wudi or naive.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Task checkpoint; repeat in merge order.
    #[arg(long = "task")]
    pub tasks: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rp: Option<usize>,
    #[arg(long)]
    pub rl: Option<usize>,
    #[arg(long)]
    pub rv: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// full, null-only or lora-only (nuwa only).
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated include globs for mergeable layers.
    #[arg(long)]
    pub layers: Option<String>,
    /// Fold TIES / MagMax accumulators into the previous merged weights.
    #[arg(long)]
    pub literal_recursive: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub method: MethodId,
    pub base: Option<PathBuf>,
    pub tasks: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub layers: LayerSelectorSpec,
    pub params: MethodParams,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MethodId::Nuwa,
            base: None,
            tasks: Vec::new(),
            out: None,
            layers: LayerSelectorSpec::default(),
            params: MethodParams::default(),
        }
    }
}

const FLAG_METHODS: [MethodId; 8] = [
    MethodId::Nuwa,
    MethodId::Wa,
    MethodId::Ta,
    MethodId::Ties,
    MethodId::Magmax,
    MethodId::Opcm,
    MethodId::Wudi,
    MethodId::Naive,
];

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(String::from)
        .collect()
}

fn resolve(args: &MergeArgs) -> CliResult<MergeConfig> {
    let mut cfg: MergeConfig = load_config(args.config.as_deref())?;
    if let Some(m) = &args.method {
        let id: MethodId = m.parse()?;
        if !FLAG_METHODS.contains(&id) {
            return Err(usage(format!(
                "unknown method {m:?}; use --ablation for engine variants"
            )));
        }
        cfg.method = id;
    }
    if let Some(a) = &args.ablation {
        let ablation: Ablation = a.parse()?;
        if ablation == Ablation::Naive {
            return Err(usage(
                "ablation must be full, null-only or lora-only; use --method naive",
            ));
        }
        if cfg.method.ablation().is_none() || cfg.method == MethodId::Naive {
            return Err(usage(format!("--ablation applies to nuwa, not {}", cfg.method)));
        }
        cfg.method = MethodId::from_ablation(ablation);
    }
    if let Some(ablation) = cfg.method.ablation() {
        cfg.params.nuwa.ablation = ablation;
    }
    if let Some(b) = &args.base {
        cfg.base = Some(b.clone());
    }
    if !args.tasks.is_empty() {
        cfg.tasks = args.tasks.clone();
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    let n = &mut cfg.params.nuwa;
    if let Some(v) = args.rp {
        n.r_p = v;
    }
    if let Some(v) = args.rl {
        n.r_l = v;
    }
    if let Some(v) = args.rv {
        n.r_v = v;
    }
    if let Some(v) = args.iters {
        n.max_iter = v;
    }
    if let Some(v) = args.lr {
        n.lr = v;
    }
    if let Some(v) = args.seed {
        n.seed = v;
    }
    if let Some(l) = &args.layers {
        let include = split_list(l);
        if include.is_empty() {
            return Err(usage("--layers needs at least one pattern"));
        }
        cfg.layers.include = include;
    }
    if args.literal_recursive {
        cfg.params.literal_recursive = true;
    }
    Ok(cfg)
}

pub fn run(args: &MergeArgs) -> CliResult<()> {
    let clock = RunClock::start();
    let cfg = resolve(args)?;
    let base_path = cfg.base.as_deref().ok_or_else(|| usage("--base is required"))?;
    let out = cfg.out.as_deref().ok_or_else(|| usage("--out is required"))?;
    if cfg.tasks.is_empty() {
        return Err(usage("at least one --task is required"));
    }
    let sel = LayerSelector::from_spec(&cfg.layers)?;
    let base = load_checkpoint(base_path)?;
    let mut merger = SequentialMerger::new(base, &sel, cfg.method, cfg.params.clone())?;
    let mut steps = Vec::with_capacity(cfg.tasks.len());
    for path in &cfg.tasks {
        let theta = load_checkpoint(path)?;
        let log = merger.push(&theta)?;
        eprintln!(
            "step {}: {} layers merged from {}",
            log.step,
            log.layer_count,
            path.display()
        );
        steps.push(log);
    }
    let merged = merger.to_checkpoint();
    write_outputs(
        out,
        &cfg,
        &merged,
        clock.log("merge", serde_json::json!({ "steps": steps })),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn write_outputs(
    out: &Path,
    cfg: &MergeConfig,
    merged: &mergeforge::Checkpoint,
    log: serde_json::Value,
) -> CliResult<()> {
    write_json(&sibling(out, ".config.json"), cfg)?;
    write_json(&sibling(out, ".log.json"), &log)?;
    save_checkpoint(merged, out)?;
    Ok(())
}
