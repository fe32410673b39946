use std::path::PathBuf;

use clap::Args;
use mergeforge::analysis::{affinity_map, data_subspace, ecdf, percentile_nearest_rank, write_ecdf_csv};
use mergeforge::checkpoint::{
    compute_task_vector, load_checkpoint, write_atomic, Checkpoint, LayerSelector, LayerSelectorSpec,
};
use mergeforge::{Error, IndexMap, OrthonormalBasis};
use serde::{Deserialize, Serialize};

use super::merge::split_list;
use crate::error::{usage, CliResult};
use crate::output::{ensure_dir, load_config, write_json, RunClock};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Task checkpoint; repeat once per task.
    #[arg(long = "task")]
    pub tasks: Vec<PathBuf>,
    /// Representation file for the matching --task: an NTC1 file holding an
    /// N×d_i matrix per layer, under the layer's name.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub rd: Option<usize>,
    #[arg(long)]
    pub rv: Option<usize>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub base: Option<PathBuf>,
    pub tasks: Vec<PathBuf>,
    pub data: Vec<PathBuf>,
    pub r_d: usize,
    pub r_v: usize,
    pub layers: LayerSelectorSpec,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            base: None,
            tasks: Vec::new(),
            data: Vec::new(),
            r_d: 8,
            r_v: 8,
            layers: LayerSelectorSpec::default(),
            out: None,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    tasks: usize,
    layers: Vec<String>,
    r_d: usize,
    r_v: usize,
    diagonally_dominant: bool,
    dominance_margin: Option<f64>,
    matched_min: Option<f64>,
    mismatched_max: Option<f64>,
    matched_p90: Option<f64>,
    mismatched_p90: Option<f64>,
    mean: Vec<Vec<f64>>,
    p90: Vec<Vec<f64>>,
    /// `(task, layer)` pairs whose data rank fell short of `r_d`.
    truncated: Vec<(usize, String)>,
}

fn resolve(args: &AnalyzeArgs) -> CliResult<AnalyzeConfig> {
    let mut cfg: AnalyzeConfig = load_config(args.config.as_deref())?;
    if let Some(b) = &args.base {
        cfg.base = Some(b.clone());
    }
    if !args.tasks.is_empty() {
        cfg.tasks = args.tasks.clone();
    }
    if !args.data.is_empty() {
        cfg.data = args.data.clone();
    }
    if let Some(v) = args.rd {
        cfg.r_d = v;
    }
    if let Some(v) = args.rv {
        cfg.r_v = v;
    }
    if let Some(l) = &args.layers {
        cfg.layers.include = split_list(l);
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn layer_data(data: &Checkpoint, layer: &str, single_layer: bool) -> Option<mergeforge::DenseMatrix> {
    if let Some(t) = data.get(layer) {
        return t.to_matrix().ok();
    }
    // A file holding one matrix serves a single-layer analysis whatever its name.
    if single_layer && data.len() == 1 {
        return data.tensors().next().and_then(|(_, t)| t.to_matrix().ok());
    }
    None
}

pub fn run(args: &AnalyzeArgs) -> CliResult<()> {
    let clock = RunClock::start();
    let cfg = resolve(args)?;
    let base_path = cfg.base.as_deref().ok_or_else(|| usage("--base is required"))?;
    let out = cfg.out.as_deref().ok_or_else(|| usage("--out is required"))?;
    if cfg.data.is_empty() {
        return Err(usage("at least one --data file is required"));
    }
    if cfg.tasks.len() != cfg.data.len() {
        return Err(usage(format!(
            "{} --task files but {} --data files; counts must match",
            cfg.tasks.len(),
            cfg.data.len()
        )));
    }
    if cfg.r_d == 0 || cfg.r_v == 0 {
        return Err(usage("--rd and --rv must be at least 1"));
    }
    let sel = LayerSelector::from_spec(&cfg.layers)?;
    let base = load_checkpoint(base_path)?;
    let layers = sel.select(&base);
    if layers.is_empty() {
        return Err(usage("no layers selected"));
    }
    let mut tvs = Vec::with_capacity(cfg.tasks.len());
    for path in &cfg.tasks {
        let theta = load_checkpoint(path)?;
        tvs.push(compute_task_vector(&theta, &base, &sel).map_err(|e| e.context(path.display()))?);
    }
    let mut subspaces: Vec<IndexMap<String, OrthonormalBasis>> = Vec::with_capacity(cfg.data.len());
    let mut truncated = Vec::new();
    for (i, path) in cfg.data.iter().enumerate() {
        let data = load_checkpoint(path)?;
        let mut map = IndexMap::new();
        for layer in &layers {
            let h = layer_data(&data, layer, layers.len() == 1).ok_or_else(|| {
                Error::InvalidInput(format!("{} has no 2-D tensor for layer {layer:?}", path.display()))
            })?;
            let d_i = base.get(layer).map(|t| t.shape()[1]).unwrap_or(0);
            if h.cols() != d_i {
                return Err(Error::IncompatibleCheckpoints(format!(
                    "{}: layer {layer:?} data has {} features, layer input is {d_i}",
                    path.display(),
                    h.cols()
                ))
                .into());
            }
            let ds = data_subspace(&h, cfg.r_d)?;
            if ds.truncated {
                truncated.push((i, layer.clone()));
            }
            map.insert(layer.clone(), ds.basis);
        }
        subspaces.push(map);
    }
    let report = affinity_map(&subspaces, &tvs, cfg.r_v)?;
    let matched = report.matched();
    let mismatched = report.mismatched();
    let max = |xs: &[f64]| xs.iter().copied().reduce(f64::max);
    let min = |xs: &[f64]| xs.iter().copied().reduce(f64::min);
    let summary = Summary {
        tasks: report.task_count(),
        layers: report.layers.clone(),
        r_d: cfg.r_d,
        r_v: cfg.r_v,
        diagonally_dominant: report.diagonally_dominant(),
        dominance_margin: (report.task_count() >= 2).then(|| report.dominance_margin()),
        matched_min: min(&matched),
        mismatched_max: max(&mismatched),
        matched_p90: percentile_nearest_rank(&matched, 90.0),
        mismatched_p90: percentile_nearest_rank(&mismatched, 90.0),
        mean: report.mean.clone(),
        p90: report.p90.clone(),
        truncated,
    };

    ensure_dir(out)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(out.join("affinity.csv"), &buf)?;
    for (name, values) in [("ecdf_matched.csv", &matched), ("ecdf_mismatched.csv", &mismatched)] {
        let mut buf = Vec::new();
        write_ecdf_csv(&ecdf(values), &mut buf)?;
        write_atomic(out.join(name), &buf)?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("log.json"), &clock.log("analyze", serde_json::Value::Null))?;
    println!(
        "{} tasks, {} layers: diagonal dominance {}",
        summary.tasks,
        summary.layers.len(),
        summary.diagonally_dominant
    );
    Ok(())
}
