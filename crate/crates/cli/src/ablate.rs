use std::fmt::Write as _;
use std::fs;

use satslab::continual::{RunConfig, RunResult};
use satslab::distill::{BlockSubset, DistillSource, PoolingVariant};
use satslab::{data, Error, Result};

use crate::{check_seeds, load_config, options, print_result, run_jobs, write_manifest, RunArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Full method and each single-component removal.
    Components,
    /// Global, no and class-region pooling.
    Pooling,
    /// Deepest one, two and three blocks, then all.
    Blocks,
    /// Attention maps, block features or both.
    DistillSource,
}

impl Axis {
    fn label(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Pooling => "pooling",
            Axis::Blocks => "blocks",
            Axis::DistillSource => "distill-source",
        }
    }
}

/// The configs of one ablation axis, each renamed `<base>/<variant>`.
pub fn grid(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.loss.use_pseudo_labeling = true;
    full.loss.use_attention_loss = true;
    full.loss.use_output_kd = true;
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c.name = format!("{}/{label}", base.name);
        (label.to_string(), c)
    };
    match axis {
        Axis::Components => vec![
            with("full", &|_| {}),
            with("no-pl", &|c| c.loss.use_pseudo_labeling = false),
            with("no-la", &|c| c.loss.use_attention_loss = false),
            with("no-ld", &|c| c.loss.use_output_kd = false),
        ],
        Axis::Pooling => [("gp", PoolingVariant::Gp), ("np", PoolingVariant::Np), ("crp", PoolingVariant::Crp)]
            .into_iter()
            .map(|(l, p)| with(l, &|c| c.loss.pooling = p))
            .collect(),
        Axis::Blocks => {
            let blocks = full.model.num_blocks;
            let mut out: Vec<_> = (1..blocks)
                .take(3)
                .map(|k| with(&format!("last-{k}"), &|c| c.loss.block_subset = BlockSubset::Last(k)))
                .collect();
            out.push(with("all", &|c| c.loss.block_subset = BlockSubset::All));
            out
        }
        Axis::DistillSource => [
            ("attention", DistillSource::Attention),
            ("feature", DistillSource::Feature),
            ("both", DistillSource::Both),
        ]
        .into_iter()
        .map(|(l, s)| with(l, &|c| c.loss.distill_source = s))
        .collect(),
    }
}

/// Mean and sample standard deviation; the spread of one value is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `variant,runs,miou_all_mean,miou_all_std,miou_initial_mean,miou_incremental_mean`
/// over final-stage reports.
pub fn table(rows: &[(String, Vec<RunResult>)]) -> String {
    let mut out = String::from("variant,runs,miou_all_mean,miou_all_std,miou_initial_mean,miou_incremental_mean\n");
    for (label, runs) in rows {
        let pick = |f: &dyn Fn(&satslab::metrics::MetricsReport) -> Option<f64>| -> Vec<f64> {
            runs.iter().filter_map(|r| f(&r.stages.last()?.report)).collect()
        };
        let (all, all_sd) = mean_std(&pick(&|r| r.miou_all));
        let (init, _) = mean_std(&pick(&|r| r.miou_initial));
        let inc = pick(&|r| r.miou_incremental);
        let inc = if inc.is_empty() { String::new() } else { format!("{:.6}", mean_std(&inc).0) };
        writeln!(out, "{label},{},{all:.6},{all_sd:.6},{init:.6},{inc}", runs.len()).unwrap();
    }
    out
}

pub fn cmd_ablate(args: &RunArgs, axis: Axis) -> Result<()> {
    let base = load_config(&args.source)?;
    check_seeds(&args.seeds)?;
    let ds = data::io::load(&args.data)?;
    let configs = grid(&base, axis);
    let mut args = args.clone();
    args.stage0_cache.get_or_insert_with(|| args.out.join("stage0-cache"));
    for (_, cfg) in &configs {
        write_manifest(cfg, &args)?;
    }
    let opts = options(&args);
    let jobs: Vec<(RunConfig, u64)> = configs
        .iter()
        .flat_map(|(_, c)| args.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    // The first variant trains and caches stage 0 for every seed; the rest
    // reuse it.
    let k = args.seeds.len();
    let mut results = run_jobs(&jobs[..k], &ds, &opts)?;
    results.extend(run_jobs(&jobs[k..], &ds, &opts)?);
    for r in &results {
        print_result(r);
    }
    let rows: Vec<(String, Vec<RunResult>)> = configs
        .iter()
        .enumerate()
        .map(|(i, (label, _))| (label.clone(), results[i * k..(i + 1) * k].to_vec()))
        .collect();
    let csv = table(&rows);
    let path = args.out.join(format!("ablation-{}.csv", axis.label()));
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}
