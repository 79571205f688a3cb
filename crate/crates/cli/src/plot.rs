use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use satslab::continual::RunResult;
use satslab::{Error, Result};

use crate::ablate::mean_std;
use crate::{parse_json, read_text};

const SUMMARY: &str = "summary.json";

/// `dir` itself when it holds a summary, otherwise its run subdirectories.
fn summaries(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(SUMMARY).is_file() {
        return Ok(vec![dir.join(SUMMARY)]);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join(SUMMARY)))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    Ok(found)
}

/// Per method and stage, mean and sample standard deviation of the
/// all-class mIoU (0 for a single run).
pub fn aggregate(runs: &[RunResult]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Usage("no runs to aggregate".into()));
    }
    let mut by_method: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        by_method.entry(&r.name).or_default().push(r);
    }
    let mut out = String::from("method,stage,mean,stddev\n");
    for (method, rs) in by_method {
        let stages = rs[0].stages.len();
        if let Some(bad) = rs.iter().find(|r| r.stages.len() != stages) {
            return Err(Error::Data(format!(
                "method {method}: run seed {} has {} stages, seed {} has {stages}",
                bad.seed,
                bad.stages.len(),
                rs[0].seed
            )));
        }
        for t in 0..stages {
            let v = rs
                .iter()
                .map(|r| {
                    r.stages[t]
                        .report
                        .miou_all
                        .ok_or_else(|| Error::Data(format!("method {method} seed {}: stage {t} has no mIoU", r.seed)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, sd) = mean_std(&v);
            writeln!(out, "{method},{t},{mean:.6},{sd:.6}").unwrap();
        }
    }
    Ok(out)
}

pub fn cmd_plot_data(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    for d in dirs {
        for path in summaries(d)? {
            runs.push(parse_json::<RunResult>(&read_text(&path)?, &path).map_err(|e| Error::Data(e.to_string()))?);
        }
    }
    let csv = aggregate(&runs)?;
    fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    println!("{}: {} runs, {} rows", out.display(), runs.len(), csv.lines().count() - 1);
    Ok(())
}
