//! Comparison tables over the `summary.json` files of finished runs.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use trust_core::dataset::Split;
use trust_core::metrics::{Aggregate, MeanStd, MetricReport};

use crate::commands::RUN_RECORD;
use crate::error::CliError;
use crate::record::Recorder;
use crate::ReportArgs;

pub const SUMMARY_FILE: &str = "summary.json";

pub const COMPARISON_CSV_HEADER: &str = "run,kind,method,split,count,param_count,mse_mean,mse_std,mae_mean,mae_std,\
psnr_mean,psnr_std,ssim_mean,ssim_std,fpr_mean,fpr_std";

/// What `eval` and `solve` leave behind for `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `model` or `solver`.
    pub kind: String,
    pub method: String,
    /// Trainable parameters; solvers have none.
    pub param_count: Option<usize>,
    pub split: Split,
    pub count: usize,
    pub aggregate: Aggregate,
}

impl Summary {
    pub fn new(kind: &str, method: &str, param_count: Option<usize>, split: Split, report: &MetricReport) -> Self {
        Self {
            kind: kind.to_string(),
            method: method.to_string(),
            param_count,
            split,
            count: report.images.len(),
            aggregate: report.aggregate,
        }
    }
}

fn columns(a: &Aggregate) -> [MeanStd; 5] {
    [a.mse, a.mae, a.psnr, a.ssim, a.fpr]
}

fn csv_table(rows: &[(String, Summary)]) -> String {
    let mut out = String::from(COMPARISON_CSV_HEADER);
    out.push('\n');
    for (run, s) in rows {
        let params = s.param_count.map(|p| p.to_string()).unwrap_or_default();
        let _ = write!(
            out,
            "{run},{},{},{},{},{params}",
            s.kind,
            s.method,
            s.split.name(),
            s.count
        );
        for c in columns(&s.aggregate) {
            let _ = write!(out, ",{:e},{:e}", c.mean, c.std);
        }
        out.push('\n');
    }
    out
}

fn markdown_table(rows: &[(String, Summary)]) -> String {
    let mut out = String::from(
        "| Run | Method | Params | MSE | MAE | PSNR (dB) | SSIM | FPR |\n\
         |---|---|---:|---:|---:|---:|---:|---:|\n",
    );
    for (run, s) in rows {
        let [mse, mae, psnr, ssim, fpr] = columns(&s.aggregate);
        let params = s.param_count.map_or_else(|| "-".to_string(), |p| p.to_string());
        let _ = writeln!(
            out,
            "| {run} | {} | {params} | {:.3e} ± {:.1e} | {:.3e} ± {:.1e} | {:.2} ± {:.2} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
            s.method, mse.mean, mse.std, mae.mean, mae.std, psnr.mean, psnr.std, ssim.mean, ssim.std, fpr.mean, fpr.std
        );
    }
    out.push_str("\nValues are mean ± population standard deviation over the evaluated images.\n");
    out
}

pub fn run(a: ReportArgs, rec: &mut Recorder) -> Result<(), CliError> {
    if !a.runs.is_dir() {
        return Err(CliError::Usage(format!(
            "runs directory {} does not exist",
            a.runs.display()
        )));
    }
    let out = a.out.unwrap_or_else(|| a.runs.clone());
    rec.record_path = Some(out.join(RUN_RECORD));
    rec.config = serde_json::json!({ "runs": a.runs, "out": out });

    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    dirs.sort();
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let path = dir.join(SUMMARY_FILE);
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        rec.inputs.add_file(&format!("{name}/{SUMMARY_FILE}"), &path)?;
        let text = std::fs::read(&path)?;
        let summary: Summary = serde_json::from_slice(&text)
            .map_err(|e| CliError::Usage(format!("{} is not a run summary: {e}", path.display())))?;
        rows.push((name, summary));
    }
    if rows.is_empty() {
        return Err(CliError::Failed(format!(
            "no run summaries ({SUMMARY_FILE}) found in the subdirectories of {}",
            a.runs.display()
        )));
    }

    std::fs::create_dir_all(&out)?;
    let csv = out.join("comparison.csv");
    std::fs::write(&csv, csv_table(&rows))?;
    rec.output(csv);
    let md = out.join("comparison.md");
    let table = markdown_table(&rows);
    std::fs::write(&md, &table)?;
    rec.output(md);
    print!("{table}");
    Ok(())
}
