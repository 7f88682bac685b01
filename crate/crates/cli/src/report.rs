use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use qkg_core::pipeline::RunSummary;
use qkg_core::stats::paired_test;

use crate::commands::{format_p, read_rows};

#[derive(Args)]
pub struct Report {
    /// Run directories (or per-sample CSVs) to summarise.
    #[arg(long = "run", required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Where report.txt, report.csv and report_paired.csv go.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn label(p: &std::path::Path) -> String {
    let p = if p.is_dir() { p } else { p.parent().unwrap_or(p) };
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

pub fn report(a: Report) -> Result<()> {
    let mut runs = Vec::new();
    for p in &a.runs {
        let rows = read_rows(p).with_context(|| format!("run {}", p.display()))?;
        if rows.is_empty() {
            bail!("run {} has no samples", p.display());
        }
        runs.push((label(p), rows));
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let mut table = csv::Writer::from_path(a.out_dir.join("report.csv"))?;
    table.write_record([
        "run",
        "n",
        "initial_accuracy",
        "final_accuracy",
        "w_to_c",
        "c_to_w",
        "revised",
        "revised_pct",
        "invalid_final",
    ])?;
    let mut text = String::new();
    writeln!(
        text,
        "{:<24} {:>6} {:>9} {:>9} {:>6} {:>6} {:>9}",
        "run", "n", "initial%", "final%", "W->C", "C->W", "revised%"
    )?;
    for (name, rows) in &runs {
        let s = RunSummary::from_rows(rows);
        writeln!(
            text,
            "{:<24} {:>6} {:>9.2} {:>9.2} {:>6} {:>6} {:>9.2}",
            name,
            s.n,
            100.0 * s.initial_accuracy,
            100.0 * s.final_accuracy,
            s.w_to_c,
            s.c_to_w,
            s.revised_pct
        )?;
        table.write_record([
            name.clone(),
            s.n.to_string(),
            format!("{:.4}", s.initial_accuracy),
            format!("{:.4}", s.final_accuracy),
            s.w_to_c.to_string(),
            s.c_to_w.to_string(),
            s.revised.to_string(),
            format!("{:.2}", s.revised_pct),
            s.invalid_final.to_string(),
        ])?;
    }
    table.flush()?;

    let mut paired = csv::Writer::from_path(a.out_dir.join("report_paired.csv"))?;
    paired.write_record(["run_a", "run_b", "n", "b", "c", "p_value"])?;
    if runs.len() > 1 {
        writeln!(
            text,
            "\n{:<24} {:<24} {:>6} {:>5} {:>5} {:>9}",
            "A", "B", "n", "b", "c", "p"
        )?;
    }
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let t = paired_test(&runs[i].1, &runs[j].1)?;
            writeln!(
                text,
                "{:<24} {:<24} {:>6} {:>5} {:>5} {:>9}",
                runs[i].0,
                runs[j].0,
                t.table.n,
                t.table.b,
                t.table.c,
                format_p(t.p_value)
            )?;
            paired.write_record([
                runs[i].0.clone(),
                runs[j].0.clone(),
                t.table.n.to_string(),
                t.table.b.to_string(),
                t.table.c.to_string(),
                format!("{:e}", t.p_value),
            ])?;
        }
    }
    paired.flush()?;
    std::fs::write(a.out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
