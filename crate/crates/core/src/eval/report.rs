//! CSV matrices, JSON summary and the plain-text comparison report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::matrix::{summarize, KappaMatrix, SummaryStats};

/// Formats with six significant digits, without exponent notation.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { "undefined".into() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.starts_with("-0") && s.trim_start_matches(['-', '0', '.']).is_empty() {
        return s[1..].to_string();
    }
    s
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), format_sig6)
}

pub fn matrix_to_csv(m: &KappaMatrix) -> String {
    let mut out = String::from("model");
    for id in &m.site_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (id, row) in m.site_ids.iter().zip(&m.values) {
        out.push_str(id);
        for v in row {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');
    }
    if let Some(g) = &m.global_row {
        out.push_str("global");
        for v in g {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<KappaMatrix> {
    let bad = |m: &str| Error::Malformed(format!("kappa csv: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("model") {
        return Err(bad("header must start with 'model'"));
    }
    let site_ids: Vec<String> = cols.map(str::to_string).collect();
    let parse_row = |fields: std::str::Split<'_, char>| -> Result<Vec<Option<f64>>> {
        fields
            .map(|f| match f {
                "undefined" => Ok(None),
                v => v.parse::<f64>().map(Some).map_err(|_| bad(v)),
            })
            .collect()
    };
    let mut values = Vec::new();
    let mut global_row = None;
    for line in lines.filter(|l| !l.is_empty()) {
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default();
        let row = parse_row(fields)?;
        if row.len() != site_ids.len() {
            return Err(bad("ragged row"));
        }
        if name == "global" {
            global_row = Some(row);
        } else {
            values.push(row);
        }
    }
    if values.len() != site_ids.len() {
        return Err(bad("matrix is not square"));
    }
    Ok(KappaMatrix { site_ids, values, global_row })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub diag_mean: f64,
    pub offdiag_mean: f64,
    pub rel_improvement_diag: Option<f64>,
    pub rel_improvement_offdiag: Option<f64>,
    pub local: SummaryStats,
    pub federated: SummaryStats,
    pub finetuned: Option<SummaryStats>,
}

/// Builds the summary of the federated matrix relative to the local one,
/// and of the fine-tuned matrix relative to the federated one.
pub fn build_summary(
    local: &KappaMatrix,
    federated: &KappaMatrix,
    finetuned: Option<&KappaMatrix>,
) -> Result<ReportSummary> {
    let l = summarize(local, None)?;
    let f = summarize(federated, Some(local))?;
    let t = finetuned.map(|m| summarize(m, Some(federated))).transpose()?;
    Ok(ReportSummary {
        diag_mean: f.diag_mean,
        offdiag_mean: f.offdiag_mean,
        rel_improvement_diag: f.rel_improvement_diag,
        rel_improvement_offdiag: f.rel_improvement_offdiag,
        local: l,
        federated: f,
        finetuned: t,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:+.1}%", 100.0 * x))
}

fn mean_line(label: &str, s: &SummaryStats) -> String {
    format!(
        "{label:<12} diag. mean {:.2} ({:.6})   off-diag. mean {:.2} ({:.6})\n",
        s.diag_mean, s.diag_mean, s.offdiag_mean, s.offdiag_mean
    )
}

pub fn render_report(
    local: &KappaMatrix,
    federated: &KappaMatrix,
    finetuned: Option<&KappaMatrix>,
    summary: &ReportSummary,
) -> String {
    let mut out = String::new();
    out.push_str("Cross-site evaluation (linear weighted kappa, patient level)\n\n");
    out.push_str("Per-site test kappa\n");
    let _ = writeln!(out, "{:<10} {:>10} {:>10} {:>11}", "site", "local", "federated", "fine-tuned");
    let ld = local.diagonal();
    let fd = federated.diagonal();
    let td = finetuned.map(KappaMatrix::diagonal);
    for (i, id) in local.site_ids.iter().enumerate() {
        let t = td.as_ref().map_or_else(|| "-".to_string(), |d| cell(d[i]));
        let _ = writeln!(out, "{id:<10} {:>10} {:>10} {:>11}", cell(ld[i]), cell(fd[i]), t);
    }
    out.push('\n');
    out.push_str(&mean_line("local", &summary.local));
    out.push_str(&mean_line("federated", &summary.federated));
    if let Some(t) = &summary.finetuned {
        out.push_str(&mean_line("fine-tuned", t));
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "federated vs local:       diag {}   off-diag {}",
        pct(summary.federated.rel_improvement_diag),
        pct(summary.federated.rel_improvement_offdiag)
    );
    if let Some(t) = &summary.finetuned {
        let _ = writeln!(out, "fine-tuned vs federated:  diag {}", pct(t.rel_improvement_diag));
        if let Some(td) = &td {
            let better = td
                .iter()
                .zip(&fd)
                .filter(|(t, f)| matches!((t, f), (Some(t), Some(f)) if t >= f))
                .count();
            let _ = writeln!(out, "sites with fine-tuned >= federated: {better} of {}", td.len());
        }
    }
    if let Some(g) = &federated.global_row {
        let vals: Vec<String> = g.iter().map(|v| cell(*v)).collect();
        let _ = writeln!(out, "\nfinal global model on each site: {}", vals.join(", "));
    }
    out
}

fn write(path: PathBuf, contents: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `local.csv`, `federated.csv`, optional `finetuned.csv`,
/// `summary.json` and `report.txt` into `dir`; returns the paths written.
pub fn emit_report(
    dir: &Path,
    local: &KappaMatrix,
    federated: &KappaMatrix,
    finetuned: Option<&KappaMatrix>,
) -> Result<Vec<PathBuf>> {
    let summary = build_summary(local, federated, finetuned)?;
    let mut written = Vec::new();
    write(dir.join("local.csv"), matrix_to_csv(local).as_bytes(), &mut written)?;
    write(dir.join("federated.csv"), matrix_to_csv(federated).as_bytes(), &mut written)?;
    if let Some(t) = finetuned {
        write(dir.join("finetuned.csv"), matrix_to_csv(t).as_bytes(), &mut written)?;
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(dir.join("summary.json"), json.as_bytes(), &mut written)?;
    let text = render_report(local, federated, finetuned, &summary);
    write(dir.join("report.txt"), text.as_bytes(), &mut written)?;
    Ok(written)
}
