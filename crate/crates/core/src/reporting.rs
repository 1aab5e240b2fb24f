//! Appends run records to the cumulative CSV and computes the per-category
//! statistics tables.

use crate::domain::{sub_metric_names, Category, RunRecord, Version};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv header drift: expected {expected} columns starting '{expected_head}...', found '{found}'")]
    SchemaDrift {
        expected: usize,
        expected_head: String,
        found: String,
    },
    #[error("csv io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("record fails validation: {0}")]
    InvalidRecord(String),
}

/// Fixed, versioned CSV column order. Schema-drift detection compares the
/// on-disk header against exactly this list.
pub fn csv_columns() -> Vec<&'static str> {
    let mut cols = vec![
        "question_id",
        "category",
        "version",
        "started_at",
        "finished_at",
        "solve_s",
        "plan_s",
        "code_s",
        "render_s",
        "refine_s",
        "eval_s",
        "total_s",
        "fix_attempts_total",
        "scenes_aborted",
    ];
    cols.extend(sub_metric_names());
    cols.extend([
        "sq",
        "eq",
        "vq",
        "ep",
        "os",
        "max_scene_vqs",
        "flags",
        "top_issues",
    ]);
    cols
}

/// Timestamp and timing columns, excluded from determinism comparisons.
pub fn volatile_columns() -> [&'static str; 9] {
    [
        "started_at",
        "finished_at",
        "solve_s",
        "plan_s",
        "code_s",
        "render_s",
        "refine_s",
        "eval_s",
        "total_s",
    ]
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.6}")
}

fn record_to_row(record: &RunRecord) -> Vec<String> {
    let mut row = vec![
        record.question_id.clone(),
        record.category.clone(),
        record.version.as_str().to_string(),
        record.started_at.clone(),
        record.finished_at.clone(),
        fmt_f64(record.solve_s),
        fmt_f64(record.plan_s),
        fmt_f64(record.code_s),
        fmt_f64(record.render_s),
        fmt_f64(record.refine_s),
        fmt_f64(record.eval_s),
        fmt_f64(record.total_s),
        record.fix_attempts_total.to_string(),
        record.scenes_aborted.to_string(),
    ];
    row.extend(record.sub_metrics.iter().map(|m| fmt_f64(*m)));
    row.extend([
        fmt_f64(record.solution_score),
        fmt_f64(record.explanation_score),
        fmt_f64(record.visual_quality),
        fmt_f64(record.error_penalty_score),
        fmt_f64(record.overall_score),
        record.max_scene_vqs.map(fmt_f64).unwrap_or_default(),
        record.flags.join(";"),
        record.top_issues.join(";"),
    ]);
    row
}

fn check_header(found: &csv::StringRecord) -> Result<(), ReportError> {
    let expected = csv_columns();
    let found_cols: Vec<&str> = found.iter().collect();
    if found_cols != expected {
        return Err(ReportError::SchemaDrift {
            expected: expected.len(),
            expected_head: expected[..3].join(","),
            found: found_cols.join(","),
        });
    }
    Ok(())
}

fn read_rows(csv_path: &Path) -> Result<Vec<csv::StringRecord>, ReportError> {
    let mut reader = csv::ReaderBuilder::new().from_path(csv_path)?;
    check_header(reader.headers()?)?;
    let mut rows = Vec::new();
    for row in reader.records() {
        rows.push(row?);
    }
    Ok(rows)
}

fn write_all(csv_path: &Path, rows: &[Vec<String>]) -> Result<(), ReportError> {
    let tmp = csv_path.with_extension("csv.tmp");
    {
        let mut writer = csv::WriterBuilder::new().from_path(&tmp)?;
        writer.write_record(csv_columns())?;
        for row in rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
    }
    fs::rename(&tmp, csv_path)?;
    Ok(())
}

/// Appends one record, writing the header on first use. The whole file is
/// rewritten to a temp path and renamed, so concurrent readers never see a
/// torn row. Returns the data-row count after the append.
pub fn append(record: &RunRecord, csv_path: &Path) -> Result<usize, ReportError> {
    let violations = crate::domain::validate(record);
    if !violations.is_empty() {
        return Err(ReportError::InvalidRecord(violations.join("; ")));
    }
    let mut rows: Vec<Vec<String>> = if csv_path.exists() {
        read_rows(csv_path)?
            .iter()
            .map(|r| r.iter().map(str::to_string).collect())
            .collect()
    } else {
        Vec::new()
    };
    rows.push(record_to_row(record));
    write_all(csv_path, &rows)?;
    Ok(rows.len())
}

/// Replaces every row matching the record's (question_id, version) key, or
/// appends when none matches. Used by re-evaluation.
pub fn upsert(record: &RunRecord, csv_path: &Path) -> Result<usize, ReportError> {
    let violations = crate::domain::validate(record);
    if !violations.is_empty() {
        return Err(ReportError::InvalidRecord(violations.join("; ")));
    }
    let mut rows: Vec<Vec<String>> = if csv_path.exists() {
        read_rows(csv_path)?
            .iter()
            .map(|r| r.iter().map(str::to_string).collect())
            .collect()
    } else {
        Vec::new()
    };
    let new_row = record_to_row(record);
    let mut replaced = false;
    for row in &mut rows {
        if row[0] == record.question_id && row[2] == record.version.as_str() {
            *row = new_row.clone();
            replaced = true;
        }
    }
    if !replaced {
        rows.push(new_row);
    }
    write_all(csv_path, &rows)?;
    Ok(rows.len())
}

/// Raw data rows (header validated, excluded), for comparisons and tools.
pub fn raw_rows(csv_path: &Path) -> Result<Vec<Vec<String>>, ReportError> {
    Ok(read_rows(csv_path)?
        .iter()
        .map(|r| r.iter().map(str::to_string).collect())
        .collect())
}

/// Per-category summary row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryStats {
    pub category: String,
    pub count: usize,
    pub mean_os: f64,
    pub sd_os: f64,
    pub mean_vqs: f64,
    pub sd_vqs: f64,
    pub mean_total_s: f64,
}

fn mean_and_sample_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

fn column_index(name: &str) -> usize {
    csv_columns()
        .iter()
        .position(|c| *c == name)
        .expect("known column")
}

/// Groups rows by category and summarizes OS, VQS and total time with
/// sample (n-1) standard deviations. Categories with no rows are omitted.
pub fn category_stats(
    csv_path: &Path,
    version_filter: Option<Version>,
) -> Result<Vec<CategoryStats>, ReportError> {
    let rows = read_rows(csv_path)?;
    let cat_i = column_index("category");
    let ver_i = column_index("version");
    let os_i = column_index("os");
    let vq_i = column_index("vq");
    let total_i = column_index("total_s");

    #[derive(Default)]
    struct Group {
        os: Vec<f64>,
        vqs: Vec<f64>,
        totals: Vec<f64>,
    }
    let mut groups: BTreeMap<&'static str, Group> = BTreeMap::new();
    for row in &rows {
        if let Some(v) = version_filter {
            if row.get(ver_i) != Some(v.as_str()) {
                continue;
            }
        }
        let Some(category) = row.get(cat_i).and_then(Category::parse) else {
            continue;
        };
        let parse = |i: usize| row.get(i).and_then(|s| s.parse::<f64>().ok());
        let (Some(os), Some(vq), Some(total)) = (parse(os_i), parse(vq_i), parse(total_i)) else {
            continue;
        };
        let entry = groups.entry(category.as_str()).or_default();
        entry.os.push(os);
        entry.vqs.push(vq);
        entry.totals.push(total);
    }

    let mut out = Vec::new();
    for category in Category::ALL {
        let Some(group) = groups.get(category.as_str()) else {
            continue;
        };
        let (mean_os, sd_os) = mean_and_sample_sd(&group.os);
        let (mean_vqs, sd_vqs) = mean_and_sample_sd(&group.vqs);
        let (mean_total_s, _) = mean_and_sample_sd(&group.totals);
        out.push(CategoryStats {
            category: category.as_str().to_string(),
            count: group.os.len(),
            mean_os,
            sd_os,
            mean_vqs,
            sd_vqs,
            mean_total_s,
        });
    }
    Ok(out)
}

/// Renders category stats as the aligned plain-text table the CLI prints.
pub fn format_stats_table(stats: &[CategoryStats]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<9} {:>3}  {:>12}  {:>12}  {:>12}\n",
        "Category", "N", "Mean OS (SD)", "Mean VQS (SD)", "Avg Time (s)"
    ));
    for s in stats {
        out.push_str(&format!(
            "{:<9} {:>3}  {:>5.2} ({:.2})  {:>5.2} ({:.2})  {:>12.2}\n",
            s.category, s.count, s.mean_os, s.sd_os, s.mean_vqs, s.sd_vqs, s.mean_total_s
        ));
    }
    out
}

/// Counts normalized issue labels across records: case-folded, trimmed,
/// ordered by descending count then alphabetically.
pub fn issue_tally(records: &[RunRecord]) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for record in records {
        for issue in &record.top_issues {
            let label = issue.trim().to_lowercase();
            if label.is_empty() {
                continue;
            }
            *counts.entry(label).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
