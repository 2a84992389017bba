use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::loo::CellOutcome;
use super::metrics::mean_std;
use crate::error::Result;
use crate::losses::LossKind;

/// One (held-out task, loss, repeat) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub task_id: String,
    pub loss: LossKind,
    pub repeat: usize,
    pub seed: u64,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub search_perf: Option<f64>,
    pub predicted_score: Option<f64>,
    pub error: Option<String>,
}

impl CellResult {
    pub(crate) fn from_outcome(
        task_id: &str,
        loss: LossKind,
        repeat: usize,
        seed: u64,
        outcome: Result<CellOutcome>,
    ) -> Self {
        let mut cell = CellResult {
            task_id: task_id.to_string(),
            loss,
            repeat,
            seed,
            spearman: None,
            pearson: None,
            search_perf: None,
            predicted_score: None,
            error: None,
        };
        let mut errors = Vec::new();
        match outcome {
            Err(e) => errors.push(e.to_string()),
            Ok(o) => {
                match o.spearman {
                    Ok(v) => cell.spearman = Some(v),
                    Err(e) => errors.push(e.to_string()),
                }
                match o.pearson {
                    Ok(v) => cell.pearson = Some(v),
                    Err(e) => errors.push(e.to_string()),
                }
                match o.search {
                    Some(Ok((q, v, _))) => {
                        cell.search_perf = Some(q);
                        cell.predicted_score = Some(v);
                    }
                    Some(Err(e)) => errors.push(format!("search: {e}")),
                    None => {}
                }
            }
        }
        if !errors.is_empty() {
            cell.error = Some(errors.join("; "));
        }
        cell
    }
}

/// Aggregate over repeats; stds use the `n - 1` denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task_id: String,
    pub loss: LossKind,
    pub n_repeats: usize,
    pub n_failed: usize,
    pub spearman_mean: Option<f64>,
    pub spearman_std: Option<f64>,
    pub pearson_mean: Option<f64>,
    pub pearson_std: Option<f64>,
    pub search_mean: Option<f64>,
    pub search_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellResult>,
}

pub(crate) fn summarize(cells: &[CellResult]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, LossKind), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.task_id.clone(), c.loss)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|((task_id, loss), cs)| {
            let col = |f: fn(&CellResult) -> Option<f64>| -> Vec<f64> { cs.iter().filter_map(|c| f(c)).collect() };
            let (spearman_mean, spearman_std) = mean_std(&col(|c| c.spearman));
            let (pearson_mean, pearson_std) = mean_std(&col(|c| c.pearson));
            let (search_mean, search_std) = mean_std(&col(|c| c.search_perf));
            ReportRow {
                task_id,
                loss,
                n_repeats: cs.len(),
                n_failed: cs.iter().filter(|c| c.error.is_some()).count(),
                spearman_mean,
                spearman_std,
                pearson_mean,
                pearson_std,
                search_mean,
                search_std,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn row(&self, task_id: &str, loss: LossKind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.task_id == task_id && r.loss == loss)
    }

    pub fn task_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.task_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn write_summary_csv(&self, out: impl Write) -> Result<()> {
        write_csv(&self.rows, out)
    }

    pub fn write_cells_csv(&self, out: impl Write) -> Result<()> {
        write_csv(&self.cells, out)
    }
}

fn write_csv<T: Serialize>(items: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for it in items {
        w.serialize(it)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(input: impl Read) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}

fn mean_pm_std(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "n/a".to_string(),
    }
}

/// Aligned plain-text tables, one per metric: task rows, loss columns,
/// cells `mean ± std`.
pub fn render_tables(rows: &[ReportRow]) -> String {
    let mut losses: Vec<LossKind> = rows.iter().map(|r| r.loss).collect();
    losses.sort();
    losses.dedup();
    let mut tasks: Vec<&str> = rows.iter().map(|r| r.task_id.as_str()).collect();
    tasks.sort();
    tasks.dedup();
    let metrics: [(&str, fn(&ReportRow) -> (Option<f64>, Option<f64>)); 3] = [
        ("Spearman rank correlation", |r| (r.spearman_mean, r.spearman_std)),
        ("Pearson correlation", |r| (r.pearson_mean, r.pearson_std)),
        ("Performance of the found architecture", |r| (r.search_mean, r.search_std)),
    ];
    let mut out = String::new();
    for (title, get) in metrics {
        if rows.iter().all(|r| get(r).0.is_none()) {
            continue;
        }
        let mut table: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["task".to_string()];
        header.extend(losses.iter().map(|l| l.to_string()));
        table.push(header);
        for t in &tasks {
            let mut line = vec![t.to_string()];
            for l in &losses {
                let cell = rows
                    .iter()
                    .find(|r| r.task_id == *t && r.loss == *l)
                    .map_or("n/a".to_string(), |r| {
                        let (m, s) = get(r);
                        mean_pm_std(m, s)
                    });
                line.push(cell);
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let n = rows.iter().map(|r| r.n_repeats).max().unwrap_or(0);
        out.push_str(&format!("{title} (mean ± std over {n} repeats)\n"));
        for (k, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    let pad = w - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}
