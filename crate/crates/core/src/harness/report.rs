use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::ResultTable;
use crate::datamodel::{
    ContextKg, ExplanationCache, Granularity, QaInstance, SaliencyRecord, Unit,
};
use crate::{Error, Result};

/// Mean and std in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

impl Cell {
    pub fn from_fraction((mean, std): (f64, f64)) -> Self {
        Cell {
            mean: 100.0 * mean,
            std: 100.0 * std,
        }
    }

    /// `57.98 (±0.90)`.
    pub fn render(&self) -> String {
        format!("{:.2} (±{:.2})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    table: String,
    variant: String,
    column: String,
    mean: Option<f64>,
    std: Option<f64>,
}

impl ReportTable {
    /// Dev, test and (if present) perturbed-test accuracy per variant.
    pub fn from_results(title: &str, results: &ResultTable) -> Self {
        let with_perturbed = results.rows.iter().any(|r| r.perturbed.is_some());
        let mut columns = vec!["Dev".to_string(), "Test".to_string()];
        if with_perturbed {
            columns.push("Perturbed".into());
        }
        let rows = results
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![
                    Some(Cell::from_fraction(r.dev)),
                    Some(Cell::from_fraction(r.test)),
                ];
                if with_perturbed {
                    cells.push(r.perturbed.map(Cell::from_fraction));
                }
                ReportRow {
                    variant: r.variant.to_string(),
                    cells,
                }
            })
            .collect();
        ReportTable {
            title: title.to_string(),
            columns,
            rows,
        }
    }

    /// Row indices of the best and second-best mean in column `c`.
    pub fn ranks(&self, c: usize) -> (Option<usize>, Option<usize>) {
        let mut means: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.cells.get(c).copied().flatten().map(|x| (i, x.mean)))
            .collect();
        means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        (means.first().map(|x| x.0), means.get(1).map(|x| x.0))
    }

    /// Markdown, best in bold and second-best in italics per column.
    pub fn render(&self) -> String {
        let mut out = format!(
            "## {}\n\n| Variant | {} |\n|---|",
            self.title,
            self.columns.join(" | ")
        );
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        let ranks: Vec<_> = (0..self.columns.len()).map(|c| self.ranks(c)).collect();
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "| {} |", row.variant);
            for (c, cell) in row.cells.iter().enumerate() {
                let text = match cell {
                    None => "-".to_string(),
                    Some(x) if ranks[c].0 == Some(i) => format!("**{}**", x.render()),
                    Some(x) if ranks[c].1 == Some(i) => format!("_{}_", x.render()),
                    Some(x) => x.render(),
                };
                let _ = write!(out, " {text} |");
            }
            out.push('\n');
        }
        out
    }
}

/// Writes `report.csv` (long format) and `report.md` into `dest`.
pub fn emit_report(tables: &[ReportTable], dest: &Path) -> Result<()> {
    if tables.is_empty() {
        return Err(Error::Config("nothing to report".into()));
    }
    std::fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    let csv_path = dest.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for t in tables {
        for row in &t.rows {
            for (col, cell) in t.columns.iter().zip(&row.cells) {
                w.serialize(CsvRow {
                    table: t.title.clone(),
                    variant: row.variant.clone(),
                    column: col.clone(),
                    mean: cell.map(|c| c.mean),
                    std: cell.map(|c| c.std),
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let md: Vec<String> = tables.iter().map(ReportTable::render).collect();
    let md_path = dest.join("report.md");
    std::fs::write(&md_path, md.join("\n")).map_err(|e| Error::io(&md_path, e))
}

/// Parses `report.csv` back into tables, keeping first-seen order.
pub fn read_report_csv(src: &Path) -> Result<Vec<ReportTable>> {
    let mut tables: Vec<ReportTable> = Vec::new();
    for row in csv::Reader::from_path(src)?.deserialize() {
        let r: CsvRow = row?;
        let cell = match (r.mean, r.std) {
            (Some(mean), Some(std)) => Some(Cell { mean, std }),
            _ => None,
        };
        let t = match tables.iter().position(|t| t.title == r.table) {
            Some(i) => &mut tables[i],
            None => {
                tables.push(ReportTable {
                    title: r.table.clone(),
                    columns: Vec::new(),
                    rows: Vec::new(),
                });
                tables.last_mut().unwrap()
            }
        };
        let c = match t.columns.iter().position(|c| *c == r.column) {
            Some(c) => c,
            None => {
                t.columns.push(r.column.clone());
                t.columns.len() - 1
            }
        };
        let row = match t.rows.iter().position(|x| x.variant == r.variant) {
            Some(i) => &mut t.rows[i],
            None => {
                t.rows.push(ReportRow {
                    variant: r.variant.clone(),
                    cells: Vec::new(),
                });
                t.rows.last_mut().unwrap()
            }
        };
        if row.cells.len() <= c {
            row.cells.resize(c + 1, None);
        }
        row.cells[c] = cell;
    }
    Ok(tables)
}

fn describe(kg: &ContextKg, unit: Unit) -> String {
    match unit {
        Unit::Graph => "(graph)".into(),
        Unit::Node(n) => kg.nodes[n as usize].label.clone(),
        Unit::Path(p) => {
            let mut s = String::new();
            for (i, &e) in kg.paths[p].edges.iter().enumerate() {
                let edge = &kg.edges[e];
                if i == 0 {
                    s.push_str(&kg.nodes[edge.head as usize].label);
                }
                let _ = write!(
                    s,
                    " -{}-> {}",
                    kg.relations[edge.relation], kg.nodes[edge.tail as usize].label
                );
            }
            s
        }
    }
}

/// Saliency dump for `n` uniformly sampled instances: question, target,
/// prediction, and per choice the three highest- and lowest-scoring units.
pub fn dump_case_studies(
    cache: &ExplanationCache,
    data: &[QaInstance],
    predictions: &[usize],
    n: usize,
    seed: u64,
) -> Result<String> {
    if cache.granularity != Granularity::Fine {
        return Err(Error::Mismatch("case studies need a fine cache".into()));
    }
    if predictions.len() != data.len() {
        return Err(Error::Mismatch(
            "one prediction per instance expected".into(),
        ));
    }
    cache.check_covers(data)?;
    let mut picked = sample(
        &mut ChaCha8Rng::seed_from_u64(seed),
        data.len(),
        n.min(data.len()),
    )
    .into_vec();
    picked.sort_unstable();
    let mut out = String::new();
    for i in picked {
        let inst = &data[i];
        let _ = writeln!(out, "== {}", inst.id);
        let _ = writeln!(out, "question: {}", inst.question.join(" "));
        let _ = writeln!(
            out,
            "target: {} ({})  predicted: {} ({})",
            inst.target_index,
            inst.choices[inst.target_index].text.join(" "),
            predictions[i],
            inst.choices[predictions[i]].text.join(" ")
        );
        for (c, ch) in inst.choices.iter().enumerate() {
            let mut recs: Vec<&SaliencyRecord> = cache.get(&inst.id, c)?.iter().collect();
            recs.sort_by(|a, b| b.phi.total_cmp(&a.phi));
            let shown: Vec<&SaliencyRecord> = if recs.len() <= 6 {
                recs
            } else {
                recs[..3]
                    .iter()
                    .chain(&recs[recs.len() - 3..])
                    .copied()
                    .collect()
            };
            let _ = writeln!(out, "  choice {c} ({}):", ch.text.join(" "));
            for r in shown {
                let _ = writeln!(
                    out,
                    "    [{}] {:+.4}  {}",
                    if r.positive() { "+" } else { "-" },
                    r.phi,
                    describe(&ch.kg, r.unit)
                );
            }
        }
    }
    Ok(out)
}
