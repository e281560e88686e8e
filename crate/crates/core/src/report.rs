//! Summary tables and accuracy-versus-AIL scatter data from `results.csv`.
//!
//! Rendering is a pure function of the parsed rows and the single-task
//! accuracy table, so the outputs can be compared byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::curriculum::is_curriculum_order;
use crate::error::{Error, Result};
use crate::experiment::{ResultsRow, RESULTS_HEADER};
use crate::ssl::TaskId;

pub const TABLE_FILE: &str = "table.md";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const SVG_FILE: &str = "scatter.svg";

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResults {
    pub rows: Vec<ResultsRow>,
    /// `(line number, reason)` of every skipped row.
    pub malformed: Vec<(usize, String)>,
}

/// Parse `results.csv`. Bad rows are collected, not fatal; a missing header
/// or no valid row at all is an error.
pub fn parse_results(text: &str) -> Result<ParsedResults> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        None => return Err(Error::Empty("results file is empty".into())),
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        Some((_, h)) => return Err(Error::Format(format!("unexpected results header {h:?}"))),
    }
    let mut out = ParsedResults {
        rows: Vec::new(),
        malformed: Vec::new(),
    };
    for (i, line) in lines {
        match ResultsRow::from_csv_line(line) {
            Ok(r) => out.rows.push(r),
            Err(e) => out.malformed.push((i + 1, e.to_string())),
        }
    }
    if out.rows.is_empty() {
        return Err(Error::Empty("results file has no valid rows".into()));
    }
    Ok(out)
}

/// Mean accuracy of each single-task row, by task.
pub fn single_task_from_rows(rows: &[ResultsRow]) -> BTreeMap<TaskId, f64> {
    let mut acc: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let [t] = r.pretrain_sequence[..] {
            let e = acc.entry(t).or_default();
            e.0 += r.val_balanced_acc;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
}

/// `task,acc` CSV with task names or abbreviations.
pub fn parse_single_task_table(text: &str) -> Result<BTreeMap<TaskId, f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("task,acc") {
        return Err(Error::Format("single-task table header must be `task,acc`".into()));
    }
    lines
        .map(|l| {
            let (t, a) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad single-task row {l:?}")))?;
            let acc: f64 = a
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad accuracy {a:?}")))?;
            Ok((t.parse()?, acc))
        })
        .collect()
}

pub fn sequence_label(seq: &[TaskId]) -> String {
    if seq.is_empty() {
        "Scratch".to_string()
    } else {
        seq.iter().map(|t| t.abbrev()).collect::<Vec<_>>().join(" + ")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TableEntry {
    sequence: Vec<TaskId>,
    runs: usize,
    acc: f64,
    ail: f64,
}

/// Rows with the same sequence are averaged; first appearance fixes the
/// order within a block.
fn aggregate(rows: &[ResultsRow]) -> BTreeMap<usize, Vec<TableEntry>> {
    let mut blocks: BTreeMap<usize, Vec<TableEntry>> = BTreeMap::new();
    for r in rows {
        let block = blocks.entry(r.pretrain_sequence.len()).or_default();
        match block.iter_mut().find(|e| e.sequence == r.pretrain_sequence) {
            Some(e) => {
                e.runs += 1;
                e.acc += r.val_balanced_acc;
                e.ail += r.mean_ail;
            }
            None => block.push(TableEntry {
                sequence: r.pretrain_sequence.clone(),
                runs: 1,
                acc: r.val_balanced_acc,
                ail: r.mean_ail,
            }),
        }
    }
    for e in blocks.values_mut().flatten() {
        e.acc /= e.runs as f64;
        e.ail /= e.runs as f64;
    }
    blocks
}

fn block_title(len: usize) -> String {
    match len {
        0 => "No pretraining".to_string(),
        1 => "1 task".to_string(),
        n => format!("{n} tasks"),
    }
}

fn curriculum_cell(seq: &[TaskId], single: &BTreeMap<TaskId, f64>) -> &'static str {
    if seq.len() < 2 {
        return "-";
    }
    match is_curriculum_order(seq, single) {
        Ok(true) => "✓",
        Ok(false) => "",
        Err(_) => "?",
    }
}

fn cell(v: f64, best: f64) -> String {
    if v == best {
        format!("**{v:.2}**")
    } else {
        format!("{v:.2}")
    }
}

/// Markdown table, one section per sequence length, block maxima in bold.
pub fn render_table(rows: &[ResultsRow], single: &BTreeMap<TaskId, f64>) -> String {
    let mut out = String::from("# Balanced accuracy and attention inside the lungs\n");
    for (len, entries) in aggregate(rows) {
        let best_acc = entries.iter().map(|e| e.acc).fold(f64::NEG_INFINITY, f64::max);
        let best_ail = entries.iter().map(|e| e.ail).fold(f64::NEG_INFINITY, f64::max);
        writeln!(out, "\n## {}\n", block_title(len)).expect("string write");
        out.push_str("| Pretraining | Curriculum | Runs | Balanced acc. (%) | AIL (%) |\n");
        out.push_str("|---|:-:|--:|--:|--:|\n");
        for e in &entries {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                sequence_label(&e.sequence),
                curriculum_cell(&e.sequence, single),
                e.runs,
                cell(e.acc, best_acc),
                cell(e.ail, best_ail)
            )
            .expect("string write");
        }
    }
    out
}

/// One line per results row.
pub fn render_scatter_csv(rows: &[ResultsRow]) -> String {
    let mut out = String::from("label,acc,ail\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6}",
            sequence_label(&r.pretrain_sequence),
            r.val_balanced_acc,
            r.mean_ail
        )
        .expect("string write");
    }
    out
}

/// Scatter of accuracy (vertical) against AIL (horizontal). When scratch
/// rows exist, the best scratch accuracy is drawn as a green horizontal
/// line and that run's AIL as a vertical one.
pub fn render_svg(rows: &[ResultsRow]) -> String {
    const W: f64 = 520.0;
    const H: f64 = 380.0;
    const M: f64 = 56.0;
    let baseline = rows
        .iter()
        .filter(|r| r.pretrain_sequence.is_empty())
        .max_by(|a, b| a.val_balanced_acc.total_cmp(&b.val_balanced_acc));
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(1.0);
        ((lo - pad).max(0.0), (hi + pad).min(100.0))
    };
    let (x0, x1) = range(rows.iter().map(|r| r.mean_ail).collect());
    let (y0, y1) = range(rows.iter().map(|r| r.val_balanced_acc).collect());
    let px = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">AIL (%)</text>"#,
        W / 2.0,
        H - 16.0
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Balanced accuracy (%)</text>"#,
        H / 2.0,
        H / 2.0
    )
    .expect("string write");
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#, H - M + 14.0)
            .expect("string write");
    }
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        writeln!(s, r#"<text x="{:.2}" y="{y:.2}" text-anchor="end">{v:.1}</text>"#, M - 4.0).expect("string write");
    }
    if let Some(b) = baseline {
        writeln!(
            s,
            r#"<line x1="{M}" y1="{y:.2}" x2="{r}" y2="{y:.2}" stroke="green" stroke-dasharray="4 3"/>"#,
            y = py(b.val_balanced_acc),
            r = W - M
        )
        .expect("string write");
        writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{M}" x2="{x:.2}" y2="{b:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
            x = px(b.mean_ail),
            b = H - M
        )
        .expect("string write");
    }
    for r in rows {
        let (x, y) = (px(r.mean_ail), py(r.val_balanced_acc));
        let label = sequence_label(&r.pretrain_sequence);
        writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="steelblue"><title>{label}</title></circle>"#
        )
        .expect("string write");
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, x + 6.0, y - 6.0).expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub scatter_csv: String,
    pub svg: String,
}

pub fn render_report(rows: &[ResultsRow], single: &BTreeMap<TaskId, f64>) -> Report {
    Report {
        table: render_table(rows, single),
        scatter_csv: render_scatter_csv(rows),
        svg: render_svg(rows),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub rows: usize,
    pub malformed: Vec<(usize, String)>,
}

/// Read `results_csv`, render, and write the table, `scatter.csv` and the
/// SVG into `out_dir`. Without an explicit single-task table, accuracies of
/// the single-task rows are used. Nothing is written when the file has no
/// valid rows.
pub fn emit_report(results_csv: &Path, single_task: Option<&BTreeMap<TaskId, f64>>, out_dir: &Path) -> Result<ReportSummary> {
    let text = fs::read_to_string(results_csv).map_err(|e| Error::io(results_csv, e))?;
    let parsed = parse_results(&text)?;
    let single = match single_task {
        Some(s) => s.clone(),
        None => single_task_from_rows(&parsed.rows),
    };
    let report = render_report(&parsed.rows, &single);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (name, body) in [
        (TABLE_FILE, &report.table),
        (SCATTER_FILE, &report.scatter_csv),
        (SVG_FILE, &report.svg),
    ] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(ReportSummary {
        files,
        rows: parsed.rows.len(),
        malformed: parsed.malformed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn results() -> String {
        format!(
            "{RESULTS_HEADER}\n\
             a-0,,false,80.0,40.0,1\n\
             b-0,moco,false,83.89,41.0,1\n\
             c-0,swav,false,83.97,42.0,1\n\
             d-0,rotation,false,84.72,43.0,1\n\
             e-0,relloc,false,83.62,44.0,1\n\
             f-0,moco+swav+rotation,true,85.67,48.63,1\n\
             g-0,rotation+moco,false,84.0,47.0,1\n\
             broken line\n"
        )
    }

    #[test]
    fn malformed_rows_are_skipped_and_reported() {
        let p = parse_results(&results()).unwrap();
        assert_eq!(p.rows.len(), 7);
        assert_eq!(p.malformed.len(), 1);
        assert_eq!(p.malformed[0].0, 9);
    }

    #[test]
    fn empty_or_headerless_input_is_an_error() {
        assert!(matches!(parse_results(""), Err(Error::Empty(_))));
        assert!(matches!(parse_results(&format!("{RESULTS_HEADER}\n")), Err(Error::Empty(_))));
        assert!(matches!(parse_results("a,b\n1,2\n"), Err(Error::Format(_))));
    }

    #[test]
    fn curriculum_column_uses_single_task_rows() {
        let p = parse_results(&results()).unwrap();
        let single = single_task_from_rows(&p.rows);
        assert_eq!(single.len(), 4);
        let table = render_table(&p.rows, &single);
        assert!(table.contains("| M + S + RP | ✓ | 1 | **85.67** | **48.63** |"), "{table}");
        assert!(table.contains("| RP + M |  | 1 | **84.00** | **47.00** |"), "{table}");
        assert!(table.contains("| RP | - | 1 | **84.72** | 43.00 |"), "{table}");
        assert!(table.contains("## No pretraining"));
    }

    #[test]
    fn unknown_single_task_accuracy_is_marked() {
        let p = parse_results(&results()).unwrap();
        let table = render_table(&p.rows, &BTreeMap::new());
        assert!(table.contains("| M + S + RP | ? |"));
    }

    #[test]
    fn scatter_has_one_line_per_valid_row() {
        let p = parse_results(&results()).unwrap();
        let csv = render_scatter_csv(&p.rows);
        assert_eq!(csv.lines().count(), 1 + p.rows.len());
        assert_eq!(csv.lines().nth(1).unwrap(), "Scratch,80.000000,40.000000");
        let svg = render_svg(&p.rows);
        assert_eq!(svg.matches("<circle").count(), p.rows.len());
        assert!(svg.contains("stroke=\"green\""));
    }

    #[test]
    fn repeated_sequences_are_averaged() {
        let text = format!("{RESULTS_HEADER}\na-0,moco,false,80,40,1\na-1,moco,false,90,50,1\n");
        let p = parse_results(&text).unwrap();
        let table = render_table(&p.rows, &BTreeMap::new());
        assert!(table.contains("| M | - | 2 | **85.00** | **45.00** |"), "{table}");
    }

    #[test]
    fn single_task_table_parsing() {
        let t = parse_single_task_table("task,acc\nRL,83.62\nmoco,83.89\n").unwrap();
        assert_eq!(t[&TaskId::RelLoc], 83.62);
        assert_eq!(t[&TaskId::Moco], 83.89);
        assert!(parse_single_task_table("x,y\n").is_err());
    }
}
