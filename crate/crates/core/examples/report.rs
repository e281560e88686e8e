//! Render the results table, scatter data and SVG plot from a handful of
//! results rows.
//!
//! cargo run --release --example report

use curricubench::experiment::ResultsRow;
use curricubench::report::{render_report, single_task_from_rows};
use curricubench::ssl::TaskId;

fn row(seq: &[TaskId], acc: f64, ail: f64) -> ResultsRow {
    ResultsRow {
        run_id: format!("demo-{}", seq.len()),
        pretrain_sequence: seq.to_vec(),
        is_curriculum: false,
        val_balanced_acc: acc,
        mean_ail: ail,
        wall_clock_s: 1.0,
    }
}

fn main() {
    use TaskId::{Moco, Rotation, Swav};
    let rows = vec![
        row(&[], 83.1, 40.2),
        row(&[Moco], 83.89, 44.0),
        row(&[Rotation], 84.72, 46.1),
        row(&[Swav], 83.97, 42.5),
        row(&[Moco, Rotation], 85.2, 47.9),
        row(&[Rotation, Moco], 84.0, 45.3),
        row(&[Moco, Swav, Rotation], 85.67, 48.63),
    ];
    let single = single_task_from_rows(&rows);
    let report = render_report(&rows, &single);
    println!("{}", report.table);
    println!("{}", report.scatter_csv);
    println!("svg: {} bytes", report.svg.len());
}
