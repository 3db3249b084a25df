//! Plain-text tables for reports.

use super::ablation::AblationRow;
use super::metrics::EvalReport;
use crate::tokenizer::CorpusStats;

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.clone()));
        out.push('\n');
    }
    out
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

pub fn render_reports(reports: &[EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.perturbation.clone().unwrap_or_else(|| "clean".into()),
                r.total.to_string(),
                f4(r.accuracy),
                f4(r.precision),
                f4(r.recall),
                f4(r.f1),
            ]
        })
        .collect();
    render(
        &["dataset", "perturbation", "n", "accuracy", "precision", "recall", "f1"],
        &rows,
    )
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.flags.label(),
                r.seq_len.to_string(),
                r.trainable_params.to_string(),
                r.epochs.to_string(),
                format!("{:.2}", r.train_seconds),
                format!("{:.3}", r.seconds_per_epoch),
                f4(r.report.accuracy),
                f4(r.report.precision),
                f4(r.report.recall),
                f4(r.report.f1),
            ]
        })
        .collect();
    render(
        &[
            "setting", "seq_len", "trainable", "epochs", "train_s", "s/epoch", "accuracy", "precision", "recall", "f1",
        ],
        &body,
    )
}

pub fn render_stats(stats: &[CorpusStats]) -> String {
    let body: Vec<Vec<String>> = stats
        .iter()
        .map(|s| {
            vec![
                s.dataset.clone(),
                s.tokenizer.to_string(),
                s.max_length.to_string(),
                format!("{:.2}", s.mean_length),
                format!("{:.4}", s.tokenize_seconds),
            ]
        })
        .collect();
    render(&["dataset", "tokenizer", "max_length", "mean_length", "seconds"], &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_line_up() {
        let t = render(&["a", "bb"], &[vec!["xyz".into(), "1".into()], vec!["q".into(), "22".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a    bb");
        assert_eq!(lines[1], "---  --");
        assert_eq!(lines[2], "xyz   1");
        assert_eq!(lines[3], "q    22");
    }
}
