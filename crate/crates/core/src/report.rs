//! Sweep reports as CSV and aligned plain text.

use std::fmt::Write as _;

use crate::data::Split;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub split: Split,
    pub mean_top1_error: f64,
    pub n: usize,
    pub seed: Option<u64>,
}

/// Result rows plus free-form context lines printed under the table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub footer: Vec<String>,
}

pub const CSV_HEADER: &str = "label,split,mean_top1_error,n,seed";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{:.6},{},{}",
                r.label, r.split, r.mean_top1_error, r.n, seed
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max("label".len());
        let mut out = String::new();
        writeln!(
            out,
            "{:<width$}  {:<5}  {:>15}  {:>6}  {:>6}",
            "label", "split", "mean_top1_error", "n", "seed"
        )
        .unwrap();
        for r in &self.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            writeln!(
                out,
                "{:<width$}  {:<5}  {:>15.4}  {:>6}  {:>6}",
                r.label,
                r.split.as_str(),
                r.mean_top1_error,
                r.n,
                seed
            )
            .unwrap();
        }
        for line in &self.footer {
            writeln!(out, "# {line}").unwrap();
        }
        out
    }

    /// Rows of `split` pivoted into a seed × label grid with a mean row,
    /// columns in first-appearance order.
    pub fn pivot(&self, split: Split) -> String {
        let mut labels: Vec<&str> = Vec::new();
        let mut seeds: Vec<Option<u64>> = Vec::new();
        for r in self.rows.iter().filter(|r| r.split == split) {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let cell = |label: &str, seed: Option<u64>| {
            self.rows
                .iter()
                .find(|r| r.split == split && r.label == label && r.seed == seed)
                .map(|r| r.mean_top1_error)
        };
        let mut out = String::new();
        write!(out, "{:<8}", format!("{split}")).unwrap();
        for l in &labels {
            write!(out, "  {l:>8}").unwrap();
        }
        out.push('\n');
        for s in &seeds {
            let name = s.map(|s| format!("seed {s}")).unwrap_or_else(|| "-".into());
            write!(out, "{name:<8}").unwrap();
            for l in &labels {
                match cell(l, *s) {
                    Some(v) => write!(out, "  {v:>8.4}").unwrap(),
                    None => write!(out, "  {:>8}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        write!(out, "{:<8}", "mean").unwrap();
        for l in &labels {
            let vals: Vec<f64> = seeds.iter().filter_map(|s| cell(l, *s)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            write!(out, "  {mean:>8.4}").unwrap();
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> SweepReport {
        let row = |label: &str, split, e, seed| SweepRow {
            label: label.into(),
            split,
            mean_top1_error: e,
            n: 10,
            seed,
        };
        SweepReport {
            rows: vec![
                row("ce", Split::Test, 0.5, Some(0)),
                row("bsce", Split::Test, 0.25, Some(0)),
                row("ce", Split::Test, 0.3, Some(1)),
                row("bsce", Split::Test, 0.15, Some(1)),
                row("ce", Split::Val, 0.9, Some(1)),
            ],
            footer: vec!["context".into()],
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "label,split,mean_top1_error,n,seed");
        assert_eq!(lines[1], "ce,test,0.500000,10,0");
        assert_eq!(lines.len(), 6);
        let unseeded = SweepReport {
            rows: vec![SweepRow {
                label: "tta".into(),
                split: Split::Val,
                mean_top1_error: 0.125,
                n: 8,
                seed: None,
            }],
            footer: vec![],
        };
        assert_eq!(
            unseeded.to_csv().lines().nth(1).unwrap(),
            "tta,val,0.125000,8,"
        );
    }

    #[test]
    fn table_has_footer_and_pivot_means() {
        let r = report();
        assert!(r.to_table().ends_with("# context\n"));
        let pivot = r.pivot(Split::Test);
        let last = pivot.lines().last().unwrap();
        assert_eq!(last, "mean        0.4000    0.2000");
    }
}
