use std::fmt::Write as _;

use super::Setup;
use crate::tokenizer::VocabKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-seed values of one table cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub setup: Setup,
    pub target: VocabKind,
    pub split: Split,
    pub values: Vec<(u64, f64)>,
}

impl Cell {
    fn numbers(&self) -> Vec<f64> {
        self.values.iter().map(|&(_, v)| v).collect()
    }

    pub fn median(&self) -> f64 {
        median(&self.numbers())
    }

    pub fn min(&self) -> f64 {
        self.numbers().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.numbers().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-seed values of a per-(setup, target) diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub setup: Setup,
    pub target: VocabKind,
    pub values: Vec<(u64, f64)>,
}

impl SummaryRow {
    pub fn median(&self) -> f64 {
        median(&self.values.iter().map(|&(_, v)| v).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub setups: Vec<Setup>,
    pub targets: Vec<VocabKind>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    /// Greedy dev WER, kept to check that the beam does not do worse.
    pub greedy_dev: Vec<SummaryRow>,
    /// Mean |log p_L2R - log p_R2L| on dev references.
    pub agreement: Vec<SummaryRow>,
}

fn push(rows: &mut Vec<SummaryRow>, setup: Setup, target: VocabKind, seed: u64, v: f64) {
    match rows
        .iter_mut()
        .find(|r| r.setup == setup && r.target == target)
    {
        Some(r) => r.values.push((seed, v)),
        None => rows.push(SummaryRow {
            setup,
            target,
            values: vec![(seed, v)],
        }),
    }
}

impl Report {
    pub fn new(setups: Vec<Setup>, targets: Vec<VocabKind>, seeds: Vec<u64>) -> Self {
        Report {
            setups,
            targets,
            seeds,
            cells: Vec::new(),
            greedy_dev: Vec::new(),
            agreement: Vec::new(),
        }
    }

    pub fn record(&mut self, setup: Setup, target: VocabKind, split: Split, seed: u64, wer: f64) {
        match self
            .cells
            .iter_mut()
            .find(|c| c.setup == setup && c.target == target && c.split == split)
        {
            Some(c) => c.values.push((seed, wer)),
            None => self.cells.push(Cell {
                setup,
                target,
                split,
                values: vec![(seed, wer)],
            }),
        }
    }

    pub fn record_greedy(&mut self, setup: Setup, target: VocabKind, seed: u64, wer: f64) {
        push(&mut self.greedy_dev, setup, target, seed, wer);
    }

    pub fn record_gap(&mut self, setup: Setup, target: VocabKind, seed: u64, gap: f64) {
        push(&mut self.agreement, setup, target, seed, gap);
    }

    pub fn cell(&self, setup: Setup, target: VocabKind, split: Split) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.setup == setup && c.target == target && c.split == split)
    }

    pub fn median(&self, setup: Setup, target: VocabKind, split: Split) -> Option<f64> {
        self.cell(setup, target, split).map(Cell::median)
    }

    fn columns(&self) -> Vec<(Split, VocabKind)> {
        self.targets
            .iter()
            .flat_map(|&t| Split::ALL.into_iter().map(move |s| (s, t)))
            .collect()
    }

    /// Median WER table: one row per setup, one column per split and target.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("setup");
        for (split, t) in self.columns() {
            let _ = write!(s, "\t{}_{}", split.as_str(), t.as_str());
        }
        s.push('\n');
        for &setup in &self.setups {
            s.push_str(setup.as_str());
            for (split, t) in self.columns() {
                match self.median(setup, t, split) {
                    Some(v) => {
                        let _ = write!(s, "\t{v:.2}");
                    }
                    None => s.push_str("\t-"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Long format with per-seed values, greedy dev WER and agreement.
    pub fn detail_tsv(&self) -> String {
        let mut s = String::from("kind\tsetup\ttarget\tsplit\tmedian\tmin\tmax\tper_seed\n");
        let fmt_seeds = |vals: &[(u64, f64)]| {
            vals.iter()
                .map(|(k, v)| format!("{k}:{v:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        for c in &self.cells {
            let _ = writeln!(
                s,
                "wer\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
                c.setup,
                c.target.as_str(),
                c.split.as_str(),
                c.median(),
                c.min(),
                c.max(),
                fmt_seeds(&c.values)
            );
        }
        for (kind, rows) in [
            ("greedy_wer", &self.greedy_dev),
            ("agreement_gap", &self.agreement),
        ] {
            for r in rows {
                let vals: Vec<f64> = r.values.iter().map(|&(_, v)| v).collect();
                let _ = writeln!(
                    s,
                    "{kind}\t{}\t{}\tdev\t{:.4}\t{:.4}\t{:.4}\t{}",
                    r.setup,
                    r.target.as_str(),
                    r.median(),
                    vals.iter().copied().fold(f64::INFINITY, f64::min),
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    fmt_seeds(&r.values)
                );
            }
        }
        s
    }

    /// Aligned plain-text table of medians with `[min, max]` when several
    /// seeds were run.
    pub fn render(&self) -> String {
        let multi = self.seeds.len() > 1;
        let mut header = vec!["Setup".to_string()];
        for (split, t) in self.columns() {
            header.push(format!("{} {}", split.as_str(), t.as_str()));
        }
        let mut rows = vec![header];
        for &setup in &self.setups {
            let mut row = vec![setup.title().to_string()];
            for (split, t) in self.columns() {
                row.push(match self.cell(setup, t, split) {
                    Some(c) if multi => {
                        format!("{:.2} [{:.2}, {:.2}]", c.median(), c.min(), c.max())
                    }
                    Some(c) => format!("{:.2}", c.median()),
                    None => "-".into(),
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    if j == 0 {
                        format!("{x:<w$}", w = widths[j])
                    } else {
                        format!("{x:>w$}", w = widths[j])
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(
                    s,
                    "{}",
                    "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
                );
            }
        }
        if !self.agreement.is_empty() {
            s.push_str("\nMean dev log-likelihood gap between decoders\n");
            for r in &self.agreement {
                let _ = writeln!(
                    s,
                    "  {:<18} {:<4} {:.4}",
                    r.setup.title(),
                    r.target.as_str(),
                    r.median()
                );
            }
        }
        let worse: Vec<String> = self
            .greedy_dev
            .iter()
            .filter_map(|g| {
                let beam = self.median(g.setup, g.target, Split::Dev)?;
                (beam > g.median()).then(|| format!("{} {}", g.setup.title(), g.target.as_str()))
            })
            .collect();
        if !worse.is_empty() {
            let _ = writeln!(s, "\nBeam dev WER above greedy for: {}", worse.join(", "));
        }
        s
    }
}
