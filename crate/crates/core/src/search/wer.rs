use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WerError {
    #[error("reference transcript is empty")]
    EmptyReference,
}

/// Word-level edit counts for one reference/hypothesis pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `100 (S + I + D) / N`.
    pub fn wer(&self) -> f64 {
        100.0 * self.errors() as f64 / self.ref_words as f64
    }
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2}% (S={} I={} D={} N={})",
            self.wer(),
            self.substitutions,
            self.insertions,
            self.deletions,
            self.ref_words
        )
    }
}

/// Running total over a corpus; the rate is total errors over total reference words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusWer {
    pub total: WerReport,
    pub utterances: usize,
}

impl CorpusWer {
    pub fn add(&mut self, r: &WerReport) {
        self.total.substitutions += r.substitutions;
        self.total.insertions += r.insertions;
        self.total.deletions += r.deletions;
        self.total.ref_words += r.ref_words;
        self.utterances += 1;
    }

    pub fn wer(&self) -> f64 {
        if self.total.ref_words == 0 {
            0.0
        } else {
            self.total.wer()
        }
    }
}

/// Minimal word-level Levenshtein alignment. Among minimum-cost alignments the
/// one with the fewest substitutions is reported, which fixes S, I and D.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerReport, WerError> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(WerError::EmptyReference);
    }
    let (n, m) = (r.len(), h.len());
    // (cost, substitutions) ordered lexicographically.
    let mut dp = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = (i, 0);
    }
    for (j, cell) in dp[0].iter_mut().enumerate() {
        *cell = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (dc, ds) = dp[i - 1][j - 1];
            let diag = if r[i - 1] == h[j - 1] {
                (dc, ds)
            } else {
                (dc + 1, ds + 1)
            };
            let del = (dp[i - 1][j].0 + 1, dp[i - 1][j].1);
            let ins = (dp[i][j - 1].0 + 1, dp[i][j - 1].1);
            dp[i][j] = diag.min(del).min(ins);
        }
    }
    let (cost, substitutions) = dp[n][m];
    // cost = S + I + D and I - D = m - n.
    let indel = cost - substitutions;
    let insertions = ((indel as i64 + m as i64 - n as i64) / 2) as usize;
    let deletions = indel - insertions;
    Ok(WerReport {
        substitutions,
        insertions,
        deletions,
        ref_words: n,
    })
}

/// Exhaustive search over every edit script, for short inputs only.
pub fn wer_oracle(reference: &[&str], hypothesis: &[&str]) -> WerReport {
    fn go(r: &[&str], h: &[&str]) -> (usize, usize, usize, usize) {
        // (cost, S, I, D)
        match (r.split_first(), h.split_first()) {
            (None, None) => (0, 0, 0, 0),
            (Some(_), None) => (r.len(), 0, 0, r.len()),
            (None, Some(_)) => (h.len(), 0, h.len(), 0),
            (Some((rw, rr)), Some((hw, hr))) => {
                let mut options = Vec::with_capacity(3);
                let (c, s, i, d) = go(rr, hr);
                if rw == hw {
                    options.push((c, s, i, d));
                } else {
                    options.push((c + 1, s + 1, i, d));
                }
                let (c, s, i, d) = go(rr, h);
                options.push((c + 1, s, i, d + 1));
                let (c, s, i, d) = go(r, hr);
                options.push((c + 1, s, i + 1, d));
                options
                    .into_iter()
                    .min_by_key(|&(c, s, _, _)| (c, s))
                    .unwrap()
            }
        }
    }
    let (_, s, i, d) = go(reference, hypothesis);
    WerReport {
        substitutions: s,
        insertions: i,
        deletions: d,
        ref_words: reference.len(),
    }
}
