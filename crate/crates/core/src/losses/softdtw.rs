//! Soft-min, the soft-DTW recursion and its reverse-mode gradient, plus an
//! exhaustive path enumerator used to check both.

use super::LossError;
use crate::autodiff::{stable_lse, Tensor};

/// `-gamma * ln Σ exp(-a_i / gamma)`, or the plain minimum when `gamma == 0`.
///
/// Non-finite entries are skipped; if none remain the result is `+inf`.
pub fn softmin(values: &[f64], gamma: f64) -> Result<f64, LossError> {
    if values.is_empty() {
        return Err(LossError::Empty {
            what: "softmin input",
        });
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(LossError::InvalidWeight {
            name: "gamma",
            value: gamma,
        });
    }
    Ok(softmin_unchecked(values, gamma))
}

pub(crate) fn softmin_unchecked(values: &[f64], gamma: f64) -> f64 {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let m = finite.clone().fold(f64::INFINITY, f64::min);
    if m == f64::INFINITY || gamma == 0.0 {
        return m;
    }
    let lse = stable_lse(finite.map(|v| -(v - m) / gamma));
    m - gamma * lse
}

fn check_costs(delta: &Tensor) -> Result<(usize, usize), LossError> {
    if delta.rank() != 2 {
        return Err(LossError::Shape {
            what: "cost matrix",
            shape: delta.shape().to_vec(),
        });
    }
    if let Some(i) = delta.data().iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteCost {
            row: i / delta.cols(),
            col: i % delta.cols(),
        });
    }
    Ok((delta.rows(), delta.cols()))
}

/// Forward table `R` of size `(K+1) x (L+1)`, row-major, with `R[0][0] = 0`
/// and `+inf` on the remaining borders.
fn forward_table(delta: &Tensor, gamma: f64) -> Vec<f64> {
    let (k, l) = (delta.rows(), delta.cols());
    let w = l + 1;
    let mut r = vec![f64::INFINITY; (k + 1) * w];
    r[0] = 0.0;
    for i in 1..=k {
        for j in 1..=l {
            let prev = [r[(i - 1) * w + j], r[i * w + j - 1], r[(i - 1) * w + j - 1]];
            r[i * w + j] = delta.at2(i - 1, j - 1) + softmin_unchecked(&prev, gamma);
        }
    }
    r
}

/// Soft-DTW discrepancy between the rows and columns of a `K x L` cost matrix.
pub fn softdtw(delta: &Tensor, gamma: f64) -> Result<f64, LossError> {
    let (k, l) = check_costs(delta)?;
    softmin(&[0.0], gamma)?;
    Ok(forward_table(delta, gamma)[k * (l + 1) + l])
}

/// Value together with `∂value/∂Δ`, the expected alignment matrix.
///
/// At `gamma == 0` the gradient is the indicator of one optimal path,
/// preferring the diagonal, then the vertical, then the horizontal move on ties.
pub fn softdtw_with_grad(delta: &Tensor, gamma: f64) -> Result<(f64, Tensor), LossError> {
    let (k, l) = check_costs(delta)?;
    softmin(&[0.0], gamma)?;
    let r = forward_table(delta, gamma);
    let value = r[k * (l + 1) + l];
    let grad = if gamma == 0.0 {
        hard_path(&r, k, l)
    } else {
        expected_alignment(delta, &r, gamma)
    };
    Ok((value, grad))
}

fn hard_path(r: &[f64], k: usize, l: usize) -> Tensor {
    let w = l + 1;
    let mut e = Tensor::zeros(&[k, l]);
    let (mut i, mut j) = (k, l);
    loop {
        e.data_mut()[(i - 1) * l + (j - 1)] = 1.0;
        if i == 1 && j == 1 {
            break;
        }
        let diag = r[(i - 1) * w + j - 1];
        let up = r[(i - 1) * w + j];
        let left = r[i * w + j - 1];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    e
}

fn expected_alignment(delta: &Tensor, r_fwd: &[f64], gamma: f64) -> Tensor {
    let (k, l) = (delta.rows(), delta.cols());
    // Tables padded to (K+2) x (L+2) so index (i, j) is 1-based.
    let w = l + 2;
    let mut r = vec![f64::NEG_INFINITY; (k + 2) * w];
    for i in 1..=k {
        for j in 1..=l {
            r[i * w + j] = r_fwd[i * (l + 1) + j];
        }
    }
    r[(k + 1) * w + l + 1] = r[k * w + l];
    let mut d = vec![0.0; (k + 2) * w];
    for i in 1..=k {
        for j in 1..=l {
            d[i * w + j] = delta.at2(i - 1, j - 1);
        }
    }
    let mut e = vec![0.0; (k + 2) * w];
    e[(k + 1) * w + l + 1] = 1.0;
    for i in (1..=k).rev() {
        for j in (1..=l).rev() {
            let here = r[i * w + j];
            let a = ((r[(i + 1) * w + j] - here - d[(i + 1) * w + j]) / gamma).exp();
            let b = ((r[i * w + j + 1] - here - d[i * w + j + 1]) / gamma).exp();
            let c = ((r[(i + 1) * w + j + 1] - here - d[(i + 1) * w + j + 1]) / gamma).exp();
            e[i * w + j] =
                e[(i + 1) * w + j] * a + e[i * w + j + 1] * b + e[(i + 1) * w + j + 1] * c;
        }
    }
    let mut out = Vec::with_capacity(k * l);
    for i in 1..=k {
        for j in 1..=l {
            out.push(e[i * w + j]);
        }
    }
    Tensor::matrix(k, l, out)
}

/// Classic DTW: minimum path cost with unit-step moves, computed
/// independently of the soft recursion.
pub fn hard_dtw(delta: &Tensor) -> Result<f64, LossError> {
    let (k, l) = check_costs(delta)?;
    let mut best = vec![vec![f64::INFINITY; l]; k];
    for i in 0..k {
        for j in 0..l {
            let c = delta.at2(i, j);
            best[i][j] = if i == 0 && j == 0 {
                c
            } else {
                let mut m = f64::INFINITY;
                if i > 0 {
                    m = m.min(best[i - 1][j]);
                }
                if j > 0 {
                    m = m.min(best[i][j - 1]);
                }
                if i > 0 && j > 0 {
                    m = m.min(best[i - 1][j - 1]);
                }
                c + m
            };
        }
    }
    Ok(best[k - 1][l - 1])
}

pub const ENUMERATION_LIMIT: usize = 7;

/// A monotone path through a `rows x cols` grid, stored as a binary matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentMatrix {
    pub rows: usize,
    pub cols: usize,
    cells: Vec<bool>,
}

impl AlignmentMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.cols + j]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Coordinates visited, in path order.
    pub fn path(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// `⟨A, Δ⟩`, the cost of this path.
    pub fn inner(&self, delta: &Tensor) -> f64 {
        self.cells
            .iter()
            .zip(delta.data())
            .filter(|(&on, _)| on)
            .map(|(_, &c)| c)
            .sum()
    }
}

/// Every path from `(0,0)` to `(k-1,l-1)` using down, right and diagonal moves.
pub fn oracle_enumerate_paths(k: usize, l: usize) -> Result<Vec<AlignmentMatrix>, LossError> {
    if k == 0 || l == 0 {
        return Err(LossError::Empty {
            what: "alignment grid",
        });
    }
    if k > ENUMERATION_LIMIT || l > ENUMERATION_LIMIT {
        return Err(LossError::EnumerationBound {
            rows: k,
            cols: l,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::new();
    let mut cells = vec![false; k * l];
    cells[0] = true;
    walk(0, 0, k, l, &mut cells, &mut out);
    Ok(out)
}

fn walk(
    i: usize,
    j: usize,
    k: usize,
    l: usize,
    cells: &mut Vec<bool>,
    out: &mut Vec<AlignmentMatrix>,
) {
    if i == k - 1 && j == l - 1 {
        out.push(AlignmentMatrix {
            rows: k,
            cols: l,
            cells: cells.clone(),
        });
        return;
    }
    for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
        let (ni, nj) = (i + di, j + dj);
        if ni < k && nj < l {
            cells[ni * l + nj] = true;
            walk(ni, nj, k, l, cells, out);
            cells[ni * l + nj] = false;
        }
    }
}

/// Soft-min of the costs of all enumerated paths.
pub fn oracle_softdtw(delta: &Tensor, gamma: f64) -> Result<f64, LossError> {
    let (k, l) = check_costs(delta)?;
    let costs: Vec<f64> = oracle_enumerate_paths(k, l)?
        .iter()
        .map(|a| a.inner(delta))
        .collect();
    softmin(&costs, gamma)
}
