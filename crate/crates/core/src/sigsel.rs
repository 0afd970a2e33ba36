//! Signal selection by economy QR with column pivoting, and least-squares
//! evaluation of how well a selected set reconstructs the remaining signals.
//!
//! For each training event the pivoted QR of its `N x m` window orders the
//! signals by how much new subspace each contributes. Signals whose pivot
//! clears `nu1 * |r_11|` get a vote; votes divided by the number of events
//! give the importance score, and the top `n_hat` scores form the selection.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use crate::linalg::QrFactors;
use crate::linalg::{self, Matrix};
use crate::rng;
use crate::synthdata::{EventClass, SignalWindow};
use crate::{Error, Result};

pub const DEFAULT_NU1: f64 = 0.1;
pub const DEFAULT_N_HAT: usize = 10;
pub const DEFAULT_MC_SETS: usize = 100;
pub const DEFAULT_MC_N_HAT: usize = 21;

/// Relative rank cutoff for the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;

pub fn pivoted_qr(y: &Matrix) -> Result<QrFactors> {
    linalg::pivoted_qr(y)
}

/// Pivoted signals with `|r_ss| >= nu1 * |r_11|`, in pivot order.
pub fn significant_pivots(qr: &QrFactors, nu1: f64) -> Vec<usize> {
    let d = qr.diag_abs();
    let Some(&r11) = d.first() else {
        return Vec::new();
    };
    if r11 == 0.0 {
        return Vec::new();
    }
    d.iter()
        .zip(&qr.perm)
        .filter(|(r, _)| **r >= nu1 * r11)
        .map(|(_, &p)| p)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub signal_ids: Vec<String>,
    pub classes: Vec<EventClass>,
    /// `m x n_classes`: votes from events of each class over the total
    /// number of events.
    pub per_class_scores: Vec<Vec<f64>>,
    pub total_scores: Vec<f64>,
    /// Signal indices, highest score first (ties: lower index).
    pub selected: Vec<usize>,
    pub nu1: f64,
    pub n_events: usize,
}

impl SelectionResult {
    /// All signals sorted by descending score.
    pub fn ordering(&self) -> Vec<usize> {
        rank_by_score(&self.total_scores)
    }

    pub fn selected_ids(&self) -> Vec<&str> {
        self.selected.iter().map(|&i| self.signal_ids[i].as_str()).collect()
    }
}

fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Runs the voting heuristic over labeled event windows.
pub fn select_signals(events: &[(&SignalWindow, EventClass)], nu1: f64, n_hat: usize) -> Result<SelectionResult> {
    let Some((first, _)) = events.first() else {
        return Err(Error::Empty("event set"));
    };
    if !(nu1 > 0.0 && nu1 <= 1.0) {
        return Err(Error::invalid(format!("nu1 = {nu1} not in (0, 1]")));
    }
    let m = first.n_signals();
    if n_hat > m {
        return Err(Error::invalid(format!("n_hat = {n_hat} exceeds {m} signals")));
    }
    if events.iter().any(|(w, _)| w.signal_ids != first.signal_ids) {
        return Err(Error::invalid("events do not share one signal set"));
    }

    let mut classes: Vec<EventClass> = events.iter().map(|(_, c)| *c).collect();
    classes.sort();
    classes.dedup();

    let vote = |(w, _): &(&SignalWindow, EventClass)| -> Result<Vec<usize>> {
        Ok(significant_pivots(&pivoted_qr(&w.samples)?, nu1))
    };
    #[cfg(feature = "parallel")]
    let votes: Vec<Vec<usize>> = {
        use rayon::prelude::*;
        events.par_iter().map(vote).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let votes: Vec<Vec<usize>> = events.iter().map(vote).collect::<Result<_>>()?;

    let mut counts = vec![vec![0usize; classes.len()]; m];
    for ((_, class), picked) in events.iter().zip(&votes) {
        let ci = classes.binary_search(class).expect("class collected above");
        for &j in picked {
            counts[j][ci] += 1;
        }
    }
    let h = events.len() as f64;
    let per_class_scores: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / h).collect())
        .collect();
    let total_scores: Vec<f64> = counts.iter().map(|row| row.iter().sum::<usize>() as f64 / h).collect();
    let selected = rank_by_score(&total_scores).into_iter().take(n_hat).collect();

    Ok(SelectionResult {
        signal_ids: first.signal_ids.clone(),
        classes,
        per_class_scores,
        total_scores,
        selected,
        nu1,
        n_events: events.len(),
    })
}

/// Number of leading samples used for fitting.
pub fn fit_rows(n: usize, p_frac: f64) -> usize {
    (p_frac * n as f64).floor() as usize
}

fn complement(m: usize, s_set: &[usize]) -> Vec<usize> {
    let mut in_s = vec![false; m];
    for &j in s_set {
        in_s[j] = true;
    }
    (0..m).filter(|&j| !in_s[j]).collect()
}

/// Spectral-norm error of predicting the unselected signals on the last
/// `(1 - p) N` samples from a least-squares map fit on the first `p N`.
pub fn ls_reconstruction_error(y: &Matrix, s_set: &[usize], p_frac: f64) -> Result<f64> {
    let (n, m) = (y.rows(), y.cols());
    if !(0.5..1.0).contains(&p_frac) {
        return Err(Error::invalid(format!("p = {p_frac} not in [0.5, 1)")));
    }
    if s_set.is_empty() || s_set.len() >= m {
        return Err(Error::invalid("selected set must be a non-empty proper subset"));
    }
    if s_set.iter().any(|&j| j >= m) {
        return Err(Error::invalid("selected index out of range"));
    }
    let mut sorted = s_set.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != s_set.len() {
        return Err(Error::invalid("duplicate index in selected set"));
    }
    let pn = fit_rows(n, p_frac);
    if pn < s_set.len() || pn >= n {
        return Err(Error::invalid(format!(
            "degenerate split: {pn} fit rows for {} regressors and {n} samples",
            s_set.len()
        )));
    }
    let s_bar = complement(m, s_set);
    let ys = y.select_columns(s_set);
    let ysb = y.select_columns(&s_bar);
    let beta = linalg::lstsq_min_norm(&ys.select_rows(0, pn), &ysb.select_rows(0, pn), PINV_RTOL)?;
    let predicted = ys.select_rows(pn, n).matmul(&beta)?;
    let residual = ysb.select_rows(pn, n).sub(&predicted)?;
    Ok(linalg::spectral_norm(&residual))
}

/// Mean LS error over events for one selected set.
pub fn mean_error(events: &[&Matrix], s_set: &[usize], p_frac: f64) -> Result<f64> {
    let mut total = 0.0;
    for y in events {
        total += ls_reconstruction_error(y, s_set, p_frac)?;
    }
    Ok(total / events.len() as f64)
}

/// Error-vs-size curves for the proposed ordering and random signal sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCurves {
    pub k: Vec<usize>,
    pub proposed: Vec<f64>,
    /// `n_random x len(k)`.
    pub random: Vec<Vec<f64>>,
}

impl McCurves {
    fn column(&self, i: usize) -> Vec<f64> {
        self.random.iter().map(|r| r[i]).collect()
    }

    pub fn random_mean(&self) -> Vec<f64> {
        (0..self.k.len())
            .map(|i| self.column(i).iter().sum::<f64>() / self.random.len() as f64)
            .collect()
    }

    pub fn random_min(&self) -> Vec<f64> {
        (0..self.k.len())
            .map(|i| self.column(i).into_iter().fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn random_max(&self) -> Vec<f64> {
        (0..self.k.len())
            .map(|i| self.column(i).into_iter().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn random_median(&self) -> Vec<f64> {
        (0..self.k.len())
            .map(|i| {
                let mut c = self.column(i);
                c.sort_by(f64::total_cmp);
                let n = c.len();
                if n % 2 == 1 {
                    c[n / 2]
                } else {
                    0.5 * (c[n / 2 - 1] + c[n / 2])
                }
            })
            .collect()
    }

    /// `k,proposed_error,random_mean,random_min,random_max`
    pub fn to_csv(&self) -> String {
        let (mean, min, max) = (self.random_mean(), self.random_min(), self.random_max());
        let mut out = String::from("k,proposed_error,random_mean,random_min,random_max\n");
        for i in 0..self.k.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.k[i], self.proposed[i], mean[i], min[i], max[i]
            ));
        }
        out
    }
}

/// Compares the proposed ordering against `n_random` random signal sets.
///
/// Each random set draws `n_hat` distinct signals; at size `k` its first `k`
/// signals are the regressors and all other signals are estimated. `k` runs
/// from 1 to `min(n_hat, m - 1)` so the estimated set is never empty.
pub fn monte_carlo_compare(
    events: &[&Matrix],
    proposed: &[usize],
    n_random: usize,
    n_hat: usize,
    p_frac: f64,
    seed: u64,
) -> Result<McCurves> {
    let Some(first) = events.first() else {
        return Err(Error::Empty("event set"));
    };
    let m = first.cols();
    if n_random == 0 {
        return Err(Error::invalid("n_random must be >= 1"));
    }
    if n_hat > m || n_hat == 0 {
        return Err(Error::invalid(format!("n_hat = {n_hat} not in [1, {m}]")));
    }
    if proposed.len() < n_hat.min(m - 1) {
        return Err(Error::invalid("proposed ordering shorter than n_hat"));
    }
    let k_max = n_hat.min(m - 1);
    let ks: Vec<usize> = (1..=k_max).collect();

    let curve =
        |order: &[usize]| -> Result<Vec<f64>> { ks.iter().map(|&k| mean_error(events, &order[..k], p_frac)).collect() };
    let proposed_curve = curve(proposed)?;

    let sets: Vec<Vec<usize>> = (0..n_random)
        .map(|r| {
            let mut g = rng::stream(seed, "mc-set", r as u64);
            sample(&mut g, m, n_hat).into_vec()
        })
        .collect();
    #[cfg(feature = "parallel")]
    let random = {
        use rayon::prelude::*;
        sets.par_iter().map(|s| curve(s)).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let random = sets.iter().map(|s| curve(s)).collect::<Result<Vec<_>>>()?;

    Ok(McCurves {
        k: ks,
        proposed: proposed_curve,
        random,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(m: Matrix) -> SignalWindow {
        let ids = (0..m.cols()).map(|i| format!("s{i}")).collect();
        SignalWindow::new(m, 10.0, ids, 0.0).unwrap()
    }

    #[test]
    fn identity_event_scores_every_signal() {
        let w = window(Matrix::identity(3));
        let res = select_signals(&[(&w, EventClass::BusFault)], DEFAULT_NU1, 3).unwrap();
        assert_eq!(res.total_scores, vec![1.0, 1.0, 1.0]);
        assert_eq!(res.selected, vec![0, 1, 2]);
    }

    #[test]
    fn duplicate_column_never_scores() {
        // signal 2 is an exact copy of signal 0
        let y = Matrix::from_fn(40, 3, |r, c| {
            let t = r as f64 * 0.1;
            match c {
                0 | 2 => (1.3 * t).sin(),
                _ => 0.5 * (0.4 * t).cos(),
            }
        });
        let w = window(y);
        let evs = vec![(&w, EventClass::GenOutage); 4];
        let res = select_signals(&evs, DEFAULT_NU1, 2).unwrap();
        let shadowed = res.total_scores[0].min(res.total_scores[2]);
        assert_eq!(shadowed, 0.0);
        assert_eq!(res.total_scores[0].max(res.total_scores[2]), 1.0);
    }

    #[test]
    fn selection_defaults() {
        assert_eq!(DEFAULT_NU1, 0.1);
        assert_eq!(DEFAULT_N_HAT, 10);
        assert_eq!(DEFAULT_MC_SETS, 100);
        assert_eq!(DEFAULT_MC_N_HAT, 21);
    }

    #[test]
    fn selection_errors() {
        let a = window(Matrix::identity(3));
        let b = SignalWindow::new(Matrix::identity(3), 10.0, vec!["x".into(), "y".into(), "z".into()], 0.0).unwrap();
        assert!(select_signals(&[], 0.1, 1).is_err());
        assert!(select_signals(&[(&a, EventClass::BusFault), (&b, EventClass::BusFault)], 0.1, 1).is_err());
        assert!(select_signals(&[(&a, EventClass::BusFault)], 0.0, 1).is_err());
        assert!(select_signals(&[(&a, EventClass::BusFault)], 0.1, 4).is_err());
    }

    #[test]
    fn hand_least_squares_example() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0], vec![4.0, 8.0]]).unwrap();
        let e = ls_reconstruction_error(&y, &[0], 0.5).unwrap();
        assert!(e.abs() < 1e-12, "{e}");
    }

    #[test]
    fn orthogonal_target_gives_its_own_norm() {
        // column 1 is zero on the fit rows' span of column 0
        let y = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0], vec![0.0, -4.0]]).unwrap();
        let e = ls_reconstruction_error(&y, &[0], 0.5).unwrap();
        assert!((e - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ls_preconditions() {
        let y = Matrix::identity(4);
        assert!(ls_reconstruction_error(&y, &[0], 0.4).is_err());
        assert!(ls_reconstruction_error(&y, &[0, 1, 2, 3], 0.5).is_err());
        assert!(ls_reconstruction_error(&y, &[], 0.5).is_err());
        assert!(
            ls_reconstruction_error(&y, &[0, 1, 2], 0.5).is_err(),
            "2 fit rows < 3 regressors"
        );
    }

    #[test]
    fn curve_stops_before_full_set() {
        let y = Matrix::from_fn(60, 4, |r, c| ((r * (c + 1)) as f64 * 0.37).sin());
        let curves = monte_carlo_compare(&[&y], &[0, 1, 2, 3], 3, 4, 0.5, 1).unwrap();
        assert_eq!(curves.k, vec![1, 2, 3]);
        assert_eq!(curves.random.len(), 3);
        assert!(curves
            .to_csv()
            .starts_with("k,proposed_error,random_mean,random_min,random_max\n"));
    }
}
