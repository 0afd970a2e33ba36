//! Poisson rate coding.
//!
//! A window is flattened into one value per input neuron; each neuron then
//! fires in a time bin when a fresh uniform draw falls at or below its bin
//! probability, which is proportional to its value.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthdata::SignalWindow;
use crate::{Error, Result};

/// Sparse binary raster, stored bin-major (CSR over bins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub n_neurons: usize,
    pub n_bins: usize,
    /// Bin width in seconds.
    pub dt: f64,
    bin_offsets: Vec<u32>,
    neurons: Vec<u32>,
}

impl SpikeTrain {
    /// Builds from `(neuron, bin)` pairs. Pairs may come in any order but must
    /// be unique and in range.
    pub fn from_events(n_neurons: usize, n_bins: usize, dt: f64, events: &[(usize, usize)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize)> = events.iter().map(|&(n, b)| (b, n)).collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate spike"));
        }
        let mut bin_offsets = vec![0u32; n_bins + 1];
        let mut neurons = Vec::with_capacity(sorted.len());
        for &(b, n) in &sorted {
            if b >= n_bins || n >= n_neurons {
                return Err(Error::invalid(format!("spike ({n}, {b}) out of range")));
            }
            bin_offsets[b + 1] += 1;
            neurons.push(n as u32);
        }
        for b in 0..n_bins {
            bin_offsets[b + 1] += bin_offsets[b];
        }
        Ok(Self {
            n_neurons,
            n_bins,
            dt,
            bin_offsets,
            neurons,
        })
    }

    pub fn empty(n_neurons: usize, n_bins: usize, dt: f64) -> Self {
        Self {
            n_neurons,
            n_bins,
            dt,
            bin_offsets: vec![0; n_bins + 1],
            neurons: Vec::new(),
        }
    }

    /// Neurons that fire in `bin`, ascending.
    pub fn spikes_at(&self, bin: usize) -> &[u32] {
        let (a, b) = (self.bin_offsets[bin] as usize, self.bin_offsets[bin + 1] as usize);
        &self.neurons[a..b]
    }

    pub fn total_spikes(&self) -> usize {
        self.neurons.len()
    }

    /// `(neuron, bin)` pairs in bin-major order.
    pub fn events(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_bins).flat_map(move |b| self.spikes_at(b).iter().map(move |&n| (n as usize, b)))
    }

    pub fn counts_per_neuron(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.n_neurons];
        for &n in &self.neurons {
            c[n as usize] += 1;
        }
        c
    }

    /// `dense[neuron][bin]`.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut d = vec![vec![false; self.n_bins]; self.n_neurons];
        for (n, b) in self.events() {
            d[n][b] = true;
        }
        d
    }

    /// `neuron,bin` raster for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("neuron,bin\n");
        for (n, b) in self.events() {
            let _ = writeln!(out, "{n},{b}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the largest value of the window.
    WindowMax,
    /// Divide by a fixed scale shared across windows.
    FixedScale(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_bins: usize,
    pub dt: f64,
    /// Spike probability per bin for a value equal to the normalizer.
    pub max_rate_prob: f64,
    pub normalization: Normalization,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_bins: 400,
            dt: 1e-3,
            max_rate_prob: 0.25,
            normalization: Normalization::WindowMax,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if !(self.max_rate_prob > 0.0 && self.max_rate_prob <= 1.0) {
            return Err(Error::invalid("max_rate_prob must be in (0, 1]"));
        }
        if let Normalization::FixedScale(s) = self.normalization {
            if !(s > 0.0) {
                return Err(Error::invalid("fixed scale must be positive"));
            }
        }
        Ok(())
    }
}

/// Stacks `|samples|` of the selected signals, signal-major.
pub fn flatten(window: &SignalWindow, selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Empty("signal selection"));
    }
    let m = window.n_signals();
    let mut out = Vec::with_capacity(selected.len() * window.n_samples());
    for &j in selected {
        if j >= m {
            return Err(Error::invalid(format!("signal index {j} out of range for {m} signals")));
        }
        out.extend(window.samples.column(j).iter().map(|v| v.abs()));
    }
    Ok(out)
}

/// Per-neuron bin probabilities, `clamp(v / norm, 0, 1) * max_rate_prob`.
pub fn spike_probabilities(values: &[f64], cfg: &EncoderConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("encoder input"));
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("encoder input must be non-negative"));
    }
    let norm = match cfg.normalization {
        Normalization::WindowMax => values.iter().copied().fold(0.0, f64::max),
        Normalization::FixedScale(s) => s,
    };
    Ok(values
        .iter()
        .map(|&v| {
            if norm > 0.0 && norm.is_finite() {
                (v / norm).clamp(0.0, 1.0) * cfg.max_rate_prob
            } else {
                0.0
            }
        })
        .collect())
}

/// Bernoulli draws with the given per-bin probabilities. Neuron `i` uses
/// ChaCha stream `i` of `seed`, so its spikes do not depend on other neurons.
pub fn encode_probabilities(probs: &[f64], n_bins: usize, dt: f64, seed: u64) -> SpikeTrain {
    let mut per_bin: Vec<Vec<u32>> = vec![Vec::new(); n_bins];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        rng.set_stream(i as u64);
        rng.set_word_pos(0);
        for bin in per_bin.iter_mut() {
            let x: f64 = rng.random();
            if x <= p {
                bin.push(i as u32);
            }
        }
    }
    let mut bin_offsets = Vec::with_capacity(n_bins + 1);
    bin_offsets.push(0u32);
    let mut neurons = Vec::new();
    for bin in per_bin {
        neurons.extend_from_slice(&bin);
        bin_offsets.push(neurons.len() as u32);
    }
    SpikeTrain {
        n_neurons: probs.len(),
        n_bins,
        dt,
        bin_offsets,
        neurons,
    }
}

/// Rate-codes a non-negative value vector.
pub fn encode(values: &[f64], cfg: &EncoderConfig, seed: u64) -> Result<SpikeTrain> {
    let probs = spike_probabilities(values, cfg)?;
    Ok(encode_probabilities(&probs, cfg.n_bins, cfg.dt, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn flatten_is_signal_major_absolute() {
        let m = Matrix::from_rows(&[vec![1.0, -4.0], vec![-2.0, 5.0], vec![3.0, -6.0]]).unwrap();
        let w = SignalWindow::new(m, 10.0, vec!["a".into(), "b".into()], 0.0).unwrap();
        assert_eq!(flatten(&w, &[0, 1]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(flatten(&w, &[1]).unwrap(), vec![4.0, 5.0, 6.0]);
        assert!(flatten(&w, &[]).is_err());
    }

    #[test]
    fn ten_signals_fifteen_seconds() {
        let w = SignalWindow::new(
            Matrix::from_fn(150, 12, |r, c| -((r + c) as f64)),
            10.0,
            (0..12).map(|i| format!("s{i}")).collect(),
            0.0,
        )
        .unwrap();
        let v = flatten(&w, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(v.len(), 1500);
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_value_never_spikes() {
        let t = encode(&[0.0, 1.0], &EncoderConfig::default(), 3).unwrap();
        assert_eq!(t.counts_per_neuron()[0], 0);
        assert!(t.counts_per_neuron()[1] > 0);
    }

    #[test]
    fn all_zero_window_is_silent() {
        let t = encode(&[0.0; 8], &EncoderConfig::default(), 1).unwrap();
        assert_eq!(t.total_spikes(), 0);
    }

    #[test]
    fn nan_is_rejected() {
        assert!(encode(&[f64::NAN], &EncoderConfig::default(), 1).is_err());
    }

    #[test]
    fn full_scale_count_within_binomial_bounds() {
        let cfg = EncoderConfig {
            max_rate_prob: 0.1,
            ..EncoderConfig::default()
        };
        let t = encode(&[2.5], &cfg, 11).unwrap();
        let count = t.total_spikes() as f64;
        let sd = (400.0f64 * 0.1 * 0.9).sqrt();
        assert!((count - 40.0).abs() <= 4.0 * sd, "{count}");
    }

    #[test]
    fn sparse_and_dense_agree() {
        let t = encode(&[0.3, 0.9, 0.5], &EncoderConfig::default(), 5).unwrap();
        let dense = t.to_dense();
        let dense = &dense;
        let from_dense: Vec<(usize, usize)> = (0..t.n_bins)
            .flat_map(|b| (0..t.n_neurons).filter(move |&n| dense[n][b]).map(move |n| (n, b)))
            .collect();
        assert_eq!(from_dense, t.events().collect::<Vec<_>>());
        let rebuilt = SpikeTrain::from_events(3, t.n_bins, t.dt, &from_dense).unwrap();
        assert_eq!(rebuilt, t);
    }

    #[test]
    fn from_events_rejects_duplicates_and_out_of_range() {
        assert!(SpikeTrain::from_events(2, 3, 1.0, &[(0, 1), (0, 1)]).is_err());
        assert!(SpikeTrain::from_events(2, 3, 1.0, &[(2, 0)]).is_err());
        assert!(SpikeTrain::from_events(2, 3, 1.0, &[(0, 3)]).is_err());
    }
}
