//! Operation counts and first-order energy estimates.
//!
//! A ReLU network spends one multiply-accumulate (MAC) per synapse per
//! inference. Its spiking counterpart spends one accumulate (AC) per
//! synapse each time the presynaptic neuron fires. The energy ratio is the
//! op ratio times the cost of a MAC relative to an AC. These are
//! computational estimates only; memory traffic and leakage are ignored.

use serde::{Deserialize, Serialize};

use crate::annconv::{AnnModel, IfSnnModel, LayerKind, SnnRun};
use crate::{Error, Result};

/// Relative cost of a floating-point MAC over an AC.
pub const DEFAULT_ENERGY_PER_OP_RATIO: f64 = 5.1;

pub fn layer_macs(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Dense { inputs, outputs } => (inputs * outputs) as u64,
        LayerKind::Conv1d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (kind.conv_out_len() * out_channels * kernel * in_channels) as u64,
        LayerKind::Flatten { .. } => 0,
    }
}

/// Per-layer MACs of one forward pass.
pub fn count_ann_macs(model: &AnnModel) -> Vec<u64> {
    model.layers.iter().map(|l| layer_macs(&l.kind)).collect()
}

/// Synapses leaving presynaptic neuron `src` of a layer.
pub fn fan_out(kind: &LayerKind, src: usize) -> u64 {
    match *kind {
        LayerKind::Dense { outputs, .. } => outputs as u64,
        LayerKind::Conv1d {
            out_channels,
            kernel,
            stride,
            in_len,
            ..
        } => {
            let pos = src % in_len;
            let hits = (0..kind.conv_out_len())
                .filter(|p| pos >= p * stride && pos < p * stride + kernel)
                .count();
            (hits * out_channels) as u64
        }
        LayerKind::Flatten { .. } => 0,
    }
}

/// Operation counts accumulated over a set of presentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub layer_names: Vec<String>,
    pub ann_macs_per_layer: Vec<u64>,
    pub snn_acs_per_layer: Vec<u64>,
    /// Mean spikes per presynaptic neuron per presentation, for the
    /// population feeding each layer (0 for flatten layers).
    pub s_m: Vec<f64>,
    pub presentations: u64,
    pub timesteps: usize,
}

impl OpCounts {
    pub fn total_macs(&self) -> u64 {
        self.ann_macs_per_layer.iter().sum()
    }

    pub fn total_acs(&self) -> u64 {
        self.snn_acs_per_layer.iter().sum()
    }

    /// ACs per presentation.
    pub fn acs_per_presentation(&self) -> f64 {
        self.total_acs() as f64 / self.presentations.max(1) as f64
    }

    /// Pools the counts of another set of presentations of the same
    /// architecture.
    pub fn merge(&mut self, other: &OpCounts) -> Result<()> {
        if other.ann_macs_per_layer != self.ann_macs_per_layer || other.timesteps != self.timesteps {
            return Err(Error::shape("merging counts from different architectures or horizons"));
        }
        let (a, b) = (self.presentations as f64, other.presentations as f64);
        for (s, o) in self.s_m.iter_mut().zip(&other.s_m) {
            *s = (*s * a + o * b) / (a + b);
        }
        for (s, o) in self.snn_acs_per_layer.iter_mut().zip(&other.snn_acs_per_layer) {
            *s += o;
        }
        self.presentations += other.presentations;
        Ok(())
    }
}

/// Display names for model layers: `conv1..`, `dense1..`, `flatten`.
pub fn layer_names(kinds: &[LayerKind]) -> Vec<String> {
    let (mut c, mut d) = (0, 0);
    kinds
        .iter()
        .map(|k| match k {
            LayerKind::Conv1d { .. } => {
                c += 1;
                format!("conv{c}")
            }
            LayerKind::Dense { .. } => {
                d += 1;
                format!("dense{d}")
            }
            LayerKind::Flatten { .. } => "flatten".to_string(),
        })
        .collect()
}

/// ACs from recorded spike counts: each presynaptic spike costs its fan-out.
/// Independent of the simulator's own tally.
pub fn count_snn_acs(model: &IfSnnModel, runs: &[SnnRun]) -> Result<OpCounts> {
    let Some(first) = runs.first() else {
        return Err(Error::Empty("spike recordings"));
    };
    let sizes = model.population_sizes();
    if runs.iter().any(|r| r.spike_counts.len() != sizes.len()) {
        return Err(Error::shape("recordings do not match the model's populations"));
    }
    let mut totals: Vec<Vec<u64>> = sizes.iter().map(|&n| vec![0; n]).collect();
    for r in runs {
        for (t, c) in totals.iter_mut().zip(&r.spike_counts) {
            for (a, &b) in t.iter_mut().zip(c) {
                *a += b as u64;
            }
        }
    }
    let kinds: Vec<LayerKind> = model.layers.iter().map(|l| l.kind).collect();
    let presentations = runs.len() as u64;
    let mut acs = Vec::with_capacity(kinds.len());
    let mut s_m = Vec::with_capacity(kinds.len());
    let mut population = 0;
    for (l, layer) in model.layers.iter().enumerate() {
        if !layer.kind.has_params() {
            acs.push(0);
            s_m.push(0.0);
            continue;
        }
        let counts = &totals[population];
        let total: u64 = counts.iter().sum();
        acs.push(counts.iter().enumerate().map(|(i, &n)| n * fan_out(&kinds[l], i)).sum());
        s_m.push(total as f64 / (counts.len() as u64 * presentations) as f64);
        if layer.relu {
            population += 1;
        }
    }
    Ok(OpCounts {
        layer_names: layer_names(&kinds),
        ann_macs_per_layer: kinds.iter().map(layer_macs).collect(),
        snn_acs_per_layer: acs,
        s_m,
        presentations,
        timesteps: first.timesteps,
    })
}

/// The closed-form AC count of a dense stack, `sum_l n_{l-1} n_l s_m(l)`,
/// per presentation.
pub fn dense_stack_acs(dims: &[usize], s_m: &[f64]) -> f64 {
    dims.windows(2).zip(s_m).map(|(w, s)| (w[0] * w[1]) as f64 * s).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub macs: f64,
    pub acs: f64,
    /// `None` when no AC was counted.
    pub op_ratio: Option<f64>,
    pub energy_per_op_ratio: f64,
    pub energy_ratio: Option<f64>,
    pub saving_pct: Option<f64>,
    pub timesteps: usize,
    /// ANN latency is one pass, SNN latency is `timesteps` steps.
    pub power_ratio: Option<f64>,
    #[serde(default)]
    pub per_layer_spike_rates: Vec<f64>,
    pub note: String,
}

pub fn energy_report(macs: f64, acs: f64, energy_per_op_ratio: f64, timesteps: usize) -> EnergyReport {
    let op_ratio = (acs > 0.0).then(|| macs / acs);
    report_from_ratio(op_ratio, macs, acs, energy_per_op_ratio, timesteps)
}

/// Report from a known op ratio, e.g. a published one.
pub fn energy_report_from_ratio(op_ratio: f64, energy_per_op_ratio: f64, timesteps: usize) -> EnergyReport {
    report_from_ratio(Some(op_ratio), f64::NAN, f64::NAN, energy_per_op_ratio, timesteps)
}

fn report_from_ratio(op_ratio: Option<f64>, macs: f64, acs: f64, per_op: f64, timesteps: usize) -> EnergyReport {
    let energy_ratio = op_ratio.map(|r| r * per_op);
    EnergyReport {
        macs,
        acs,
        op_ratio,
        energy_per_op_ratio: per_op,
        energy_ratio,
        saving_pct: energy_ratio.map(|e| 100.0 * (1.0 - 1.0 / e)),
        timesteps,
        power_ratio: energy_ratio.map(|e| e * timesteps as f64),
        per_layer_spike_rates: Vec::new(),
        note: "first-order estimate of synaptic compute only".into(),
    }
}

/// Mean firing probability per neuron per step for each population.
pub fn sparsity_profile(runs: &[SnnRun]) -> Vec<f64> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    (0..first.spike_counts.len())
        .map(|p| {
            let n = first.spike_counts[p].len();
            let total: u64 = runs.iter().flat_map(|r| &r.spike_counts[p]).map(|&c| c as u64).sum();
            let steps: u64 = runs.iter().map(|r| r.timesteps as u64).sum();
            if n == 0 || steps == 0 {
                0.0
            } else {
                total as f64 / (n as u64 * steps) as f64
            }
        })
        .collect()
}

/// `layer,rate` rows.
pub fn sparsity_csv(names: &[String], rates: &[f64]) -> String {
    let mut out = String::from("layer,rate\n");
    for (n, r) in names.iter().zip(rates) {
        out.push_str(&format!("{n},{r}\n"));
    }
    out
}

/// Names of the spiking populations of a converted model.
pub fn population_names(model: &IfSnnModel) -> Vec<String> {
    let kinds: Vec<LayerKind> = model.layers.iter().map(|l| l.kind).collect();
    let names = layer_names(&kinds);
    let mut out = vec!["input".to_string()];
    out.extend(model.layers.iter().zip(names).filter(|(l, _)| l.relu).map(|(_, n)| n));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annconv::{self, InputMode, NormMode};

    #[test]
    fn table_rows() {
        let r = energy_report_from_ratio(1.2, 5.1, 1);
        assert!((r.energy_ratio.unwrap() - 6.12).abs() < 1e-12);
        assert!((r.saving_pct.unwrap() - 83.67).abs() <= 0.01);
        let r = energy_report_from_ratio(1.1, 5.1, 1);
        assert!((r.energy_ratio.unwrap() - 5.61).abs() < 1e-12);
        assert!((r.saving_pct.unwrap() - 82.18).abs() <= 0.01);
    }

    #[test]
    fn power_identity() {
        let r = energy_report_from_ratio(2.71 / 5.1, 5.1, 86);
        assert!((r.power_ratio.unwrap() - 233.06).abs() < 1e-9);
    }

    #[test]
    fn zero_acs_flags_infinite_ratio() {
        let r = energy_report(10.0, 0.0, 5.1, 5);
        assert_eq!(r.op_ratio, None);
        assert_eq!(r.saving_pct, None);
    }

    #[test]
    fn mac_counts() {
        let m = annconv::AnnModel::new(&annconv::mlp(1090, &[64, 32], 3), 0).unwrap();
        assert_eq!(count_ann_macs(&m).iter().sum::<u64>(), 71_904);
        assert_eq!(layer_macs(&LayerKind::Dense { inputs: 3, outputs: 2 }), 6);
        let conv = LayerKind::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            in_len: 10,
        };
        assert_eq!(layer_macs(&conv), 24);
    }

    #[test]
    fn conv_fan_out_at_edges() {
        let conv = LayerKind::Conv1d {
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            in_len: 10,
        };
        let f: Vec<u64> = (0..10).map(|i| fan_out(&conv, i)).collect();
        assert_eq!(f, vec![2, 4, 6, 6, 6, 6, 6, 6, 4, 2]);
    }

    #[test]
    fn hand_traced_dense_acs() {
        let mut m = annconv::AnnModel::new(&annconv::mlp(2, &[], 1), 0).unwrap();
        m.layers[0].weights = vec![0.5, 0.5];
        let stats = annconv::record_activations(&m, &[vec![1.0, 1.0]]).unwrap();
        let snn = annconv::normalize_and_convert(&m, &stats, NormMode::Max).unwrap();
        let run = SnnRun {
            timesteps: 4,
            predictions: vec![0; 4],
            output: vec![0.0],
            spike_counts: vec![vec![3, 1]],
            acs: vec![4],
        };
        let c = count_snn_acs(&snn, &[run]).unwrap();
        assert_eq!(c.snn_acs_per_layer, vec![4]);
        assert_eq!(c.s_m, vec![2.0]);
    }

    #[test]
    fn silent_input_costs_nothing() {
        let m = annconv::AnnModel::new(&annconv::mlp(4, &[3], 2), 2).unwrap();
        let stats = annconv::record_activations(&m, &[vec![1.0; 4]]).unwrap();
        let Ok(snn) = annconv::normalize_and_convert(&m, &stats, NormMode::Max) else {
            return;
        };
        let run = annconv::infer_snn(&snn, &[0.0; 4], 50, InputMode::Bernoulli, 0).unwrap();
        assert_eq!(run.spike_counts[0].iter().sum::<u32>(), 0);
        let c = count_snn_acs(&snn, &[run]).unwrap();
        assert_eq!(c.snn_acs_per_layer[0], 0);
    }
}
