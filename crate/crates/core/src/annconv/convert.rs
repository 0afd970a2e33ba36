use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{argmax, AnnModel, Layer, LayerKind};
use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_PERCENTILE: f64 = 96.4;
pub const HISTOGRAM_BINS: usize = 4096;

/// Fixed-bin histogram of the positive activations of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub max: f64,
    pub n_total: u64,
    /// Bin `b` covers `(b * max / bins, (b + 1) * max / bins]`.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn n_positive(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Upper edge of the bin holding the `q`-th percentile of the positive
    /// activations; exactly `max` at `q = 100`.
    pub fn percentile(&self, q: f64) -> f64 {
        let n = self.n_positive();
        if q >= 100.0 || n == 0 {
            return self.max;
        }
        let need = (q / 100.0 * n as f64).ceil().max(1.0) as u64;
        let width = self.max / self.counts.len() as f64;
        let mut seen = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= need {
                return (b + 1) as f64 * width;
            }
        }
        self.max
    }
}

/// Activation ranges recorded over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub input_max: f64,
    /// One per model layer.
    pub layers: Vec<Histogram>,
}

pub fn record_activations(model: &AnnModel, inputs: &[Vec<f64>]) -> Result<ActivationStats> {
    if inputs.is_empty() {
        return Err(Error::Empty("activation recording set"));
    }
    let n_layers = model.layers.len();
    let mut maxes = vec![0.0f64; n_layers];
    let mut input_max = 0.0f64;
    for x in inputs {
        input_max = x.iter().copied().fold(input_max, f64::max);
        for (m, a) in maxes.iter_mut().zip(model.forward(x)?) {
            *m = a.iter().copied().fold(*m, f64::max);
        }
    }
    let mut layers: Vec<Histogram> = maxes
        .iter()
        .map(|&max| Histogram {
            max,
            n_total: 0,
            counts: vec![0; HISTOGRAM_BINS],
        })
        .collect();
    for x in inputs {
        for (h, a) in layers.iter_mut().zip(model.forward(x)?) {
            h.n_total += a.len() as u64;
            if h.max <= 0.0 {
                continue;
            }
            for v in a.into_iter().filter(|&v| v > 0.0) {
                let b = ((v / h.max * HISTOGRAM_BINS as f64).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1;
                h.counts[b] += 1;
            }
        }
    }
    Ok(ActivationStats { input_max, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Max,
    Percentile(f64),
}

/// Integrate-and-fire network with weights rescaled so every layer fires at
/// most once per step at its recorded activation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfSnnModel {
    pub layers: Vec<Layer>,
    /// Activation scale per model layer.
    pub scales: Vec<f64>,
    pub input_scale: f64,
    pub mode: NormMode,
    pub threshold: f64,
}

impl IfSnnModel {
    pub fn input_size(&self) -> usize {
        self.layers[0].kind.in_size()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("non-empty").kind.out_size()
    }

    /// Sizes of the spiking populations: the input, then the output of each
    /// hidden (ReLU) layer.
    pub fn population_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size()];
        sizes.extend(self.layers.iter().filter(|l| l.relu).map(|l| l.kind.out_size()));
        sizes
    }

    /// The scaled network read as a ReLU network. On inputs divided by
    /// `input_scale` its activations are the source's divided by the layer
    /// scales, so the argmax equals the source's.
    pub fn as_ann(&self) -> AnnModel {
        AnnModel {
            layers: self.layers.clone(),
            training_meta: None,
        }
    }
}

/// Layer `l` weights are multiplied by `scale[l - 1] / scale[l]` and biases
/// divided by `scale[l]`; thresholds are 1.
pub fn normalize_and_convert(model: &AnnModel, stats: &ActivationStats, mode: NormMode) -> Result<IfSnnModel> {
    if stats.layers.len() != model.layers.len() {
        return Err(Error::shape(format!(
            "statistics cover {} layers, model has {}",
            stats.layers.len(),
            model.layers.len()
        )));
    }
    if let NormMode::Percentile(q) = mode {
        if !(q > 0.0 && q <= 100.0) {
            return Err(Error::invalid(format!("percentile {q} not in (0, 100]")));
        }
    }
    if !(stats.input_max > 0.0 && stats.input_max.is_finite()) {
        return Err(Error::DegenerateScale {
            layer: 0,
            scale: stats.input_max,
        });
    }
    let mut prev = stats.input_max;
    let mut scales = Vec::with_capacity(model.layers.len());
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, (layer, hist)) in model.layers.iter().zip(&stats.layers).enumerate() {
        if !layer.kind.has_params() {
            scales.push(prev);
            layers.push(layer.clone());
            continue;
        }
        let lambda = match mode {
            NormMode::Max => hist.max,
            NormMode::Percentile(q) => hist.percentile(q),
        };
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::DegenerateScale {
                layer: l,
                scale: lambda,
            });
        }
        let f = prev / lambda;
        layers.push(Layer {
            kind: layer.kind,
            relu: layer.relu,
            weights: layer.weights.iter().map(|w| w * f).collect(),
            bias: layer.bias.iter().map(|b| b / lambda).collect(),
        });
        scales.push(lambda);
        prev = lambda;
    }
    Ok(IfSnnModel {
        layers,
        scales,
        input_scale: stats.input_max,
        mode,
        threshold: 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Each input spikes with probability `clamp(x / input_scale, 0, 1)`
    /// per step.
    Bernoulli,
    /// The first layer integrates `x / input_scale` directly every step.
    ConstantCurrent,
}

/// Record of one timestep simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnRun {
    pub timesteps: usize,
    /// Argmax of the output membrane after each step.
    pub predictions: Vec<usize>,
    pub output: Vec<f64>,
    /// Per population (see [`IfSnnModel::population_sizes`]), per neuron.
    pub spike_counts: Vec<Vec<u32>>,
    /// Accumulate operations performed by each model layer, tallied as the
    /// simulator does them.
    pub acs: Vec<u64>,
}

impl SnnRun {
    pub fn prediction(&self) -> usize {
        *self.predictions.last().expect("t_max >= 1")
    }
}

/// Input-major copy of a dense layer for spike scattering.
fn transpose_dense(layer: &Layer) -> Vec<f64> {
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            let mut t = vec![0.0; inputs * outputs];
            for o in 0..outputs {
                for i in 0..inputs {
                    t[i * outputs + o] = layer.weights[o * inputs + i];
                }
            }
            t
        }
        _ => Vec::new(),
    }
}

/// Adds the contribution of one presynaptic spike; returns the number of
/// accumulates done.
fn scatter(layer: &Layer, wt: &[f64], src: usize, u: &mut [f64]) -> u64 {
    match layer.kind {
        LayerKind::Dense { outputs, .. } => {
            for (m, w) in u.iter_mut().zip(&wt[src * outputs..(src + 1) * outputs]) {
                *m += w;
            }
            outputs as u64
        }
        LayerKind::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            in_len,
        } => {
            let out_len = layer.kind.conv_out_len();
            let (ic, pos) = (src / in_len, src % in_len);
            let p_lo = (pos + 1).saturating_sub(kernel).div_ceil(stride);
            let p_hi = (pos / stride).min(out_len - 1);
            let mut n = 0;
            for p in p_lo..=p_hi {
                let k = pos - p * stride;
                for oc in 0..out_channels {
                    u[oc * out_len + p] += layer.weights[(oc * in_channels + ic) * kernel + k];
                }
                n += out_channels as u64;
            }
            n
        }
        LayerKind::Flatten { .. } => unreachable!("flatten layers are skipped"),
    }
}

/// Runs the converted network for `t_max` steps.
///
/// Hidden neurons integrate without leak, fire when the membrane reaches
/// the threshold and subtract it. The output layer only accumulates.
pub fn infer_snn(model: &IfSnnModel, x: &[f64], t_max: usize, mode: InputMode, seed: u64) -> Result<SnnRun> {
    if t_max == 0 {
        return Err(Error::invalid("t_max must be >= 1"));
    }
    if x.len() != model.input_size() {
        return Err(Error::shape(format!(
            "input has {} values, model expects {}",
            x.len(),
            model.input_size()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spiking network input"));
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("spiking network input must be non-negative"));
    }
    let probs: Vec<f64> = x.iter().map(|v| (v / model.input_scale).clamp(0.0, 1.0)).collect();
    let layers: Vec<(usize, &Layer)> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_params())
        .collect();
    // per-neuron bias; conv biases are shared along a channel
    let biases: Vec<Vec<f64>> = layers
        .iter()
        .map(|(_, l)| match l.kind.conv_out_len() {
            0 => l.bias.clone(),
            len => (0..l.kind.out_size()).map(|j| l.bias[j / len]).collect(),
        })
        .collect();
    let transposed: Vec<Vec<f64>> = layers.iter().map(|(_, l)| transpose_dense(l)).collect();
    let mut membranes: Vec<Vec<f64>> = layers.iter().map(|(_, l)| vec![0.0; l.kind.out_size()]).collect();
    let mut spike_counts: Vec<Vec<u32>> = model.population_sizes().into_iter().map(|n| vec![0; n]).collect();
    let mut acs = vec![0u64; model.layers.len()];
    let mut predictions = Vec::with_capacity(t_max);

    let constant = match mode {
        InputMode::ConstantCurrent => {
            let first = layers[0].1;
            Some(first.affine(&probs))
        }
        InputMode::Bernoulli => None,
    };
    let mut r = rng::stream(seed, "if-input", 0);
    let last = layers.len() - 1;
    let mut spikes: Vec<usize> = Vec::new();
    let mut next: Vec<usize> = Vec::new();

    for _ in 0..t_max {
        spikes.clear();
        if constant.is_none() {
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 && r.random::<f64>() < p {
                    spikes.push(i);
                }
            }
            for &i in &spikes {
                spike_counts[0][i] += 1;
            }
        }
        for (k, &(li, layer)) in layers.iter().enumerate() {
            let u = &mut membranes[k];
            match (&constant, k) {
                (Some(current), 0) => {
                    for (m, c) in u.iter_mut().zip(current) {
                        *m += c;
                    }
                }
                _ => {
                    for (m, b) in u.iter_mut().zip(&biases[k]) {
                        *m += b;
                    }
                    for &s in &spikes {
                        acs[li] += scatter(layer, &transposed[k], s, u);
                    }
                }
            }
            if k == last {
                break;
            }
            next.clear();
            for (j, m) in u.iter_mut().enumerate() {
                if *m >= model.threshold {
                    *m -= model.threshold;
                    next.push(j);
                }
            }
            for &j in &next {
                spike_counts[k + 1][j] += 1;
            }
            std::mem::swap(&mut spikes, &mut next);
        }
        predictions.push(argmax(&membranes[last]));
    }
    Ok(SnnRun {
        timesteps: t_max,
        predictions,
        output: membranes.pop().expect("non-empty"),
        spike_counts,
        acs,
    })
}

/// Accuracy after every step over a labeled set, plus the individual runs.
/// Example `k` draws its input spikes from sub-seed `k` of `seed`.
pub fn snn_accuracy_curve(
    model: &IfSnnModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
    t_max: usize,
    mode: InputMode,
    seed: u64,
) -> Result<(Vec<f64>, Vec<SnnRun>)> {
    if inputs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let run = |(k, x): (usize, &Vec<f64>)| infer_snn(model, x, t_max, mode, rng::derive_seed(seed, "if-run", k as u64));
    #[cfg(feature = "parallel")]
    let runs: Vec<SnnRun> = {
        use rayon::prelude::*;
        inputs.par_iter().enumerate().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<SnnRun> = inputs.iter().enumerate().map(run).collect::<Result<_>>()?;
    let mut curve = vec![0.0; t_max];
    for (r, &l) in runs.iter().zip(labels) {
        for (c, &p) in curve.iter_mut().zip(&r.predictions) {
            if p == l {
                *c += 1.0;
            }
        }
    }
    curve.iter_mut().for_each(|c| *c /= inputs.len() as f64);
    Ok((curve, runs))
}
