use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `weights[o * inputs + i]`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) convolution, `weights[(oc * in_channels + ic) * kernel + k]`.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_len: usize,
    },
    Flatten {
        size: usize,
    },
}

impl LayerKind {
    pub fn in_size(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv1d {
                in_channels, in_len, ..
            } => in_channels * in_len,
            LayerKind::Flatten { size } => size,
        }
    }

    pub fn out_size(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv1d { out_channels, .. } => out_channels * self.conv_out_len(),
            LayerKind::Flatten { size } => size,
        }
    }

    /// Output positions per channel; 0 for non-convolutional layers.
    pub fn conv_out_len(&self) -> usize {
        match *self {
            LayerKind::Conv1d {
                kernel, stride, in_len, ..
            } if in_len >= kernel && stride > 0 => (in_len - kernel) / stride + 1,
            _ => 0,
        }
    }

    pub fn n_weights(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel,
            LayerKind::Flatten { .. } => 0,
        }
    }

    pub fn n_bias(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv1d { out_channels, .. } => out_channels,
            LayerKind::Flatten { .. } => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, LayerKind::Flatten { .. })
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv1d {
                in_channels, kernel, ..
            } => in_channels * kernel,
            LayerKind::Flatten { .. } => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                Err(Error::invalid("dense layer with a zero dimension"))
            }
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_len,
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || in_len < kernel => Err(
                Error::invalid(format!("conv1d layer {self:?} has no valid output positions")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub relu: bool,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// Pre-activation output.
    pub(crate) fn affine(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => (0..outputs)
                .map(|o| {
                    let row = &self.weights[o * inputs..(o + 1) * inputs];
                    self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect(),
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_len,
            } => {
                let out_len = self.kind.conv_out_len();
                let mut out = vec![0.0; out_channels * out_len];
                for oc in 0..out_channels {
                    for p in 0..out_len {
                        let mut acc = self.bias[oc];
                        for ic in 0..in_channels {
                            let w = &self.weights[(oc * in_channels + ic) * kernel..][..kernel];
                            let xs = &x[ic * in_len + p * stride..][..kernel];
                            acc += w.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                        out[oc * out_len + p] = acc;
                    }
                }
                out
            }
            LayerKind::Flatten { .. } => x.to_vec(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.affine(x);
        if self.relu {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        z
    }

    /// Given the gradient wrt this layer's pre-activation, accumulates the
    /// parameter gradients and returns the gradient wrt the input.
    fn backward(&self, x: &[f64], dz: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let row = &self.weights[o * inputs..(o + 1) * inputs];
                    let drow = &mut dw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        drow[i] += g * x[i];
                        dx[i] += g * row[i];
                    }
                }
                dx
            }
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_len,
            } => {
                let out_len = self.kind.conv_out_len();
                let mut dx = vec![0.0; in_channels * in_len];
                for oc in 0..out_channels {
                    for p in 0..out_len {
                        let g = dz[oc * out_len + p];
                        if g == 0.0 {
                            continue;
                        }
                        db[oc] += g;
                        for ic in 0..in_channels {
                            let base = (oc * in_channels + ic) * kernel;
                            let off = ic * in_len + p * stride;
                            for k in 0..kernel {
                                dw[base + k] += g * x[off + k];
                                dx[off + k] += g * self.weights[base + k];
                            }
                        }
                    }
                }
                dx
            }
            LayerKind::Flatten { .. } => dz.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub training_meta: Option<TrainMeta>,
}

impl AnnModel {
    /// He-initialized network. Every parametrized layer but the last gets a
    /// ReLU.
    pub fn new(arch: &[LayerKind], seed: u64) -> Result<Self> {
        if arch.is_empty() {
            return Err(Error::Empty("architecture"));
        }
        for k in arch {
            k.validate()?;
        }
        for (i, w) in arch.windows(2).enumerate() {
            if w[0].out_size() != w[1].in_size() {
                return Err(Error::shape(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    w[0].out_size(),
                    i + 1,
                    w[1].in_size()
                )));
            }
        }
        let last = arch
            .iter()
            .rposition(LayerKind::has_params)
            .ok_or(Error::Empty("parametrized layers"))?;
        let mut r = rng::stream(seed, "ann-init", 0);
        let layers = arch
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let std = (2.0 / kind.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Layer {
                    kind,
                    relu: kind.has_params() && i != last,
                    weights: (0..kind.n_weights()).map(|_| normal.sample(&mut r)).collect(),
                    bias: vec![0.0; kind.n_bias()],
                }
            })
            .collect();
        Ok(Self {
            layers,
            training_meta: None,
        })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].kind.in_size()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("non-empty").kind.out_size()
    }

    /// Output of every layer, logits last.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_size() {
            return Err(Error::shape(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_size()
            )));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = acts.last().map_or(x, Vec::as_slice);
            let out = layer.forward(input);
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.pop().expect("non-empty"))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy and its gradient wrt the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - m);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Per-layer parameter gradients, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(model: &AnnModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

/// Loss of one example and the gradient of every parameter.
pub fn loss_and_gradient(model: &AnnModel, x: &[f64], label: usize) -> Result<(f64, Gradients)> {
    let mut g = Gradients::zeros(model);
    let loss = accumulate_gradient(model, x, label, &mut g)?;
    Ok((loss, g))
}

fn accumulate_gradient(model: &AnnModel, x: &[f64], label: usize, g: &mut Gradients) -> Result<f64> {
    if label >= model.n_classes() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let acts = model.forward(x)?;
    let (loss, mut delta) = softmax_cross_entropy(acts.last().expect("non-empty"), label);
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        if layer.relu {
            for (d, a) in delta.iter_mut().zip(&acts[l]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = if l == 0 { x } else { &acts[l - 1] };
        delta = layer.backward(input, &delta, &mut g.weights[l], &mut g.bias[l]);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch: 100,
            epochs: 30,
            momentum: 0.0,
        }
    }
}

/// Mini-batch SGD on softmax cross-entropy. Batch order is reshuffled every
/// epoch from `seed`; the returned model is the final-epoch one.
pub fn train_ann(
    inputs: &[Vec<f64>],
    labels: &[usize],
    arch: &[LayerKind],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AnnModel> {
    if inputs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::shape("inputs and labels differ in length"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::invalid("need batch >= 1, lr > 0 and momentum in [0, 1)"));
    }
    let mut model = AnnModel::new(arch, seed)?;
    let n_classes = model.n_classes();
    let mut present = vec![false; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::invalid(format!(
                "label {l} out of range for {n_classes} outputs"
            )));
        }
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }

    let mut velocity = Gradients::zeros(&model);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, "ann-batches", epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut g = Gradients::zeros(&model);
            let mut batch_loss = 0.0;
            for &k in chunk {
                batch_loss += accumulate_gradient(&model, &inputs[k], labels[k], &mut g)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            total += batch_loss;
            let scale = cfg.lr / chunk.len() as f64;
            for (l, layer) in model.layers.iter_mut().enumerate() {
                let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
                let grads = g.weights[l].iter().chain(&g.bias[l]);
                let vel = velocity.weights[l].iter_mut().chain(velocity.bias[l].iter_mut());
                for ((p, gr), v) in params.zip(grads).zip(vel) {
                    *v = cfg.momentum * *v - scale * gr;
                    *p += *v;
                }
            }
            if !model.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                });
            }
        }
        epoch_losses.push(total / inputs.len() as f64);
    }
    model.training_meta = Some(TrainMeta {
        lr: cfg.lr,
        batch: cfg.batch,
        epochs: cfg.epochs,
        seed,
        epoch_losses,
    });
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        let mut correct = 0;
        for (&p, &l) in predicted.iter().zip(labels) {
            confusion[l][p] += 1;
            correct += usize::from(p == l);
        }
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            confusion,
        })
    }
}

pub fn accuracy(model: &AnnModel, inputs: &[Vec<f64>], labels: &[usize]) -> Result<Evaluation> {
    let predicted = inputs.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
    Evaluation::from_predictions(&predicted, labels, model.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(inputs: usize, outputs: usize) -> LayerKind {
        LayerKind::Dense { inputs, outputs }
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut m = AnnModel::new(&[dense(3, 4), dense(4, 2)], 1).unwrap();
        for l in &mut m.layers {
            l.weights.fill(0.0);
        }
        assert_eq!(m.logits(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn relu_gates_negative_sums() {
        let mut m = AnnModel::new(&[dense(2, 1), dense(1, 1)], 1).unwrap();
        m.layers[0].weights = vec![1.0, -1.0];
        m.layers[1].weights = vec![1.0];
        assert_eq!(m.forward(&[3.0, 5.0]).unwrap()[0], vec![0.0]);
    }

    #[test]
    fn conv_output_positions() {
        let k = LayerKind::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            in_len: 10,
        };
        assert_eq!(k.conv_out_len(), 8);
        let mut m = AnnModel::new(&[k, LayerKind::Flatten { size: 8 }, dense(8, 2)], 0).unwrap();
        m.layers[0].weights = vec![1.0, 0.0, -1.0];
        let x: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        // x[p] - x[p + 2] = -4p - 4, all negative so the relu zeroes them
        assert!(m.forward(&x).unwrap()[0].iter().all(|&v| v == 0.0));
        m.layers[0].weights = vec![-1.0, 0.0, 1.0];
        assert_eq!(m.forward(&x).unwrap()[0][3], 16.0);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(AnnModel::new(&[dense(3, 4), dense(5, 2)], 0).is_err());
        let m = AnnModel::new(&[dense(3, 2)], 0).unwrap();
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn separable_toy_reaches_full_training_accuracy() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + (i as f64) * 0.05), 0.3 * ((i * 7 % 5) as f64 - 2.0)]
            })
            .collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let cfg = TrainConfig {
            lr: 0.1,
            batch: 8,
            epochs: 50,
            momentum: 0.0,
        };
        let m = train_ann(&xs, &ys, &[dense(2, 2)], &cfg, 3).unwrap();
        let ev = accuracy(&m, &xs, &ys).unwrap();
        assert_eq!(ev.accuracy, 1.0);
        assert_eq!(ev.confusion, vec![vec![20, 0], vec![0, 20]]);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let xs = vec![vec![1e200, -1e200], vec![-1e200, 1e200]];
        let ys = vec![0, 1];
        let cfg = TrainConfig {
            lr: 1e200,
            batch: 2,
            epochs: 5,
            momentum: 0.0,
        };
        assert!(matches!(
            train_ann(&xs, &ys, &[dense(2, 2)], &cfg, 0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn single_class_is_rejected() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(train_ann(&xs, &[0, 0], &[dense(1, 2)], &TrainConfig::default(), 0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0, 2.0, 0.5], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[1] < 0.0);
    }
}
