//! Supervised path: ReLU networks trained by backpropagation, then converted
//! to integrate-and-fire spiking networks.
//!
//! Activations are flat vectors. Convolutional tensors are channel-major,
//! `x[c * len + p]`, so a flatten layer is a no-op on memory.

mod convert;
mod net;

pub use convert::{
    infer_snn, normalize_and_convert, record_activations, snn_accuracy_curve, ActivationStats, Histogram, IfSnnModel,
    InputMode, NormMode, SnnRun, DEFAULT_PERCENTILE, HISTOGRAM_BINS,
};
pub use net::{
    accuracy, loss_and_gradient, softmax_cross_entropy, train_ann, AnnModel, Evaluation, Gradients, Layer, LayerKind,
    TrainConfig, TrainMeta,
};

/// `[inputs, h1, .., classes]` dense stack.
pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Vec<LayerKind> {
    let mut dims = vec![inputs];
    dims.extend_from_slice(hidden);
    dims.push(classes);
    dims.windows(2)
        .map(|w| LayerKind::Dense {
            inputs: w[0],
            outputs: w[1],
        })
        .collect()
}

/// Five 1-D convolutions and three dense layers, sized for a laptop.
pub fn desk_conv(in_channels: usize, in_len: usize, classes: usize) -> Vec<LayerKind> {
    let convs = [(8, 7, 2), (16, 5, 2), (32, 3, 1), (32, 3, 1), (32, 3, 1)];
    let mut layers = Vec::new();
    let (mut ch, mut len) = (in_channels, in_len);
    for (out_channels, kernel, stride) in convs {
        let k = LayerKind::Conv1d {
            in_channels: ch,
            out_channels,
            kernel,
            stride,
            in_len: len,
        };
        len = k.conv_out_len();
        ch = out_channels;
        layers.push(k);
    }
    layers.push(LayerKind::Flatten { size: ch * len });
    layers.extend(mlp(ch * len, &[64, 32], classes));
    layers
}
