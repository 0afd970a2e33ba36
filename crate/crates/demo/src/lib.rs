//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated
//! TypeScript types.

use gridspike::encode::{self, EncoderConfig};
use gridspike::energy;
use gridspike::synthdata::{self, DatasetConfig, EventClass, PreprocessConfig, SignalWindow};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Signals shown on the page, spread along the network.
const SHOWN: [usize; 6] = [0, 6, 12, 18, 24, 31];

#[derive(Serialize)]
struct EventView {
    class: String,
    t: Vec<f64>,
    ids: Vec<String>,
    signals: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct RasterView {
    n_neurons: usize,
    n_bins: usize,
    /// `(neuron, bin)` pairs.
    spikes: Vec<(usize, usize)>,
    rate: f64,
}

fn js_err(e: gridspike::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn window(class: &str, seed: u32) -> Result<SignalWindow, gridspike::Error> {
    let class: EventClass = class.parse()?;
    let cfg = DatasetConfig::default();
    let spec = synthdata::sample_event_spec(&cfg, class, seed as u64, 0, seed as usize % cfg.n_conditions)?;
    let event = synthdata::generate_event(&spec, seed as u64, cfg.duration, cfg.sample_rate)?;
    synthdata::preprocess_event(&event, &PreprocessConfig::default())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("view serializes")
}

/// Preprocessed window of one synthetic event, as JSON.
#[wasm_bindgen]
pub fn generate_event(class: &str, seed: u32) -> Result<String, JsError> {
    let w = window(class, seed).map_err(js_err)?;
    let view = EventView {
        class: class.to_string(),
        t: (0..w.n_samples()).map(|k| w.time(k)).collect(),
        ids: SHOWN.iter().map(|&j| w.signal_ids[j].clone()).collect(),
        signals: SHOWN
            .iter()
            .map(|&j| (0..w.n_samples()).map(|k| w.samples[(k, j)]).collect())
            .collect(),
    };
    Ok(to_json(&view))
}

/// Spike raster of the shown signals of one event, as JSON.
#[wasm_bindgen]
pub fn encode_event(class: &str, seed: u32, max_rate_prob: f64, n_bins: usize) -> Result<String, JsError> {
    let w = window(class, seed).map_err(js_err)?;
    let values = encode::flatten(&w, &SHOWN).map_err(js_err)?;
    let cfg = EncoderConfig {
        max_rate_prob,
        n_bins,
        ..EncoderConfig::default()
    };
    let train = encode::encode(&values, &cfg, seed as u64).map_err(js_err)?;
    let view = RasterView {
        n_neurons: train.n_neurons,
        n_bins: train.n_bins,
        rate: train.total_spikes() as f64 / (train.n_neurons * train.n_bins) as f64,
        spikes: train.events().collect(),
    };
    Ok(to_json(&view))
}

/// Energy and power projection from an op ratio, as JSON.
#[wasm_bindgen]
pub fn energy_estimate(op_ratio: f64, energy_per_op_ratio: f64, timesteps: usize) -> Result<String, JsError> {
    if !(op_ratio > 0.0 && energy_per_op_ratio > 0.0) || timesteps == 0 {
        return Err(JsError::new("ratios must be positive and timesteps at least 1"));
    }
    Ok(to_json(&energy::energy_report_from_ratio(
        op_ratio,
        energy_per_op_ratio,
        timesteps,
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_serialize() {
        let v: serde_json::Value = serde_json::from_str(&generate_event("BF", 3).unwrap()).unwrap();
        assert_eq!(v["signals"].as_array().unwrap().len(), SHOWN.len());
        let r: serde_json::Value = serde_json::from_str(&encode_event("GO", 3, 0.25, 100).unwrap()).unwrap();
        assert_eq!(r["n_bins"], 100);
        let e: serde_json::Value = serde_json::from_str(&energy_estimate(1.2, 5.1, 1).unwrap()).unwrap();
        assert!((e["energy_ratio"].as_f64().unwrap() - 6.12).abs() < 1e-9);
    }
}
