//! Synthetic disturbance events from a modal measurement model.
//!
//! Each measured signal is a participation-weighted sum of damped sinusoids
//! (the real part of residue-weighted complex exponentials) that switches on
//! at the event onset, plus a class-dependent step and white Gaussian noise
//! over the whole record. Sampled on a uniform grid this is the product of a
//! Vandermonde matrix of discrete modes and a residue matrix, so every event
//! window is numerically low rank.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng;
use crate::{Error, Result};

/// Disturbance taxonomy. Declaration order is the class index order used for
/// tie-breaking everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventClass {
    #[serde(rename = "AMB")]
    Ambient,
    #[serde(rename = "BF")]
    BusFault,
    #[serde(rename = "GO")]
    GenOutage,
    #[serde(rename = "LT")]
    LoadTrip,
    #[serde(rename = "LO")]
    LineOutage,
}

impl EventClass {
    pub const ALL: [EventClass; 5] = [
        EventClass::Ambient,
        EventClass::BusFault,
        EventClass::GenOutage,
        EventClass::LoadTrip,
        EventClass::LineOutage,
    ];

    pub fn code(self) -> &'static str {
        match self {
            EventClass::Ambient => "AMB",
            EventClass::BusFault => "BF",
            EventClass::GenOutage => "GO",
            EventClass::LoadTrip => "LT",
            EventClass::LineOutage => "LO",
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for EventClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EventClass::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| Error::invalid(format!("unknown event class `{s}`")))
    }
}

/// One damped oscillatory mode, `a * exp(sigma t) * cos(2 pi f t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalComponent {
    pub frequency: f64,
    pub damping_sigma: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl ModalComponent {
    pub fn value(&self, tau: f64) -> f64 {
        self.amplitude * (self.damping_sigma * tau).exp() * (2.0 * PI * self.frequency * tau + self.phase).cos()
    }
}

/// Full description of one event realization (everything except noise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class_label: EventClass,
    pub onset_time: f64,
    pub signal_ids: Vec<String>,
    /// Per-signal step applied at onset.
    pub step_offsets: Vec<f64>,
    /// `Some(d)`: the step clears after `d` seconds. `None`: sustained.
    #[serde(default)]
    pub step_duration: Option<f64>,
    pub modes: Vec<ModalComponent>,
    /// `n_signals x n_modes` participation factors.
    pub participation: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl EventSpec {
    pub fn n_signals(&self) -> usize {
        self.signal_ids.len()
    }

    fn validate(&self, duration: f64, sample_rate: f64) -> Result<()> {
        let m = self.n_signals();
        if m == 0 {
            return Err(Error::Empty("signal list"));
        }
        if !(self.onset_time >= 0.0 && self.onset_time < duration) {
            return Err(Error::invalid(format!(
                "onset {} s outside the simulated horizon [0, {duration})",
                self.onset_time
            )));
        }
        if self.step_offsets.len() != m {
            return Err(Error::shape(format!(
                "{} step offsets for {m} signals",
                self.step_offsets.len()
            )));
        }
        if self.participation.len() != m || self.participation.iter().any(|row| row.len() != self.modes.len()) {
            return Err(Error::shape(format!(
                "participation must be {m} x {}",
                self.modes.len()
            )));
        }
        let nyquist = sample_rate / 2.0;
        for mode in &self.modes {
            if mode.frequency < 0.0 || mode.frequency >= nyquist {
                return Err(Error::invalid(format!(
                    "mode frequency {} Hz not in [0, Nyquist = {nyquist})",
                    mode.frequency
                )));
            }
            if mode.amplitude < 0.0 {
                return Err(Error::invalid("negative mode amplitude"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        let mut ids: Vec<&String> = self.signal_ids.iter().collect();
        ids.sort();
        ids.dedup();
        if ids.len() != m {
            return Err(Error::invalid("duplicate signal ids"));
        }
        Ok(())
    }
}

/// `N x m` block of uniformly sampled signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalWindow {
    pub samples: Matrix,
    pub sample_rate: f64,
    pub signal_ids: Vec<String>,
    pub t0: f64,
}

impl SignalWindow {
    pub fn new(samples: Matrix, sample_rate: f64, signal_ids: Vec<String>, t0: f64) -> Result<Self> {
        if samples.rows() < 2 {
            return Err(Error::invalid("a window needs at least two samples"));
        }
        if samples.cols() != signal_ids.len() {
            return Err(Error::shape(format!(
                "{} columns but {} signal ids",
                samples.cols(),
                signal_ids.len()
            )));
        }
        let mut ids: Vec<&String> = signal_ids.iter().collect();
        ids.sort();
        ids.dedup();
        if ids.len() != signal_ids.len() {
            return Err(Error::invalid("duplicate signal ids"));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite("signal window"));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
            signal_ids,
            t0,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.rows()
    }

    pub fn n_signals(&self) -> usize {
        self.samples.cols()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvent {
    pub window: SignalWindow,
    pub label: EventClass,
    /// Noise seed; `(spec, seed)` regenerates the window bit for bit.
    pub seed: u64,
    pub onset: f64,
    pub condition: usize,
}

/// Samples one event from its modal description.
pub fn generate_event(spec: &EventSpec, seed: u64, duration: f64, sample_rate: f64) -> Result<LabeledEvent> {
    if !(sample_rate > 0.0 && duration > 0.0) || duration * sample_rate < 2.0 {
        return Err(Error::invalid("duration * sample_rate must be >= 2"));
    }
    spec.validate(duration, sample_rate)?;
    let n = (duration * sample_rate).round() as usize;
    let m = spec.n_signals();

    let mut noise_rng = rng::stream(seed, "noise", 0);
    let normal = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };

    let mut samples = Matrix::zeros(n, m);
    for j in 0..m {
        let row = &spec.participation[j];
        let col = samples.column_mut(j);
        for (k, out) in col.iter_mut().enumerate() {
            let t = k as f64 / sample_rate;
            let mut v = 0.0;
            // tolerances keep sample-grid round-off from moving an edge by one sample
            if t >= spec.onset_time - 1e-9 {
                let tau = (t - spec.onset_time).max(0.0);
                for (mode, p) in spec.modes.iter().zip(row) {
                    if *p != 0.0 {
                        v += p * mode.value(tau);
                    }
                }
                let step_on = spec.step_duration.is_none_or(|d| tau < d - 1e-9);
                if step_on {
                    v += spec.step_offsets[j];
                }
            }
            if let Some(dist) = &normal {
                v += dist.sample(&mut noise_rng);
            }
            *out = v;
        }
    }

    let window = SignalWindow::new(samples, sample_rate, spec.signal_ids.clone(), 0.0)?;
    Ok(LabeledEvent {
        window,
        label: spec.class_label,
        seed,
        onset: spec.onset_time,
        condition: 0,
    })
}

/// Template for one mode of a class signature; each event draws concrete
/// values uniformly from the ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTemplate {
    pub frequency: (f64, f64),
    pub damping_sigma: (f64, f64),
    pub amplitude: f64,
    /// Inter-area modes are seen network-wide with an east-west swing;
    /// local modes decay with distance from the disturbance.
    #[serde(default)]
    pub inter_area: bool,
}

/// Class-conditioned shape of a disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    /// Step at the disturbance location (signed, per unit).
    pub step: f64,
    #[serde(default)]
    pub step_duration: Option<f64>,
    /// Range of disturbance positions on the normalized line `[0, 1]`.
    pub location: (f64, f64),
    /// Spatial decay length of participation around the location.
    pub spread: f64,
    pub modes: Vec<ModeTemplate>,
}

impl ClassSignature {
    fn default_for(class: EventClass) -> Option<Self> {
        let local = |f: (f64, f64), s: (f64, f64), a: f64| ModeTemplate {
            frequency: f,
            damping_sigma: s,
            amplitude: a,
            inter_area: false,
        };
        let inter = |f: (f64, f64), s: (f64, f64), a: f64| ModeTemplate {
            frequency: f,
            damping_sigma: s,
            amplitude: a,
            inter_area: true,
        };
        let sig = match class {
            EventClass::Ambient => return None,
            EventClass::BusFault => ClassSignature {
                step: -0.2,
                step_duration: Some(0.1),
                location: (0.35, 0.65),
                spread: 0.15,
                modes: vec![
                    local((1.2, 2.0), (-0.5, -0.2), 0.15),
                    inter((0.4, 0.7), (-0.2, -0.05), 0.1),
                ],
            },
            EventClass::GenOutage => ClassSignature {
                step: -0.05,
                step_duration: None,
                location: (0.0, 0.25),
                spread: 0.2,
                modes: vec![
                    inter((0.2, 0.5), (-0.3, -0.1), 0.02),
                    local((0.8, 1.2), (-0.6, -0.3), 0.01),
                ],
            },
            EventClass::LoadTrip => ClassSignature {
                step: 0.04,
                step_duration: None,
                location: (0.75, 1.0),
                spread: 0.2,
                modes: vec![
                    inter((0.6, 0.9), (-0.4, -0.2), 0.015),
                    local((1.0, 1.5), (-0.8, -0.4), 0.008),
                ],
            },
            EventClass::LineOutage => ClassSignature {
                step: -0.015,
                step_duration: None,
                location: (0.3, 0.7),
                spread: 0.3,
                modes: vec![
                    inter((0.4, 0.8), (-0.3, -0.1), 0.015),
                    local((1.2, 1.8), (-0.5, -0.2), 0.01),
                ],
            },
        };
        Some(sig)
    }
}

/// Generator configuration (the JSON generator config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_signals: usize,
    pub signal_prefix: String,
    pub sample_rate: f64,
    pub duration: f64,
    pub onset: f64,
    pub noise_sigma: f64,
    pub n_conditions: usize,
    /// Relative half-width of the per-condition multiplicative jitter.
    pub jitter: f64,
    pub counts: BTreeMap<EventClass, usize>,
    /// Noise-only windows for the detection task.
    pub ambient_count: usize,
    pub signatures: BTreeMap<EventClass, ClassSignature>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let counts = BTreeMap::from([
            (EventClass::BusFault, 201),
            (EventClass::GenOutage, 38),
            (EventClass::LoadTrip, 156),
        ]);
        let signatures = EventClass::ALL
            .into_iter()
            .filter_map(|c| ClassSignature::default_for(c).map(|s| (c, s)))
            .collect();
        Self {
            n_signals: 32,
            signal_prefix: "V".into(),
            sample_rate: 30.0,
            duration: 40.0,
            onset: 10.0,
            noise_sigma: 0.001,
            n_conditions: 3,
            jitter: 0.2,
            counts,
            ambient_count: 0,
            signatures,
        }
    }
}

impl DatasetConfig {
    /// The four-class, seven-condition set used for deep networks.
    pub fn four_class() -> Self {
        Self {
            counts: BTreeMap::from([
                (EventClass::BusFault, 483),
                (EventClass::GenOutage, 112),
                (EventClass::LoadTrip, 490),
                (EventClass::LineOutage, 490),
            ]),
            n_conditions: 7,
            ..Self::default()
        }
    }

    pub fn signal_ids(&self) -> Vec<String> {
        let width = self.n_signals.to_string().len().max(2);
        (1..=self.n_signals)
            .map(|i| format!("{}{:0width$}", self.signal_prefix, i))
            .collect()
    }

    pub fn total_events(&self) -> usize {
        self.counts.values().sum::<usize>() + self.ambient_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_conditions == 0 {
            return Err(Error::invalid("n_conditions must be >= 1"));
        }
        if self.n_signals == 0 {
            return Err(Error::invalid("n_signals must be >= 1"));
        }
        if self.counts.is_empty() && self.ambient_count == 0 {
            return Err(Error::Empty("class counts"));
        }
        for (class, &count) in &self.counts {
            if *class == EventClass::Ambient {
                return Err(Error::invalid("ambient windows are requested via ambient_count"));
            }
            if count == 0 {
                return Err(Error::invalid(format!("count for {class} must be >= 1")));
            }
            if !self.signatures.contains_key(class) {
                return Err(Error::invalid(format!("no signature for {class}")));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid("jitter must be in [0, 1)"));
        }
        Ok(())
    }

    /// Fingerprint of the canonical JSON form.
    pub fn hash(&self) -> String {
        rng::content_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Copy)]
struct ConditionScales {
    amplitude: f64,
    damping: f64,
    step: f64,
}

fn condition_scales(seed: u64, condition: usize, jitter: f64) -> ConditionScales {
    let mut r = rng::stream(seed, "condition", condition as u64);
    let mut draw = || 1.0 + r.random_range(-jitter..=jitter);
    ConditionScales {
        amplitude: draw(),
        damping: draw(),
        step: draw(),
    }
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the modal description of one event of `class`.
pub fn sample_event_spec(
    config: &DatasetConfig,
    class: EventClass,
    seed: u64,
    index: usize,
    condition: usize,
) -> Result<EventSpec> {
    let m = config.n_signals;
    let ids = config.signal_ids();
    if class == EventClass::Ambient {
        return Ok(EventSpec {
            class_label: class,
            onset_time: config.onset,
            signal_ids: ids,
            step_offsets: vec![0.0; m],
            step_duration: None,
            modes: Vec::new(),
            participation: vec![Vec::new(); m],
            noise_sigma: config.noise_sigma,
        });
    }
    let sig = config
        .signatures
        .get(&class)
        .ok_or_else(|| Error::invalid(format!("no signature for {class}")))?;
    let scales = condition_scales(seed, condition, config.jitter);
    let mut r = rng::stream(seed, "spec", index as u64);

    let location = uniform(&mut r, sig.location);
    let position = |j: usize| if m > 1 { j as f64 / (m - 1) as f64 } else { 0.5 };
    let proximity: Vec<f64> = (0..m)
        .map(|j| {
            let d = (position(j) - location) / sig.spread.max(1e-6);
            (-d * d).exp()
        })
        .collect();

    let mut modes = Vec::with_capacity(sig.modes.len());
    for t in &sig.modes {
        let amp_jitter = 1.0 + r.random_range(-0.2..=0.2);
        modes.push(ModalComponent {
            frequency: uniform(&mut r, t.frequency),
            damping_sigma: uniform(&mut r, t.damping_sigma) * scales.damping,
            amplitude: t.amplitude * scales.amplitude * amp_jitter,
            phase: r.random_range(0.0..2.0 * PI),
        });
    }
    let participation = (0..m)
        .map(|j| {
            sig.modes
                .iter()
                .map(|t| {
                    if t.inter_area {
                        (PI * position(j)).cos() * (0.5 + 0.5 * proximity[j])
                    } else {
                        proximity[j]
                    }
                })
                .collect()
        })
        .collect();
    let step_offsets = proximity
        .iter()
        .map(|p| sig.step * scales.step * (0.1 + 0.9 * p))
        .collect();

    Ok(EventSpec {
        class_label: class,
        onset_time: config.onset,
        signal_ids: ids,
        step_offsets,
        step_duration: sig.step_duration,
        modes,
        participation,
        noise_sigma: config.noise_sigma,
    })
}

fn event_plan(config: &DatasetConfig) -> Vec<(EventClass, usize)> {
    let mut plan = Vec::with_capacity(config.total_events());
    for (&class, &count) in &config.counts {
        plan.extend((0..count).map(|i| (class, i)));
    }
    plan.extend((0..config.ambient_count).map(|i| (EventClass::Ambient, i)));
    plan
}

/// Generates the whole labeled dataset. Events appear grouped by class in
/// class order, ambient windows last. Within a class, event `i` runs under
/// operating condition `i mod n_conditions`.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Vec<LabeledEvent>> {
    config.validate()?;
    let plan = event_plan(config);
    let make = |(index, &(class, within)): (usize, &(EventClass, usize))| -> Result<LabeledEvent> {
        let condition = within % config.n_conditions;
        let spec = sample_event_spec(config, class, seed, index, condition)?;
        let noise_seed = rng::derive_seed(seed, "event", index as u64);
        let mut ev = generate_event(&spec, noise_seed, config.duration, config.sample_rate)?;
        ev.condition = condition;
        Ok(ev)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        plan.par_iter().enumerate().map(make).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        plan.iter().enumerate().map(make).collect()
    }
}

/// Window extraction and conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    /// Window length in seconds.
    pub window_len: f64,
    /// Seconds of pre-onset data kept at the start of the window.
    pub lead: f64,
    pub detrend: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate: 10.0,
            window_len: 15.0,
            lead: 5.0,
            detrend: true,
        }
    }
}

impl PreprocessConfig {
    pub fn output_len(&self) -> usize {
        (self.window_len * self.target_rate).round() as usize
    }
}

/// Integer decimation factor `sample_rate / target_rate`.
pub fn decimation_factor(sample_rate: f64, target_rate: f64) -> Result<usize> {
    if !(target_rate > 0.0) || target_rate > sample_rate {
        return Err(Error::invalid(format!(
            "target rate {target_rate} Hz must be in (0, {sample_rate}]"
        )));
    }
    let ratio = sample_rate / target_rate;
    let d = ratio.round();
    if (ratio - d).abs() > 1e-9 * ratio {
        return Err(Error::invalid(format!(
            "non-integral decimation factor {sample_rate}/{target_rate}"
        )));
    }
    Ok(d as usize)
}

/// Forward boxcar average of width `d`: `f[n] = mean(x[n..n+d])`.
pub fn boxcar_filter(x: &[f64], d: usize) -> Vec<f64> {
    if d == 0 || x.len() < d {
        return Vec::new();
    }
    (0..=x.len() - d)
        .map(|n| x[n..n + d].iter().sum::<f64>() / d as f64)
        .collect()
}

/// Boxcar anti-alias filter followed by keeping every `d`-th filtered sample.
pub fn decimate(x: &[f64], d: usize) -> Vec<f64> {
    boxcar_filter(x, d).into_iter().step_by(d.max(1)).collect()
}

/// Removes the least-squares line `a + b k` from `x` in place.
pub fn remove_linear_trend(x: &mut [f64]) {
    let n = x.len();
    if n == 0 {
        return;
    }
    if n == 1 {
        x[0] = 0.0;
        return;
    }
    let nf = n as f64;
    let k_mean = (nf - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (k, v) in x.iter().enumerate() {
        let dk = k as f64 - k_mean;
        sxy += dk * (v - x_mean);
        sxx += dk * dk;
    }
    let slope = sxy / sxx;
    for (k, v) in x.iter_mut().enumerate() {
        *v -= x_mean + slope * (k as f64 - k_mean);
    }
}

/// Extracts `[onset - lead, onset - lead + window_len)` at `target_rate`.
///
/// With `detrend`, each signal first has its pre-onset mean removed; after
/// decimation and extraction a least-squares line is removed from the window.
pub fn preprocess(window: &SignalWindow, onset: f64, cfg: &PreprocessConfig) -> Result<SignalWindow> {
    let d = decimation_factor(window.sample_rate, cfg.target_rate)?;
    let n = window.n_samples();
    let len = cfg.output_len();
    let start_time = onset - cfg.lead - window.t0;
    if start_time < -1e-9 {
        return Err(Error::invalid("window starts before the record"));
    }
    let start = (start_time * cfg.target_rate).round() as usize;
    let available = n / d;
    if len == 0 || start + len > available {
        return Err(Error::invalid(format!(
            "window of {len} samples from index {start} exceeds the {available} available"
        )));
    }
    let pre_onset = (0..n).filter(|&k| window.time(k) < onset).count();

    let mut cols = Vec::with_capacity(window.n_signals());
    for j in 0..window.n_signals() {
        let mut x = window.samples.column(j).to_vec();
        if cfg.detrend && pre_onset > 0 {
            let mean = x[..pre_onset].iter().sum::<f64>() / pre_onset as f64;
            x.iter_mut().for_each(|v| *v -= mean);
        }
        let y = decimate(&x, d);
        let mut w = y[start..start + len].to_vec();
        if cfg.detrend {
            remove_linear_trend(&mut w);
        }
        cols.push(w);
    }
    SignalWindow::new(
        Matrix::from_columns(&cols)?,
        cfg.target_rate,
        window.signal_ids.clone(),
        window.t0 + (start * d) as f64 / window.sample_rate,
    )
}

pub fn preprocess_event(event: &LabeledEvent, cfg: &PreprocessConfig) -> Result<SignalWindow> {
    preprocess(&event.window, event.onset, cfg)
}

/// Planted low-rank events for checking signal selection.
///
/// Signals are split into `n_latent` clusters; cluster `c` loads only on
/// latent series `c` with loadings that decay geometrically inside the
/// cluster (`decay^rank`, ranks shuffled once). Every signal gets white noise
/// at the given per-signal SNR.
pub fn planted_low_rank(
    n_events: usize,
    n_samples: usize,
    n_signals: usize,
    n_latent: usize,
    decay: f64,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<SignalWindow>> {
    if n_latent == 0 || n_signals < n_latent || n_samples < 2 {
        return Err(Error::invalid("planted_low_rank: bad dimensions"));
    }
    let mut layout_rng = rng::stream(seed, "planted-layout", 0);
    let mut order: Vec<usize> = (0..n_signals).collect();
    // Fisher-Yates so the strong signals are not at low indices
    for i in (1..n_signals).rev() {
        let j = layout_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut loading = vec![(0usize, 0.0f64); n_signals];
    for (rank_slot, &signal) in order.iter().enumerate() {
        let cluster = rank_slot % n_latent;
        let within = rank_slot / n_latent;
        loading[signal] = (cluster, decay.powi(within as i32));
    }
    let ids: Vec<String> = (1..=n_signals).map(|i| format!("P{i:02}")).collect();
    let noise_scale = 10f64.powf(-snr_db / 20.0);

    (0..n_events)
        .map(|h| {
            let mut r = rng::stream(seed, "planted-event", h as u64);
            let latents: Vec<Vec<f64>> = (0..n_latent)
                .map(|_| {
                    let f = r.random_range(0.2..1.5);
                    let sigma = r.random_range(-0.3..-0.05);
                    let phase = r.random_range(0.0..2.0 * PI);
                    let amp = r.random_range(0.8..1.2);
                    (0..n_samples)
                        .map(|k| {
                            let t = k as f64 / 10.0;
                            amp * (sigma * t).exp() * (2.0 * PI * f * t + phase).cos()
                        })
                        .collect()
                })
                .collect();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let cols: Vec<Vec<f64>> = (0..n_signals)
                .map(|j| {
                    let (c, l) = loading[j];
                    let clean: Vec<f64> = latents[c].iter().map(|v| l * v).collect();
                    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n_samples as f64).sqrt();
                    clean
                        .into_iter()
                        .map(|v| v + noise_scale * rms * normal.sample(&mut r))
                        .collect()
                })
                .collect();
            SignalWindow::new(Matrix::from_columns(&cols)?, 10.0, ids.clone(), 0.0)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk format: one CSV per event plus a JSON manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: EventClass,
    pub seed: u64,
    pub onset: f64,
    pub condition: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub sample_rate: f64,
    pub signal_ids: Vec<String>,
    pub events: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_window_csv(path: &Path, window: &SignalWindow) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "t").map_err(io)?;
    for id in &window.signal_ids {
        write!(w, ",{id}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for k in 0..window.n_samples() {
        write!(w, "{}", window.time(k)).map_err(io)?;
        for j in 0..window.n_signals() {
            write!(w, ",{}", window.samples[(k, j)]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_window_csv(path: &Path, sample_rate: f64) -> Result<SignalWindow> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = lines
        .next()
        .ok_or_else(|| csv_err(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let mut fields = header.split(',');
    if fields.next() != Some("t") {
        return Err(csv_err(1, "first column must be `t`".into()));
    }
    let ids: Vec<String> = fields.map(str::to_owned).collect();
    let mut cols = vec![Vec::new(); ids.len()];
    let mut t0 = None;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| csv_err(i + 2, "too few fields".into()))?
                .parse::<f64>()
                .map_err(|e| csv_err(i + 2, e.to_string()))
        };
        let t = parse(fields.next())?;
        t0.get_or_insert(t);
        for col in cols.iter_mut() {
            col.push(parse(fields.next())?);
        }
        if fields.next().is_some() {
            return Err(csv_err(i + 2, "too many fields".into()));
        }
    }
    SignalWindow::new(Matrix::from_columns(&cols)?, sample_rate, ids, t0.unwrap_or(0.0))
}

fn event_file_name(index: usize) -> String {
    format!("event_{index:05}.csv")
}

/// Writes every event as CSV plus the manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    events: &[LabeledEvent],
    config: &DatasetConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(events.len());
    for (i, ev) in events.iter().enumerate() {
        let file = event_file_name(i);
        write_window_csv(&dir.join(&file), &ev.window)?;
        entries.push(ManifestEntry {
            file,
            label: ev.label,
            seed: ev.seed,
            onset: ev.onset,
            condition: ev.condition,
        });
    }
    let manifest = DatasetManifest {
        config_hash: config.hash(),
        seed,
        sample_rate: config.sample_rate,
        signal_ids: config.signal_ids(),
        events: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Loads the manifest and every event it lists.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledEvent>)> {
    let manifest = read_manifest(dir)?;
    let events = manifest
        .events
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let window = read_window_csv(&path, manifest.sample_rate)?;
            Ok(LabeledEvent {
                window,
                label: e.label,
                seed: e.seed,
                onset: e.onset,
                condition: e.condition,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, events))
}
