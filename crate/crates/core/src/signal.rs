//! Parametric power-quality disturbance waveforms.
//!
//! A record is a unity-amplitude fundamental `sin(ωt + φ)` shaped by the
//! components its [`DisturbanceClass`] calls for:
//!
//! - multiplicative envelopes: sag/interruption `1 − α·w(t)`, swell
//!   `1 + β·w(t)`, flicker `1 + λ·sin(2π f_f t)`
//! - harmonic distortion `Σ a_h sin(hωt + θ_h)` for `h ∈ {3, 5, 7}`
//! - additive events: decaying oscillatory transients, rectangular impulses
//!   and periodic commutation notches
//!
//! where `w(t) = u(t − t1) − u(t − t2)` is the event window.

use std::f64::consts::TAU;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Sampling geometry of a record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Sampling frequency in Hz.
    pub fs: f64,
    /// Fundamental frequency in Hz.
    pub f0: f64,
    pub n_samples: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            fs: 3200.0,
            f0: 50.0,
            n_samples: 650,
        }
    }
}

impl TimeGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.f0.is_finite() && self.f0 > 0.0) {
            return Err(Error::Config(format!(
                "time grid needs finite positive frequencies, got fs={} f0={}",
                self.fs, self.f0
            )));
        }
        if self.fs <= 2.0 * self.f0 {
            return Err(Error::Config(format!(
                "fs={} Hz does not exceed the Nyquist rate of f0={} Hz",
                self.fs, self.f0
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("time grid needs at least one sample".into()));
        }
        Ok(())
    }

    /// Record length in seconds.
    pub fn duration(&self) -> f64 {
        self.n_samples as f64 / self.fs
    }

    /// Fundamental period in seconds.
    pub fn period(&self) -> f64 {
        1.0 / self.f0
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.fs
    }

    pub fn omega(&self) -> f64 {
        TAU * self.f0
    }
}

/// The seventeen disturbance classes, numbered as in the reference dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum DisturbanceClass {
    Normal = 0,
    Sag = 1,
    Swell = 2,
    Interruption = 3,
    Impulse = 4,
    OscillatoryTransient = 5,
    Harmonics = 6,
    HarmonicsSag = 7,
    HarmonicsSwell = 8,
    Flicker = 9,
    FlickerSag = 10,
    FlickerSwell = 11,
    SagOscillatoryTransient = 12,
    SwellOscillatoryTransient = 13,
    SagHarmonics = 14,
    SwellHarmonics = 15,
    Notch = 16,
}

impl DisturbanceClass {
    pub const COUNT: usize = 17;

    pub const ALL: [DisturbanceClass; 17] = [
        DisturbanceClass::Normal,
        DisturbanceClass::Sag,
        DisturbanceClass::Swell,
        DisturbanceClass::Interruption,
        DisturbanceClass::Impulse,
        DisturbanceClass::OscillatoryTransient,
        DisturbanceClass::Harmonics,
        DisturbanceClass::HarmonicsSag,
        DisturbanceClass::HarmonicsSwell,
        DisturbanceClass::Flicker,
        DisturbanceClass::FlickerSag,
        DisturbanceClass::FlickerSwell,
        DisturbanceClass::SagOscillatoryTransient,
        DisturbanceClass::SwellOscillatoryTransient,
        DisturbanceClass::SagHarmonics,
        DisturbanceClass::SwellHarmonics,
        DisturbanceClass::Notch,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Index(format!("disturbance class id {id} is not in [0, 16]")))
    }

    pub fn name(self) -> &'static str {
        use DisturbanceClass::*;
        match self {
            Normal => "normal",
            Sag => "sag",
            Swell => "swell",
            Interruption => "interruption",
            Impulse => "transient/spike/impulse",
            OscillatoryTransient => "oscillatory transient",
            Harmonics => "harmonics",
            HarmonicsSag => "harmonics & sag",
            HarmonicsSwell => "harmonics & swell",
            Flicker => "flicker",
            FlickerSag => "flicker & sag",
            FlickerSwell => "flicker & swell",
            SagOscillatoryTransient => "sag & oscillatory transient",
            SwellOscillatoryTransient => "swell & oscillatory transient",
            SagHarmonics => "sag & harmonics",
            SwellHarmonics => "swell & harmonics",
            Notch => "notch",
        }
    }

    /// Which waveform components this class is built from.
    pub fn layout(self) -> Layout {
        use DisturbanceClass::*;
        let mut l = Layout::default();
        match self {
            Normal => {}
            Sag => l.sag = Some(DepthKind::Sag),
            Swell => l.swell = true,
            Interruption => l.sag = Some(DepthKind::Interruption),
            Impulse => l.impulse = true,
            OscillatoryTransient => l.transient = true,
            Harmonics => l.harmonics = Some(HarmonicMode::Distorted),
            HarmonicsSag => {
                l.harmonics = Some(HarmonicMode::Distorted);
                l.sag = Some(DepthKind::Sag);
            }
            HarmonicsSwell => {
                l.harmonics = Some(HarmonicMode::Distorted);
                l.swell = true;
            }
            Flicker => l.flicker = true,
            FlickerSag => {
                l.flicker = true;
                l.sag = Some(DepthKind::Sag);
            }
            FlickerSwell => {
                l.flicker = true;
                l.swell = true;
            }
            SagOscillatoryTransient => {
                l.sag = Some(DepthKind::Sag);
                l.transient = true;
            }
            SwellOscillatoryTransient => {
                l.swell = true;
                l.transient = true;
            }
            SagHarmonics => {
                l.sag = Some(DepthKind::Sag);
                l.harmonics = Some(HarmonicMode::Injected);
            }
            SwellHarmonics => {
                l.swell = true;
                l.harmonics = Some(HarmonicMode::Injected);
            }
            Notch => l.notch = true,
        }
        l
    }
}

impl From<DisturbanceClass> for u8 {
    fn from(c: DisturbanceClass) -> u8 {
        c.id()
    }
}

impl TryFrom<u8> for DisturbanceClass {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        DisturbanceClass::from_id(id)
    }
}

impl fmt::Display for DisturbanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{} ({})", self.id(), self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthKind {
    Sag,
    Interruption,
}

/// How harmonic distortion combines with an amplitude event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarmonicMode {
    /// The distorted waveform as a whole is scaled by the envelope.
    Distorted,
    /// Harmonics ride on top of the enveloped fundamental, unscaled.
    Injected,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub sag: Option<DepthKind>,
    pub swell: bool,
    pub harmonics: Option<HarmonicMode>,
    pub flicker: bool,
    pub transient: bool,
    pub impulse: bool,
    pub notch: bool,
}

/// Sampling ranges for every disturbance parameter.
pub mod ranges {
    pub const SAG_DEPTH: (f64, f64) = (0.1, 0.9);
    pub const INTERRUPTION_DEPTH: (f64, f64) = (0.9, 1.0);
    pub const SWELL_RISE: (f64, f64) = (0.1, 0.8);
    /// Event duration in fundamental periods.
    pub const EVENT_PERIODS: (f64, f64) = (1.0, 9.0);
    pub const HARMONIC_AMP: (f64, f64) = (0.05, 0.15);
    pub const HARMONIC_ORDERS: [u32; 3] = [3, 5, 7];
    pub const FLICKER_DEPTH: (f64, f64) = (0.05, 0.1);
    pub const FLICKER_FREQ: (f64, f64) = (8.0, 25.0);
    pub const TRANSIENT_MAGNITUDE: (f64, f64) = (0.1, 0.8);
    pub const TRANSIENT_FREQ: (f64, f64) = (300.0, 900.0);
    /// Decay constant in seconds.
    pub const TRANSIENT_TAU: (f64, f64) = (0.008, 0.040);
    pub const IMPULSE_MAGNITUDE: (f64, f64) = (0.2, 0.8);
    /// Pulse width as a fraction of the fundamental period.
    pub const IMPULSE_WIDTH: (f64, f64) = (0.01, 0.05);
    pub const IMPULSE_COUNT: (usize, usize) = (1, 3);
    pub const NOTCH_DEPTH: (f64, f64) = (0.1, 0.4);
    pub const NOTCH_WIDTH: (f64, f64) = (0.01, 0.05);
    /// Extra swell rise demanded above the flicker swing in flicker & swell
    /// records, so the swell window always carries the record's peak.
    pub const FLICKER_SWELL_MARGIN: f64 = 0.02;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventWindow {
    pub t1: f64,
    pub t2: f64,
}

impl EventWindow {
    /// `u(t − t1) − u(t − t2)` with `u(0) = 1`.
    pub fn at(&self, t: f64) -> f64 {
        if t >= self.t1 && t < self.t2 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sag {
    pub alpha: f64,
    pub window: EventWindow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Swell {
    pub beta: f64,
    pub window: EventWindow,
}

/// Amplitudes and phases of the 3rd, 5th and 7th harmonics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonics {
    pub amps: [f64; 3],
    pub phases: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flicker {
    pub lambda: f64,
    pub freq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillatoryTransient {
    pub k_tr: f64,
    pub f_tr: f64,
    pub tau_tr: f64,
    pub window: EventWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    pub k_tr: f64,
    /// Pulse width as a fraction of the fundamental period.
    pub width: f64,
    /// Pulse start times in seconds.
    pub starts: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notch {
    pub k_notch: f64,
    /// Notch width as a fraction of the fundamental period.
    pub notch_width: f64,
    /// Position of the notch inside each fundamental period, in seconds.
    pub offset: f64,
}

/// Generation parameters of one record. Only the components named by the
/// class layout are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceParams {
    pub class: DisturbanceClass,
    pub phase0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sag: Option<Sag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swell: Option<Swell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harmonics: Option<Harmonics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flicker: Option<Flicker>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transient: Option<OscillatoryTransient>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impulse: Option<Impulse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notch: Option<Notch>,
}

impl DisturbanceParams {
    /// Parameters of an undisturbed record.
    pub fn normal(phase0: f64) -> Self {
        DisturbanceParams {
            class: DisturbanceClass::Normal,
            phase0,
            sag: None,
            swell: None,
            harmonics: None,
            flicker: None,
            transient: None,
            impulse: None,
            notch: None,
        }
    }

    /// Checks that exactly the components of `class` are present and that
    /// every value lies in its sampling range.
    pub fn validate(&self, class: DisturbanceClass, grid: &TimeGrid) -> Result<()> {
        if self.class != class {
            return Err(Error::Param(format!(
                "parameters describe {} but {} was requested",
                self.class, class
            )));
        }
        let layout = class.layout();
        presence("sag", layout.sag.is_some(), self.sag.is_some(), class)?;
        presence("swell", layout.swell, self.swell.is_some(), class)?;
        presence("harmonics", layout.harmonics.is_some(), self.harmonics.is_some(), class)?;
        presence("flicker", layout.flicker, self.flicker.is_some(), class)?;
        presence("transient", layout.transient, self.transient.is_some(), class)?;
        presence("impulse", layout.impulse, self.impulse.is_some(), class)?;
        presence("notch", layout.notch, self.notch.is_some(), class)?;

        check("phase0", self.phase0, 0.0, TAU, false)?;
        let duration = grid.duration();
        if let Some(sag) = &self.sag {
            let r = match layout.sag {
                Some(DepthKind::Interruption) => ranges::INTERRUPTION_DEPTH,
                _ => ranges::SAG_DEPTH,
            };
            check("alpha", sag.alpha, r.0, r.1, true)?;
            check_window(&sag.window, duration)?;
        }
        if let Some(swell) = &self.swell {
            check("beta", swell.beta, ranges::SWELL_RISE.0, ranges::SWELL_RISE.1, true)?;
            check_window(&swell.window, duration)?;
        }
        if let Some(h) = &self.harmonics {
            for (&a, &p) in h.amps.iter().zip(&h.phases) {
                check("harmonic_amp", a, ranges::HARMONIC_AMP.0, ranges::HARMONIC_AMP.1, true)?;
                check("harmonic_phase", p, 0.0, TAU, false)?;
            }
        }
        if let Some(fl) = &self.flicker {
            check("lambda", fl.lambda, ranges::FLICKER_DEPTH.0, ranges::FLICKER_DEPTH.1, true)?;
            check("f_flicker", fl.freq, ranges::FLICKER_FREQ.0, ranges::FLICKER_FREQ.1, true)?;
        }
        if let Some(tr) = &self.transient {
            let (k0, k1) = ranges::TRANSIENT_MAGNITUDE;
            check("k_tr", tr.k_tr, k0, k1, true)?;
            let (f0, f1) = ranges::TRANSIENT_FREQ;
            check("f_tr", tr.f_tr, f0, f1.min(grid.fs / 2.0), true)?;
            let (t0, t1) = ranges::TRANSIENT_TAU;
            check("tau_tr", tr.tau_tr, t0, t1, true)?;
            check_window(&tr.window, duration)?;
        }
        if let Some(imp) = &self.impulse {
            let (k0, k1) = ranges::IMPULSE_MAGNITUDE;
            check("k_tr", imp.k_tr, k0, k1, true)?;
            let (w0, w1) = ranges::IMPULSE_WIDTH;
            check("impulse_width", imp.width, w0, w1, true)?;
            let (c0, c1) = ranges::IMPULSE_COUNT;
            check("impulse_count", imp.starts.len() as f64, c0 as f64, c1 as f64, true)?;
            for &s in &imp.starts {
                check("impulse_start", s, 0.0, duration, false)?;
            }
        }
        if let Some(n) = &self.notch {
            let (k0, k1) = ranges::NOTCH_DEPTH;
            check("k_notch", n.k_notch, k0, k1, true)?;
            let (w0, w1) = ranges::NOTCH_WIDTH;
            check("notch_width", n.notch_width, w0, w1, true)?;
            check("notch_offset", n.offset, 0.0, grid.period(), false)?;
        }
        Ok(())
    }
}

fn presence(field: &str, wanted: bool, present: bool, class: DisturbanceClass) -> Result<()> {
    match (wanted, present) {
        (true, false) => Err(Error::Param(format!("{class} requires `{field}` parameters"))),
        (false, true) => Err(Error::Param(format!("{class} does not take `{field}` parameters"))),
        _ => Ok(()),
    }
}

fn check(name: &'static str, value: f64, min: f64, max: f64, closed: bool) -> Result<()> {
    let inside = value >= min && if closed { value <= max } else { value < max };
    if inside {
        Ok(())
    } else {
        Err(Error::Range {
            name,
            value,
            min,
            max,
        })
    }
}

fn check_window(w: &EventWindow, duration: f64) -> Result<()> {
    check("t1", w.t1, 0.0, duration, false)?;
    check("t2", w.t2, w.t1, duration, true)?;
    if w.t2 <= w.t1 {
        return Err(Error::Range {
            name: "t2",
            value: w.t2,
            min: w.t1,
            max: duration,
        });
    }
    Ok(())
}

/// A sampled waveform with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub label: DisturbanceClass,
    pub params: DisturbanceParams,
    pub seed: u64,
}

impl Signal {
    /// Mean squared value.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates the noiseless waveform of `class` on `grid`.
pub fn synthesize_clean(
    class: DisturbanceClass,
    params: &DisturbanceParams,
    grid: &TimeGrid,
) -> Result<Signal> {
    grid.validate()?;
    params.validate(class, grid)?;
    let layout = class.layout();
    let omega = grid.omega();
    let period = grid.period();

    let samples = (0..grid.n_samples)
        .map(|k| {
            let t = grid.time(k);
            let fundamental = (omega * t + params.phase0).sin();

            let mut envelope = 1.0;
            if let Some(sag) = &params.sag {
                envelope -= sag.alpha * sag.window.at(t);
            }
            if let Some(swell) = &params.swell {
                envelope += swell.beta * swell.window.at(t);
            }
            if let Some(fl) = &params.flicker {
                envelope *= 1.0 + fl.lambda * (TAU * fl.freq * t).sin();
            }

            let distortion = params.harmonics.as_ref().map_or(0.0, |h| {
                ranges::HARMONIC_ORDERS
                    .iter()
                    .zip(h.amps.iter().zip(&h.phases))
                    .map(|(&order, (&a, &p))| a * (order as f64 * omega * t + p).sin())
                    .sum()
            });
            let mut x = match layout.harmonics {
                Some(HarmonicMode::Distorted) => envelope * (fundamental + distortion),
                Some(HarmonicMode::Injected) => envelope * fundamental + distortion,
                None => envelope * fundamental,
            };

            if let Some(tr) = &params.transient {
                let w = tr.window.at(t);
                if w != 0.0 {
                    let dt = t - tr.window.t1;
                    x += tr.k_tr * (-dt / tr.tau_tr).exp() * (TAU * tr.f_tr * dt).sin();
                }
            }
            if let Some(imp) = &params.impulse {
                let width = imp.width * period;
                let active = imp
                    .starts
                    .iter()
                    .filter(|&&s| t >= s && t < s + width)
                    .count() as f64;
                x += imp.k_tr * sign(fundamental) * active;
            }
            if let Some(n) = &params.notch {
                let pos = ((t - n.offset) / period).rem_euclid(1.0);
                // Positions a hair below 1.0 are the start of the next notch.
                if pos < n.notch_width || pos > 1.0 - 1e-9 {
                    x -= n.k_notch * sign(fundamental);
                }
            }
            x
        })
        .collect();

    Ok(Signal {
        samples,
        label: class,
        params: params.clone(),
        seed: 0,
    })
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

fn sample_window<R: Rng>(rng: &mut R, grid: &TimeGrid) -> EventWindow {
    let duration = grid.duration();
    let periods = uniform(rng, ranges::EVENT_PERIODS);
    let length = (periods * grid.period()).min(duration);
    let t1 = if duration > length {
        rng.random_range(0.0..duration - length)
    } else {
        0.0
    };
    EventWindow {
        t1,
        t2: (t1 + length).min(duration),
    }
}

/// Draws the parameters of `class` uniformly from their ranges.
///
/// The stream is a ChaCha8 generator seeded with `seed` (see
/// [`crate::rng::PRNG_ID`]). Draw order is fixed: phase, flicker,
/// sag/interruption, swell, harmonics, transient, impulse, notch. Composite
/// transients share the window of their sag or swell.
pub fn sample_params(class: DisturbanceClass, seed: u64, grid: &TimeGrid) -> DisturbanceParams {
    let mut rng = rng_from_seed(seed);
    let layout = class.layout();
    let mut p = DisturbanceParams::normal(rng.random_range(0.0..TAU));
    p.class = class;

    if layout.flicker {
        p.flicker = Some(Flicker {
            lambda: uniform(&mut rng, ranges::FLICKER_DEPTH),
            freq: uniform(&mut rng, ranges::FLICKER_FREQ),
        });
    }
    if let Some(kind) = layout.sag {
        let r = match kind {
            DepthKind::Sag => ranges::SAG_DEPTH,
            DepthKind::Interruption => ranges::INTERRUPTION_DEPTH,
        };
        p.sag = Some(Sag {
            alpha: uniform(&mut rng, r),
            window: sample_window(&mut rng, grid),
        });
    }
    if layout.swell {
        let (mut lo, hi) = ranges::SWELL_RISE;
        if let Some(fl) = &p.flicker {
            // Worst case inside the window (1+β)(1−λ) must beat 1+λ outside.
            let swing = 2.0 * fl.lambda / (1.0 - fl.lambda);
            lo = lo.max(swing + ranges::FLICKER_SWELL_MARGIN);
        }
        p.swell = Some(Swell {
            beta: uniform(&mut rng, (lo, hi)),
            window: sample_window(&mut rng, grid),
        });
    }
    if layout.harmonics.is_some() {
        let mut amps = [0.0; 3];
        let mut phases = [0.0; 3];
        for (a, ph) in amps.iter_mut().zip(phases.iter_mut()) {
            *a = uniform(&mut rng, ranges::HARMONIC_AMP);
            *ph = rng.random_range(0.0..TAU);
        }
        p.harmonics = Some(Harmonics { amps, phases });
    }
    if layout.transient {
        let k_tr = uniform(&mut rng, ranges::TRANSIENT_MAGNITUDE);
        let (f_lo, f_hi) = ranges::TRANSIENT_FREQ;
        let f_tr = rng.random_range(f_lo..f_hi.min(grid.fs / 2.0));
        let tau_tr = uniform(&mut rng, ranges::TRANSIENT_TAU);
        let window = match (&p.sag, &p.swell) {
            (Some(s), _) => s.window,
            (_, Some(s)) => s.window,
            _ => sample_window(&mut rng, grid),
        };
        p.transient = Some(OscillatoryTransient {
            k_tr,
            f_tr,
            tau_tr,
            window,
        });
    }
    if layout.impulse {
        let k_tr = uniform(&mut rng, ranges::IMPULSE_MAGNITUDE);
        let width = uniform(&mut rng, ranges::IMPULSE_WIDTH);
        let (c0, c1) = ranges::IMPULSE_COUNT;
        let count = rng.random_range(c0..=c1);
        // Starts sit on sample instants so every pulse covers at least one sample.
        let span = (width * grid.period() * grid.fs).ceil() as usize;
        let last = grid.n_samples.saturating_sub(span.max(1));
        let mut starts: Vec<f64> = (0..count)
            .map(|_| grid.time(rng.random_range(0..=last)))
            .collect();
        starts.sort_by(f64::total_cmp);
        p.impulse = Some(Impulse {
            k_tr,
            width,
            starts,
        });
    }
    if layout.notch {
        let k_notch = uniform(&mut rng, ranges::NOTCH_DEPTH);
        let notch_width = uniform(&mut rng, ranges::NOTCH_WIDTH);
        let per_period = ((grid.period() * grid.fs).floor() as usize).max(1);
        let offset = grid.time(rng.random_range(0..per_period));
        p.notch = Some(Notch {
            k_notch,
            notch_width,
            offset,
        });
    }
    p
}

/// Adds white Gaussian noise at `snr_db` relative to the signal's own mean
/// square. The noise stream is a ChaCha8 generator seeded with `seed`.
pub fn add_awgn(signal: &Signal, snr_db: f64, seed: u64) -> Result<Signal> {
    if signal.samples.is_empty() {
        return Err(Error::Data("cannot add noise to an empty signal".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Param(format!("snr_db must be finite, got {snr_db}")));
    }
    let power = signal.power();
    if power == 0.0 {
        return Err(Error::Degenerate(
            "signal power is zero, SNR is undefined".into(),
        ));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = rng_from_seed(seed);
    let samples = signal
        .samples
        .iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            x + sigma * z
        })
        .collect();
    Ok(Signal {
        samples,
        ..signal.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> TimeGrid {
        TimeGrid::default()
    }

    #[test]
    fn class_ids_round_trip() {
        for (i, c) in DisturbanceClass::ALL.iter().enumerate() {
            assert_eq!(c.id() as usize, i);
            assert_eq!(DisturbanceClass::from_id(i as u8).unwrap(), *c);
        }
        assert!(DisturbanceClass::from_id(17).is_err());
        assert_eq!(DisturbanceClass::Notch.name(), "notch");
        assert_eq!(DisturbanceClass::Normal.name(), "normal");
    }

    #[test]
    fn grid_rejects_sub_nyquist() {
        let g = TimeGrid {
            fs: 100.0,
            f0: 50.0,
            n_samples: 10,
        };
        assert!(g.validate().is_err());
        let g = TimeGrid {
            n_samples: 0,
            ..grid()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn pure_sine() {
        let s = synthesize_clean(
            DisturbanceClass::Normal,
            &DisturbanceParams::normal(0.0),
            &grid(),
        )
        .unwrap();
        assert_eq!(s.samples.len(), 650);
        assert_eq!(s.samples[0], 0.0);
        for (k, &v) in s.samples.iter().enumerate() {
            let expect = (2.0 * PI * 50.0 * k as f64 / 3200.0).sin();
            assert!((v - expect).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn full_interruption_is_silent() {
        let g = grid();
        let mut p = DisturbanceParams::normal(0.3);
        p.class = DisturbanceClass::Interruption;
        p.sag = Some(Sag {
            alpha: 1.0,
            window: EventWindow {
                t1: 0.0,
                t2: g.duration(),
            },
        });
        let s = synthesize_clean(DisturbanceClass::Interruption, &p, &g).unwrap();
        assert!(s.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn harmonic_sum_matches_direct_evaluation() {
        let g = grid();
        let mut p = DisturbanceParams::normal(0.0);
        p.class = DisturbanceClass::Harmonics;
        p.harmonics = Some(Harmonics {
            amps: [0.15, 0.10, 0.05],
            phases: [0.0; 3],
        });
        let s = synthesize_clean(DisturbanceClass::Harmonics, &p, &g).unwrap();
        for k in 0..g.n_samples {
            let t = k as f64 / 3200.0;
            let w = 2.0 * PI * 50.0;
            let direct = (w * t).sin()
                + 0.15 * (3.0 * w * t).sin()
                + 0.10 * (5.0 * w * t).sin()
                + 0.05 * (7.0 * w * t).sin();
            assert!((s.samples[k] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_and_out_of_range_params() {
        let g = grid();
        let p = sample_params(DisturbanceClass::Sag, 1, &g);
        assert!(matches!(
            synthesize_clean(DisturbanceClass::Swell, &p, &g),
            Err(Error::Param(_))
        ));

        let mut bad = p.clone();
        bad.sag.as_mut().unwrap().alpha = 0.95;
        assert!(matches!(
            synthesize_clean(DisturbanceClass::Sag, &bad, &g),
            Err(Error::Range { name: "alpha", .. })
        ));

        let mut missing = p.clone();
        missing.sag = None;
        assert!(matches!(
            synthesize_clean(DisturbanceClass::Sag, &missing, &g),
            Err(Error::Param(_))
        ));

        let mut extra = p;
        extra.notch = Some(Notch {
            k_notch: 0.2,
            notch_width: 0.02,
            offset: 0.0,
        });
        assert!(matches!(
            synthesize_clean(DisturbanceClass::Sag, &extra, &g),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn window_must_be_ordered() {
        let g = grid();
        let mut p = sample_params(DisturbanceClass::Swell, 5, &g);
        let w = &mut p.swell.as_mut().unwrap().window;
        std::mem::swap(&mut w.t1, &mut w.t2);
        assert!(synthesize_clean(DisturbanceClass::Swell, &p, &g).is_err());
    }

    #[test]
    fn normal_params_only_carry_phase() {
        let p = sample_params(DisturbanceClass::Normal, 99, &grid());
        assert_eq!(p, DisturbanceParams::normal(p.phase0));
        assert!((0.0..TAU).contains(&p.phase0));
    }

    #[test]
    fn sampling_is_deterministic_and_valid_for_every_class() {
        let g = grid();
        for class in DisturbanceClass::ALL {
            for seed in 0..50 {
                let a = sample_params(class, seed, &g);
                assert_eq!(a, sample_params(class, seed, &g));
                a.validate(class, &g).unwrap();
            }
        }
    }

    #[test]
    fn awgn_rejects_silence_and_vanishes_at_high_snr() {
        let g = grid();
        let silent = Signal {
            samples: vec![0.0; 8],
            label: DisturbanceClass::Normal,
            params: DisturbanceParams::normal(0.0),
            seed: 0,
        };
        assert!(matches!(add_awgn(&silent, 30.0, 1), Err(Error::Degenerate(_))));
        assert!(add_awgn(&silent, f64::NAN, 1).is_err());

        let s = synthesize_clean(
            DisturbanceClass::Normal,
            &DisturbanceParams::normal(0.0),
            &g,
        )
        .unwrap();
        let n = add_awgn(&s, 300.0, 3).unwrap();
        let dev = s
            .samples
            .iter()
            .zip(&n.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-6);
        assert_eq!(add_awgn(&s, 30.0, 3).unwrap(), add_awgn(&s, 30.0, 3).unwrap());
    }

    #[test]
    fn unit_sine_noise_variance() {
        let s = synthesize_clean(
            DisturbanceClass::Normal,
            &DisturbanceParams::normal(0.0),
            &grid(),
        )
        .unwrap();
        // Closed form: Σ sin²(kθ) = n/2 − sin(nθ)·cos((n−1)θ) / (2 sin θ).
        let (n, theta) = (650.0, 2.0 * PI * 50.0 / 3200.0);
        let expected = 0.5 - (n * theta).sin() * ((n - 1.0) * theta).cos() / (2.0 * theta.sin()) / n;
        let p = s.power();
        assert!((p - expected).abs() < 1e-12, "power {p} vs {expected}");
        let noisy = add_awgn(&s, 30.0, 11).unwrap();
        let noise: Vec<f64> = noisy.samples.iter().zip(&s.samples).map(|(a, b)| a - b).collect();
        let var = noise.iter().map(|e| e * e).sum::<f64>() / n;
        // One record: 650 draws give a loose variance estimate.
        assert!((var / (p / 1000.0) - 1.0).abs() < 0.25, "variance {var}");
    }
}
