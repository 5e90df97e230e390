//! Five-level windowed transmit bursts, resonant load, duplexer and quadrature receiver.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::channel::apply_response;
use crate::error::{invalid, Error, Result};
use crate::fft;
use crate::signal::Waveform;

/// Window constant giving the Hamming-type cosine-sum window.
pub const HAMMING_A0: f64 = 25.0 / 46.0;

/// Supply levels produced by the switched-capacitor converters, in volts.
pub const PAPER_LEVELS: [f64; 5] = [0.36, 0.89, 1.9, 2.87, 3.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub f0: f64,
    pub n_cycles: u32,
    pub a0: f64,
    /// Ascending supply levels; the last one is the full-swing level.
    pub levels: Vec<f64>,
    pub vdd: f64,
}

impl PulseSpec {
    pub fn new(f0: f64) -> Self {
        Self { f0, n_cycles: 5, a0: HAMMING_A0, levels: PAPER_LEVELS.to_vec(), vdd: 3.3 }
    }

    /// Single-level (on-off) burst at `vdd`.
    pub fn rectangular(f0: f64, n_cycles: u32) -> Self {
        Self { f0, n_cycles, a0: HAMMING_A0, levels: vec![3.3], vdd: 3.3 }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(invalid("f0", "must be positive"));
        }
        if self.n_cycles < 1 {
            return Err(invalid("n_cycles", "must be at least 1"));
        }
        if !(self.a0 > 0.5 && self.a0 < 1.0) {
            return Err(invalid("a0", "must lie in (0.5, 1)"));
        }
        if self.levels.is_empty() {
            return Err(invalid("levels", "at least one level"));
        }
        let ascending = self.levels.windows(2).all(|w| w[0] < w[1]);
        if !ascending || !(self.levels[0] > 0.0) || self.levels[self.levels.len() - 1] > self.vdd {
            return Err(invalid("levels", "require 0 < V1 < ... < Vn <= vdd"));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        f64::from(self.n_cycles) / self.f0
    }
}

/// Center-peaked cosine-sum envelope, equal to 1 at the pulse center.
pub fn window_envelope(n_cycles: u32, a0: f64, t: &[f64], f0: f64) -> Result<Vec<f64>> {
    if !(f0 > 0.0) || n_cycles == 0 {
        return Err(invalid("f0", "f0 > 0 and n_cycles >= 1 required"));
    }
    let n = f64::from(n_cycles);
    let span = n / f0;
    let tol = 1e-12 * span;
    if t.iter().any(|&x| !(x >= -tol && x <= span + tol)) {
        return Err(invalid("t", "outside pulse support"));
    }
    Ok(t.iter().map(|&x| a0 - (1.0 - a0) * (2.0 * PI * x * f0 / n).cos()).collect())
}

fn half_cycle_envelope(n_cycles: u32, a0: f64) -> Vec<f64> {
    let f0 = 1.0;
    let t: Vec<f64> = (0..2 * n_cycles).map(|k| (f64::from(k) + 0.5) / (2.0 * f0)).collect();
    window_envelope(n_cycles, a0, &t, f0).unwrap_or_default()
}

/// Drive level for one half-cycle of the H-bridge output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfCycle {
    pub level: usize,
    pub sign: i8,
    pub volts: f64,
}

fn nearest(levels_norm: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, l) in levels_norm.iter().enumerate() {
        if (l - x).abs() < (levels_norm[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// Level per half-cycle: nearest normalized level to the envelope at the half-cycle peak.
/// The envelope samples are normalized by their maximum so the central half-cycles use the top level.
pub fn quantize_levels(spec: &PulseSpec) -> Result<Vec<HalfCycle>> {
    spec.check()?;
    let env = half_cycle_envelope(spec.n_cycles, spec.a0);
    let top = env.iter().cloned().fold(0.0, f64::max);
    let vmax = spec.levels[spec.levels.len() - 1];
    let norm: Vec<f64> = spec.levels.iter().map(|l| l / vmax).collect();
    Ok(env
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let level = nearest(&norm, e / top);
            let sign = if k % 2 == 0 { 1 } else { -1 };
            HalfCycle { level, sign, volts: f64::from(sign) * spec.levels[level] }
        })
        .collect())
}

/// H-bridge output: each half-cycle holds ±V_k for half a period.
pub fn synthesize_burst(spec: &PulseSpec, sample_rate: f64) -> Result<Waveform> {
    spec.check()?;
    if sample_rate < 20.0 * spec.f0 {
        return Err(Error::Nyquist { sample_rate, frequency: spec.f0 });
    }
    let assign = quantize_levels(spec)?;
    Ok(burst_from_levels(&assign.iter().map(|h| h.volts).collect::<Vec<_>>(), spec.f0, sample_rate))
}

fn burst_from_levels(volts: &[f64], f0: f64, fs: f64) -> Waveform {
    let halves = volts.len();
    let n = (halves as f64 / 2.0 * fs / f0).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let k = ((i as f64 / fs) * 2.0 * f0).floor() as usize;
            volts[k.min(halves - 1)]
        })
        .collect();
    Waveform { samples, sample_rate: fs, t0: 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelObjective {
    Psl,
    WaveformL2,
}

/// Result of a level-set search; levels are normalized to the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub levels: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub evaluations: usize,
}

const OPT_F0: f64 = 300e3;
const OPT_FS: f64 = 64.0 * OPT_F0;

fn level_objective(levels: &[f64], env_norm: &[f64], objective: LevelObjective) -> f64 {
    let assigned: Vec<f64> = env_norm.iter().map(|e| levels[nearest(levels, *e)]).collect();
    match objective {
        LevelObjective::WaveformL2 => assigned.iter().zip(env_norm).map(|(a, e)| (a - e) * (a - e)).sum(),
        LevelObjective::Psl => {
            let volts: Vec<f64> =
                assigned.iter().enumerate().map(|(k, v)| if k % 2 == 0 { *v } else { -*v }).collect();
            let w = burst_from_levels(&volts, OPT_F0, OPT_FS);
            spectral_metrics_padded(&w, OPT_F0, 1 << 16).map(|m| m.psl_db).unwrap_or(f64::INFINITY)
        }
    }
}

fn initial_levels(env_norm: &[f64], n_levels: usize) -> Vec<f64> {
    let mut distinct: Vec<f64> = env_norm.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let m = distinct.len();
    if n_levels >= m {
        return distinct;
    }
    if n_levels == 1 {
        return vec![1.0];
    }
    (0..n_levels).map(|i| distinct[(i * (m - 1) + (n_levels - 1) / 2) / (n_levels - 1)]).collect()
}

/// Coordinate descent over normalized levels in (0, 1], starting from the sampled envelope.
/// The top level stays at 1 because both objectives are invariant to overall scale for PSL
/// and the envelope is normalized to 1 for L2.
pub fn optimize_levels(n_levels: usize, n_cycles: u32, a0: f64, objective: LevelObjective) -> Result<LevelSet> {
    if n_levels == 0 {
        return Err(invalid("n_levels", "at least one level"));
    }
    if n_cycles == 0 || !(a0 > 0.5 && a0 < 1.0) {
        return Err(invalid("a0", "n_cycles >= 1 and 0.5 < a0 < 1 required"));
    }
    let env = half_cycle_envelope(n_cycles, a0);
    let top = env.iter().cloned().fold(0.0, f64::max);
    let env_norm: Vec<f64> = env.iter().map(|e| e / top).collect();
    let mut levels = initial_levels(&env_norm, n_levels);
    if let Some(last) = levels.last_mut() {
        *last = 1.0;
    }
    let mut best = level_objective(&levels, &env_norm, objective);
    let initial = best;
    let mut evals = 1;
    let mut step = 64.0 / 1024.0;
    loop {
        let mut improved = false;
        for i in 0..levels.len().saturating_sub(1) {
            for dir in [1.0, -1.0] {
                let cand = levels[i] + dir * step;
                let lo = if i == 0 { 0.0 } else { levels[i - 1] };
                let hi = levels[i + 1];
                if !(cand > lo && cand < hi) {
                    continue;
                }
                let mut trial = levels.clone();
                trial[i] = cand;
                let val = level_objective(&trial, &env_norm, objective);
                evals += 1;
                if val < best {
                    best = val;
                    levels = trial;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            if step <= 1.0 / 1024.0 {
                break;
            }
            step /= 2.0;
        }
    }
    Ok(LevelSet { levels, objective: best, initial_objective: initial, evaluations: evals })
}

/// Series inductance, transducer capacitance and loss resistance driven by the H-bridge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrcLoad {
    pub l_series: f64,
    pub c_p: f64,
    pub r_eff: f64,
}

impl LrcLoad {
    /// Load resonant at `f_r` with quality factor `q`.
    pub fn tuned(f_r: f64, c_p: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f_r;
        let l = 1.0 / (w0 * w0 * c_p);
        Self { l_series: l, c_p, r_eff: (l / c_p).sqrt() / q }
    }

    pub fn resonance(&self) -> f64 {
        1.0 / (2.0 * PI * (self.l_series * self.c_p).sqrt())
    }

    pub fn q(&self) -> f64 {
        (self.l_series / self.c_p).sqrt() / self.r_eff
    }

    /// Capacitor-voltage transfer at `f`.
    pub fn response(&self, f: f64) -> Complex64 {
        let r = f / self.resonance();
        Complex64::new(1.0, 0.0) / Complex64::new(1.0 - r * r, r / self.q())
    }

    pub fn check(&self) -> Result<()> {
        if !(self.l_series > 0.0 && self.c_p > 0.0 && self.r_eff > 0.0) {
            return Err(invalid("load", "L, C and R must be positive"));
        }
        Ok(())
    }
}

/// Transducer voltage; the output spans the zero-padded transform length so ring-down is kept.
pub fn apply_lrc(w: &Waveform, load: &LrcLoad) -> Result<Waveform> {
    load.check()?;
    let n = fft::next_pow2(4 * w.len().max(1));
    let padded = w.padded(n / 4);
    let mut y = apply_response(&padded.padded(n), |f| load.response(f));
    y.truncate(n);
    Waveform::with_start(y, w.sample_rate, w.t0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplexerSpec {
    pub c_dup: f64,
    pub diode_drop: f64,
    pub c_in: f64,
    pub c_f: f64,
}

impl Default for DuplexerSpec {
    fn default() -> Self {
        Self { c_dup: 10e-12, diode_drop: 0.7, c_in: 2e-12, c_f: 1e-12 }
    }
}

impl DuplexerSpec {
    pub fn c_in_eff(&self) -> f64 {
        self.c_in * self.c_dup / (self.c_in + self.c_dup)
    }

    /// Capacitive division seen by the receiver in listen mode.
    pub fn gain_factor(&self) -> f64 {
        self.c_dup / (self.c_dup + self.c_in)
    }

    pub fn check(&self, c_p: f64) -> Result<()> {
        if !(self.c_dup > 0.0 && self.c_in > 0.0 && self.diode_drop > 0.0) {
            return Err(invalid("duplexer", "capacitances and diode drop must be positive"));
        }
        if c_p < 5.0 * self.c_dup || self.c_dup < 5.0 * self.c_in {
            return Err(invalid("duplexer", "requires C_P >= 5 C_DUP and C_DUP >= 5 C_in"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplexMode {
    Tx,
    Rx,
}

pub fn duplexer(w: &Waveform, spec: &DuplexerSpec, mode: DuplexMode) -> Waveform {
    let samples = match mode {
        DuplexMode::Tx => w.samples.iter().map(|v| v.clamp(-spec.diode_drop, spec.diode_drop)).collect(),
        DuplexMode::Rx => w.samples.iter().map(|v| v * spec.gain_factor()).collect(),
    };
    Waveform { samples, sample_rate: w.sample_rate, t0: w.t0 }
}

/// Biquad pole Q for a 0.5 dB-ripple second-order Chebyshev response.
pub const CHEBYSHEV_Q: f64 = 0.8637;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiquadParams {
    pub h0: f64,
    pub hinf: f64,
    pub f_c: f64,
    pub f_n: f64,
}

impl BiquadParams {
    /// H(s) = (H∞·s² + H0·ω_c²)/(s² + s·ω_c/Q + ω_c²); the notch sits where H∞·ω_n² = H0·ω_c².
    pub fn response(&self, f: f64) -> Complex64 {
        let s = Complex64::new(0.0, 2.0 * PI * f);
        let wc = 2.0 * PI * self.f_c;
        (s * s * self.hinf + self.h0 * wc * wc) / (s * s + s * (wc / CHEBYSHEV_Q) + wc * wc)
    }

    /// Bilinear-transform coefficients (b, a) with a[0] = 1, prewarped at the notch.
    fn digital(&self, fs: f64) -> ([f64; 3], [f64; 3]) {
        let wc = 2.0 * PI * self.f_c;
        let wn = 2.0 * PI * self.f_n;
        let k = wn / (wn / (2.0 * fs)).tan();
        let (k2, wc2) = (k * k, wc * wc);
        let b0 = self.hinf * k2 + self.h0 * wc2;
        let b1 = 2.0 * (self.h0 * wc2 - self.hinf * k2);
        let a0 = k2 + k * wc / CHEBYSHEV_Q + wc2;
        let a1 = 2.0 * (wc2 - k2);
        let a2 = k2 - k * wc / CHEBYSHEV_Q + wc2;
        ([b0 / a0, b1 / a0, b0 / a0], [1.0, a1 / a0, a2 / a0])
    }

    pub fn filter(&self, x: &[f64], fs: f64) -> Vec<f64> {
        let (b, a) = self.digital(fs);
        let (mut z1, mut z2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = b[0] * v + z1;
                z1 = b[1] * v - a[1] * y + z2;
                z2 = b[2] * v - a[2] * y;
                y
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    pub gain_code: u8,
    pub fc_code: u8,
    pub fn_code: u8,
    pub pga_gain: f64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self { gain_code: 8, fc_code: 15, fn_code: 7, pga_gain: 1.0 }
    }
}

impl ReceiverConfig {
    /// Front-end gain in dB, 0 to 20 dB over the 4-bit code.
    pub fn gain_db(&self) -> f64 {
        20.0 * f64::from(self.gain_code.min(15)) / 15.0
    }

    pub fn biquad(&self) -> BiquadParams {
        let f_c = 25e3 * 4f64.powf(f64::from(self.fc_code.min(15)) / 15.0);
        let f_n = f_c * (1.5 + 0.1 * f64::from(self.fn_code.min(15)));
        BiquadParams { h0: 1.0, hinf: (f_c / f_n) * (f_c / f_n), f_c, f_n }
    }

    pub fn check(&self) -> Result<()> {
        if self.gain_code > 15 || self.fc_code > 15 || self.fn_code > 15 {
            return Err(invalid("receiver", "codes are 4-bit"));
        }
        if !(self.pga_gain > 0.0) {
            return Err(invalid("pga_gain", "must be positive"));
        }
        Ok(())
    }
}

/// Amplify, mix to baseband with cos/−sin at `f_lo`, average over one LO period,
/// biquad-filter each arm and apply the PGA. Envelope is √(I²+Q²), phase atan2(Q, I).
pub fn receive_chain(w: &Waveform, cfg: &ReceiverConfig, f_lo: f64) -> Result<(Waveform, Waveform)> {
    cfg.check()?;
    if !(f_lo > 0.0) || w.sample_rate < 2.5 * f_lo {
        return Err(Error::Nyquist { sample_rate: w.sample_rate, frequency: f_lo });
    }
    let fs = w.sample_rate;
    let g = 10f64.powf(cfg.gain_db() / 20.0);
    let mut i_arm = Vec::with_capacity(w.len());
    let mut q_arm = Vec::with_capacity(w.len());
    for (n, v) in w.samples.iter().enumerate() {
        let ph = 2.0 * PI * f_lo * w.time(n);
        i_arm.push(2.0 * g * v * ph.cos());
        q_arm.push(-2.0 * g * v * ph.sin());
    }
    let span = (fs / f_lo).round().max(1.0) as usize;
    let bq = cfg.biquad();
    let post = |x: Vec<f64>| -> Vec<f64> {
        let avg = moving_average(&x, span);
        bq.filter(&avg, fs).into_iter().map(|v| v * cfg.pga_gain).collect()
    };
    Ok((
        Waveform { samples: post(i_arm), sample_rate: fs, t0: w.t0 },
        Waveform { samples: post(q_arm), sample_rate: fs, t0: w.t0 },
    ))
}

fn moving_average(x: &[f64], span: usize) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        acc += x[i];
        if i >= span {
            acc -= x[i - span];
        }
        out.push(acc / span as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralMetrics {
    /// Worst geometric mean of the k-th sidelobe below and above the main lobe, in dB.
    pub psl_db: f64,
    /// Largest single sidelobe relative to the main-lobe peak, in dB.
    pub psl_raw_db: f64,
    pub third_harmonic_dbc: f64,
    pub bw3db_hz: f64,
}

/// Spectral compliance figures of a burst centered near `f0`.
pub fn spectral_metrics(w: &Waveform, f0: f64) -> Result<SpectralMetrics> {
    let pad = fft::next_pow2(16 * w.len()).max(1 << 18);
    spectral_metrics_padded(w, f0, pad)
}

/// |FFT| of `w` zero-padded to at least `pad` points, bins 0..=N/2, with bin spacing.
pub fn magnitude_spectrum(w: &Waveform, pad: usize) -> (Vec<f64>, f64) {
    let n = fft::next_pow2(pad.max(w.len()));
    let spec = fft::rfft(&w.samples, n);
    (spec[..=n / 2].iter().map(|c| c.norm()).collect(), w.sample_rate / n as f64)
}

fn is_peak(x: &[f64], k: usize) -> bool {
    k > 0 && k + 1 < x.len() && x[k] >= x[k - 1] && x[k] >= x[k + 1]
}

fn spectral_metrics_padded(w: &Waveform, f0: f64, pad: usize) -> Result<SpectralMetrics> {
    if !(f0 > 0.0) {
        return Err(invalid("f0", "must be positive"));
    }
    if 3.15 * f0 >= w.sample_rate / 2.0 {
        return Err(Error::Nyquist { sample_rate: w.sample_rate, frequency: 3.15 * f0 });
    }
    let peak = w.peak();
    let energy: f64 = w.samples.iter().map(|v| v * v).sum();
    if !(peak > 0.0) || energy < 1e-20 * peak * peak * w.len() as f64 {
        return Err(Error::NotFound("burst not found: energy below threshold"));
    }
    let (x, df) = magnitude_spectrum(w, pad);
    let bin = |f: f64| (f / df).round() as usize;
    let (lo_b, hi_b) = (bin(0.5 * f0), bin(1.5 * f0).min(x.len() - 1));
    let ip = (lo_b..=hi_b).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap_or(lo_b);
    let pk = x[ip];
    let mut l = ip;
    while l > 1 && x[l - 1] < x[l] {
        l -= 1;
    }
    let mut r = ip;
    while r + 2 < x.len() && x[r + 1] < x[r] {
        r += 1;
    }
    let lim = bin(2.0 * f0).min(x.len() - 2);
    let below: Vec<f64> = (1..l).rev().filter(|&k| is_peak(&x, k)).map(|k| x[k]).collect();
    let above: Vec<f64> = (r + 1..lim).filter(|&k| is_peak(&x, k)).map(|k| x[k]).collect();
    let raw = below.iter().chain(&above).cloned().fold(0.0, f64::max);
    let paired = below.iter().zip(&above).map(|(a, b)| (a * b).sqrt()).fold(0.0, f64::max);
    let paired = if below.is_empty() || above.is_empty() { raw } else { paired };
    let h = pk / core::f64::consts::SQRT_2;
    let mut a = ip;
    while a > 0 && x[a] > h {
        a -= 1;
    }
    let mut b = ip;
    while b + 1 < x.len() && x[b] > h {
        b += 1;
    }
    let cross = |i: usize, j: usize| i as f64 + (h - x[i]) / (x[j] - x[i]);
    let bw = (cross(b - 1, b) - cross(a, a + 1)) * df;
    let third = (bin(2.85 * f0)..=bin(3.15 * f0).min(x.len() - 1)).map(|k| x[k]).fold(0.0, f64::max);
    let db = |v: f64| 20.0 * (v / pk).log10();
    Ok(SpectralMetrics { psl_db: db(paired), psl_raw_db: db(raw), third_harmonic_dbc: db(third), bw3db_hz: bw })
}

/// One-sided magnitude spectrum in dB relative to its peak, up to `f_max`.
pub fn spectrum_db(w: &Waveform, f_max: f64) -> Vec<(f64, f64)> {
    let (x, df) = magnitude_spectrum(w, fft::next_pow2(16 * w.len()).max(1 << 14));
    let pk = x.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    x.iter()
        .enumerate()
        .take_while(|(k, _)| *k as f64 * df <= f_max)
        .map(|(k, v)| (k as f64 * df, 20.0 * (v.max(1e-300) / pk).log10()))
        .collect()
}
