//! Image-source multipath channel between plate nodes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft;
use crate::rng;
use crate::scenario::{MaterialModel, Mode, PlateScenario};
use crate::signal::Waveform;

pub fn phase_velocity(m: &MaterialModel, f: f64, mode: Mode) -> Result<f64> {
    if !(f > 0.0) {
        return Err(invalid("f", "frequency must be positive"));
    }
    Ok(match mode {
        Mode::S0 => m.s0_phase_velocity,
        Mode::A0 => m.a0_dispersion_coefficient * f.sqrt(),
    })
}

/// Phase velocity along direction `theta`.
pub fn phase_velocity_at(m: &MaterialModel, f: f64, mode: Mode, theta: f64) -> Result<f64> {
    Ok(phase_velocity(m, f, mode)? * m.angular_gain(theta))
}

pub fn group_velocity(m: &MaterialModel, f: f64, theta: f64, mode: Mode) -> Result<f64> {
    let vp = phase_velocity(m, f, mode)?;
    let k = match mode {
        Mode::S0 => 1.0,
        Mode::A0 => 2.0,
    };
    Ok(k * vp * m.angular_gain(theta))
}

/// One propagation path from an image of the transmitter to the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub length: f64,
    /// Direction of the unfolded ray; g(θ) is even under edge reflection.
    pub angle_tx: f64,
    pub reflection_count: u32,
    /// Product of (1 − transmission_loss) over crossed damage disks.
    pub transmission: f64,
    /// Extra equivalent length Σ chord·(1/(1+δ) − 1) accrued inside damage.
    pub excess_length: f64,
}

impl Path {
    /// (1 − loss)·exp(−jΔφ) at frequency `f` for local phase velocity `vp`.
    pub fn damage_factor(&self, f: f64, vp: f64) -> Complex64 {
        let dphi = 2.0 * PI * f * self.excess_length / vp;
        Complex64::from_polar(self.transmission, -dphi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub tx_id: String,
    pub rx_id: String,
    pub paths: Vec<Path>,
}

fn image_coord(i: i64, extent: f64, c: f64) -> f64 {
    i as f64 * extent + if i.rem_euclid(2) == 0 { c } else { extent - c }
}

/// Length of segment a→b inside the disk (c, rad).
fn chord(a: (f64, f64), b: (f64, f64), c: (f64, f64), rad: f64) -> f64 {
    let d = (b.0 - a.0, b.1 - a.1);
    let len2 = d.0 * d.0 + d.1 * d.1;
    if len2 == 0.0 {
        return 0.0;
    }
    let f = (a.0 - c.0, a.1 - c.1);
    let bq = f.0 * d.0 + f.1 * d.1;
    let cq = f.0 * f.0 + f.1 * f.1 - rad * rad;
    let disc = bq * bq - len2 * cq;
    if disc <= 0.0 {
        return 0.0;
    }
    let s = disc.sqrt();
    let t0 = ((-bq - s) / len2).clamp(0.0, 1.0);
    let t1 = ((-bq + s) / len2).clamp(0.0, 1.0);
    (t1 - t0) * len2.sqrt()
}

/// Direct path plus every image with |i| + |j| ≤ K, ordered by (reflections, length).
/// With `tx == rx` the zero-length direct path is dropped (pulse-echo geometry).
pub fn enumerate_paths(s: &PlateScenario, tx: &str, rx: &str) -> Result<PathSet> {
    let (ptx, prx) = (s.node(tx)?.position, s.node(rx)?.position);
    let k = i64::from(s.reflection_order);
    let mut paths = Vec::new();
    for i in -k..=k {
        let rem = k - i.abs();
        for j in -rem..=rem {
            let src = (image_coord(i, s.width, ptx.0), image_coord(j, s.height, ptx.1));
            let dx = prx.0 - src.0;
            let dy = prx.1 - src.1;
            let length = dx.hypot(dy);
            if length <= 0.0 {
                continue;
            }
            let mut transmission = 1.0;
            let mut excess_length = 0.0;
            for d in &s.damages {
                for p in i.min(0)..=i.max(0) {
                    for q in j.min(0)..=j.max(0) {
                        let c = (image_coord(p, s.width, d.center.0), image_coord(q, s.height, d.center.1));
                        let ch = chord(src, prx, c, d.radius);
                        if ch > 0.0 {
                            transmission *= 1.0 - d.transmission_loss;
                            excess_length += ch * (1.0 / (1.0 + d.velocity_perturbation) - 1.0);
                        }
                    }
                }
            }
            paths.push(Path {
                length,
                angle_tx: dy.atan2(dx),
                reflection_count: (i.abs() + j.abs()) as u32,
                transmission,
                excess_length,
            });
        }
    }
    paths.sort_by(|a, b| {
        a.reflection_count.cmp(&b.reflection_count).then(a.length.total_cmp(&b.length))
    });
    Ok(PathSet { tx_id: tx.into(), rx_id: rx.into(), paths })
}

/// Sampled transfer function of one transmit–receive pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelResponse {
    pub freqs: Vec<f64>,
    pub h: Vec<Complex64>,
    pub tx_id: String,
    pub rx_id: String,
}

impl ChannelResponse {
    pub fn power(&self) -> Vec<f64> {
        self.h.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Evaluates a path set at arbitrary frequencies.
#[derive(Debug, Clone)]
pub struct PathModel {
    pub paths: PathSet,
    material: MaterialModel,
    mode: Mode,
    amplitude: f64,
    edge_reflection: f64,
}

impl PathModel {
    pub fn new(s: &PlateScenario, tx: &str, rx: &str, mode: Mode) -> Result<Self> {
        let paths = enumerate_paths(s, tx, rx)?;
        let amplitude = s.node(tx)?.transducer.electromech_coupling * s.node(rx)?.transducer.electromech_coupling;
        Ok(Self { paths, material: s.material.clone(), mode, amplitude, edge_reflection: s.edge_reflection })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Shortest path length and the largest group velocity over `f_max`.
    pub fn earliest_arrival(&self, f_max: f64) -> f64 {
        let r_min = self.paths.paths.iter().map(|p| p.length).fold(f64::INFINITY, f64::min);
        let g_max = (0..720).map(|i| self.material.angular_gain(PI * i as f64 / 720.0)).fold(0.0, f64::max);
        let vg = group_velocity(&self.material, f_max, 0.0, self.mode).unwrap_or(f64::INFINITY) / self.material.angular_gain(0.0);
        r_min / (vg * g_max)
    }

    /// Longest group delay at frequency `f`.
    pub fn latest_arrival(&self, f: f64) -> f64 {
        let r_max = self.paths.paths.iter().map(|p| p.length).fold(0.0, f64::max);
        let g_min = (0..720).map(|i| self.material.angular_gain(PI * i as f64 / 720.0)).fold(f64::INFINITY, f64::min);
        let vg = group_velocity(&self.material, f, 0.0, self.mode).unwrap_or(f64::INFINITY) / self.material.angular_gain(0.0);
        r_max / (vg * g_min)
    }

    /// H(f). At f = 0 the S0 response is its static limit; A0 carries no DC.
    pub fn eval(&self, f: f64) -> Complex64 {
        if f <= 0.0 {
            return match self.mode {
                Mode::S0 => self.paths.paths.iter().map(|p| Complex64::from(self.path_gain(p))).sum(),
                Mode::A0 => Complex64::new(0.0, 0.0),
            };
        }
        let vp0 = match self.mode {
            Mode::S0 => self.material.s0_phase_velocity,
            Mode::A0 => self.material.a0_dispersion_coefficient * f.sqrt(),
        };
        let mut acc = Complex64::new(0.0, 0.0);
        for p in &self.paths.paths {
            let vp = vp0 * self.material.angular_gain(p.angle_tx);
            let phase = -2.0 * PI * f * (p.length + p.excess_length) / vp;
            acc += Complex64::from_polar(self.path_gain(p), phase);
        }
        acc
    }

    fn path_gain(&self, p: &Path) -> f64 {
        self.amplitude * p.transmission * self.edge_reflection.powi(p.reflection_count as i32)
            * (-self.material.attenuation_per_meter * p.length).exp()
            / p.length.sqrt()
    }
}

pub fn transfer_function(s: &PlateScenario, tx: &str, rx: &str, freqs: &[f64], mode: Mode) -> Result<ChannelResponse> {
    if freqs.is_empty() {
        return Err(invalid("freqs", "empty frequency grid"));
    }
    if freqs.iter().any(|f| !(*f > 0.0)) {
        return Err(invalid("freqs", "frequencies must be positive"));
    }
    let model = PathModel::new(s, tx, rx, mode)?;
    Ok(ChannelResponse {
        freqs: freqs.to_vec(),
        h: freqs.iter().map(|&f| model.eval(f)).collect(),
        tx_id: tx.into(),
        rx_id: rx.into(),
    })
}

pub fn power_vs_frequency(s: &PlateScenario, tx: &str, rx: &str, f_lo: f64, f_hi: f64, n_points: usize, mode: Mode) -> Result<Vec<(f64, f64)>> {
    if !(f_lo > 0.0 && f_hi > f_lo) {
        return Err(invalid("band", "requires 0 < f_lo < f_hi"));
    }
    if n_points < 2 {
        return Err(invalid("n_points", "at least two points"));
    }
    let freqs = uniform_grid(f_lo, f_hi, n_points);
    let resp = transfer_function(s, tx, rx, &freqs, mode)?;
    Ok(freqs.into_iter().zip(resp.power()).collect())
}

pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Frequency of the largest spectral bin of `x`.
pub fn dominant_frequency(x: &[f64], fs: f64) -> f64 {
    let n = fft::next_pow2(x.len());
    let spec = fft::rfft(x, n);
    let k = (0..=n / 2).max_by(|&a, &b| spec[a].norm_sqr().total_cmp(&spec[b].norm_sqr())).unwrap_or(0);
    k as f64 * fs / n as f64
}

/// Rejects signals whose dominant content sits above 0.4·fs.
pub fn check_nyquist(w: &Waveform) -> Result<()> {
    let f = dominant_frequency(&w.samples, w.sample_rate);
    if w.sample_rate < 2.5 * f {
        return Err(Error::Nyquist { sample_rate: w.sample_rate, frequency: f });
    }
    Ok(())
}

/// Mean power over the span between the first and last sample above 1% of the peak.
pub fn active_power(x: &[f64]) -> f64 {
    let peak = x.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let thr = 0.01 * peak;
    let first = x.iter().position(|v| v.abs() > thr).unwrap_or(0);
    let last = x.iter().rposition(|v| v.abs() > thr).unwrap_or(0);
    let span = &x[first..=last];
    span.iter().map(|v| v * v).sum::<f64>() / span.len() as f64
}

/// Adds white Gaussian noise at `snr_db` relative to the active-span power.
pub fn add_noise(x: &mut [f64], snr_db: f64, seed: u64, labels: &[&str], stream: u64) -> Result<()> {
    if !snr_db.is_finite() {
        return Err(invalid("snr_db", "must be finite"));
    }
    let p = active_power(x);
    let sigma = (p / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut g = rng::fork(seed, labels, stream);
    for v in x.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut g);
        *v += sigma * n;
    }
    Ok(())
}

/// Filters `w` by `h(f)` on a zero-padded grid; `h` is sampled at f ≥ 0 and mirrored.
pub fn apply_response(w: &Waveform, mut h: impl FnMut(f64) -> Complex64) -> Vec<f64> {
    let len = w.len();
    let n = fft::next_pow2(4 * len.max(1));
    let mut spec = fft::rfft(&w.samples, n);
    for k in 0..=n / 2 {
        let f = k as f64 * w.sample_rate / n as f64;
        let mut hk = h(f);
        if k == 0 || k == n / 2 {
            hk = Complex64::new(hk.re, 0.0);
        }
        spec[k] *= hk;
        if k != 0 && k != n / 2 {
            spec[n - k] *= hk.conj();
        }
    }
    let mut out = fft::irfft(spec);
    out.truncate(len);
    out
}

/// Low-frequency cutoff below which A0 group delay would exceed `span` seconds.
fn a0_cutoff(model: &PathModel, span: f64) -> f64 {
    if model.mode != Mode::A0 {
        return 0.0;
    }
    let r_max = model.paths.paths.iter().map(|p| p.length).fold(0.0, f64::max);
    let g_min = (0..720).map(|i| model.material.angular_gain(PI * i as f64 / 720.0)).fold(f64::INFINITY, f64::min);
    let v = 2.0 * model.material.a0_dispersion_coefficient * g_min;
    let root = r_max / (v * span);
    root * root
}

pub fn propagate(s: &PlateScenario, tx: &str, rx: &str, w: &Waveform, mode: Mode, snr_db: Option<f64>) -> Result<Waveform> {
    propagate_stream(s, tx, rx, w, mode, snr_db, 0)
}

/// `propagate` with an explicit noise stream index for repeated trials.
pub fn propagate_stream(
    s: &PlateScenario,
    tx: &str,
    rx: &str,
    w: &Waveform,
    mode: Mode,
    snr_db: Option<f64>,
    stream: u64,
) -> Result<Waveform> {
    check_nyquist(w)?;
    if let Some(snr) = snr_db {
        if !snr.is_finite() {
            return Err(invalid("snr_db", "must be finite"));
        }
    }
    let model = PathModel::new(s, tx, rx, mode)?;
    let span = fft::next_pow2(4 * w.len().max(1)) as f64 / w.sample_rate;
    let f_cut = a0_cutoff(&model, span);
    let mut out = apply_response(w, |f| if f < f_cut { Complex64::new(0.0, 0.0) } else { model.eval(f) });
    if let Some(snr) = snr_db {
        let tag = match mode {
            Mode::S0 => "S0",
            Mode::A0 => "A0",
        };
        add_noise(&mut out, snr, s.rng_seed, &["propagate", tx, rx, tag], stream)?;
    }
    Waveform::with_start(out, w.sample_rate, w.t0)
}

/// Overlap-add FIR filtering for records too long to transform at once.
#[derive(Debug, Clone)]
pub struct BlockConvolver {
    kernel: Vec<Complex64>,
    plan: fft::FftPlan,
    block: usize,
    tail: Vec<f64>,
    buf: Vec<Complex64>,
}

impl BlockConvolver {
    pub fn new(impulse: &[f64]) -> Self {
        let taps = impulse.len().max(1);
        let nfft = fft::next_pow2(4 * taps).max(4096);
        let plan = fft::FftPlan::new(nfft);
        let mut kernel = vec![Complex64::new(0.0, 0.0); nfft];
        for (k, &v) in kernel.iter_mut().zip(impulse) {
            k.re = v;
        }
        plan.process(&mut kernel, false);
        Self { kernel, plan, block: nfft - taps + 1, tail: vec![0.0; nfft], buf: vec![Complex64::new(0.0, 0.0); nfft] }
    }

    pub fn block_len(&self) -> usize {
        self.block
    }

    /// Filters the next input chunk (any length ≤ `block_len`) and returns as many output samples.
    ///
    /// # Panics
    /// Panics if the chunk is longer than `block_len`.
    pub fn process(&mut self, input: &[f64]) -> Vec<f64> {
        assert!(input.len() <= self.block);
        for (i, b) in self.buf.iter_mut().enumerate() {
            *b = Complex64::new(input.get(i).copied().unwrap_or(0.0), 0.0);
        }
        self.plan.process(&mut self.buf, false);
        for (s, k) in self.buf.iter_mut().zip(&self.kernel) {
            *s *= k;
        }
        self.plan.process(&mut self.buf, true);
        for (t, v) in self.tail.iter_mut().zip(&self.buf) {
            *t += v.re;
        }
        let out: Vec<f64> = self.tail[..input.len()].to_vec();
        self.tail.drain(..input.len());
        self.tail.resize(self.plan.len(), 0.0);
        out
    }
}

/// Causal impulse response of `model` sampled at `fs`, `len` taps long, band-limited to [f_lo, f_hi]
/// with raised-cosine skirts of width `skirt`.
pub fn impulse_response(model: &PathModel, fs: f64, len: usize, f_lo: f64, f_hi: f64, skirt: f64) -> Vec<f64> {
    let n = fft::next_pow2(2 * len);
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..n / 2 {
        let f = k as f64 * fs / n as f64;
        let wgt = band_taper(f, f_lo, f_hi, skirt);
        if wgt > 0.0 {
            let h = model.eval(f) * wgt;
            spec[k] = h;
            spec[n - k] = h.conj();
        }
    }
    let mut h = fft::irfft(spec);
    h.truncate(len);
    h
}

fn band_taper(f: f64, lo: f64, hi: f64, skirt: f64) -> f64 {
    if f < lo - skirt || f > hi + skirt {
        0.0
    } else if f < lo {
        0.5 - 0.5 * (PI * (f - lo + skirt) / skirt).cos()
    } else if f > hi {
        0.5 + 0.5 * (PI * (f - hi) / skirt).cos()
    } else {
        1.0
    }
}
