//! Acoustic modem: BFSK downlink sliced by a square-law envelope detector, OOK uplink, BER statistics.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{impulse_response, BlockConvolver, PathModel};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownlinkConfig {
    pub f_bit0: f64,
    pub f_bit1: f64,
    pub bit_rate: f64,
    pub amplitude: f64,
}

impl DownlinkConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.f_bit0 > 0.0 && self.f_bit1 > 0.0) || self.f_bit0 == self.f_bit1 {
            return Err(invalid("tones", "two distinct positive tones required"));
        }
        if !(10.0..=200.0).contains(&self.bit_rate) {
            return Err(invalid("bit_rate", "must lie in [10, 200] bit/s"));
        }
        if self.f_bit0.min(self.f_bit1) < 10.0 * self.bit_rate {
            return Err(invalid("bit_rate", "bit period must span many carrier cycles"));
        }
        if !(self.amplitude > 0.0) {
            return Err(invalid("amplitude", "must be positive"));
        }
        Ok(())
    }

    fn nyquist(&self, fs: f64) -> Result<()> {
        let f = self.f_bit0.max(self.f_bit1);
        if fs < 2.5 * f {
            return Err(Error::Nyquist { sample_rate: fs, frequency: f });
        }
        Ok(())
    }
}

/// Continuous-phase FSK sample generator.
#[derive(Debug, Clone)]
pub struct BfskSource<'a> {
    bits: &'a [u8],
    cfg: DownlinkConfig,
    fs: f64,
    phase: f64,
    n: usize,
    total: usize,
}

impl<'a> BfskSource<'a> {
    pub fn new(bits: &'a [u8], cfg: DownlinkConfig, fs: f64) -> Result<Self> {
        cfg.check()?;
        cfg.nyquist(fs)?;
        let total = (bits.len() as f64 * fs / cfg.bit_rate).round() as usize;
        Ok(Self { bits, cfg, fs, phase: 0.0, n: 0, total })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Next up to `max` samples; empty when exhausted.
    pub fn next_chunk(&mut self, max: usize) -> Vec<f64> {
        let end = (self.n + max).min(self.total);
        let mut out = Vec::with_capacity(end - self.n);
        while self.n < end {
            let k = ((self.n as f64 * self.cfg.bit_rate / self.fs) as usize).min(self.bits.len() - 1);
            let f = if self.bits[k] != 0 { self.cfg.f_bit1 } else { self.cfg.f_bit0 };
            out.push(self.cfg.amplitude * self.phase.sin());
            self.phase = (self.phase + 2.0 * PI * f / self.fs) % (2.0 * PI);
            self.n += 1;
        }
        out
    }
}

pub fn bfsk_modulate(bits: &[u8], cfg: &DownlinkConfig, sample_rate: f64) -> Result<Waveform> {
    if bits.is_empty() {
        return Err(invalid("bits", "empty bit stream"));
    }
    let mut src = BfskSource::new(bits, *cfg, sample_rate)?;
    let n = src.len();
    Ok(Waveform { samples: src.next_chunk(n), sample_rate, t0: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdrConfig {
    pub ed_time_constant: f64,
    pub avg_time_constant: f64,
    /// Comparator hysteresis as a fraction of the running average, so slicing is scale-free.
    pub hysteresis: f64,
}

impl CdrConfig {
    pub fn for_bit_rate(bit_rate: f64) -> Self {
        Self { ed_time_constant: 0.05 / bit_rate, avg_time_constant: 20.0 / bit_rate, hysteresis: 0.05 }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.ed_time_constant > 0.0 && self.avg_time_constant > self.ed_time_constant) {
            return Err(invalid("cdr", "0 < ed_time_constant < avg_time_constant required"));
        }
        if !(0.0..1.0).contains(&self.hysteresis) {
            return Err(invalid("hysteresis", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Streaming square-law envelope detector, averager and hysteretic comparator.
#[derive(Debug, Clone)]
pub struct Cdr {
    cfg: CdrConfig,
    fs: f64,
    bit_rate: f64,
    a_ed: f64,
    a_avg: f64,
    ed: f64,
    avg: f64,
    warm: Vec<f64>,
    warm_len: usize,
    state: bool,
    decided: Vec<bool>,
    n: usize,
    sum_cos: f64,
    sum_sin: f64,
    crossings: usize,
}

impl Cdr {
    pub fn new(cfg: CdrConfig, fs: f64, bit_rate: f64) -> Result<Self> {
        cfg.check()?;
        if !(bit_rate > 0.0 && fs > 2.0 * bit_rate) {
            return Err(invalid("bit_rate", "must be positive and well below the sample rate"));
        }
        Ok(Self {
            cfg,
            fs,
            bit_rate,
            a_ed: 1.0 - (-1.0 / (cfg.ed_time_constant * fs)).exp(),
            a_avg: 1.0 - (-1.0 / (cfg.avg_time_constant * fs)).exp(),
            ed: 0.0,
            avg: 0.0,
            warm: Vec::new(),
            warm_len: ((cfg.avg_time_constant * fs) as usize).max(1),
            state: false,
            decided: Vec::new(),
            n: 0,
            sum_cos: 0.0,
            sum_sin: 0.0,
            crossings: 0,
        })
    }

    pub fn push(&mut self, x: &[f64]) {
        for &v in x {
            self.ed += (v * v - self.ed) * self.a_ed;
            if self.warm.len() < self.warm_len && self.n >= self.warm_start() {
                self.warm.push(self.ed);
                if self.warm.len() == self.warm_len {
                    self.avg = self.warm.iter().sum::<f64>() / self.warm_len as f64;
                    self.replay_warmup();
                }
                self.n += 1;
                continue;
            }
            if self.warm.len() < self.warm_len {
                self.decided.push(false);
                self.n += 1;
                continue;
            }
            self.avg += (self.ed - self.avg) * self.a_avg;
            self.step(self.ed);
            self.n += 1;
        }
    }

    fn warm_start(&self) -> usize {
        ((3.0 * self.cfg.ed_time_constant * self.fs) as usize).min(self.warm_len)
    }

    fn replay_warmup(&mut self) {
        let buf = core::mem::take(&mut self.warm);
        self.state = buf[0] > self.avg;
        for &e in &buf {
            self.step(e);
        }
        self.warm = buf;
    }

    fn step(&mut self, e: f64) {
        let hi = self.avg * (1.0 + self.cfg.hysteresis);
        let lo = self.avg * (1.0 - self.cfg.hysteresis);
        let next = if e > hi {
            true
        } else if e < lo {
            false
        } else {
            self.state
        };
        if next != self.state {
            let t = self.decided.len() as f64 / self.fs;
            let ph = 2.0 * PI * t * self.bit_rate;
            self.sum_cos += ph.cos();
            self.sum_sin += ph.sin();
            self.crossings += 1;
        }
        self.state = next;
        self.decided.push(next);
    }

    /// Samples the comparator at recovered bit centers.
    pub fn finish(mut self) -> Result<Vec<u8>> {
        if self.warm.len() < self.warm_len && !self.warm.is_empty() {
            self.avg = self.warm.iter().sum::<f64>() / self.warm.len() as f64;
            self.warm_len = self.warm.len();
            self.replay_warmup();
        }
        if self.crossings == 0 {
            return Err(Error::NotFound("no comparator crossings: channel gives no AM depth"));
        }
        let t_bit = 1.0 / self.bit_rate;
        let mut phase = self.sum_sin.atan2(self.sum_cos) / (2.0 * PI) * t_bit;
        if phase < 0.0 {
            phase += t_bit;
        }
        let phase = if phase > 0.75 * t_bit { phase - t_bit } else { phase };
        let n_bits = (self.decided.len() as f64 / self.fs * self.bit_rate + 1e-9).floor() as usize;
        let last = self.decided.len().saturating_sub(1);
        Ok((0..n_bits)
            .map(|k| {
                let t = (phase + (k as f64 + 0.5) * t_bit).max(0.0);
                let i = ((t * self.fs).round() as usize).min(last);
                u8::from(self.decided[i])
            })
            .collect())
    }
}

pub fn cdr_demodulate(w: &Waveform, cfg: &CdrConfig, bit_rate: f64) -> Result<Vec<u8>> {
    let mut cdr = Cdr::new(*cfg, w.sample_rate, bit_rate)?;
    cdr.push(&w.samples);
    cdr.finish()
}

/// Downlink tones around `f_opt`: bit 1 on the higher-gain tone, bit 0 on the
/// neighbour `spacing` away with the lower gain.
pub fn select_tones(model: &PathModel, f_opt: f64, spacing: f64) -> (f64, f64) {
    let g = |f: f64| model.eval(f).norm();
    let (lo, hi) = (f_opt - spacing, f_opt + spacing);
    let other = if g(lo) < g(hi) { lo } else { hi };
    if g(f_opt) >= g(other) {
        (other, f_opt)
    } else {
        (f_opt, other)
    }
}

/// End-to-end downlink through `model`, streamed in blocks so long records stay small in memory.
pub fn simulate_downlink(
    model: &PathModel,
    bits: &[u8],
    cfg: &DownlinkConfig,
    cdr: &CdrConfig,
    sample_rate: f64,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Vec<u8>> {
    let mut src = BfskSource::new(bits, *cfg, sample_rate)?;
    let f_lo = cfg.f_bit0.min(cfg.f_bit1);
    let f_hi = cfg.f_bit0.max(cfg.f_bit1);
    let skirt = 4.0 * cfg.bit_rate.max(1e3);
    let taps = ((model.latest_arrival(f_lo - skirt).min(0.02) * 1.5 + 2.0 / skirt) * sample_rate) as usize;
    let h = impulse_response(model, sample_rate, taps.max(64), f_lo - skirt, f_hi + skirt, skirt);
    let mut conv = BlockConvolver::new(&h);
    let sigma = match snr_db {
        Some(snr) => {
            if !snr.is_finite() {
                return Err(invalid("snr_db", "must be finite"));
            }
            let p = 0.25 * cfg.amplitude * cfg.amplitude * (model.eval(cfg.f_bit0).norm_sqr() + model.eval(cfg.f_bit1).norm_sqr());
            (p / 10f64.powf(snr / 10.0)).sqrt()
        }
        None => 0.0,
    };
    let mut g = rng::fork(seed, &["downlink"], bits.len() as u64);
    let mut demod = Cdr::new(*cdr, sample_rate, cfg.bit_rate)?;
    loop {
        let chunk = src.next_chunk(conv.block_len());
        if chunk.is_empty() {
            break;
        }
        let mut y = conv.process(&chunk);
        if sigma > 0.0 {
            for v in y.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut g);
                *v += sigma * n;
            }
        }
        demod.push(&y);
    }
    demod.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UplinkConfig {
    pub symbol_period: f64,
    pub f0: f64,
    /// Full-swing drive level V₅.
    pub amplitude: f64,
    /// Fraction of the symbol period integrated by the energy detector.
    pub window_fraction: f64,
}

impl UplinkConfig {
    pub fn new(bit_rate: f64, f0: f64) -> Self {
        Self { symbol_period: 1.0 / bit_rate, f0, amplitude: 3.3, window_fraction: 0.25 }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.symbol_period > 1.0 / self.f0) {
            return Err(invalid("symbol_period", "must exceed one carrier cycle"));
        }
        if 1.0 / self.symbol_period > 10e3 * (1.0 + 1e-9) {
            return Err(invalid("symbol_period", "uplink rate is limited to 10 kbit/s"));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(invalid("window_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Alignment preamble sent ahead of every uplink payload.
pub const OOK_PREAMBLE: [u8; 8] = [1, 0, 1, 0, 1, 0, 1, 0];

pub fn ook_frame(payload: &[u8]) -> Vec<u8> {
    OOK_PREAMBLE.iter().chain(payload).copied().collect()
}

/// '1' is one full-swing square cycle at the symbol start; '0' is silence.
pub fn ook_modulate(bits: &[u8], cfg: &UplinkConfig, sample_rate: f64) -> Result<Waveform> {
    cfg.check()?;
    if sample_rate < 8.0 * cfg.f0 {
        return Err(Error::Nyquist { sample_rate, frequency: cfg.f0 });
    }
    let n = (bits.len() as f64 * cfg.symbol_period * sample_rate).round() as usize;
    let mut x = vec![0.0; n];
    let cyc = 1.0 / cfg.f0;
    for (k, b) in bits.iter().enumerate() {
        if *b == 0 {
            continue;
        }
        let start = k as f64 * cfg.symbol_period;
        let i0 = (start * sample_rate).round() as usize;
        let i1 = (((start + cyc) * sample_rate).round() as usize).min(n);
        for (i, v) in x.iter_mut().enumerate().take(i1).skip(i0) {
            let t = i as f64 / sample_rate - start;
            *v = if t < 0.5 * cyc { cfg.amplitude } else { -cfg.amplitude };
        }
    }
    Waveform::new(x, sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdPolicy {
    Fixed,
    Adaptive,
}

/// Demodulates a frame that begins with [`OOK_PREAMBLE`] and returns the payload bits.
/// Symbols found after the payload (silence in the record tail) come back as zeros.
pub fn ook_demodulate(w: &Waveform, cfg: &UplinkConfig, policy: ThresholdPolicy) -> Result<Vec<u8>> {
    cfg.check()?;
    let fs = w.sample_rate;
    let ts = cfg.symbol_period * fs;
    let win = ((cfg.window_fraction * cfg.symbol_period * fs).round() as usize).max(1);
    let mut prefix = Vec::with_capacity(w.len() + 1);
    prefix.push(0.0);
    for v in &w.samples {
        prefix.push(prefix[prefix.len() - 1] + v * v);
    }
    let n = w.len();
    let energy = |start: f64| -> f64 {
        if start < 0.0 {
            return 0.0;
        }
        let a = (start.round() as usize).min(n);
        let b = (a + win).min(n);
        prefix[b] - prefix[a]
    };
    let n_pre = OOK_PREAMBLE.len() as f64;
    if (n as f64) < (n_pre + 1.0) * ts {
        return Err(Error::NotFound("record shorter than the preamble"));
    }
    let max_lag = ((2.0 * ts) as usize).min(n - (n_pre * ts) as usize);
    let score = |lag: f64| -> f64 {
        let pre: f64 = OOK_PREAMBLE
            .iter()
            .enumerate()
            .map(|(k, b)| if *b == 1 { energy(lag + k as f64 * ts) } else { -energy(lag + k as f64 * ts) })
            .sum();
        pre - energy(lag - ts) - energy(lag - 2.0 * ts)
    };
    let mut best = (f64::NEG_INFINITY, 0usize);
    for lag in 0..=max_lag {
        let s = score(lag as f64);
        if s > best.0 {
            best = (s, lag);
        }
    }
    let lag = best.1 as f64;
    let n_sym = (((n as f64 - lag) / ts).floor() as usize).max(OOK_PREAMBLE.len());
    let e: Vec<f64> = (0..n_sym).map(|k| energy(lag + k as f64 * ts)).collect();
    let ones: f64 = (0..8).filter(|k| OOK_PREAMBLE[*k] == 1).map(|k| e[k]).sum::<f64>() / 4.0;
    let zeros: f64 = (0..8).filter(|k| OOK_PREAMBLE[*k] == 0).map(|k| e[k]).sum::<f64>() / 4.0;
    if !(best.0 > 0.0 && ones > 2.0 * zeros) {
        return Err(Error::NotFound("uplink preamble alignment failed"));
    }
    const TRAIL: usize = 16;
    let mut hist: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for k in 0..OOK_PREAMBLE.len() {
        hist[usize::from(OOK_PREAMBLE[k])].push(e[k]);
    }
    let mean = |v: &[f64]| v[v.len().saturating_sub(TRAIL)..].iter().sum::<f64>() / v.len().min(TRAIL) as f64;
    let fixed = 0.5 * (ones + zeros);
    let mut out = Vec::with_capacity(n_sym - 8);
    for &ek in &e[8..] {
        let thr = match policy {
            ThresholdPolicy::Fixed => fixed,
            ThresholdPolicy::Adaptive => 0.5 * (mean(&hist[0]) + mean(&hist[1])),
        };
        let b = u8::from(ek > thr);
        if policy == ThresholdPolicy::Adaptive {
            hist[usize::from(b)].push(ek);
        }
        out.push(b);
    }
    Ok(out)
}

/// Sends `payload` behind the preamble through `model` and returns the decoded payload.
pub fn simulate_uplink(
    model: &PathModel,
    payload: &[u8],
    cfg: &UplinkConfig,
    policy: ThresholdPolicy,
    sample_rate: f64,
    snr_db: Option<f64>,
    seed: u64,
    stream: u64,
) -> Result<Vec<u8>> {
    let f_hi = (3.0 * cfg.f0).min(0.45 * sample_rate);
    let f_lo = 0.25 * cfg.f0;
    let skirt = 0.125 * cfg.f0;
    let reach = model.latest_arrival(f_lo);
    let taps = (((reach.min(0.02) * 1.5) + 4.0 / skirt) * sample_rate) as usize;
    let h = impulse_response(model, sample_rate, taps.max(64), f_lo, f_hi, skirt);
    let tx = ook_modulate(&ook_frame(payload), cfg, sample_rate)?;
    let tx = tx.padded(tx.len() + (reach.min(0.02) * sample_rate) as usize + 1);
    let mut conv = BlockConvolver::new(&h);
    let mut y = Vec::with_capacity(tx.len());
    for chunk in tx.samples.chunks(conv.block_len()) {
        y.extend(conv.process(chunk));
    }
    if let Some(snr) = snr_db {
        let id = alloc::format!("{}>{}", model.paths.tx_id, model.paths.rx_id);
        crate::channel::add_noise(&mut y, snr, seed, &["uplink", &id], stream)?;
    }
    let mut bits = ook_demodulate(&Waveform::new(y, sample_rate)?, cfg, policy)?;
    if bits.len() < payload.len() {
        return Err(Error::LengthMismatch { left: payload.len(), right: bits.len() });
    }
    bits.truncate(payload.len());
    Ok(bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub n: usize,
    pub errors: usize,
    pub ber: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn ln_binom_term(n: usize, k: usize, p: f64) -> f64 {
    let (nf, kf) = (n as f64, k as f64);
    libm::lgamma(nf + 1.0) - libm::lgamma(kf + 1.0) - libm::lgamma(nf - kf + 1.0) + kf * p.ln() + (nf - kf) * (1.0 - p).ln()
}

/// P(X ≤ k) for X ~ Binomial(n, p).
pub fn binomial_cdf(n: usize, k: usize, p: f64) -> f64 {
    if k >= n || p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let terms: Vec<f64> = (0..=k).map(|i| ln_binom_term(n, i, p)).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m.exp() * terms.iter().map(|t| (t - m).exp()).sum::<f64>()).min(1.0)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided Clopper–Pearson interval at confidence 1 − alpha.
pub fn clopper_pearson(errors: usize, n: usize, alpha: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let half = alpha / 2.0;
    let low = if errors == 0 {
        0.0
    } else if errors == n {
        half.powf(1.0 / n as f64)
    } else {
        // P(X ≥ errors) = half; decreasing in p of (1 − cdf(errors − 1)) − half is increasing.
        bisect(0.0, 1.0, |p| half - (1.0 - binomial_cdf(n, errors - 1, p)))
    };
    let high = if errors == n {
        1.0
    } else if errors == 0 {
        1.0 - half.powf(1.0 / n as f64)
    } else {
        bisect(0.0, 1.0, |p| binomial_cdf(n, errors, p) - half)
    };
    (low, high)
}

pub fn measure_ber(tx: &[u8], rx: &[u8]) -> Result<BerReport> {
    if tx.len() != rx.len() {
        return Err(Error::LengthMismatch { left: tx.len(), right: rx.len() });
    }
    let n = tx.len();
    let errors = tx.iter().zip(rx).filter(|(a, b)| (**a != 0) != (**b != 0)).count();
    let (ci_low, ci_high) = clopper_pearson(errors, n, 0.05);
    Ok(BerReport { n, errors, ber: if n == 0 { 0.0 } else { errors as f64 / n as f64 }, ci_low, ci_high })
}
