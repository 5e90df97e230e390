//! Baseline-differential damage imaging: damage indices, RAPID, delay-and-sum and
//! velocity-compensated delay-and-sum with angular group-velocity calibration.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::channel;
use crate::fft;
use crate::protocol::{DataMatrix, HubCommand, ADC_OVERSAMPLE, SHM_LOAD_Q, SIM_OVERSAMPLE};
use crate::scenario::{Grid, PlateScenario};
use crate::signal::Waveform;
use crate::transceiver::{apply_lrc, synthesize_burst, LrcLoad, PulseSpec};

/// 1 − Pearson correlation of two equally sampled records; lies in [0, 2].
pub fn damage_index(b: &Waveform, c: &Waveform) -> Result<f64> {
    if b.len() != c.len() {
        return Err(Error::LengthMismatch { left: b.len(), right: c.len() });
    }
    if b.sample_rate != c.sample_rate {
        return Err(invalid("sample_rate", "records must share a sample rate"));
    }
    let n = b.len() as f64;
    let mb = b.samples.iter().sum::<f64>() / n;
    let mc = c.samples.iter().sum::<f64>() / n;
    let (mut sbc, mut sbb, mut scc) = (0.0, 0.0, 0.0);
    for (x, y) in b.samples.iter().zip(&c.samples) {
        let (dx, dy) = (x - mb, y - mc);
        sbc += dx * dy;
        sbb += dx * dx;
        scc += dy * dy;
    }
    if !(sbb > 0.0 && scc > 0.0) {
        return Err(invalid("records", "zero-variance input"));
    }
    let rho = (sbc / (sbb.sqrt() * scc.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - rho)
}

/// Baseline and current acquisitions of the same network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePair {
    pub baseline: DataMatrix,
    pub current: DataMatrix,
    /// Delay from record start to the envelope peak of the excitation.
    pub t_offset: f64,
}

impl BaselinePair {
    pub fn new(baseline: DataMatrix, current: DataMatrix, t_offset: f64) -> Result<Self> {
        if baseline.node_ids != current.node_ids {
            return Err(invalid("pair", "node ids differ between baseline and current"));
        }
        if baseline.sample_rate != current.sample_rate || baseline.f0 != current.f0 {
            return Err(invalid("pair", "sample rate or f0 differ"));
        }
        if !(t_offset >= 0.0 && t_offset.is_finite()) {
            return Err(invalid("t_offset", "must be finite and non-negative"));
        }
        Ok(Self { baseline, current, t_offset })
    }

    pub fn n(&self) -> usize {
        self.baseline.n()
    }

    /// Copy with every record zeroed from `gates[i][j]` seconds onward.
    pub fn gated(&self, gates: &[Vec<f64>]) -> Result<Self> {
        let n = self.n();
        if gates.len() != n || gates.iter().any(|r| r.len() != n) {
            return Err(Error::LengthMismatch { left: n, right: gates.len() });
        }
        let cut = |m: &DataMatrix| {
            let mut m = m.clone();
            for (i, row) in m.records.iter_mut().enumerate() {
                for (j, w) in row.iter_mut().enumerate() {
                    if let Some(w) = w.as_mut() {
                        let k = ((gates[i][j] * w.sample_rate).ceil().max(0.0) as usize).min(w.len());
                        w.samples[k..].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
            }
            m
        };
        Ok(Self { baseline: cut(&self.baseline), current: cut(&self.current), t_offset: self.t_offset })
    }

    /// current − baseline for every ordered pair recorded in both.
    pub fn residual(&self, i: usize, j: usize) -> Option<Vec<f64>> {
        let (b, c) = (self.baseline.get(i, j)?, self.current.get(i, j)?);
        if b.len() != c.len() {
            return None;
        }
        Some(c.samples.iter().zip(&b.samples).map(|(x, y)| x - y).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageIndexMatrix {
    pub node_ids: Vec<String>,
    pub di: Vec<Vec<Option<f64>>>,
}

impl DamageIndexMatrix {
    /// Symmetrized index of the unordered pair {i, j}.
    pub fn pair(&self, i: usize, j: usize) -> Option<f64> {
        match (self.di[i][j], self.di[j][i]) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            (a, b) => a.or(b),
        }
    }
}

pub fn damage_indices(pair: &BaselinePair) -> Result<DamageIndexMatrix> {
    let n = pair.n();
    let mut di = vec![vec![None; n]; n];
    for (i, row) in di.iter_mut().enumerate() {
        for (j, d) in row.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            if let (Some(b), Some(c)) = (pair.baseline.get(i, j), pair.current.get(i, j)) {
                *d = Some(damage_index(b, c)?);
            }
        }
    }
    Ok(DamageIndexMatrix { node_ids: pair.baseline.node_ids.clone(), di })
}

/// Pixel values normalized so the maximum is 1 (all zeros stay zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageMap {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub argmax: (f64, f64),
    /// Maximum before normalization.
    pub raw_max: f64,
    /// Delay lookups that fell outside the record.
    pub out_of_record: usize,
}

impl DamageMap {
    fn from_raw(grid: &Grid, raw: Vec<f64>, out_of_record: usize) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(invalid("map", "non-finite pixel value"));
        }
        let mut best = 0;
        for (k, v) in raw.iter().enumerate() {
            if *v > raw[best] {
                best = k;
            }
        }
        let raw_max = raw.get(best).copied().unwrap_or(0.0);
        let values = if raw_max > 0.0 { raw.iter().map(|v| (v / raw_max).max(0.0)).collect() } else { vec![0.0; raw.len()] };
        Ok(Self { grid: grid.clone(), values, argmax: grid.points.get(best).copied().unwrap_or((0.0, 0.0)), raw_max, out_of_record })
    }

    pub fn value_at(&self, p: (f64, f64)) -> f64 {
        self.values[self.grid.index_of(p)]
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Elliptical RAPID weight of pixel `p` for the pair (a, b).
pub fn rapid_weight(p: (f64, f64), a: (f64, f64), b: (f64, f64), beta: f64) -> f64 {
    let r = ((dist(p, a) + dist(p, b)) / dist(a, b)).max(1.0);
    ((beta - r) / (beta - 1.0)).max(0.0)
}

pub fn rapid_map(di: &DamageIndexMatrix, nodes: &[(f64, f64)], grid: &Grid, beta: f64) -> Result<DamageMap> {
    if !(beta > 1.0) {
        return Err(invalid("beta", "must exceed 1"));
    }
    let n = di.node_ids.len();
    if nodes.len() != n {
        return Err(Error::LengthMismatch { left: n, right: nodes.len() });
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if let Some(d) = di.pair(i, j) {
                if dist(nodes[i], nodes[j]) == 0.0 {
                    return Err(invalid("nodes", "coincident node pair"));
                }
                pairs.push((i, j, d));
            }
        }
    }
    let raw = grid
        .points
        .iter()
        .map(|p| pairs.iter().map(|(i, j, d)| d * rapid_weight(*p, nodes[*i], nodes[*j], beta)).sum())
        .collect();
    DamageMap::from_raw(grid, raw, 0)
}

/// Even Fourier series of the group velocity: v(θ) = Σ c_k cos(2kθ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub coefficients: Vec<f64>,
}

impl VelocityProfile {
    pub fn isotropic(v: f64) -> Self {
        Self { coefficients: vec![v] }
    }

    pub fn velocity(&self, theta: f64) -> f64 {
        self.coefficients.iter().enumerate().map(|(k, c)| c * (2.0 * k as f64 * theta).cos()).sum()
    }

    pub fn is_isotropic(&self) -> bool {
        self.coefficients.iter().skip(1).all(|c| *c == 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.coefficients.first().copied().unwrap_or(0.0)
    }

    pub fn check(&self) -> Result<()> {
        if self.coefficients.is_empty() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(invalid("profile", "needs finite coefficients"));
        }
        let min = (0..3600).map(|i| self.velocity(PI * i as f64 / 3600.0)).fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(invalid("profile", "velocity must stay positive at every angle"));
        }
        Ok(())
    }
}

fn delay(profile: &VelocityProfile, a: (f64, f64), p: (f64, f64), b: (f64, f64)) -> f64 {
    let (d1, d2) = (dist(a, p), dist(p, b));
    if profile.is_isotropic() {
        return (d1 + d2) / profile.mean();
    }
    let t1 = (p.1 - a.1).atan2(p.0 - a.0);
    let t2 = (b.1 - p.1).atan2(b.0 - p.0);
    d1 / profile.velocity(t1) + d2 / profile.velocity(t2)
}

fn interp(env: &[f64], x: f64) -> Option<f64> {
    if !(x >= 0.0) {
        return None;
    }
    let i = x.floor() as usize;
    if i + 1 >= env.len() {
        return (i + 1 == env.len() && x == i as f64).then(|| env[i]);
    }
    let f = x - i as f64;
    Some(env[i] * (1.0 - f) + env[i + 1] * f)
}

fn das_core(pair: &BaselinePair, nodes: &[(f64, f64)], grid: &Grid, profile: &VelocityProfile) -> Result<DamageMap> {
    let n = pair.n();
    if nodes.len() != n {
        return Err(Error::LengthMismatch { left: n, right: nodes.len() });
    }
    let fs = pair.baseline.sample_rate;
    let mut envs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if let Some(r) = pair.residual(i, j) {
                    envs.push((i, j, fft::envelope(&r)));
                }
            }
        }
    }
    let mut outside = 0;
    let mut raw = Vec::with_capacity(grid.len());
    for p in &grid.points {
        let mut acc = 0.0;
        for (i, j, env) in &envs {
            let t = pair.t_offset + delay(profile, nodes[*i], *p, nodes[*j]);
            match interp(env, t * fs) {
                Some(v) => acc += v,
                None => outside += 1,
            }
        }
        raw.push(acc);
    }
    DamageMap::from_raw(grid, raw, outside)
}

pub fn das_map(pair: &BaselinePair, nodes: &[(f64, f64)], grid: &Grid, v_g: f64) -> Result<DamageMap> {
    if !(v_g > 0.0 && v_g.is_finite()) {
        return Err(invalid("v_g", "must be positive"));
    }
    das_core(pair, nodes, grid, &VelocityProfile::isotropic(v_g))
}

pub fn das_map_compensated(pair: &BaselinePair, nodes: &[(f64, f64)], grid: &Grid, profile: &VelocityProfile) -> Result<DamageMap> {
    profile.check()?;
    das_core(pair, nodes, grid, profile)
}

const TOF_UPSAMPLE: usize = 16;
const FIRST_ARRIVAL_FRACTION: f64 = 0.3;

/// First-arrival time of flight from the earliest envelope peak inside [0.8, 1.5]·d/v_nominal.
pub fn time_of_flight(record: &Waveform, d: f64, v_nominal: f64, t_offset: f64) -> Result<f64> {
    let env = fft::envelope_upsampled(&record.samples, TOF_UPSAMPLE);
    let rate = record.sample_rate * TOF_UPSAMPLE as f64;
    let lo = ((t_offset + 0.8 * d / v_nominal) * rate).floor() as usize;
    let hi = (((t_offset + 1.5 * d / v_nominal) * rate).ceil() as usize).min(env.len().saturating_sub(1));
    if lo >= hi {
        return Err(Error::NotFound("arrival window lies outside the record"));
    }
    let top = env[lo..=hi].iter().fold(0.0f64, |m, v| m.max(*v));
    if !(top > 0.0) {
        return Err(Error::NotFound("no arrival inside the window"));
    }
    // Earliest local peak reaching 30% of the window maximum.
    let k = (lo..=hi)
        .find(|&i| {
            env[i] >= FIRST_ARRIVAL_FRACTION * top
                && (i == 0 || env[i] >= env[i - 1])
                && env.get(i + 1).map_or(true, |n| env[i] > *n)
        })
        .unwrap_or(lo);
    let mut t = k as f64;
    if k > 0 && k + 1 < env.len() {
        let (a, b, c) = (env[k - 1], env[k], env[k + 1]);
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            t += 0.5 * (a - c) / den;
        }
    }
    Ok(t / rate - t_offset)
}

/// Least-squares fit of v(θ) = c0 + c2·cos2θ + c4·cos4θ to per-pair velocities.
pub fn calibrate_group_velocity(records: &DataMatrix, nodes: &[(f64, f64)], v_nominal: f64, t_offset: f64) -> Result<VelocityProfile> {
    let n = records.n();
    if nodes.len() != n {
        return Err(Error::LengthMismatch { left: n, right: nodes.len() });
    }
    let mut rows = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (nodes[i], nodes[j]);
            let d = dist(a, b);
            let mut tofs = Vec::new();
            for w in [records.get(i, j), records.get(j, i)].into_iter().flatten() {
                tofs.push(time_of_flight(w, d, v_nominal, t_offset)?);
            }
            if tofs.is_empty() || d == 0.0 {
                continue;
            }
            let tof = tofs.iter().sum::<f64>() / tofs.len() as f64;
            let theta = (b.1 - a.1).atan2(b.0 - a.0);
            rows.push((theta, d / tof));
        }
    }
    let mut angles: Vec<f64> = rows.iter().map(|(t, _)| t.rem_euclid_pi()).collect();
    angles.sort_by(f64::total_cmp);
    let distinct = angles.windows(2).filter(|w| w[1] - w[0] > 1e-3).count() + usize::from(!angles.is_empty());
    let wraps = angles.len() > 1 && angles[0] + PI - angles[angles.len() - 1] <= 1e-3;
    if rows.len() < 4 || distinct - usize::from(wraps) < 3 {
        return Err(invalid("records", "need at least 4 pairs spanning 3 distinct angles"));
    }
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (theta, v) in &rows {
        let x = [1.0, (2.0 * theta).cos(), (4.0 * theta).cos()];
        for r in 0..3 {
            atb[r] += x[r] * v;
            for c in 0..3 {
                ata[r][c] += x[r] * x[c];
            }
        }
    }
    let coef = solve3(ata, atb).ok_or_else(|| invalid("records", "angular samples do not determine the fit"))?;
    Ok(VelocityProfile { coefficients: coef.to_vec() })
}

trait RemPi {
    fn rem_euclid_pi(self) -> f64;
}

impl RemPi for f64 {
    fn rem_euclid_pi(self) -> f64 {
        let r = self % PI;
        if r < 0.0 {
            r + PI
        } else {
            r
        }
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let piv = (col..3).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub argmax: (f64, f64),
    pub error_m: Option<f64>,
}

pub fn localize(map: &DamageMap, truth: Option<(f64, f64)>) -> Result<Localization> {
    if !(map.raw_max > 0.0) {
        return Err(Error::NotFound("damage map is identically zero"));
    }
    Ok(Localization { argmax: map.argmax, error_m: truth.map(|t| dist(t, map.argmax)) })
}

/// Per-pair time before which no edge-reflected arrival reaches the receiver:
/// t_offset + min over one-bounce paths of length / v_g(θ), less `guard` seconds.
pub fn direct_arrival_gates(s: &PlateScenario, ids: &[String], f0: f64, t_offset: f64, guard: f64) -> Result<Vec<Vec<f64>>> {
    let mut one = s.clone();
    one.reflection_order = one.reflection_order.max(1);
    one.damages.clear();
    let mode = s.network.shm_mode;
    let mut gates = vec![vec![f64::INFINITY; ids.len()]; ids.len()];
    for (i, tx) in ids.iter().enumerate() {
        for (j, rx) in ids.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut t = f64::INFINITY;
            for p in channel::enumerate_paths(&one, tx, rx)?.paths.iter().filter(|p| p.reflection_count == 1) {
                t = t.min(p.length / channel::group_velocity(&s.material, f0, p.angle_tx, mode)?);
            }
            gates[i][j] = t_offset + t - guard;
        }
    }
    Ok(gates)
}

/// Positions of the matrix nodes in matrix order.
pub fn node_positions(s: &PlateScenario, ids: &[String]) -> Result<Vec<(f64, f64)>> {
    ids.iter().map(|id| s.node(id).map(|n| n.position)).collect()
}

/// Envelope-peak delay of the drive burst as shaped by the transmitter's tuned load
/// and band-limited like an acquired record.
pub fn excitation_delay(s: &PlateScenario, tx: &str, cmd: &HubCommand) -> Result<f64> {
    cmd.check()?;
    let fs = SIM_OVERSAMPLE * cmd.f0;
    let spec = PulseSpec { n_cycles: cmd.n_cycles, ..PulseSpec::new(cmd.f0) };
    let burst = synthesize_burst(&spec, fs)?;
    let load = LrcLoad::tuned(cmd.f0, s.node(tx)?.transducer.capacitance, SHM_LOAD_Q);
    let drive = apply_lrc(&burst, &load)?;
    let cutoff = 0.45 * ADC_OVERSAMPLE * cmd.f0;
    let x = channel::apply_response(&drive, |f| Complex64::new(if f < cutoff { 1.0 } else { 0.0 }, 0.0));
    let env = fft::envelope_upsampled(&x, 4);
    let k = (0..env.len()).fold(0, |b, i| if env[i] > env[b] { i } else { b });
    Ok(k as f64 / (4.0 * fs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;

    const FS: f64 = 1e6;
    const F0: f64 = 100e3;

    fn tone(n: usize, centre: f64, amp: f64) -> Vec<f64> {
        let sigma = 20e-6;
        (0..n)
            .map(|i| {
                let t = i as f64 / FS;
                amp * (-0.5 * ((t - centre) / sigma).powi(2)).exp() * (2.0 * PI * F0 * (t - centre)).cos()
            })
            .collect()
    }

    fn matrix(n: usize, rec: impl Fn(usize, usize) -> Vec<f64>) -> DataMatrix {
        let records = (0..n)
            .map(|i| (0..n).map(|j| (i != j).then(|| Waveform::new(rec(i, j), FS).unwrap())).collect())
            .collect();
        DataMatrix { node_ids: (0..n).map(|i| format!("n{i}")).collect(), records, f0: F0, sample_rate: FS, timestamps: vec![0.0; n] }
    }

    fn grid(w: f64, h: f64, res: f64) -> Grid {
        let s = PlateScenario { width: w, height: h, ..PlateScenario::testbed() };
        crate::scenario::spatial_grid(&s, res).unwrap()
    }

    fn ring(n: usize, c: (f64, f64), r: f64) -> Vec<(f64, f64)> {
        (0..n).map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64 + 0.1;
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        }).collect()
    }

    #[test]
    fn di_reference_values() {
        let a = Waveform::new(tone(400, 100e-6, 1.0), FS).unwrap();
        assert!(damage_index(&a, &a).unwrap().abs() < 1e-12);
        assert!((damage_index(&a, &a.scaled(-3.0)).unwrap() - 2.0).abs() < 1e-12);
        assert!(damage_index(&a, &a.scaled(7.0)).unwrap().abs() < 1e-12);
        let flat = Waveform::new(vec![1.0; 400], FS).unwrap();
        assert!(damage_index(&a, &flat).is_err());
        let short = Waveform::new(vec![1.0; 10], FS).unwrap();
        assert!(damage_index(&a, &short).is_err());
    }

    #[test]
    fn rapid_weight_shape() {
        let (a, b) = ((0.0, 0.0), (1.0, 0.0));
        assert_eq!(rapid_weight((0.3, 0.0), a, b, 1.05), 1.0);
        assert_eq!(rapid_weight((0.5, 0.5), a, b, 1.05), 0.0);
        let w = rapid_weight((0.5, 0.05), a, b, 1.05);
        assert!(w > 0.0 && w < 1.0);
    }

    #[test]
    fn rapid_peaks_on_damaged_path() {
        let nodes = [(0.1, 0.1), (0.9, 0.1), (0.9, 0.9), (0.1, 0.9)];
        let mut di = vec![vec![Some(0.01); 4]; 4];
        di[0][2] = Some(0.5);
        di[2][0] = Some(0.5);
        di[1][3] = Some(0.5);
        di[3][1] = Some(0.5);
        let m = DamageIndexMatrix { node_ids: (0..4).map(|i| i.to_string()).collect(), di };
        let map = rapid_map(&m, &nodes, &grid(1.0, 1.0, 0.02), 1.05).unwrap();
        assert!(dist(map.argmax, (0.5, 0.5)) < 0.03);
        assert!(rapid_map(&m, &nodes, &grid(1.0, 1.0, 0.02), 1.0).is_err());
        let same = [(0.1, 0.1), (0.1, 0.1), (0.9, 0.9), (0.1, 0.9)];
        assert!(rapid_map(&m, &same, &grid(1.0, 1.0, 0.02), 1.05).is_err());
    }

    fn scatter_pair(nodes: &[(f64, f64)], target: (f64, f64), v: impl Fn(f64) -> f64, t_off: f64) -> BaselinePair {
        let n = nodes.len();
        let base = matrix(n, |i, j| tone(1200, t_off + dist(nodes[i], nodes[j]) / v(0.0), 1.0));
        let cur = matrix(n, |i, j| {
            let (a, b) = (nodes[i], nodes[j]);
            let t1 = (target.1 - a.1).atan2(target.0 - a.0);
            let t2 = (b.1 - target.1).atan2(b.0 - target.0);
            let t = t_off + dist(a, target) / v(t1) + dist(target, b) / v(t2);
            let mut x = tone(1200, t_off + dist(a, b) / v(0.0), 1.0);
            for (x, y) in x.iter_mut().zip(tone(1200, t, 0.2)) {
                *x += y;
            }
            x
        });
        BaselinePair::new(base, cur, t_off).unwrap()
    }

    #[test]
    fn das_finds_forward_model_scatterer() {
        let nodes = ring(6, (0.5, 0.5), 0.4);
        let target = (0.37, 0.61);
        let pair = scatter_pair(&nodes, target, |_| 5000.0, 30e-6);
        let g = grid(1.0, 1.0, 0.01);
        let map = das_map(&pair, &nodes, &g, 5000.0).unwrap();
        assert!((map.argmax.0 - target.0).abs() <= g.dx && (map.argmax.1 - target.1).abs() <= g.dy, "{:?}", map.argmax);
        let iso = das_map_compensated(&pair, &nodes, &g, &VelocityProfile::isotropic(5000.0)).unwrap();
        assert_eq!(iso, map);
        assert!(localize(&map, Some(target)).unwrap().error_m.unwrap() < 0.015);
    }

    #[test]
    fn compensation_helps_under_anisotropy() {
        let nodes = ring(6, (0.5, 0.5), 0.4);
        let target = (0.62, 0.36);
        let prof = VelocityProfile { coefficients: vec![5000.0, 1000.0] };
        let pair = scatter_pair(&nodes, target, |t| prof.velocity(t), 30e-6);
        let g = grid(1.0, 1.0, 0.01);
        let plain = localize(&das_map(&pair, &nodes, &g, 5000.0).unwrap(), Some(target)).unwrap();
        let comp = localize(&das_map_compensated(&pair, &nodes, &g, &prof).unwrap(), Some(target)).unwrap();
        assert!(comp.error_m.unwrap() <= plain.error_m.unwrap());
        assert!(comp.error_m.unwrap() < 0.015);
    }

    #[test]
    fn zero_map_is_not_localized() {
        let nodes = ring(4, (0.5, 0.5), 0.4);
        let m = matrix(4, |i, j| tone(1200, 30e-6 + dist(nodes[i], nodes[j]) / 5000.0, 1.0));
        let pair = BaselinePair::new(m.clone(), m, 30e-6).unwrap();
        let map = das_map(&pair, &nodes, &grid(1.0, 1.0, 0.05), 5000.0).unwrap();
        assert!(map.values.iter().all(|v| *v == 0.0));
        assert!(localize(&map, None).is_err());
    }

    fn direct(nodes: &[(f64, f64)], v: impl Fn(f64) -> f64) -> DataMatrix {
        matrix(nodes.len(), |i, j| {
            let (a, b) = (nodes[i], nodes[j]);
            tone(1200, 30e-6 + dist(a, b) / v((b.1 - a.1).atan2(b.0 - a.0)), 1.0)
        })
    }

    #[test]
    fn calibration_isotropic() {
        let nodes = ring(6, (0.5, 0.5), 0.4);
        let p = calibrate_group_velocity(&direct(&nodes, |_| 5000.0), &nodes, 5000.0, 30e-6).unwrap();
        let c0 = p.coefficients[0];
        assert!((c0 - 5000.0).abs() < 0.02 * 5000.0);
        assert!(p.coefficients[1].abs() < 0.02 * c0 && p.coefficients[2].abs() < 0.02 * c0, "{p:?}");
    }

    #[test]
    fn calibration_recovers_cos2() {
        let nodes = ring(7, (0.5, 0.5), 0.4);
        let v = |t: f64| 5000.0 * (1.0 + 0.2 * (2.0 * t).cos());
        let p = calibrate_group_velocity(&direct(&nodes, v), &nodes, 5000.0, 30e-6).unwrap();
        assert!((p.coefficients[1] - 1000.0).abs() < 100.0, "{p:?}");
    }

    #[test]
    fn calibration_needs_angular_spread() {
        let nodes = [(0.1, 0.5), (0.4, 0.5), (0.7, 0.5), (0.95, 0.5)];
        assert!(calibrate_group_velocity(&direct(&nodes, |_| 5000.0), &nodes, 5000.0, 30e-6).is_err());
    }

    #[test]
    fn excitation_delay_near_burst_centre() {
        let s = crate::scenario::PlateScenario::testbed();
        let cmd = HubCommand::new(0, 200e3);
        let d = excitation_delay(&s, &s.nodes[0].id, &cmd).unwrap();
        let half = 0.5 * cmd.n_cycles as f64 / cmd.f0;
        assert!(d > 0.8 * half && d < half + 20e-6, "{d}");
    }

    #[test]
    fn wrong_anisotropy_sign_is_no_better() {
        let nodes = ring(6, (0.5, 0.5), 0.4);
        let target = (0.62, 0.36);
        let prof = VelocityProfile { coefficients: vec![5000.0, 1000.0] };
        let pair = scatter_pair(&nodes, target, |t| prof.velocity(t), 30e-6);
        let g = grid(1.0, 1.0, 0.01);
        let wrong = VelocityProfile { coefficients: vec![5000.0, -1000.0] };
        let iso = localize(&das_map(&pair, &nodes, &g, 5000.0).unwrap(), Some(target)).unwrap();
        let bad = localize(&das_map_compensated(&pair, &nodes, &g, &wrong).unwrap(), Some(target)).unwrap();
        assert!(bad.error_m.unwrap() >= iso.error_m.unwrap());
    }

    #[test]
    fn rapid_is_weak_outside_hull() {
        let nodes = [(0.3, 0.3), (0.7, 0.3), (0.7, 0.7), (0.3, 0.7)];
        let g = grid(1.0, 1.0, 0.01);
        let di_for = |p: (f64, f64)| {
            let mut di = vec![vec![None; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        di[i][j] = Some(rapid_weight(p, nodes[i], nodes[j], 1.3));
                    }
                }
            }
            DamageIndexMatrix { node_ids: (0..4).map(|i| i.to_string()).collect(), di }
        };
        let raw = |p| rapid_map(&di_for(p), &nodes, &g, 1.05).unwrap().raw_max;
        assert!(raw((0.9, 0.5)) < raw((0.45, 0.55)));
    }

    #[test]
    fn gating_removes_late_residual() {
        let nodes = ring(4, (0.5, 0.5), 0.4);
        let base = matrix(4, |_, _| tone(1200, 100e-6, 1.0));
        let cur = matrix(4, |_, _| {
            let mut x = tone(1200, 100e-6, 1.0);
            for (x, y) in x.iter_mut().zip(tone(1200, 600e-6, 0.3)) {
                *x += y;
            }
            x
        });
        let pair = BaselinePair::new(base, cur, 0.0).unwrap();
        let gates = vec![vec![400e-6; 4]; 4];
        let g = pair.gated(&gates).unwrap();
        assert!(g.residual(0, 1).unwrap().iter().all(|v| v.abs() < 1e-12));
        let map = das_map(&g, &nodes, &grid(1.0, 1.0, 0.05), 5000.0).unwrap();
        assert!(map.raw_max < 1e-15);
        assert!(pair.gated(&gates[..2]).is_err());
    }

    #[test]
    fn testbed_gates_precede_first_reflection() {
        let s = PlateScenario::testbed();
        let ids: Vec<String> = ["n1", "n4"].iter().map(|x| x.to_string()).collect();
        let g = direct_arrival_gates(&s, &ids, 400e3, 0.0, 0.0).unwrap();
        let d = 0.17f64.hypot(0.17);
        let r1 = 0.29f64.hypot(0.17);
        assert!((g[0][1] - r1 / 6000.0).abs() < 1e-12, "{}", g[0][1]);
        assert!(g[0][1] > d / 6000.0);
        assert!((g[0][1] - g[1][0]).abs() < 1e-15);
    }
}
