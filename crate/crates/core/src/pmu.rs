//! Behavioral power chain: bias-flip rectifier, dual-path boost/buck converter with MPPT
//! and ZCS loops, and PFM switched-capacitor level converters.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasFlipConfig {
    pub l_flip: f64,
    /// Fraction of the per-half-cycle C_P charging loss recovered by the flip.
    pub flip_efficiency: f64,
    pub t_bp_code: u8,
}

impl Default for BiasFlipConfig {
    fn default() -> Self {
        Self { l_flip: 8.2e-6, flip_efficiency: 0.8, t_bp_code: 64 }
    }
}

/// Pulse-width LSB of the bias-flip timer.
pub const T_BP_LSB: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifierModel {
    /// Open-circuit amplitude of the transducer voltage.
    pub v_p: f64,
    pub f_in: f64,
    pub c_p: f64,
    /// Series on-resistance of the active switches, ohms.
    pub conduction_loss_coeff: f64,
    /// Switching and comparator energy per cycle per volt², J/V².
    pub dynamic_loss_coeff: f64,
    pub bias_flip: Option<BiasFlipConfig>,
}

impl RectifierModel {
    pub fn new(v_p: f64, f_in: f64) -> Self {
        Self {
            v_p,
            f_in,
            c_p: 100e-12,
            conduction_loss_coeff: 200.0,
            dynamic_loss_coeff: 2e-11,
            bias_flip: Some(BiasFlipConfig::default()),
        }
    }

    pub fn ideal(v_p: f64, f_in: f64) -> Self {
        Self { conduction_loss_coeff: 0.0, dynamic_loss_coeff: 0.0, bias_flip: None, ..Self::new(v_p, f_in) }
    }
}

/// Below this output the comparators are unpowered and the parasitic diode bridge conducts.
pub const COLD_START_VOLTAGE: f64 = 0.8;
pub const DIODE_DROP: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RectifierPath {
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifierOutput {
    pub v_rect: f64,
    pub p_out: f64,
    /// p_out over power entering the rectifier terminals.
    pub pce: f64,
    /// v_rect over the AC amplitude at the rectifier terminals.
    pub vcr: f64,
    pub v_ac: f64,
    pub p_conduction: f64,
    pub p_dynamic: f64,
    /// Power spent re-charging C_P each half cycle, not drawn through the rectifier.
    pub p_cp_loss: f64,
    pub path: RectifierPath,
    pub energy_out: f64,
}

/// Load resistance maximizing output of a flip-less ideal rectifier, 1/(4·f·C_P).
pub fn matched_load(f_in: f64, c_p: f64) -> f64 {
    1.0 / (4.0 * f_in * c_p)
}

/// Steady-state, cycle-averaged rectifier operating point.
///
/// The transducer is a current source 2π·f·C_P·V_P in parallel with C_P. Each half cycle
/// 2·C_P·V_P of charge is available, of which 2·C_P·V_ac·(1 − η_flip) re-charges C_P.
pub fn rectify(model: &RectifierModel, r_l: f64, duration: f64) -> Result<RectifierOutput> {
    if !(r_l > 0.0) {
        return Err(invalid("r_l", "load must be positive"));
    }
    if !(model.f_in > 0.0 && model.c_p > 0.0 && model.v_p >= 0.0) {
        return Err(invalid("model", "f_in, C_P > 0 and V_P >= 0 required"));
    }
    if model.conduction_loss_coeff < 0.0 || model.dynamic_loss_coeff < 0.0 {
        return Err(invalid("model", "loss coefficients must be >= 0"));
    }
    if duration * model.f_in < 10.0 {
        return Err(invalid("duration", "at least 10 AC cycles"));
    }
    let f = model.f_in;
    let g = 4.0 * f * model.c_p;
    let rc = model.conduction_loss_coeff;
    let eta = model.bias_flip.map_or(0.0, |b| b.flip_efficiency.clamp(0.0, 1.0));
    let k = model.dynamic_loss_coeff * f;
    let i = g * model.v_p / (1.0 + (g * (1.0 - eta) + k) * (r_l + rc));
    let v_rect = i * r_l;
    let active = if v_rect >= COLD_START_VOLTAGE || model.v_p == 0.0 {
        let v_ac = v_rect + rc * i;
        let p_out = v_rect * i;
        let p_cond = rc * i * i;
        let p_dyn = k * v_ac * v_ac;
        let total = p_out + p_cond + p_dyn;
        RectifierOutput {
            v_rect,
            p_out,
            pce: if total > 0.0 { p_out / total } else { 1.0 },
            vcr: if v_ac > 0.0 { v_rect / v_ac } else { 1.0 },
            v_ac,
            p_conduction: p_cond,
            p_dynamic: p_dyn,
            p_cp_loss: g * (1.0 - eta) * v_ac * v_ac,
            path: RectifierPath::Active,
            energy_out: p_out * duration,
        }
    } else {
        let drop = 2.0 * DIODE_DROP;
        let i = (g * (model.v_p - drop) / (1.0 + g * r_l)).max(0.0);
        let v_rect = i * r_l;
        let v_ac = v_rect + drop;
        let p_out = v_rect * i;
        let p_cond = drop * i;
        RectifierOutput {
            v_rect,
            p_out,
            pce: if p_out + p_cond > 0.0 { p_out / (p_out + p_cond) } else { 0.0 },
            vcr: v_rect / v_ac,
            v_ac,
            p_conduction: p_cond,
            p_dynamic: 0.0,
            p_cp_loss: g * v_ac * v_ac,
            path: RectifierPath::Passive,
            energy_out: p_out * duration,
        }
    };
    Ok(active)
}

/// Half-period of the L_flip–C_P resonance, the ideal flip pulse width.
pub fn optimal_flip_time(cfg: &BiasFlipConfig, c_p: f64) -> f64 {
    PI * (cfg.l_flip * c_p).sqrt()
}

/// Inductor current at the end of a flip pulse of width `t_bp`, for unit peak current.
pub fn flip_end_current(cfg: &BiasFlipConfig, c_p: f64, t_bp: f64) -> f64 {
    (PI * t_bp / optimal_flip_time(cfg, c_p)).sin()
}

/// Steps the 8-bit pulse-width code once per zero crossing of `i_p`.
///
/// Forward inductor current left at the end of the pulse means the flip was cut short;
/// reverse conduction means it overran. Within half an LSB of the half period the code holds.
pub fn bias_flip_timing(cfg: &BiasFlipConfig, c_p: f64, i_p: &Waveform) -> u8 {
    let t_opt = optimal_flip_time(cfg, c_p);
    let crossings = i_p.samples.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    let mut code = cfg.t_bp_code;
    for _ in 0..crossings {
        let t = f64::from(code) * T_BP_LSB;
        if (t - t_opt).abs() <= 0.5 * T_BP_LSB {
            continue;
        }
        let forward = t < t_opt;
        code = if forward { code.saturating_add(1) } else { code.saturating_sub(1) };
    }
    code
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub s23_hi: f64,
    pub s23_lo: f64,
    pub s12_hi: f64,
    pub s12_lo: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { s23_hi: 2.1, s23_lo: 1.9, s12_hi: 1.8, s12_lo: 1.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcDcConfig {
    pub l_dc: f64,
    pub f_s: f64,
    pub thresholds: Thresholds,
    pub v_h: f64,
    pub v_stor_nom: f64,
    pub v_load_nom: f64,
    pub t1_code: u8,
    pub t2_lc_code: u8,
    pub t2_cc_code: u8,
    pub mppt_enabled: bool,
    /// Load-path (boost) efficiency η₁.
    pub eta1: f64,
    /// Storage-to-load (buck) efficiency η₂.
    pub eta2: f64,
    /// Power the buck converter can deliver to the load in state 1.
    pub bc_max_power: f64,
    /// Lowest storage voltage the buck converter can draw from.
    pub v_stor_min: f64,
    /// Open-circuit samples are taken once per this many switching cycles.
    pub mppt_period: u32,
}

impl Default for DcDcConfig {
    fn default() -> Self {
        Self {
            l_dc: 100e-6,
            f_s: 50e3,
            thresholds: Thresholds::default(),
            v_h: 0.2,
            v_stor_nom: 3.3,
            v_load_nom: 2.0,
            t1_code: 19,
            t2_lc_code: 20,
            t2_cc_code: 20,
            mppt_enabled: true,
            eta1: 0.7,
            eta2: 0.78,
            bc_max_power: 5e-3,
            v_stor_min: 0.8,
            mppt_period: 64,
        }
    }
}

/// Boost on-time LSB of the 6-bit t₁ register; t₁ = (code + 1)·LSB.
pub const T1_LSB: f64 = 0.1e-6;
/// LSB of the 6-bit t₂ registers; t₂ = code·LSB.
pub const T2_LSB: f64 = 50e-9;
pub const CODE6_MAX: u8 = 63;

pub fn t1_from_code(code: u8) -> f64 {
    f64::from(code.min(CODE6_MAX) + 1) * T1_LSB
}

pub fn t2_from_code(code: u8) -> f64 {
    f64::from(code.min(CODE6_MAX)) * T2_LSB
}

impl DcDcConfig {
    pub fn check(&self) -> Result<()> {
        let t = &self.thresholds;
        let tol = 1e-12;
        if ((t.s23_hi - t.s23_lo) - self.v_h).abs() > tol || ((t.s12_hi - t.s12_lo) - self.v_h).abs() > tol {
            return Err(invalid("thresholds", "hysteresis windows must equal V_H"));
        }
        if self.t1_code > CODE6_MAX || self.t2_lc_code > CODE6_MAX || self.t2_cc_code > CODE6_MAX {
            return Err(invalid("codes", "6-bit registers"));
        }
        if !(self.l_dc > 0.0 && self.f_s > 0.0) {
            return Err(invalid("l_dc", "L_DC and f_s must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta1) || !(0.0..=1.0).contains(&self.eta2) {
            return Err(invalid("eta", "efficiencies in [0, 1]"));
        }
        Ok(())
    }
}

/// R_IN = 2·L/(t₁²·f_s)·(1 + t₂/t₁)⁻¹ for a boost converter in DCM.
pub fn input_impedance(cfg: &DcDcConfig, t1: f64, t2: f64) -> Result<f64> {
    if !(t1 > 0.0 && t2 >= 0.0) {
        return Err(invalid("t1", "t1 > 0 and t2 >= 0 required"));
    }
    if (t1 + t2) * cfg.f_s > 1.0 {
        return Err(invalid("t1", "timing exceeds switching period"));
    }
    Ok(2.0 * cfg.l_dc / (t1 * t1 * cfg.f_s) / (1.0 + t2 / t1))
}

/// Harmonic-mean input impedance of the time-shared load and charging converters sharing t₁.
pub fn average_input_impedance(cfg: &DcDcConfig, alpha: f64, t1: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("alpha", "must lie in [0, 1]"));
    }
    let r_lc = input_impedance(cfg, t1, 0.0)?;
    let r_cc = input_impedance(cfg, t1, 0.0)?;
    Ok(1.0 / (alpha / r_lc + (1.0 - alpha) / r_cc))
}

/// Inductor current over one switching period in DCM, sampled every `dt`.
pub fn inductor_current(v_in: f64, v_out: f64, t1: f64, t2: f64, l: f64, f_s: f64, dt: f64) -> Vec<f64> {
    let n = (1.0 / (f_s * dt)).round() as usize;
    let i_pk = v_in * t1 / l;
    let fall = (v_out - v_in) / l;
    (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt;
            if t < t1 {
                v_in * t / l
            } else if t < t1 + t2 {
                (i_pk - fall * (t - t1)).max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// End-of-Φ₂ inductor current for a boost from `v_in` to `v_out`.
pub fn inductor_end_current(v_in: f64, v_out: f64, t1: f64, t2: f64, l: f64) -> f64 {
    (v_in * t1 - (v_out - v_in) * t2) / l
}

pub fn end_to_end_pce(eta1: f64, eta2: f64, alpha: f64) -> f64 {
    eta1 * alpha + eta1 * eta2 * (1.0 - alpha)
}

/// Converter state: 1 storage→load backup, 2 harvest→load, 3 harvest→storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConverterState {
    Backup = 1,
    Load = 2,
    Charge = 3,
}

impl ConverterState {
    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Cumulative energy accounting, joules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub e_in: f64,
    pub e_load: f64,
    /// Net change of energy held on C_STOR and C_LOAD.
    pub e_stor: f64,
    pub e_loss: f64,
    /// Harvest delivered straight to the load capacitor.
    pub e_lc: f64,
    /// Harvest delivered to storage.
    pub e_cc: f64,
    /// Energy the buck converter moved from storage to the load.
    pub e_bc: f64,
}

impl EnergyLedger {
    pub fn residual(&self) -> f64 {
        self.e_in - self.e_load - self.e_stor - self.e_loss
    }

    /// End-to-end efficiency from the ledger, crediting stored energy at η₂.
    pub fn eta_tot(&self, eta2: f64) -> f64 {
        if self.e_in > 0.0 {
            (self.e_lc + eta2 * self.e_cc) / self.e_in
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmuState {
    pub state: ConverterState,
    pub v_rect: f64,
    pub v_stor: f64,
    pub v_load: f64,
    pub c_rect: f64,
    pub c_stor: f64,
    pub c_load: f64,
    pub ledger: EnergyLedger,
    pub eta1: f64,
    pub eta2: f64,
    pub cycles: u64,
    pub cycles_state: [u64; 3],
    pub transitions: u64,
    pub t1_code: u8,
    pub t2_lc_code: u8,
    pub t2_cc_code: u8,
    pub converter_enabled: bool,
}

impl PmuState {
    pub fn new(cfg: &DcDcConfig, v_stor: f64, v_load: f64) -> Self {
        Self {
            state: ConverterState::Load,
            v_rect: 0.0,
            v_stor,
            v_load,
            c_rect: 10e-6,
            c_stor: 11e-3,
            c_load: 22e-6,
            ledger: EnergyLedger::default(),
            eta1: cfg.eta1,
            eta2: cfg.eta2,
            cycles: 0,
            cycles_state: [0; 3],
            transitions: 0,
            t1_code: cfg.t1_code,
            t2_lc_code: cfg.t2_lc_code,
            t2_cc_code: cfg.t2_cc_code,
            converter_enabled: true,
        }
    }

    /// Fraction of switching cycles spent in state 2.
    pub fn alpha(&self) -> f64 {
        if self.cycles == 0 {
            1.0
        } else {
            self.cycles_state[1] as f64 / self.cycles as f64
        }
    }

    pub fn stored_energy(&self) -> f64 {
        0.5 * self.c_stor * self.v_stor * self.v_stor + 0.5 * self.c_load * self.v_load * self.v_load
    }

    /// Energy available above the load floor on C_LOAD plus usable storage.
    pub fn reserve(&self, cfg: &DcDcConfig) -> f64 {
        let lo = cfg.thresholds.s12_lo;
        let load = 0.5 * self.c_load * (self.v_load * self.v_load - lo * lo).max(0.0);
        let stor = 0.5 * self.c_stor * (self.v_stor * self.v_stor - cfg.v_stor_min * cfg.v_stor_min).max(0.0);
        load + stor * self.eta2
    }
}

fn next_state(s: ConverterState, v: f64, t: &Thresholds) -> ConverterState {
    use ConverterState::*;
    match s {
        Load if v >= t.s23_hi => Charge,
        Load if v <= t.s12_lo => Backup,
        Charge if v <= t.s12_lo => Backup,
        Charge if v <= t.s23_lo => Load,
        Backup if v >= t.s12_hi => Load,
        other => other,
    }
}

/// Advances one switching period 1/f_s.
pub fn dcdc_step(state: &PmuState, cfg: &DcDcConfig, p_harvest: f64, i_load: f64) -> PmuState {
    let mut s = state.clone();
    let next = next_state(s.state, s.v_load, &cfg.thresholds);
    if next != s.state {
        s.transitions += 1;
        s.state = next;
    }
    let t = 1.0 / cfg.f_s;
    let mut e_load_cap = 0.5 * s.c_load * s.v_load * s.v_load;
    let mut e_stor_cap = 0.5 * s.c_stor * s.v_stor * s.v_stor;
    let before = e_load_cap + e_stor_cap;
    let avail = if s.converter_enabled { p_harvest.max(0.0) * t } else { 0.0 };
    let stor_full = s.v_stor >= cfg.v_stor_nom;
    let (mut e_in, mut to_load, mut to_stor, mut e_bc, mut from_stor) = (0.0, 0.0, 0.0, 0.0, 0.0);
    match s.state {
        ConverterState::Load => {
            e_in = avail;
            to_load = avail * s.eta1;
        }
        ConverterState::Charge => {
            if !stor_full {
                e_in = avail;
                to_stor = avail * s.eta1;
            }
        }
        ConverterState::Backup => {
            e_in = avail;
            to_load = avail * s.eta1;
            let floor = 0.5 * s.c_stor * cfg.v_stor_min * cfg.v_stor_min;
            let usable = (e_stor_cap - floor).max(0.0);
            from_stor = (cfg.bc_max_power * t / s.eta2).min(usable);
            e_bc = from_stor * s.eta2;
        }
    }
    e_load_cap += to_load + e_bc;
    e_stor_cap += to_stor - from_stor;
    let e_draw = (s.v_load * i_load.max(0.0) * t).min(e_load_cap);
    e_load_cap -= e_draw;
    s.v_load = (2.0 * e_load_cap / s.c_load).sqrt();
    s.v_stor = (2.0 * e_stor_cap.max(0.0) / s.c_stor).sqrt();
    let after = e_load_cap + e_stor_cap;
    let loss = (e_in - to_load - to_stor) + (from_stor - e_bc);
    s.ledger.e_in += e_in;
    s.ledger.e_load += e_draw;
    s.ledger.e_stor += after - before;
    s.ledger.e_loss += loss;
    s.ledger.e_lc += to_load;
    s.ledger.e_cc += to_stor;
    s.ledger.e_bc += e_bc;
    s.cycles += 1;
    s.cycles_state[s.state.number() as usize - 1] += 1;
    s
}

/// Outcome of one MPPT comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpptUpdate {
    pub t1_code: u8,
    pub converter_enabled: bool,
}

/// Relative band around 0.5·V_oc inside which the t₁ code holds.
pub const MPPT_DEADBAND: f64 = 0.005;
/// Under-voltage cutout as a fraction of the open-circuit voltage.
pub const UV_FRACTION: f64 = 0.4;

/// One hill-climb step toward v_rect = 0.5·v_rect_open.
pub fn mppt_step(state: &PmuState, cfg: &DcDcConfig, v_rect_open: f64) -> MpptUpdate {
    let enabled = state.v_rect >= UV_FRACTION * v_rect_open && v_rect_open > 0.0;
    if !cfg.mppt_enabled {
        return MpptUpdate { t1_code: state.t1_code, converter_enabled: enabled };
    }
    let target = 0.5 * v_rect_open;
    let err = state.v_rect - target;
    let code = if err > MPPT_DEADBAND * v_rect_open {
        (state.t1_code + 1).min(CODE6_MAX)
    } else if err < -MPPT_DEADBAND * v_rect_open {
        state.t1_code.saturating_sub(1)
    } else {
        state.t1_code
    };
    MpptUpdate { t1_code: code, converter_enabled: enabled }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Converter {
    Lc,
    Cc,
}

/// Volt-second-balance Φ₂ duration.
pub fn zcs_target(t1: f64, v_rect: f64, v_out: f64) -> Result<f64> {
    if v_out <= v_rect {
        return Err(invalid("v_out", "boost requires V_OUT > V_RECT"));
    }
    Ok(t1 * v_rect / (v_out - v_rect))
}

/// Steps the t₂ code of `converter` by the sign of the end-of-Φ₂ inductor current.
pub fn zcs_step(state: &PmuState, cfg: &DcDcConfig, converter: Converter, i_l_end: f64) -> Result<u8> {
    let v_out = match converter {
        Converter::Lc => state.v_load,
        Converter::Cc => state.v_stor,
    };
    if v_out <= state.v_rect {
        return Err(invalid("v_out", "boost requires V_OUT > V_RECT"));
    }
    let code = match converter {
        Converter::Lc => state.t2_lc_code,
        Converter::Cc => state.t2_cc_code,
    };
    let half_step = (v_out - state.v_rect) * 0.5 * T2_LSB / cfg.l_dc;
    Ok(if i_l_end > half_step {
        (code + 1).min(CODE6_MAX)
    } else if i_l_end < -half_step {
        code.saturating_sub(1)
    } else {
        code
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScRatio {
    One,
    Half,
    Third,
}

impl ScRatio {
    pub fn value(self) -> f64 {
        match self {
            ScRatio::One => 1.0,
            ScRatio::Half => 0.5,
            ScRatio::Third => 1.0 / 3.0,
        }
    }

    /// Slow-switching-limit topology factor γ in R_out = 1/(γ·f·C_B).
    pub fn gamma(self) -> Option<f64> {
        match self {
            ScRatio::One => None,
            ScRatio::Half => Some(4.0),
            ScRatio::Third => Some(4.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScConverterModel {
    pub ratio: ScRatio,
    pub f_clk: f64,
    pub c_b: f64,
    pub c_l: f64,
    pub hysteresis: f64,
    pub target: f64,
    pub v_in: f64,
    /// On-resistance of the pass switch used for the 1/1 ratio.
    pub r_switch: f64,
}

impl ScConverterModel {
    pub fn new(ratio: ScRatio, target: f64, f_clk: f64) -> Self {
        Self { ratio, f_clk, c_b: 25e-12, c_l: 50e-9, hysteresis: 0.05, target, v_in: 3.3, r_switch: 2e3 }
    }

    pub fn r_out(&self) -> f64 {
        match self.ratio.gamma() {
            Some(g) => 1.0 / (g * self.f_clk * self.c_b),
            None => self.r_switch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScState {
    pub v_out: f64,
    pub clocking: bool,
}

/// PFM regulation: the clock runs below target − h/2, stops above target + h/2.
pub fn sc_converter_step(model: &ScConverterModel, state: ScState, i_draw: f64, dt: f64) -> ScState {
    let half = 0.5 * model.hysteresis;
    let clocking = if state.v_out < model.target - half {
        true
    } else if state.v_out > model.target + half {
        false
    } else {
        state.clocking
    };
    let mut i = -i_draw;
    if clocking {
        i += (model.ratio.value() * model.v_in - state.v_out) / model.r_out();
    }
    ScState { v_out: (state.v_out + i * dt / model.c_l).max(0.0), clocking }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ideal_rectifier() {
        let out = rectify(&RectifierModel::ideal(2.0, 300e3), 10e3, 1e-3).unwrap();
        assert!((out.pce - 1.0).abs() < 1e-12 && (out.vcr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_rectifier_efficiency() {
        let out = rectify(&RectifierModel::new(1.5, 300e3), 10e3, 1e-3).unwrap();
        assert_eq!(out.path, RectifierPath::Active);
        assert!(out.pce > 0.85 && out.vcr > 0.90, "{out:?}");
    }

    #[test]
    fn pce_falls_with_frequency() {
        let a = rectify(&RectifierModel::new(4.0, 100e3), 10e3, 1e-3).unwrap();
        let b = rectify(&RectifierModel::new(4.0, 400e3), 10e3, 1e-3).unwrap();
        assert_eq!((a.path, b.path), (RectifierPath::Active, RectifierPath::Active));
        assert!(a.pce > b.pce);
    }

    #[test]
    fn bias_flip_gain() {
        let f = 300e3;
        let r = matched_load(f, 100e-12);
        let on = rectify(&RectifierModel::new(1.5, f), r, 1e-3).unwrap();
        let off = rectify(&RectifierModel { bias_flip: None, ..RectifierModel::new(1.5, f) }, r, 1e-3).unwrap();
        assert!(on.p_out / off.p_out >= 2.0, "{}", on.p_out / off.p_out);
    }

    #[test]
    fn rectifier_errors() {
        assert!(rectify(&RectifierModel::new(1.5, 300e3), 0.0, 1e-3).is_err());
        assert!(rectify(&RectifierModel::new(1.5, 300e3), 1e3, 1e-6).is_err());
    }

    #[test]
    fn cold_start_uses_diodes() {
        let out = rectify(&RectifierModel::new(0.6, 300e3), 10e3, 1e-3).unwrap();
        assert_eq!(out.path, RectifierPath::Passive);
        assert!(out.v_rect < COLD_START_VOLTAGE);
    }

    fn cycles(n: usize) -> Waveform {
        let fs = 1e6;
        Waveform::new((0..n * 20).map(|i| (2.0 * PI * i as f64 / 20.0 + 0.1).sin()).collect(), fs).unwrap()
    }

    #[test]
    fn flip_timing_converges() {
        let c_p = 100e-12;
        let base = BiasFlipConfig::default();
        let t_opt = optimal_flip_time(&base, c_p);
        assert!((t_opt - 89.97e-9).abs() < 0.05e-9);
        for start in [0u8, 40, 200, 255] {
            let code = bias_flip_timing(&BiasFlipConfig { t_bp_code: start, ..base }, c_p, &cycles(150));
            assert!((f64::from(code) * T_BP_LSB - t_opt).abs() <= T_BP_LSB, "{start} -> {code}");
        }
        let fixed = BiasFlipConfig { t_bp_code: 90, ..base };
        assert_eq!(bias_flip_timing(&fixed, c_p, &cycles(10)), 90);
    }

    #[test]
    fn flip_timing_saturates() {
        let slow = BiasFlipConfig { l_flip: 1e-3, t_bp_code: 250, ..Default::default() };
        assert_eq!(bias_flip_timing(&slow, 100e-12, &cycles(20)), 255);
        let fast = BiasFlipConfig { l_flip: 1e-12, t_bp_code: 3, ..Default::default() };
        assert_eq!(bias_flip_timing(&fast, 1e-12, &cycles(20)), 0);
    }

    #[test]
    fn impedance_formulas() {
        let cfg = DcDcConfig::default();
        assert!((input_impedance(&cfg, 2e-6, 0.0).unwrap() - 1000.0).abs() < 1e-9);
        assert!((input_impedance(&cfg, 2e-6, 0.2e-6).unwrap() - 1000.0 / 1.1).abs() < 1e-9);
        assert!(input_impedance(&cfg, 15e-6, 10e-6).is_err());
        let a = average_input_impedance(&cfg, 0.3, 2e-6).unwrap();
        let b = average_input_impedance(&cfg, 0.9, 2e-6).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
        assert!((average_input_impedance(&cfg, 1.0, 2e-6).unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn simulated_current_matches_impedance() {
        let cfg = DcDcConfig::default();
        let (v_in, v_out, t1) = (1.0, 2.0, 2e-6);
        let t2 = zcs_target(t1, v_in, v_out).unwrap();
        let i = inductor_current(v_in, v_out, t1, t2, cfg.l_dc, cfg.f_s, 1e-9);
        let avg = i.iter().sum::<f64>() / i.len() as f64;
        let r_sim = v_in / avg;
        let r_eq = input_impedance(&cfg, t1, t2).unwrap();
        assert!((r_sim / r_eq - 1.0).abs() < 0.02, "{r_sim} vs {r_eq}");
    }

    #[test]
    fn pce_composition() {
        assert_eq!(end_to_end_pce(0.7, 0.78, 1.0), 0.7);
        assert!((end_to_end_pce(0.7, 0.78, 0.0) - 0.546).abs() < 1e-12);
        assert!((end_to_end_pce(0.7, 0.78, 0.5) - 0.623).abs() < 1e-12);
    }

    fn run(cfg: &DcDcConfig, mut s: PmuState, p: f64, i: f64, n: usize) -> (PmuState, Vec<(ConverterState, f64)>) {
        let mut trace = Vec::with_capacity(n);
        for _ in 0..n {
            let prev = s.ledger;
            let before = s.stored_energy();
            s = dcdc_step(&s, cfg, p, i);
            let d_in = s.ledger.e_in - prev.e_in;
            let d_load = s.ledger.e_load - prev.e_load;
            let d_loss = s.ledger.e_loss - prev.e_loss;
            let d_stor = s.stored_energy() - before;
            assert!(d_loss >= -1e-18);
            assert!((d_in - d_load - d_stor - d_loss).abs() <= 1e-12 * s.stored_energy().max(1e-9));
            trace.push((s.state, s.v_load));
        }
        (s, trace)
    }

    #[test]
    fn matched_harvest_stays_in_state_two() {
        let cfg = DcDcConfig::default();
        let s = PmuState::new(&cfg, 2.0, 2.0);
        let i_load = 1e-3;
        let p = 2.0 * i_load / cfg.eta1;
        let (s, _) = run(&cfg, s, p, i_load, 20_000);
        assert_eq!(s.state, ConverterState::Load);
        assert!(s.alpha() > 0.999);
        assert!((s.v_load - 2.0).abs() < 1e-6);
    }

    #[test]
    fn surplus_ripple_is_hysteresis() {
        let cfg = DcDcConfig::default();
        let s = PmuState::new(&cfg, 2.0, 1.95);
        let (_, trace) = run(&cfg, s, 10e-3, 1e-3, 200_000);
        let tail = &trace[50_000..];
        let hi = tail.iter().map(|t| t.1).fold(0.0, f64::max);
        let lo = tail.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        let quantum = 10e-3 * cfg.eta1 / cfg.f_s / (22e-6 * 2.0);
        assert!(((hi - lo) - 0.2).abs() <= quantum + 1e-3, "{}", hi - lo);
        assert!(tail.iter().any(|t| t.0 == ConverterState::Charge));
    }

    #[test]
    fn heavy_load_enters_backup() {
        let cfg = DcDcConfig::default();
        let s = PmuState::new(&cfg, 3.0, 2.0);
        let (s, trace) = run(&cfg, s, 0.0, 2e-3, 100_000);
        assert!(s.cycles_state[0] > 0);
        for w in trace.windows(2) {
            if w[0].0 != ConverterState::Backup && w[1].0 == ConverterState::Backup {
                assert!(w[0].1 <= 1.6);
            }
            if w[0].0 == ConverterState::Backup && w[1].0 == ConverterState::Load {
                assert!(w[0].1 >= 1.8);
            }
        }
    }

    #[test]
    fn mppt_thevenin() {
        let cfg = DcDcConfig { t1_code: 5, ..Default::default() };
        let (v_oc, r_s) = (2.0, 1500.0);
        let mut s = PmuState::new(&cfg, 3.3, 2.0);
        let v_at = |code: u8| {
            let r = input_impedance(&cfg, t1_from_code(code), 0.0).unwrap();
            v_oc * r / (r + r_s)
        };
        for _ in 0..200 {
            s.v_rect = v_at(s.t1_code);
            s.t1_code = mppt_step(&s, &cfg, v_oc).t1_code;
        }
        s.v_rect = v_at(s.t1_code);
        let p = s.v_rect * (v_oc - s.v_rect) / r_s;
        assert!(p >= 0.99 * v_oc * v_oc / (4.0 * r_s));
        let step = (v_at(s.t1_code.saturating_sub(1)) - v_at(s.t1_code + 1)).abs();
        assert!((s.v_rect - 0.5 * v_oc).abs() <= step);
        let frozen = DcDcConfig { mppt_enabled: false, ..cfg };
        s.v_rect = 0.1;
        assert_eq!(mppt_step(&s, &frozen, v_oc).t1_code, s.t1_code);
        assert!(!mppt_step(&s, &frozen, v_oc).converter_enabled);
    }

    #[test]
    fn zcs_converges() {
        let cfg = DcDcConfig::default();
        for (v_r, v_o) in [(1.0, 3.3), (1.0, 2.0), (1.5, 3.3)] {
            let mut s = PmuState::new(&cfg, v_o, v_o);
            s.v_rect = v_r;
            s.t2_cc_code = 0;
            let t1 = 2.3e-6;
            for _ in 0..100 {
                let i_end = inductor_end_current(v_r, v_o, t1, t2_from_code(s.t2_cc_code), cfg.l_dc);
                s.t2_cc_code = zcs_step(&s, &cfg, Converter::Cc, i_end).unwrap();
            }
            let want = zcs_target(t1, v_r, v_o).unwrap() / T2_LSB;
            assert!((f64::from(s.t2_cc_code) - want).abs() <= 1.0, "{v_r},{v_o}: {} vs {want}", s.t2_cc_code);
        }
        assert!((zcs_target(2.3e-6, 1.0, 3.3).unwrap() - 1e-6).abs() < 1e-15);
        let mut s = PmuState::new(&cfg, 0.5, 0.5);
        s.v_rect = 1.0;
        assert!(zcs_step(&s, &cfg, Converter::Lc, 0.0).is_err());
    }

    fn rise_time(f_clk: f64) -> f64 {
        let m = ScConverterModel::new(ScRatio::Third, 0.89, f_clk);
        let dt = 0.25 / f_clk;
        let mut st = ScState { v_out: 0.0, clocking: false };
        let goal = 0.9 * m.target;
        let mut t = 0.0;
        loop {
            let next = sc_converter_step(&m, st, 0.0, dt);
            if next.v_out >= goal {
                return t + dt * (goal - st.v_out) / (next.v_out - st.v_out);
            }
            st = next;
            t += dt;
        }
    }

    #[test]
    fn sc_rise_time_inverse() {
        let r = rise_time(1e6) / rise_time(2e6);
        assert!((r - 2.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn sc_idle_and_ripple() {
        let m = ScConverterModel::new(ScRatio::Half, 0.89, 1e6);
        let st = sc_converter_step(&m, ScState { v_out: 0.89, clocking: false }, 0.0, 1e-6);
        assert!(!st.clocking && st.v_out == 0.89);
        let mut st = ScState { v_out: 0.89, clocking: false };
        let mut v = vec![];
        for k in 0..400_000 {
            st = sc_converter_step(&m, st, 2e-6, 1e-6);
            if k > 100_000 {
                v.push(st.v_out);
            }
        }
        let ripple = v.iter().cloned().fold(0.0, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((ripple - 0.05).abs() < 0.005, "{ripple}");
    }
}
