//! Hub/node measurement cycle: nMPPT power-up, ACK, command downlink, SHM measurement, upload, sleep.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crc::{Crc, CRC_8_SMBUS};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_response, power_vs_frequency, propagate_stream, PathModel};
use crate::datalink::{
    select_tones, simulate_downlink, simulate_uplink, CdrConfig, DownlinkConfig, ThresholdPolicy, UplinkConfig,
};
use crate::error::{invalid, Error, Result};
use crate::pmu::{dcdc_step, matched_load, rectify, DcDcConfig, EnergyLedger, PmuState, RectifierModel};
use crate::scenario::PlateScenario;
use crate::signal::Waveform;
use crate::transceiver::{apply_lrc, quantize_levels, synthesize_burst, DuplexerSpec, LrcLoad, PulseSpec, ReceiverConfig};
use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeState {
    Cold,
    Powering,
    Ready,
    AckSent,
    Configured,
    Measuring,
    Uploading,
    Sleep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeEvent {
    CarrierOn,
    RegulationReached,
    AckSent,
    CommandDecoded,
    MeasureStart,
    MeasureDone,
    UploadDone,
    Wake,
    Brownout,
}

impl NodeState {
    pub const ALL: [NodeState; 8] = [
        NodeState::Cold,
        NodeState::Powering,
        NodeState::Ready,
        NodeState::AckSent,
        NodeState::Configured,
        NodeState::Measuring,
        NodeState::Uploading,
        NodeState::Sleep,
    ];

    /// Successor for every (state, event) pair; events that do not apply leave the state unchanged.
    pub fn on(self, e: NodeEvent) -> NodeState {
        use NodeEvent as E;
        use NodeState as S;
        match (self, e) {
            (_, E::Brownout) => S::Cold,
            (S::Cold, E::CarrierOn) => S::Powering,
            (S::Powering, E::RegulationReached) => S::Ready,
            (S::Ready, E::AckSent) => S::AckSent,
            (S::AckSent, E::CommandDecoded) => S::Configured,
            (S::Configured, E::MeasureStart) => S::Measuring,
            (S::Measuring, E::MeasureDone) => S::Uploading,
            (S::Uploading, E::UploadDone) => S::Sleep,
            (S::Sleep, E::Wake) => S::Powering,
            (s, _) => s,
        }
    }
}

pub const NODE_EVENTS: [NodeEvent; 9] = [
    NodeEvent::CarrierOn,
    NodeEvent::RegulationReached,
    NodeEvent::AckSent,
    NodeEvent::CommandDecoded,
    NodeEvent::MeasureStart,
    NodeEvent::MeasureDone,
    NodeEvent::UploadDone,
    NodeEvent::Wake,
    NodeEvent::Brownout,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    PitchCatch,
    PulseEcho,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HubCommand {
    /// Node address: index of the node in the scenario.
    pub node_id: u8,
    pub mode: MeasurementMode,
    pub f0: f64,
    pub n_cycles: u32,
    pub rx_gain_code: u8,
    pub record_length: f64,
}

impl HubCommand {
    pub fn new(node_id: u8, f0: f64) -> Self {
        Self { node_id, mode: MeasurementMode::PitchCatch, f0, n_cycles: 5, rx_gain_code: 8, record_length: 200e-6 }
    }

    pub fn check(&self) -> Result<()> {
        if !(TX_BAND.0..=TX_BAND.1).contains(&self.f0) || self.f0.fract() != 0.0 {
            return Err(invalid("f0", "integer hertz within the 100-500 kHz transceiver band"));
        }
        if !(1..=15).contains(&self.n_cycles) {
            return Err(invalid("n_cycles", "must lie in 1..=15"));
        }
        if self.rx_gain_code > 15 {
            return Err(invalid("rx_gain_code", "4-bit code"));
        }
        let us = self.record_length * 1e6;
        if !(us >= 1.0 && us <= 65535.0) || (us - us.round()).abs() > 1e-6 {
            return Err(invalid("record_length", "whole microseconds in 1..=65535"));
        }
        Ok(())
    }
}

pub const TX_BAND: (f64, f64) = (100e3, 500e3);
pub const COMMAND_HEADER: u8 = 0xA5;
pub const COMMAND_BITS: usize = 72;
const CRC8: Crc<u8> = Crc::<u8>::new(&CRC_8_SMBUS);

fn push_bits(out: &mut Vec<u8>, value: u64, width: u32) {
    for i in (0..width).rev() {
        out.push(((value >> i) & 1) as u8);
    }
}

fn read_bits(bits: &[u8], pos: &mut usize, width: usize) -> u64 {
    let v = bits[*pos..*pos + width].iter().fold(0u64, |acc, b| (acc << 1) | u64::from(*b & 1));
    *pos += width;
    v
}

fn pack_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8).map(|c| c.iter().fold(0u8, |acc, b| (acc << 1) | (b & 1)) << (8 - c.len())).collect()
}

/// Layout, MSB first: header 8 | node 8 | mode 1 | f0 Hz 20 | n_cycles 4 | gain 4 | record µs 16 | reserved 3 | CRC-8 8.
pub fn encode_command(cmd: &HubCommand) -> Result<Vec<u8>> {
    cmd.check()?;
    let mut bits = Vec::with_capacity(COMMAND_BITS);
    push_bits(&mut bits, u64::from(COMMAND_HEADER), 8);
    push_bits(&mut bits, u64::from(cmd.node_id), 8);
    push_bits(&mut bits, u64::from(cmd.mode == MeasurementMode::PulseEcho), 1);
    push_bits(&mut bits, cmd.f0 as u64, 20);
    push_bits(&mut bits, u64::from(cmd.n_cycles), 4);
    push_bits(&mut bits, u64::from(cmd.rx_gain_code), 4);
    push_bits(&mut bits, (cmd.record_length * 1e6).round() as u64, 16);
    push_bits(&mut bits, 0, 3);
    let crc = CRC8.checksum(&pack_bytes(&bits));
    push_bits(&mut bits, u64::from(crc), 8);
    Ok(bits)
}

pub fn decode_command(bits: &[u8]) -> Result<HubCommand> {
    if bits.len() != COMMAND_BITS {
        return Err(Error::LengthMismatch { left: COMMAND_BITS, right: bits.len() });
    }
    let computed = CRC8.checksum(&pack_bytes(&bits[..64]));
    let mut pos = 64;
    let expected = read_bits(bits, &mut pos, 8) as u8;
    if expected != computed {
        return Err(Error::Crc { expected, computed });
    }
    let mut pos = 0;
    if read_bits(bits, &mut pos, 8) as u8 != COMMAND_HEADER {
        return Err(invalid("bits", "bad command header"));
    }
    let node_id = read_bits(bits, &mut pos, 8) as u8;
    let mode = if read_bits(bits, &mut pos, 1) == 1 { MeasurementMode::PulseEcho } else { MeasurementMode::PitchCatch };
    let f0 = read_bits(bits, &mut pos, 20) as f64;
    let n_cycles = read_bits(bits, &mut pos, 4) as u32;
    let rx_gain_code = read_bits(bits, &mut pos, 4) as u8;
    let record_length = read_bits(bits, &mut pos, 16) as f64 / 1e6;
    let cmd = HubCommand { node_id, mode, f0, n_cycles, rx_gain_code, record_length };
    cmd.check()?;
    Ok(cmd)
}

/// Hub-side frequency search record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpptTrace {
    pub f_opt: f64,
    pub power: f64,
    /// Every probed (frequency, received power) pair in probe order.
    pub probes: Vec<(f64, f64)>,
}

pub fn nmppt_trace(
    s: &PlateScenario,
    hub: &str,
    node: &str,
    f_lo: f64,
    f_hi: f64,
    coarse_points: usize,
    refine_steps: u32,
) -> Result<MpptTrace> {
    let mode = s.network.power_mode;
    let probes = power_vs_frequency(s, hub, node, f_lo, f_hi, coarse_points, mode)?;
    let (mut f, mut p) = probes.iter().cloned().fold((f_lo, -1.0), |b, x| if x.1 > b.1 { x } else { b });
    if !(p > 0.0) {
        return Err(Error::NotFound("band yields zero received power"));
    }
    let model = PathModel::new(s, hub, node, mode)?;
    let mut probes = probes;
    let mut step = 0.5 * (f_hi - f_lo) / (coarse_points - 1) as f64;
    for _ in 0..refine_steps {
        for cand in [f - step, f + step] {
            if cand < f_lo || cand > f_hi {
                continue;
            }
            let pc = model.eval(cand).norm_sqr();
            probes.push((cand, pc));
            if pc > p {
                f = cand;
                p = pc;
            }
        }
        step *= 0.5;
    }
    Ok(MpptTrace { f_opt: f, power: p, probes })
}

/// Coarse sweep of received power followed by a halving-step hill climb.
pub fn nmppt_search(
    s: &PlateScenario,
    hub: &str,
    node: &str,
    f_lo: f64,
    f_hi: f64,
    coarse_points: usize,
    refine_steps: u32,
) -> Result<f64> {
    nmppt_trace(s, hub, node, f_lo, f_hi, coarse_points, refine_steps).map(|t| t.f_opt)
}

/// Node-side power draw, watts, and converter settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePowerModel {
    pub p_quiescent: f64,
    pub p_rx: f64,
    pub p_tx: f64,
    pub p_record: f64,
    /// Required reserve as a multiple of the post-command energy budget.
    pub margin: f64,
}

impl Default for NodePowerModel {
    fn default() -> Self {
        Self { p_quiescent: 2e-6, p_rx: 30e-6, p_tx: 15e-6, p_record: 150e-6, margin: 1.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleOptions {
    pub snr_db: Option<f64>,
    pub power: NodePowerModel,
    pub dcdc: DcDcConfig,
    pub coarse_points: usize,
    pub refine_steps: u32,
    pub probe_dwell: f64,
    pub powerup_timeout: f64,
    pub ack_timeout: f64,
    pub decode_retries: u32,
    pub threshold: ThresholdPolicy,
    pub adc_bits: u32,
    /// Noise stream index; distinct values give independent repeats.
    pub stream: u64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            snr_db: None,
            power: NodePowerModel::default(),
            dcdc: DcDcConfig::default(),
            coarse_points: 4001,
            refine_steps: 8,
            probe_dwell: 100e-6,
            powerup_timeout: 5.0,
            ack_timeout: 0.5,
            decode_retries: 3,
            threshold: ThresholdPolicy::Fixed,
            adc_bits: 12,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mppt,
    Powering,
    Ack,
    Command,
    Measurement,
    Upload,
    Sleep,
}

pub const PHASE_ORDER: [Phase; 7] =
    [Phase::Mppt, Phase::Powering, Phase::Ack, Phase::Command, Phase::Measurement, Phase::Upload, Phase::Sleep];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub t_start: f64,
    pub t_end: f64,
    pub e_harvested: f64,
    pub e_consumed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleEvent {
    pub t: f64,
    pub from: NodeState,
    pub to: NodeState,
    pub event: NodeEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementCycleLog {
    pub node: String,
    pub f_opt: f64,
    pub tones: (f64, f64),
    pub command: HubCommand,
    pub downlink_attempts: u32,
    pub events: Vec<CycleEvent>,
    pub phases: Vec<PhaseRecord>,
    pub ledger: EnergyLedger,
    pub budget: f64,
    pub v_load_min_measuring: f64,
    /// Records received by the hub, keyed by recording node.
    #[serde(skip)]
    pub records: Vec<(String, Waveform)>,
}

impl MeasurementCycleLog {
    pub fn duration(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.t_end)
    }

    /// Consumed energy against harvest plus storage drawdown.
    pub fn energy_causal(&self) -> bool {
        self.ledger.e_load <= self.ledger.e_in - self.ledger.e_stor
    }
}

/// Node finite-state machine with its power-management state.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFsm {
    pub state: NodeState,
    pub pmu: PmuState,
    pub config: Option<HubCommand>,
}

impl NodeFsm {
    pub fn new(pmu: PmuState) -> Self {
        Self { state: NodeState::Cold, pmu, config: None }
    }

    pub fn fire(&mut self, e: NodeEvent) -> (NodeState, NodeState) {
        let from = self.state;
        self.state = from.on(e);
        (from, self.state)
    }
}

struct Cycle<'a> {
    fsm: NodeFsm,
    cfg: &'a DcDcConfig,
    t: f64,
    events: Vec<CycleEvent>,
    phases: Vec<PhaseRecord>,
    mark: (f64, f64, f64),
}

impl Cycle<'_> {
    fn dt(&self) -> f64 {
        1.0 / self.cfg.f_s
    }

    fn fire(&mut self, e: NodeEvent) {
        let (from, to) = self.fsm.fire(e);
        self.events.push(CycleEvent { t: self.t, from, to, event: e });
    }

    fn step(&mut self, p_harvest: f64, p_load: f64) {
        let v = self.fsm.pmu.v_load;
        let i = if v > 0.0 { p_load / v } else { 0.0 };
        self.fsm.pmu = dcdc_step(&self.fsm.pmu, self.cfg, p_harvest, i);
        self.t += self.dt();
    }

    /// Draws `energy` over `duration` while harvesting `p_harvest`; returns the lowest v_load seen.
    fn run(&mut self, p_harvest: f64, energy: f64, duration: f64) -> f64 {
        let n = ((duration * self.cfg.f_s).ceil() as usize).max(1);
        let p = energy / (n as f64 * self.dt());
        let mut v_min = f64::INFINITY;
        for _ in 0..n {
            self.step(p_harvest, p);
            v_min = v_min.min(self.fsm.pmu.v_load);
        }
        v_min
    }

    fn close(&mut self, phase: Phase) {
        let l = &self.fsm.pmu.ledger;
        self.phases.push(PhaseRecord {
            phase,
            t_start: self.mark.0,
            t_end: self.t,
            e_harvested: l.e_in - self.mark.1,
            e_consumed: l.e_load - self.mark.2,
        });
        self.mark = (self.t, l.e_in, l.e_load);
    }
}

/// Harvested power at matched load for a node PWAS driven at `v_p` volts amplitude.
pub fn harvest_power(v_p: f64, f: f64, c_p: f64) -> Result<f64> {
    if !(v_p > 0.0) {
        return Ok(0.0);
    }
    let model = RectifierModel { c_p, ..RectifierModel::new(v_p, f) };
    Ok(rectify(&model, matched_load(f, c_p), 1e-3)?.p_out)
}

/// Supply energy of one H-bridge burst into the transducer capacitance.
pub fn burst_energy(spec: &PulseSpec, c_p: f64) -> Result<f64> {
    Ok(quantize_levels(spec)?.iter().map(|h| 2.0 * c_p * h.volts * h.volts).sum())
}

/// Resonance quality of the transmit load used for SHM bursts.
pub const SHM_LOAD_Q: f64 = 2.0;
pub const SIM_OVERSAMPLE: f64 = 24.0;
/// Record sample rate as a multiple of f0.
pub const ADC_OVERSAMPLE: f64 = 4.0;

/// Record captured by `rx` when `tx` fires the commanded burst.
pub fn acquire_record(s: &PlateScenario, tx: &str, rx: &str, cmd: &HubCommand, snr_db: Option<f64>, stream: u64) -> Result<Waveform> {
    cmd.check()?;
    let fs = SIM_OVERSAMPLE * cmd.f0;
    let spec = PulseSpec { n_cycles: cmd.n_cycles, ..PulseSpec::new(cmd.f0) };
    let burst = synthesize_burst(&spec, fs)?;
    let n = (cmd.record_length * fs).round() as usize;
    let load = LrcLoad::tuned(cmd.f0, s.node(tx)?.transducer.capacitance, SHM_LOAD_Q);
    let mut drive = apply_lrc(&burst, &load)?;
    drive.samples.truncate(n.max(burst.len()));
    let drive = drive.padded(n);
    let y = propagate_stream(s, tx, rx, &drive, s.network.shm_mode, snr_db, stream)?;
    let rc = ReceiverConfig { gain_code: cmd.rx_gain_code, ..ReceiverConfig::default() };
    let gain = DuplexerSpec::default().gain_factor() * 10f64.powf(rc.gain_db() / 20.0);
    let dead = if tx == rx { (2.0 * spec.duration() * fs).round() as usize } else { 0 };
    let fs_adc = ADC_OVERSAMPLE * cmd.f0;
    let cutoff = 0.45 * fs_adc;
    let filtered = apply_response(&y, |f| if f < cutoff { Complex64::new(gain, 0.0) } else { Complex64::new(0.0, 0.0) });
    let k = (SIM_OVERSAMPLE / ADC_OVERSAMPLE) as usize;
    let samples = filtered
        .iter()
        .enumerate()
        .step_by(k)
        .map(|(i, v)| if i < dead { 0.0 } else { *v })
        .collect();
    Waveform::new(samples, fs_adc)
}

/// Record framing for upload: scale (f32) | sample count (u16) | two's-complement samples | CRC-8.
pub fn encode_record(w: &Waveform, adc_bits: u32) -> Result<Vec<u8>> {
    if !(2..=16).contains(&adc_bits) || w.len() > usize::from(u16::MAX) {
        return Err(invalid("record", "2-16 ADC bits and at most 65535 samples"));
    }
    let full = f64::from((1u32 << (adc_bits - 1)) - 1);
    let scale = w.peak() as f32;
    let mut bits = Vec::with_capacity(48 + w.len() * adc_bits as usize + 8);
    push_bits(&mut bits, u64::from(scale.to_bits()), 32);
    push_bits(&mut bits, w.len() as u64, 16);
    let mask = (1u64 << adc_bits) - 1;
    for v in &w.samples {
        let q = if scale > 0.0 { (v / f64::from(scale) * full).round().clamp(-full, full) as i64 } else { 0 };
        push_bits(&mut bits, (q as u64) & mask, adc_bits);
    }
    let crc = CRC8.checksum(&pack_bytes(&bits));
    push_bits(&mut bits, u64::from(crc), 8);
    Ok(bits)
}

pub fn decode_record(bits: &[u8], adc_bits: u32, sample_rate: f64) -> Result<Waveform> {
    if bits.len() < 56 {
        return Err(Error::LengthMismatch { left: 56, right: bits.len() });
    }
    let body = &bits[..bits.len() - 8];
    let mut pos = body.len();
    let expected = read_bits(bits, &mut pos, 8) as u8;
    let computed = CRC8.checksum(&pack_bytes(body));
    if expected != computed {
        return Err(Error::Crc { expected, computed });
    }
    let mut pos = 0;
    let scale = f64::from(f32::from_bits(read_bits(body, &mut pos, 32) as u32));
    let n = read_bits(body, &mut pos, 16) as usize;
    if body.len() != 48 + n * adc_bits as usize {
        return Err(Error::LengthMismatch { left: 48 + n * adc_bits as usize, right: body.len() });
    }
    let full = f64::from((1u32 << (adc_bits - 1)) - 1);
    let samples = (0..n)
        .map(|_| {
            let raw = read_bits(body, &mut pos, adc_bits as usize) as i64;
            let q = if raw >= 1 << (adc_bits - 1) { raw - (1 << adc_bits) } else { raw };
            q as f64 / full * scale
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn uplink_config(s: &PlateScenario) -> UplinkConfig {
    UplinkConfig::new(s.network.uplink_rate, s.network.uplink_f0)
}

pub fn uplink_sample_rate(s: &PlateScenario) -> f64 {
    8.0 * s.network.uplink_f0
}

/// Simulation rate for a downlink: 2.5× the upper tone, rounded up to a whole kHz.
pub fn downlink_sample_rate(cfg: &DownlinkConfig) -> f64 {
    (2.5 * cfg.f_bit0.max(cfg.f_bit1) / 1e3).ceil() * 1e3
}

fn uplink_energy(s: &PlateScenario, bits: &[u8], c_p: f64, p_tx: f64) -> f64 {
    let cfg = uplink_config(s);
    let ones = bits.iter().filter(|b| **b != 0).count() + 4;
    let n = bits.len() + crate::datalink::OOK_PREAMBLE.len();
    p_tx * n as f64 * cfg.symbol_period + ones as f64 * 4.0 * c_p * cfg.amplitude * cfg.amplitude
}

fn uplink_duration(s: &PlateScenario, n_bits: usize) -> f64 {
    (n_bits + crate::datalink::OOK_PREAMBLE.len()) as f64 * uplink_config(s).symbol_period
}

fn stream_id(base: u64, k: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(k)
}

/// Runs one full measurement cycle for `node`, recording every state change and per-phase energy.
pub fn run_cycle(s: &PlateScenario, hub: &str, node: &str, cmd: &HubCommand, opts: &CycleOptions) -> Result<MeasurementCycleLog> {
    cmd.check()?;
    opts.dcdc.check()?;
    let node_spec = s.node(node)?;
    s.node(hub)?;
    if usize::from(cmd.node_id) != s.node_index(node)? {
        return Err(invalid("command", "node_id does not address the cycle's node"));
    }
    let c_p = node_spec.transducer.capacitance;
    let net = &s.network;
    let pm = opts.power;
    let drive = net.hub_drive;
    let mut cyc = Cycle {
        fsm: NodeFsm::new(PmuState::new(&opts.dcdc, net.initial_v_stor, 0.0)),
        cfg: &opts.dcdc,
        t: 0.0,
        events: Vec::new(),
        phases: Vec::new(),
        mark: (0.0, 0.0, 0.0),
    };
    let model = PathModel::new(s, hub, node, net.power_mode)?;

    cyc.fire(NodeEvent::CarrierOn);
    let trace = nmppt_trace(s, hub, node, net.band_lo, net.band_hi, opts.coarse_points, opts.refine_steps);
    let (f_opt, probes) = match trace {
        Ok(t) => (t.f_opt, t.probes),
        Err(Error::NotFound(_)) => (0.5 * (net.band_lo + net.band_hi), Vec::new()),
        Err(e) => return Err(e),
    };
    for (f, p) in &probes {
        let ph = harvest_power(drive * p.sqrt(), *f, c_p)?;
        cyc.run(ph, pm.p_quiescent * opts.probe_dwell, opts.probe_dwell);
    }
    cyc.close(Phase::Mppt);

    let p_opt = harvest_power(drive * model.eval(f_opt).norm(), f_opt, c_p)?;
    let spec = PulseSpec { n_cycles: cmd.n_cycles, ..PulseSpec::new(cmd.f0) };
    let own_record_bits = match cmd.mode {
        MeasurementMode::PulseEcho => 48 + 8 + (cmd.record_length * ADC_OVERSAMPLE * cmd.f0).round() as usize * opts.adc_bits as usize,
        MeasurementMode::PitchCatch => 8,
    };
    let e_measure = burst_energy(&spec, c_p)? + pm.p_record * cmd.record_length;
    let e_upload = pm.p_tx * uplink_duration(s, own_record_bits) + own_record_bits as f64 * 2.0 * c_p * 3.3 * 3.3;
    let ack_bits: Vec<u8> = {
        let mut b = Vec::new();
        push_bits(&mut b, u64::from(cmd.node_id), 8);
        b
    };
    let e_ack = uplink_energy(s, &ack_bits, c_p, pm.p_tx);
    let budget = e_ack + e_measure + e_upload;
    let t0 = cyc.t;
    loop {
        let p = &cyc.fsm.pmu;
        if p.v_load >= opts.dcdc.v_load_nom && p.reserve(&opts.dcdc) >= pm.margin * budget {
            break;
        }
        if cyc.t - t0 > opts.powerup_timeout {
            return Err(Error::Timeout { phase: "power-up", elapsed_s: cyc.t - t0 });
        }
        cyc.step(p_opt, pm.p_quiescent);
    }
    cyc.fire(NodeEvent::RegulationReached);
    cyc.close(Phase::Powering);

    let up_model = PathModel::new(s, node, hub, net.shm_mode)?;
    let ucfg = uplink_config(s);
    let got = simulate_uplink(&up_model, &ack_bits, &ucfg, opts.threshold, uplink_sample_rate(s), opts.snr_db, s.rng_seed, stream_id(opts.stream, 0));
    cyc.run(0.0, e_ack, uplink_duration(s, ack_bits.len()));
    if got.as_deref() != Ok(&ack_bits[..]) {
        return Err(Error::Timeout { phase: "ack", elapsed_s: opts.ack_timeout });
    }
    cyc.fire(NodeEvent::AckSent);
    cyc.close(Phase::Ack);

    let (f_bit0, f_bit1) = select_tones(&model, f_opt, net.tone_spacing);
    let dl = DownlinkConfig { f_bit0, f_bit1, bit_rate: net.downlink_rate, amplitude: drive };
    let bits = encode_command(cmd)?;
    let fs_dl = downlink_sample_rate(&dl);
    let p_dl = 0.5 * (harvest_power(drive * model.eval(f_bit0).norm(), f_bit0, c_p)? + harvest_power(drive * model.eval(f_bit1).norm(), f_bit1, c_p)?);
    let t_dl = bits.len() as f64 / dl.bit_rate;
    let mut attempts = 0;
    let decoded = loop {
        attempts += 1;
        let rx = simulate_downlink(&model, &bits, &dl, &CdrConfig::for_bit_rate(dl.bit_rate), fs_dl, opts.snr_db, s.rng_seed ^ stream_id(opts.stream, u64::from(attempts)));
        cyc.run(p_dl, pm.p_rx * t_dl, t_dl);
        match rx.and_then(|b| decode_command(&b)) {
            Ok(c) if c == *cmd => break c,
            _ if attempts > opts.decode_retries => return Err(Error::DecodeFailure { attempts }),
            _ => {}
        }
    };
    cyc.fsm.config = Some(decoded);
    cyc.fire(NodeEvent::CommandDecoded);
    cyc.close(Phase::Command);

    cyc.fire(NodeEvent::MeasureStart);
    let v_min = cyc.run(0.0, e_measure, spec.duration() + cmd.record_length);
    if v_min < opts.dcdc.thresholds.s12_lo {
        cyc.fire(NodeEvent::Brownout);
        return Err(Error::Brownout { phase: "measurement", v_load: v_min });
    }
    let receivers: Vec<&str> = match cmd.mode {
        MeasurementMode::PulseEcho => {
            let mut r = vec![node];
            r.extend(s.sensors().map(|n| n.id.as_str()).filter(|id| *id != node));
            r
        }
        MeasurementMode::PitchCatch => s.sensors().map(|n| n.id.as_str()).filter(|id| *id != node).collect(),
    };
    let mut raw = Vec::with_capacity(receivers.len());
    for (k, rx) in receivers.iter().enumerate() {
        raw.push((*rx, acquire_record(s, node, rx, &decoded, opts.snr_db, stream_id(opts.stream, k as u64))?));
    }
    cyc.fire(NodeEvent::MeasureDone);
    cyc.close(Phase::Measurement);

    let mut records = Vec::with_capacity(raw.len());
    let mut peer_time = 0.0;
    for (k, (rx, w)) in raw.iter().enumerate() {
        let bits = encode_record(w, opts.adc_bits)?;
        let link = PathModel::new(s, rx, hub, net.shm_mode)?;
        let mut tries = 0;
        let rec = loop {
            tries += 1;
            let stream = stream_id(opts.stream, 1000 + 16 * k as u64 + u64::from(tries));
            let got = simulate_uplink(&link, &bits, &ucfg, opts.threshold, uplink_sample_rate(s), opts.snr_db, s.rng_seed, stream);
            match got.and_then(|b| decode_record(&b, opts.adc_bits, w.sample_rate)) {
                Ok(r) => break r,
                Err(e) if tries > opts.decode_retries => return Err(e),
                Err(_) => {}
            }
        };
        let t_up = uplink_duration(s, bits.len()) * f64::from(tries);
        if *rx == node {
            cyc.run(0.0, e_upload * f64::from(tries), t_up);
        } else {
            peer_time += t_up;
        }
        records.push((String::from(*rx), rec));
    }
    if cmd.mode == MeasurementMode::PitchCatch {
        let status = uplink_energy(s, &ack_bits, c_p, pm.p_tx);
        cyc.run(0.0, status, uplink_duration(s, ack_bits.len()));
    }
    let n_idle = (peer_time * opts.dcdc.f_s).round() as usize;
    for _ in 0..n_idle {
        cyc.step(0.0, pm.p_quiescent);
    }
    cyc.fire(NodeEvent::UploadDone);
    cyc.close(Phase::Upload);
    cyc.close(Phase::Sleep);

    Ok(MeasurementCycleLog {
        node: String::from(node),
        f_opt,
        tones: (f_bit0, f_bit1),
        command: *cmd,
        downlink_attempts: attempts,
        events: cyc.events,
        phases: cyc.phases,
        ledger: cyc.fsm.pmu.ledger,
        budget,
        v_load_min_measuring: v_min,
        records,
    })
}

/// Square matrix of records: entry (i, j) is transmitted by node i and recorded by node j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    pub node_ids: Vec<String>,
    pub records: Vec<Vec<Option<Waveform>>>,
    pub f0: f64,
    pub sample_rate: f64,
    /// Start time of each transmitting node's cycle.
    pub timestamps: Vec<f64>,
}

impl DataMatrix {
    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Waveform> {
        self.records.get(i).and_then(|r| r.get(j)).and_then(|w| w.as_ref())
    }

    pub fn filled(&self) -> usize {
        self.records.iter().flatten().filter(|w| w.is_some()).count()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }
}

/// Round robin over `nodes`: each node transmits once while the others record.
pub fn collect_data_matrix(
    s: &PlateScenario,
    hub: &str,
    nodes: &[&str],
    template: &HubCommand,
    opts: &CycleOptions,
) -> Result<DataMatrix> {
    collect_data_matrix_logged(s, hub, nodes, template, opts).map(|(m, _)| m)
}

/// [`collect_data_matrix`] that also returns each transmitter's cycle log, records stripped.
pub fn collect_data_matrix_logged(
    s: &PlateScenario,
    hub: &str,
    nodes: &[&str],
    template: &HubCommand,
    opts: &CycleOptions,
) -> Result<(DataMatrix, Vec<MeasurementCycleLog>)> {
    if nodes.len() < 2 {
        return Err(invalid("nodes", "at least two sensor nodes"));
    }
    for (i, a) in nodes.iter().enumerate() {
        s.node(a)?;
        if nodes[..i].contains(a) {
            return Err(invalid("nodes", "duplicate node id"));
        }
    }
    let n = nodes.len();
    let mut m = DataMatrix {
        node_ids: nodes.iter().map(|s| String::from(*s)).collect(),
        records: vec![vec![None; n]; n],
        f0: template.f0,
        sample_rate: ADC_OVERSAMPLE * template.f0,
        timestamps: Vec::with_capacity(n),
    };
    let mut clock = 0.0;
    let mut done = 0;
    let mut logs = Vec::with_capacity(n);
    for (i, node) in nodes.iter().enumerate() {
        let idx = s.node_index(node)?;
        let node_id = u8::try_from(idx).map_err(|_| invalid("nodes", "node index exceeds 8-bit address"))?;
        let cmd = HubCommand { node_id, ..*template };
        let mut log = run_cycle(s, hub, node, &cmd, opts)
            .map_err(|e| Error::MatrixAborted { node: String::from(*node), completed: done, source: alloc::boxed::Box::new(e) })?;
        m.timestamps.push(clock);
        clock += log.duration();
        for (rx, w) in core::mem::take(&mut log.records) {
            if let Some(j) = nodes.iter().position(|x| *x == rx) {
                m.records[i][j] = Some(w);
                done += 1;
            }
        }
        logs.push(log);
    }
    Ok((m, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Mode;

    fn cmd() -> HubCommand {
        HubCommand { node_id: 3, mode: MeasurementMode::PulseEcho, f0: 287_500.0, n_cycles: 7, rx_gain_code: 11, record_length: 250e-6 }
    }

    #[test]
    fn command_round_trip() {
        let bits = encode_command(&cmd()).unwrap();
        assert_eq!(bits.len(), COMMAND_BITS);
        assert_eq!(&bits[..8], &[1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(decode_command(&bits).unwrap(), cmd());
    }

    #[test]
    fn every_single_bit_flip_is_caught() {
        let bits = encode_command(&cmd()).unwrap();
        for i in 0..bits.len() {
            let mut b = bits.clone();
            b[i] ^= 1;
            assert!(matches!(decode_command(&b), Err(Error::Crc { .. })), "flip at {i} slipped through");
        }
    }

    #[test]
    fn out_of_range_fields_rejected() {
        for f0 in [99_999.0, 500_001.0, 300_000.5] {
            assert!(encode_command(&HubCommand { f0, ..cmd() }).is_err());
        }
        assert!(encode_command(&HubCommand { n_cycles: 16, ..cmd() }).is_err());
        assert!(encode_command(&HubCommand { record_length: 1.5e-6, ..cmd() }).is_err());
    }

    #[test]
    fn fsm_is_total_and_follows_the_cycle() {
        for s in NodeState::ALL {
            for e in NODE_EVENTS {
                let next = s.on(e);
                assert!(NodeState::ALL.contains(&next));
                if e == NodeEvent::Brownout {
                    assert_eq!(next, NodeState::Cold);
                }
            }
        }
        let path = [
            NodeEvent::CarrierOn,
            NodeEvent::RegulationReached,
            NodeEvent::AckSent,
            NodeEvent::CommandDecoded,
            NodeEvent::MeasureStart,
            NodeEvent::MeasureDone,
            NodeEvent::UploadDone,
        ];
        let end = path.iter().fold(NodeState::Cold, |s, e| s.on(*e));
        assert_eq!(end, NodeState::Sleep);
        assert_eq!(NodeState::Cold.on(NodeEvent::MeasureStart), NodeState::Cold);
    }

    #[test]
    fn record_codec_quantizes_within_one_step() {
        let w = Waveform::new((0..300).map(|i| (i as f64 * 0.37).sin() * 0.02).collect(), 1.2e6).unwrap();
        let bits = encode_record(&w, 12).unwrap();
        assert_eq!(bits.len(), 48 + 300 * 12 + 8);
        let r = decode_record(&bits, 12, 1.2e6).unwrap();
        let step = w.peak() / 2047.0;
        assert!(w.samples.iter().zip(&r.samples).all(|(a, b)| (a - b).abs() <= 0.5 * step * 1.0001));
        let mut bad = bits.clone();
        bad[100] ^= 1;
        assert!(decode_record(&bad, 12, 1.2e6).is_err());
    }

    #[test]
    fn nmppt_flat_channel_returns_the_flat_maximum() {
        let mut s = PlateScenario::testbed();
        s.reflection_order = 0;
        s.network.power_mode = Mode::S0;
        let t = nmppt_trace(&s, "n7", "n1", 100e3, 500e3, 41, 6).unwrap();
        let p_max = t.probes.iter().map(|p| p.1).fold(0.0, f64::max);
        let p_min = t.probes.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert!(p_max - p_min <= 1e-12 * p_max);
        assert_eq!(t.power, p_max);
    }

    #[test]
    fn nmppt_finds_the_fine_grid_maximum() {
        let s = PlateScenario::testbed();
        for n in ["n1", "n4", "n6"] {
            let f = nmppt_search(&s, "n7", n, 100e3, 500e3, 4001, 8).unwrap();
            let fine = power_vs_frequency(&s, "n7", n, 100e3, 500e3, 40_001, Mode::A0).unwrap();
            let best = fine.iter().map(|p| p.1).fold(0.0, f64::max);
            let got = PathModel::new(&s, "n7", n, Mode::A0).unwrap().eval(f).norm_sqr();
            assert!(got >= 0.95 * best, "{n}: {got} vs {best}");
        }
    }

    #[test]
    fn nmppt_zero_gain_errors() {
        let mut s = PlateScenario::testbed();
        s.nodes[0].transducer.electromech_coupling = 0.0;
        assert!(matches!(nmppt_search(&s, "n7", "n1", 100e3, 500e3, 101, 4), Err(Error::NotFound(_))));
    }

    #[test]
    fn healthy_cycle_runs_every_phase_once_in_order() {
        let s = PlateScenario::testbed();
        let c = HubCommand::new(0, 300e3);
        let log = run_cycle(&s, "n7", "n1", &c, &CycleOptions::default()).unwrap();
        let phases: Vec<Phase> = log.phases.iter().map(|p| p.phase).collect();
        assert_eq!(phases, PHASE_ORDER);
        for w in log.phases.windows(2) {
            assert_eq!(w[0].t_end, w[1].t_start);
        }
        for e in &log.events {
            assert_eq!(e.from.on(e.event), e.to);
            assert_ne!(e.from, e.to);
        }
        assert_eq!(log.events.last().unwrap().to, NodeState::Sleep);
        assert!(log.energy_causal());
        assert!(log.ledger.residual().abs() <= 1e-9 * log.ledger.e_in, "{}", log.ledger.residual() / log.ledger.e_in);
        assert!(log.v_load_min_measuring >= 1.6);
        assert_eq!(log.records.len(), 5);
        let consumed: f64 = log.phases.iter().map(|p| p.e_consumed).sum();
        assert!((consumed - log.ledger.e_load).abs() <= 1e-9 * log.ledger.e_in);
    }

    #[test]
    fn dead_channel_times_out_in_power_up() {
        let mut s = PlateScenario::testbed();
        s.nodes[0].transducer.electromech_coupling = 0.0;
        let r = run_cycle(&s, "n7", "n1", &HubCommand::new(0, 300e3), &CycleOptions::default());
        assert!(matches!(r, Err(Error::Timeout { phase: "power-up", .. })), "{r:?}");
    }

    #[test]
    fn large_budget_extends_powering() {
        let mut s = PlateScenario::testbed();
        s.network.initial_v_stor = 0.8;
        let c = HubCommand { mode: MeasurementMode::PulseEcho, ..HubCommand::new(0, 300e3) };
        let base = run_cycle(&s, "n7", "n1", &c, &CycleOptions::default()).unwrap();
        let mut opts = CycleOptions::default();
        opts.power.p_tx = 60e-6;
        let heavy = run_cycle(&s, "n7", "n1", &c, &opts).unwrap();
        let powering = |l: &MeasurementCycleLog| l.phases.iter().find(|p| p.phase == Phase::Powering).map(|p| p.t_end - p.t_start).unwrap();
        assert!(heavy.budget * 1.2 > 15.8e-6);
        assert!(powering(&heavy) > powering(&base));
        assert!(heavy.energy_causal());
        assert!(heavy.v_load_min_measuring >= 1.6);
    }

    #[test]
    fn wrong_address_rejected() {
        let s = PlateScenario::testbed();
        assert!(run_cycle(&s, "n7", "n1", &HubCommand::new(2, 300e3), &CycleOptions::default()).is_err());
    }

    #[test]
    fn two_node_matrix() {
        let s = PlateScenario::testbed();
        let m = collect_data_matrix(&s, "n7", &["n2", "n5"], &HubCommand::new(0, 300e3), &CycleOptions::default()).unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.filled(), 2);
        assert!(m.get(0, 0).is_none() && m.get(0, 1).is_some());
        assert_eq!(m.get(0, 1).unwrap().samples, m.get(1, 0).unwrap().samples);
        assert!(collect_data_matrix(&s, "n7", &["n2"], &HubCommand::new(0, 300e3), &CycleOptions::default()).is_err());
    }
}
