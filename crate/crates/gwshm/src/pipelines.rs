//! Subcommand pipelines. Each returns its report and writes artifacts under `out`.

use std::fs;
use std::path::{Path, PathBuf};

use gwshm_core::channel::{group_velocity, power_vs_frequency, transfer_function, PathModel};
use gwshm_core::datalink::{measure_ber, select_tones, simulate_downlink, simulate_uplink, BerReport, CdrConfig, DownlinkConfig, ThresholdPolicy};
use gwshm_core::localization::{
    calibrate_group_velocity, damage_indices, das_map, das_map_compensated, direct_arrival_gates, excitation_delay, localize, node_positions, rapid_map,
    BaselinePair, DamageMap, VelocityProfile,
};
use gwshm_core::pmu::{dcdc_step, end_to_end_pce, ConverterState, DcDcConfig, EnergyLedger, PmuState};
use gwshm_core::protocol::{
    collect_data_matrix_logged, downlink_sample_rate, nmppt_search, uplink_config, uplink_sample_rate, CycleOptions, DataMatrix, HubCommand,
    MeasurementCycleLog, MeasurementMode, SHM_LOAD_Q,
};
use gwshm_core::rng;
use gwshm_core::scenario::{spatial_grid, PlateScenario, Role};
use gwshm_core::signal::Waveform;
use gwshm_core::transceiver::{apply_lrc, optimize_levels, spectral_metrics, spectrum_db, synthesize_burst, LevelObjective, LrcLoad, PulseSpec};
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};
use crate::export::{load_matrix, save_matrix, write_json, write_map_csv, write_map_pgm, write_table};
use crate::io::{write_waveform_csv, write_wavf};

fn mkdir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))
}

fn hub_id(s: &PlateScenario) -> CliResult<String> {
    s.hub().map(|h| h.id.clone()).context("hub")
}

fn sensor_ids(s: &PlateScenario) -> Vec<String> {
    s.nodes.iter().filter(|n| n.role == Role::Sensor).map(|n| n.id.clone()).collect()
}

// ---------------------------------------------------------------- pulse

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseParams {
    pub f0: f64,
    pub n_cycles: u32,
    /// Number of supply levels; 5 uses the fixed default set, 1 a rectangular burst.
    pub levels: usize,
    pub optimize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseReport {
    pub f0: f64,
    pub n_cycles: u32,
    pub levels_v: Vec<f64>,
    pub psl_db: f64,
    pub psl_raw_db: f64,
    pub bw3db_hz: f64,
    pub third_harmonic_dbc: f64,
    pub filtered_third_harmonic_dbc: f64,
    pub lrc_q: f64,
}

pub fn pulse(s: &PlateScenario, p: &PulseParams, out: &Path) -> CliResult<PulseReport> {
    if !(p.f0 > 0.0 && p.f0.is_finite()) || p.n_cycles == 0 || p.levels == 0 {
        return Err(CliError::Usage("pulse needs f0 > 0, cycles ≥ 1 and levels ≥ 1".into()));
    }
    let base = PulseSpec { n_cycles: p.n_cycles, ..PulseSpec::new(p.f0) };
    let spec = if p.levels == 1 {
        PulseSpec::rectangular(p.f0, p.n_cycles)
    } else if p.levels == base.levels.len() && !p.optimize {
        base
    } else {
        let set = optimize_levels(p.levels, p.n_cycles, base.a0, LevelObjective::Psl).context("level optimization")?;
        PulseSpec { levels: set.levels.iter().map(|l| l * base.vdd).collect(), ..base }
    };
    let fs = 64.0 * p.f0;
    let burst = synthesize_burst(&spec, fs).context("burst")?;
    let m = spectral_metrics(&burst, p.f0).context("spectrum")?;
    let c_p = s.nodes.first().map_or(100e-12, |n| n.transducer.capacitance);
    let load = LrcLoad::tuned(p.f0, c_p, SHM_LOAD_Q);
    let filtered = apply_lrc(&burst, &load).context("LRC load")?;
    let mf = spectral_metrics(&filtered, p.f0).context("spectrum")?;
    mkdir(out)?;
    write_waveform_csv(&out.join("burst.csv"), &burst)?;
    write_waveform_csv(&out.join("burst_filtered.csv"), &filtered)?;
    write_table(&out.join("spectrum.csv"), &["f_hz", "db"], spectrum_db(&burst, 4.0 * p.f0).into_iter().map(|(f, d)| vec![f, d]))?;
    let report = PulseReport {
        f0: p.f0,
        n_cycles: p.n_cycles,
        levels_v: spec.levels.clone(),
        psl_db: m.psl_db,
        psl_raw_db: m.psl_raw_db,
        bw3db_hz: m.bw3db_hz,
        third_harmonic_dbc: m.third_harmonic_dbc,
        filtered_third_harmonic_dbc: mf.third_harmonic_dbc,
        lrc_q: SHM_LOAD_Q,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- pmu

/// Piecewise-constant input: a constant, or (t, value) rows held until the next row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl Profile {
    /// A number, or the path of a two-column CSV with a header row.
    pub fn parse(spec: &str) -> CliResult<Self> {
        if let Ok(v) = spec.trim().parse::<f64>() {
            return Ok(Profile::Constant(v));
        }
        let path = Path::new(spec);
        let mut rd = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("profile `{spec}`: {e}")))?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| CliError::Usage(format!("profile `{spec}`: {e}")))?;
            let num = |k: usize| rec.get(k).and_then(|x| x.trim().parse::<f64>().ok());
            match (num(0), num(1)) {
                (Some(t), Some(v)) => rows.push((t, v)),
                _ => return Err(CliError::Usage(format!("profile `{spec}`: rows must hold two numbers"))),
            }
        }
        if rows.is_empty() || rows.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(CliError::Usage(format!("profile `{spec}`: needs rows in time order")));
        }
        Ok(Profile::Table(rows))
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            Profile::Constant(v) => *v,
            Profile::Table(rows) => {
                let k = rows.partition_point(|r| r.0 <= t);
                rows[k.saturating_sub(1)].1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmuParams {
    /// Harvested power, watts.
    pub harvest: Profile,
    /// Load current, amperes.
    pub load: Profile,
    pub duration: f64,
    pub v_stor0: f64,
    pub v_load0: f64,
    /// Telemetry row every this many switching periods.
    pub decimate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmuSummary {
    pub steps: u64,
    pub alpha: f64,
    pub eta_tot_ledger: f64,
    pub eta_tot_formula: f64,
    /// Seconds spent in states 1, 2, 3.
    pub dwell_s: [f64; 3],
    pub transitions: u64,
    /// Peak-to-peak v_load over the second half of the run.
    pub ripple_v: f64,
    pub v_load_final: f64,
    pub v_stor_final: f64,
    pub ledger: EnergyLedger,
}

pub fn pmu(p: &PmuParams, out: &Path) -> CliResult<PmuSummary> {
    let cfg = DcDcConfig::default();
    cfg.check().context("converter config")?;
    if !(p.duration > 0.0 && p.duration.is_finite()) || p.decimate == 0 {
        return Err(CliError::Usage("pmu needs duration > 0 and decimate ≥ 1".into()));
    }
    let n = (p.duration * cfg.f_s).round() as u64;
    let dt = 1.0 / cfg.f_s;
    let mut st = PmuState::new(&cfg, p.v_stor0, p.v_load0);
    let mut rows = Vec::new();
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..n {
        let t = k as f64 * dt;
        st = dcdc_step(&st, &cfg, p.harvest.at(t), p.load.at(t));
        if 2 * k >= n {
            hi = hi.max(st.v_load);
            lo = lo.min(st.v_load);
        }
        if k % p.decimate as u64 == 0 || k + 1 == n {
            let state = match st.state {
                ConverterState::Backup => 1.0,
                ConverterState::Load => 2.0,
                ConverterState::Charge => 3.0,
            };
            rows.push(vec![t + dt, state, st.v_rect, st.v_stor, st.v_load, st.alpha(), st.ledger.eta_tot(cfg.eta2)]);
        }
    }
    mkdir(out)?;
    write_table(&out.join("telemetry.csv"), &["t", "state", "v_rect", "v_stor", "v_load", "alpha", "eta_tot"], rows)?;
    let summary = PmuSummary {
        steps: n,
        alpha: st.alpha(),
        eta_tot_ledger: st.ledger.eta_tot(cfg.eta2),
        eta_tot_formula: end_to_end_pce(cfg.eta1, cfg.eta2, st.alpha()),
        dwell_s: st.cycles_state.map(|c| c as f64 * dt),
        transitions: st.transitions,
        ripple_v: if hi >= lo { hi - lo } else { 0.0 },
        v_load_final: st.v_load,
        v_stor_final: st.v_stor,
        ledger: st.ledger,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- survey

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyParams {
    pub points: usize,
    pub coarse_points: usize,
    pub refine_steps: u32,
}

impl Default for SurveyParams {
    fn default() -> Self {
        Self { points: 4001, coarse_points: 4001, refine_steps: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub tx: String,
    pub rx: String,
    pub distance_m: f64,
    pub f_opt_hz: f64,
    pub power_opt: f64,
    pub band_average: f64,
    pub gain_db: f64,
    /// 1 − min(P(f_opt ± 1 kHz)) / P(f_opt).
    pub drop_1khz: f64,
    pub exceeds_15db: bool,
}

pub fn survey(s: &PlateScenario, p: &SurveyParams, out: &Path) -> CliResult<Vec<SurveyRow>> {
    let hub = hub_id(s)?;
    let net = &s.network;
    mkdir(out)?;
    let mut rows = Vec::new();
    for node in sensor_ids(s) {
        let ctx = format!("survey {hub}->{node}");
        let sweep = power_vs_frequency(s, &hub, &node, net.band_lo, net.band_hi, p.points, net.power_mode).context(&ctx)?;
        write_table(&out.join(format!("power_{hub}_{node}.csv")), &["f_hz", "power_fraction"], sweep.iter().map(|(f, v)| vec![*f, *v]))?;
        let freqs: Vec<f64> = sweep.iter().map(|x| x.0).collect();
        let h = transfer_function(s, &hub, &node, &freqs, net.power_mode).context(&ctx)?;
        write_table(&out.join(format!("response_{hub}_{node}.csv")), &["f_hz", "re", "im"], freqs.iter().zip(&h.h).map(|(f, h)| vec![*f, h.re, h.im]))?;
        let f_opt = nmppt_search(s, &hub, &node, net.band_lo, net.band_hi, p.coarse_points, p.refine_steps).context(&ctx)?;
        let model = PathModel::new(s, &hub, &node, net.power_mode).context(&ctx)?;
        let pw = |f: f64| model.eval(f).norm_sqr();
        let avg = freqs.iter().map(|f| pw(*f)).sum::<f64>() / freqs.len() as f64;
        let p_opt = pw(f_opt);
        let gain_db = 10.0 * (p_opt / avg).log10();
        rows.push(SurveyRow {
            tx: hub.clone(),
            rx: node.clone(),
            distance_m: s.distance(&hub, &node).context(&ctx)?,
            f_opt_hz: f_opt,
            power_opt: p_opt,
            band_average: avg,
            gain_db,
            drop_1khz: 1.0 - pw(f_opt - 1e3).min(pw(f_opt + 1e3)) / p_opt,
            exceeds_15db: gain_db >= 15.0,
        });
    }
    write_json(&out.join("f_opt.json"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------- link

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub bits: usize,
    pub snr_db: Option<f64>,
    pub node: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub node: String,
    pub f_opt_hz: f64,
    pub tones_hz: (f64, f64),
    pub depth_ratio: f64,
    pub downlink: BerReport,
    pub uplink: BerReport,
}

pub fn random_bits(seed: u64, labels: &[&str], n: usize) -> Vec<u8> {
    let mut g = rng::fork(seed, labels, 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = g.next_u64();
        out.extend((0..64).map(|k| ((w >> k) & 1) as u8).take(n - out.len()));
    }
    out
}

/// Downlink hub→node then uplink node→hub at the scenario's link settings.
pub fn link_one(s: &PlateScenario, node: &str, bits: usize, snr_db: Option<f64>, stream: u64) -> CliResult<LinkReport> {
    let hub = hub_id(s)?;
    let net = &s.network;
    let ctx = format!("link {node}");
    let f_opt = nmppt_search(s, &hub, node, net.band_lo, net.band_hi, 4001, 8).context(&ctx)?;
    let model = PathModel::new(s, &hub, node, net.power_mode).context(&ctx)?;
    let (f_bit0, f_bit1) = select_tones(&model, f_opt, net.tone_spacing);
    let dl = DownlinkConfig { f_bit0, f_bit1, bit_rate: net.downlink_rate, amplitude: net.hub_drive };
    let tx = random_bits(s.rng_seed, &["link", "downlink", node], bits);
    let seed = s.rng_seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let rx = simulate_downlink(&model, &tx, &dl, &CdrConfig::for_bit_rate(dl.bit_rate), downlink_sample_rate(&dl), snr_db, seed).context(&ctx)?;
    let downlink = measure_ber(&tx, &rx).context(&ctx)?;
    let up_model = PathModel::new(s, node, &hub, net.shm_mode).context(&ctx)?;
    let utx = random_bits(s.rng_seed, &["link", "uplink", node], bits);
    let urx = simulate_uplink(&up_model, &utx, &uplink_config(s), ThresholdPolicy::Fixed, uplink_sample_rate(s), snr_db, s.rng_seed, stream).context(&ctx)?;
    let uplink = measure_ber(&utx, &urx).context(&ctx)?;
    Ok(LinkReport {
        node: node.to_string(),
        f_opt_hz: f_opt,
        tones_hz: (f_bit0, f_bit1),
        depth_ratio: model.eval(f_bit1).norm() / model.eval(f_bit0).norm(),
        downlink,
        uplink,
    })
}

pub fn link(s: &PlateScenario, p: &LinkParams, out: &Path) -> CliResult<Vec<LinkReport>> {
    if p.bits == 0 {
        return Err(CliError::Usage("link needs bits ≥ 1".into()));
    }
    let nodes = match &p.node {
        Some(n) => {
            s.node(n).map_err(|e| CliError::Usage(format!("--node {n}: {e}")))?;
            vec![n.clone()]
        }
        None => sensor_ids(s),
    };
    let reports = nodes.iter().map(|n| link_one(s, n, p.bits, p.snr_db, 0)).collect::<CliResult<Vec<_>>>()?;
    mkdir(out)?;
    write_json(&out.join("ber.json"), &reports)?;
    Ok(reports)
}

// ---------------------------------------------------------------- matrix

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureParams {
    pub f0: f64,
    pub n_cycles: u32,
    pub record_length: f64,
    pub rx_gain_code: u8,
    pub pulse_echo: bool,
    pub snr_db: Option<f64>,
}

impl Default for MeasureParams {
    fn default() -> Self {
        Self { f0: 400e3, n_cycles: 5, record_length: 300e-6, rx_gain_code: 8, pulse_echo: false, snr_db: None }
    }
}

impl MeasureParams {
    pub fn command(&self) -> HubCommand {
        HubCommand {
            mode: if self.pulse_echo { MeasurementMode::PulseEcho } else { MeasurementMode::PitchCatch },
            n_cycles: self.n_cycles,
            rx_gain_code: self.rx_gain_code,
            record_length: self.record_length,
            ..HubCommand::new(0, self.f0)
        }
    }
}

pub fn collect(s: &PlateScenario, p: &MeasureParams) -> CliResult<(DataMatrix, Vec<MeasurementCycleLog>)> {
    let hub = hub_id(s)?;
    let ids = sensor_ids(s);
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let cmd = p.command();
    cmd.check().map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = CycleOptions { snr_db: p.snr_db, ..CycleOptions::default() };
    collect_data_matrix_logged(s, &hub, &refs, &cmd, &opts).context("data matrix")
}

pub fn matrix(s: &PlateScenario, p: &MeasureParams, out: &Path) -> CliResult<DataMatrix> {
    let (m, logs) = collect(s, p)?;
    mkdir(out)?;
    save_matrix(&out.join("matrix"), &m)?;
    write_json(&out.join("cycle_logs.json"), &logs)?;
    Ok(m)
}

// ---------------------------------------------------------------- localize

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeParams {
    pub measure: MeasureParams,
    pub resolution: f64,
    pub beta: f64,
    /// Zero each record from its first edge-reflection arrival on.
    pub gate: bool,
    pub baseline: Option<PathBuf>,
    pub current: Option<PathBuf>,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self { measure: MeasureParams::default(), resolution: 0.005, beta: 1.05, gate: true, baseline: None, current: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub raw_max: f64,
    pub argmax: Option<(f64, f64)>,
    pub error_m: Option<f64>,
    pub out_of_record: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeReport {
    pub truth: Option<(f64, f64)>,
    pub t_offset_s: f64,
    pub v_nominal: f64,
    pub profile: VelocityProfile,
    pub gated: bool,
    pub rapid: MapSummary,
    pub das: MapSummary,
    pub das_compensated: MapSummary,
}

fn summarize(map: &DamageMap, truth: Option<(f64, f64)>) -> MapSummary {
    let loc = localize(map, truth).ok();
    MapSummary { raw_max: map.raw_max, argmax: loc.map(|l| l.argmax), error_m: loc.and_then(|l| l.error_m), out_of_record: map.out_of_record }
}

/// Angle-averaged group velocity of the SHM mode at `f0`.
pub fn nominal_velocity(s: &PlateScenario, f0: f64) -> CliResult<f64> {
    let n = 360;
    let mut sum = 0.0;
    for k in 0..n {
        sum += group_velocity(&s.material, f0, std::f64::consts::PI * k as f64 / n as f64, s.network.shm_mode).context("velocity")?;
    }
    Ok(sum / n as f64)
}

pub struct LocalizeOutput {
    pub report: LocalizeReport,
    pub rapid: DamageMap,
    pub das: DamageMap,
    pub das_compensated: DamageMap,
}

/// Baseline and current come from files when given, otherwise from simulated collections of
/// the scenario without and with its damages.
pub fn localize_run(s: &PlateScenario, p: &LocalizeParams) -> CliResult<LocalizeOutput> {
    if !(p.resolution > 0.0) || !(p.beta > 1.0) {
        return Err(CliError::Usage("localize needs resolution > 0 and beta > 1".into()));
    }
    let baseline = match &p.baseline {
        Some(d) => load_matrix(d)?,
        None => {
            let healthy = PlateScenario { damages: Vec::new(), ..s.clone() };
            collect(&healthy, &p.measure)?.0
        }
    };
    let current = match &p.current {
        Some(d) => load_matrix(d)?,
        None => collect(s, &p.measure)?.0,
    };
    let cmd = HubCommand { f0: baseline.f0, ..p.measure.command() };
    let tx0 = baseline.node_ids.first().cloned().unwrap_or_default();
    let t_offset = excitation_delay(s, &tx0, &cmd).context("excitation delay")?;
    let nodes = node_positions(s, &baseline.node_ids).context("node positions")?;
    let v_nominal = nominal_velocity(s, baseline.f0)?;
    let profile = calibrate_group_velocity(&baseline, &nodes, v_nominal, t_offset).context("velocity calibration")?;
    let mut pair = BaselinePair::new(baseline, current, t_offset).context("baseline pair")?;
    if p.gate {
        let guard = 0.5 * f64::from(cmd.n_cycles) / cmd.f0;
        let gates = direct_arrival_gates(s, &pair.baseline.node_ids, pair.baseline.f0, t_offset, guard).context("gates")?;
        pair = pair.gated(&gates).context("gating")?;
    }
    let grid = spatial_grid(s, p.resolution).map_err(|e| CliError::Usage(e.to_string()))?;
    let di = damage_indices(&pair).context("damage indices")?;
    let rapid = rapid_map(&di, &nodes, &grid, p.beta).context("RAPID")?;
    let das = das_map(&pair, &nodes, &grid, profile.mean()).context("DAS")?;
    let das_compensated = das_map_compensated(&pair, &nodes, &grid, &profile).context("compensated DAS")?;
    let truth = s.damages.first().map(|d| d.center);
    let report = LocalizeReport {
        truth,
        t_offset_s: t_offset,
        v_nominal,
        profile,
        gated: p.gate,
        rapid: summarize(&rapid, truth),
        das: summarize(&das, truth),
        das_compensated: summarize(&das_compensated, truth),
    };
    Ok(LocalizeOutput { report, rapid, das, das_compensated })
}

pub fn localize_cmd(s: &PlateScenario, p: &LocalizeParams, out: &Path) -> CliResult<LocalizeReport> {
    let o = localize_run(s, p)?;
    mkdir(out)?;
    for (name, map) in [("rapid", &o.rapid), ("das", &o.das), ("das_compensated", &o.das_compensated)] {
        write_map_csv(&out.join(format!("{name}.csv")), map)?;
        write_map_pgm(&out.join(format!("{name}.pgm")), map)?;
    }
    write_json(&out.join("localization.json"), &o.report)?;
    Ok(o.report)
}

/// Writes one record for inspection.
pub fn export_record(dir: &Path, name: &str, w: &Waveform) -> CliResult<()> {
    mkdir(dir)?;
    write_waveform_csv(&dir.join(format!("{name}.csv")), w)?;
    write_wavf(&dir.join(format!("{name}.wavf")), w)
}
