//! Argument parsing and dispatch for the `gwshm` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::load_scenario;
use crate::error::{CliError, CliResult};
use crate::export::write_json;
use crate::pipelines::{self, LinkParams, LocalizeParams, MeasureParams, PmuParams, Profile, PulseParams, SurveyParams};

pub const ENV_OUT: &str = "GWSHM_OUT";

#[derive(Debug, Parser)]
#[command(name = "gwshm", version, about = "Guided-wave SHM network simulator")]
pub struct Cli {
    /// Scenario TOML file; the built-in testbed when omitted.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Overrides the scenario's rng_seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = ENV_OUT, default_value = "gwshm-out")]
    pub out: PathBuf,
    /// Scenario override such as `network.hub_drive=20` or `nodes.0.position=[0.1, 0.1]`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Synthesize a multi-level burst and measure its spectrum.
    Pulse(PulseArgs),
    /// Run the power management unit against harvest and load profiles.
    Pmu(PmuArgs),
    /// Sweep hub-to-sensor received power and locate f_opt per pair.
    Survey(SurveyArgs),
    /// Bit error rates of the downlink and uplink per sensor.
    Link(LinkArgs),
    /// Damage maps from baseline and current data matrices.
    Localize(LocalizeArgs),
    /// Collect a pitch-catch data matrix through the full protocol.
    Matrix(MeasureArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pulse(_) => "pulse",
            Command::Pmu(_) => "pmu",
            Command::Survey(_) => "survey",
            Command::Link(_) => "link",
            Command::Localize(_) => "localize",
            Command::Matrix(_) => "matrix",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PulseArgs {
    #[arg(long, default_value_t = 300e3, allow_negative_numbers = true)]
    pub f0: f64,
    #[arg(long, default_value_t = 5)]
    pub cycles: u32,
    /// Number of supply levels.
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Re-optimize the level set for sidelobe level.
    #[arg(long)]
    pub optimize: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PmuArgs {
    /// Harvested power in watts, or a CSV of (t, watts) rows.
    #[arg(long, default_value = "1e-3")]
    pub harvest: String,
    /// Load current in amperes, or a CSV of (t, amperes) rows.
    #[arg(long, default_value = "1e-4")]
    pub load: String,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 2.5)]
    pub v_stor: f64,
    #[arg(long, default_value_t = 2.0)]
    pub v_load: f64,
    /// Telemetry row every this many switching periods.
    #[arg(long, default_value_t = 50)]
    pub decimate: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SurveyArgs {
    #[arg(long, default_value_t = 4001)]
    pub points: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LinkArgs {
    #[arg(long, default_value_t = 10_000)]
    pub bits: usize,
    /// Additive noise SNR in dB; noiseless when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub snr: Option<f64>,
    /// Restrict to one sensor.
    #[arg(long)]
    pub node: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MeasureArgs {
    #[arg(long, default_value_t = 400e3)]
    pub f0: f64,
    #[arg(long, default_value_t = 5)]
    pub cycles: u32,
    /// Record length in microseconds.
    #[arg(long, default_value_t = 300)]
    pub record_us: u32,
    #[arg(long, default_value_t = 8)]
    pub gain_code: u8,
    #[arg(long)]
    pub pulse_echo: bool,
    #[arg(long, allow_negative_numbers = true)]
    pub snr: Option<f64>,
}

impl MeasureArgs {
    fn params(&self) -> MeasureParams {
        MeasureParams {
            f0: self.f0,
            n_cycles: self.cycles,
            record_length: f64::from(self.record_us) / 1e6,
            rx_gain_code: self.gain_code,
            pulse_echo: self.pulse_echo,
            snr_db: self.snr,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub measure: MeasureArgs,
    /// Pixel pitch in meters.
    #[arg(long, default_value_t = 0.005)]
    pub resolution: f64,
    /// RAPID ellipse scale.
    #[arg(long, default_value_t = 1.05)]
    pub beta: f64,
    /// Keep edge reflections in the residuals.
    #[arg(long)]
    pub no_gate: bool,
    /// Directory written by `matrix` holding the baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Directory written by `matrix` holding the current state.
    #[arg(long)]
    pub current: Option<PathBuf>,
}

/// Written into every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub scenario: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub seed: u64,
    pub params: Command,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("rng_seed={seed}"));
    }
    let s = load_scenario(cli.scenario.as_deref(), &overrides)?;
    let out: &Path = &cli.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cli.command.name().into(),
        scenario: cli.scenario.clone(),
        overrides: cli.set.clone(),
        out: cli.out.clone(),
        seed: s.rng_seed,
        params: cli.command.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    match &cli.command {
        Command::Pulse(a) => {
            pipelines::pulse(&s, &PulseParams { f0: a.f0, n_cycles: a.cycles, levels: a.levels, optimize: a.optimize }, out)?;
        }
        Command::Pmu(a) => {
            let p = PmuParams {
                harvest: Profile::parse(&a.harvest)?,
                load: Profile::parse(&a.load)?,
                duration: a.duration,
                v_stor0: a.v_stor,
                v_load0: a.v_load,
                decimate: a.decimate,
            };
            pipelines::pmu(&p, out)?;
        }
        Command::Survey(a) => {
            pipelines::survey(&s, &SurveyParams { points: a.points, ..SurveyParams::default() }, out)?;
        }
        Command::Link(a) => {
            pipelines::link(&s, &LinkParams { bits: a.bits, snr_db: a.snr, node: a.node.clone() }, out)?;
        }
        Command::Localize(a) => {
            let p = LocalizeParams {
                measure: a.measure.params(),
                resolution: a.resolution,
                beta: a.beta,
                gate: !a.no_gate,
                baseline: a.baseline.clone(),
                current: a.current.clone(),
            };
            pipelines::localize_cmd(&s, &p, out)?;
        }
        Command::Matrix(a) => {
            pipelines::matrix(&s, &a.params(), out)?;
        }
    }
    Ok(())
}
