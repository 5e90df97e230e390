//! Plate, material, node and damage descriptions.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use serde::{Deserialize, Serialize};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Guided-wave mode used on a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    S0,
    A0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialModel {
    pub shear_velocity: f64,
    pub s0_phase_velocity: f64,
    /// c_A in v_p(f) = c_A·√f, units m/s per √Hz.
    pub a0_dispersion_coefficient: f64,
    /// Coefficients a₂, a₄, … of g(θ) = 1 + Σ a₂ₘ·cos(2mθ).
    #[serde(default)]
    pub anisotropy: Vec<f64>,
    #[serde(default)]
    pub attenuation_per_meter: f64,
}

impl MaterialModel {
    pub fn isotropic(shear_velocity: f64, s0_phase_velocity: f64, a0_dispersion_coefficient: f64) -> Self {
        Self {
            shear_velocity,
            s0_phase_velocity,
            a0_dispersion_coefficient,
            anisotropy: Vec::new(),
            attenuation_per_meter: 0.0,
        }
    }

    /// Angular velocity gain g(θ).
    pub fn angular_gain(&self, theta: f64) -> f64 {
        1.0 + self
            .anisotropy
            .iter()
            .enumerate()
            .map(|(m, a)| a * (2.0 * (m + 1) as f64 * theta).cos())
            .sum::<f64>()
    }

    pub fn is_isotropic(&self) -> bool {
        self.anisotropy.iter().all(|a| *a == 0.0)
    }

    fn min_angular_gain(&self) -> f64 {
        (0..1440).map(|i| self.angular_gain(PI * i as f64 / 1440.0)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hub,
    Sensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransducerSpec {
    /// C_P in farads.
    pub capacitance: f64,
    pub electromech_coupling: f64,
}

impl Default for TransducerSpec {
    fn default() -> Self {
        Self { capacitance: 100e-12, electromech_coupling: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub position: (f64, f64),
    pub role: Role,
    #[serde(default)]
    pub transducer: TransducerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageSpec {
    pub center: (f64, f64),
    pub radius: f64,
    pub velocity_perturbation: f64,
    pub transmission_loss: f64,
}

/// Link-level operating defaults carried with the world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    /// Mode carrying wireless power and the downlink.
    pub power_mode: Mode,
    /// Mode used for SHM bursts and the uplink.
    pub shm_mode: Mode,
    pub band_lo: f64,
    pub band_hi: f64,
    /// Hub drive amplitude in volts.
    pub hub_drive: f64,
    pub initial_v_stor: f64,
    pub downlink_rate: f64,
    pub tone_spacing: f64,
    pub uplink_rate: f64,
    pub uplink_f0: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            power_mode: Mode::A0,
            shm_mode: Mode::S0,
            band_lo: 100e3,
            band_hi: 500e3,
            hub_drive: 30.0,
            initial_v_stor: 0.0,
            downlink_rate: 200.0,
            tone_spacing: 1e3,
            uplink_rate: 10e3,
            uplink_f0: 250e3,
        }
    }
}

fn default_edge_reflection() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateScenario {
    pub width: f64,
    pub height: f64,
    pub thickness: f64,
    pub material: MaterialModel,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub damages: Vec<DamageSpec>,
    #[serde(default)]
    pub reflection_order: u32,
    #[serde(default)]
    pub rng_seed: u64,
    /// Magnitude of the per-bounce edge reflection coefficient.
    #[serde(default = "default_edge_reflection")]
    pub edge_reflection: f64,
    #[serde(default)]
    pub network: NetworkSpec,
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub type_name: &'static str,
    pub field: String,
    pub rule: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}: {}", self.type_name, self.field, self.rule)
    }
}

fn v(type_name: &'static str, field: impl Into<String>, rule: &'static str) -> Violation {
    Violation { type_name, field: field.into(), rule }
}

fn pos(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

/// Every broken invariant, in declaration order. Empty means valid.
pub fn validate(s: &PlateScenario) -> Vec<Violation> {
    let mut out = Vec::new();
    if !pos(s.width) {
        out.push(v("PlateScenario", "width", "width > 0"));
    }
    if !pos(s.height) {
        out.push(v("PlateScenario", "height", "height > 0"));
    }
    if !pos(s.thickness) {
        out.push(v("PlateScenario", "thickness", "thickness > 0"));
    }
    if !(0.0..=1.0).contains(&s.edge_reflection) {
        out.push(v("PlateScenario", "edge_reflection", "edge_reflection in [0, 1]"));
    }
    let m = &s.material;
    if !pos(m.shear_velocity) {
        out.push(v("MaterialModel", "shear_velocity", "v_s > 0"));
    }
    if !pos(m.s0_phase_velocity) {
        out.push(v("MaterialModel", "s0_phase_velocity", "velocities positive"));
    }
    if !pos(m.a0_dispersion_coefficient) {
        out.push(v("MaterialModel", "a0_dispersion_coefficient", "velocities positive"));
    }
    if m.anisotropy.iter().any(|a| !a.is_finite()) || !(m.min_angular_gain() > 0.0) {
        out.push(v("MaterialModel", "anisotropy", "g(theta) > 0"));
    }
    if !(m.attenuation_per_meter >= 0.0) || !m.attenuation_per_meter.is_finite() {
        out.push(v("MaterialModel", "attenuation_per_meter", "attenuation >= 0"));
    }
    let mut seen = BTreeSet::new();
    let mut dup = false;
    for (i, n) in s.nodes.iter().enumerate() {
        if !seen.insert(n.id.as_str()) && !dup {
            dup = true;
            out.push(v("PlateScenario", "nodes", "node identifiers unique"));
        }
        let (x, y) = n.position;
        if !(x > 0.0 && x < s.width && y > 0.0 && y < s.height) {
            out.push(v("NodeSpec", alloc::format!("nodes[{i}].position"), "position outside plate"));
        }
        if !pos(n.transducer.capacitance) {
            out.push(v("TransducerSpec", alloc::format!("nodes[{i}].transducer.capacitance"), "C_P > 0"));
        }
        if !n.transducer.electromech_coupling.is_finite() {
            out.push(v(
                "TransducerSpec",
                alloc::format!("nodes[{i}].transducer.electromech_coupling"),
                "coupling finite",
            ));
        }
    }
    for (i, d) in s.damages.iter().enumerate() {
        if !pos(d.radius) {
            out.push(v("DamageSpec", alloc::format!("damages[{i}].radius"), "radius > 0"));
        }
        if !(0.0..=1.0).contains(&d.transmission_loss) {
            out.push(v("DamageSpec", alloc::format!("damages[{i}].transmission_loss"), "transmission_loss in [0, 1]"));
        }
        if !(d.velocity_perturbation > -1.0) || !d.velocity_perturbation.is_finite() {
            out.push(v("DamageSpec", alloc::format!("damages[{i}].velocity_perturbation"), "velocity_perturbation > -1"));
        }
    }
    let n = &s.network;
    if !(pos(n.band_lo) && n.band_hi > n.band_lo && n.band_hi.is_finite()) {
        out.push(v("NetworkSpec", "band_lo", "0 < band_lo < band_hi"));
    }
    if !pos(n.hub_drive) {
        out.push(v("NetworkSpec", "hub_drive", "hub_drive > 0"));
    }
    if !(n.initial_v_stor >= 0.0) || !n.initial_v_stor.is_finite() {
        out.push(v("NetworkSpec", "initial_v_stor", "voltages >= 0"));
    }
    if !(10.0..=200.0).contains(&n.downlink_rate) {
        out.push(v("NetworkSpec", "downlink_rate", "downlink_rate in [10, 200] bit/s"));
    }
    if !pos(n.tone_spacing) {
        out.push(v("NetworkSpec", "tone_spacing", "tone_spacing > 0"));
    }
    if !(pos(n.uplink_rate) && n.uplink_rate <= 10e3) {
        out.push(v("NetworkSpec", "uplink_rate", "uplink_rate in (0, 10000] bit/s"));
    }
    if !(pos(n.uplink_f0) && n.uplink_f0 > n.uplink_rate) {
        out.push(v("NetworkSpec", "uplink_f0", "uplink_f0 > uplink_rate"));
    }
    out
}

impl PlateScenario {
    /// Returns the scenario when every invariant holds.
    pub fn validated(self) -> Result<Self> {
        let errs = validate(&self);
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn node(&self, id: &str) -> Result<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.nodes.iter().position(|n| n.id == id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// The single hub node; protocol runs require exactly one.
    pub fn hub(&self) -> Result<&NodeSpec> {
        let mut hubs = self.nodes.iter().filter(|n| n.role == Role::Hub);
        match (hubs.next(), hubs.next()) {
            (Some(h), None) => Ok(h),
            _ => Err(Error::Validation(alloc::vec![v("PlateScenario", "nodes", "exactly one hub")])),
        }
    }

    pub fn sensors(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.role == Role::Sensor)
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        let (pa, pb) = (self.node(a)?.position, self.node(b)?.position);
        Ok((pa.0 - pb.0).hypot(pa.1 - pb.1))
    }

    /// The 0.3 m × 0.3 m, 2 mm CFRP test panel with six sensors and a hub.
    /// Material constants are synthetic: the panel was never characterized numerically.
    pub fn testbed() -> Self {
        let positions = [
            ("n1", (0.06, 0.07)),
            ("n2", (0.13, 0.05)),
            ("n3", (0.24, 0.07)),
            ("n4", (0.23, 0.24)),
            ("n5", (0.11, 0.165)),
            ("n6", (0.07, 0.24)),
        ];
        let transducer = TransducerSpec { electromech_coupling: 0.06, ..TransducerSpec::default() };
        let mut nodes: Vec<NodeSpec> = positions
            .iter()
            .map(|(id, p)| NodeSpec {
                id: (*id).to_string(),
                position: *p,
                role: Role::Sensor,
                transducer,
            })
            .collect();
        nodes.push(NodeSpec { id: "n7".to_string(), position: (0.17, 0.14), role: Role::Hub, transducer });
        Self {
            width: 0.3,
            height: 0.3,
            thickness: 0.002,
            material: MaterialModel::isotropic(1800.0, 6000.0, 2.4),
            nodes,
            damages: Vec::new(),
            reflection_order: 4,
            rng_seed: 0,
            edge_reflection: 0.9,
            network: NetworkSpec::default(),
        }
    }
}

/// Regular pixel grid over the plate, row-major (y outer, x inner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub points: Vec<(f64, f64)>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, p: (f64, f64)) -> usize {
        let ix = ((p.0 / self.dx).floor().max(0.0) as usize).min(self.nx - 1);
        let iy = ((p.1 / self.dy).floor().max(0.0) as usize).min(self.ny - 1);
        iy * self.nx + ix
    }
}

/// ⌈a/b⌉ that ignores round-off just above an integer.
pub fn cell_count(extent: f64, resolution: f64) -> usize {
    let q = extent / resolution;
    let r = q.round();
    if (q - r).abs() < 1e-9 * r.max(1.0) {
        r as usize
    } else {
        q.ceil() as usize
    }
}

/// Pixel centres; spacing is `width / ⌈width/res⌉` so the grid exactly tiles the plate.
pub fn spatial_grid(s: &PlateScenario, resolution: f64) -> Result<Grid> {
    if !(resolution > 0.0 && resolution < s.width.min(s.height)) {
        return Err(invalid("resolution", "must satisfy 0 < resolution < min(width, height)"));
    }
    let nx = cell_count(s.width, resolution);
    let ny = cell_count(s.height, resolution);
    let dx = s.width / nx as f64;
    let dy = s.height / ny as f64;
    let mut points = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            points.push(((ix as f64 + 0.5) * dx, (iy as f64 + 0.5) * dy));
        }
    }
    Ok(Grid { nx, ny, dx, dy, points })
}
