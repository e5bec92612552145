//! Physical model: rotary-wing propulsion energy, sensor batteries with
//! Bernoulli harvesting, the probabilistic LoS air-to-ground channel with
//! co-channel interference, and Age-of-Information dynamics.
//!
//! Everything here is a pure function of explicit inputs. Randomness is only
//! drawn through the `rng` argument of [`sample_path_loss`] and
//! [`world_step`], in a fixed order, so a `(config, seed, actions)` triple
//! replays bit-exactly.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feasibility;
use crate::rng::StreamRng;

/// Slack used when checking that a position lies inside the square area.
const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("link budget distance {distance:.3} m is below the altitude {altitude:.3} m")]
    AltitudeExceedsRange { distance: f64, altitude: f64 },
    #[error("3D distance {distance} m is shorter than the altitude {altitude} m")]
    BadGeometry { distance: f64, altitude: f64 },
    #[error("UAV {uav} has no scheduled sensor")]
    NoScheduledSn { uav: usize },
    #[error("sensor {sn} transmitted with {battery} J, below the {required} J needed")]
    EnergyCausalityViolation { sn: usize, battery: f64, required: f64 },
    #[error("UAV {uav} would leave the area at ({x:.3}, {y:.3})")]
    OutOfArea { uav: usize, x: f64, y: f64 },
    #[error("slot {t} is past the horizon {horizon}")]
    EpisodeOver { t: u32, horizon: u32 },
    #[error("invalid command for UAV {uav}: {reason}")]
    InvalidCommand { uav: usize, reason: String },
    #[error("missing channel gain for sensor {sn} at UAV {uav}")]
    MissingGain { sn: usize, uav: usize },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid world config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Physics(#[from] WorldError),
    #[error("UAV {uav} cannot reach its destination from its start within the horizon and energy budget")]
    InfeasibleMission { uav: usize },
}

/// Rotor and airframe constants of the propulsion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotorParams {
    pub n_r: u32,
    /// Local blade section drag coefficient.
    pub sigma: f64,
    pub c_t: f64,
    pub rho: f64,
    /// Disc area of each rotor (m²).
    pub disc_area: f64,
    /// Rotor solidity.
    pub c_s: f64,
    /// Fuselage drag ratio.
    pub d_0: f64,
    /// Incremental correction factor of induced power.
    pub c_f: f64,
    /// Fuselage equivalent flat plate area (m²). Not a published table value.
    pub s_fp: f64,
    /// UAV mass (kg).
    pub mass: f64,
    pub g: f64,
}

impl Default for RotorParams {
    fn default() -> Self {
        Self {
            n_r: 4,
            sigma: 0.012,
            c_t: 0.302,
            rho: 1.225,
            disc_area: 0.0314,
            c_s: 0.0955,
            d_0: 0.834,
            c_f: 0.131,
            s_fp: 0.0151,
            mass: 2.0,
            g: 9.8,
        }
    }
}

/// A per-sensor value given either once for all sensors or one per sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSn {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerSn {
    pub fn expand(&self, n: usize) -> Result<Vec<f64>, ConfigError> {
        match self {
            PerSn::Uniform(v) => Ok(vec![*v; n]),
            PerSn::Each(vs) if vs.len() == n => Ok(vs.clone()),
            PerSn::Each(vs) => Err(ConfigError::Invalid(format!(
                "lambda_n has {} entries for {} sensors",
                vs.len(),
                n
            ))),
        }
    }
}

/// Where the UAVs take off and land.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case", deny_unknown_fields)]
pub enum Endpoints {
    /// Evenly spaced along the bottom edge, landing on the matching top spot.
    BottomToTop,
    /// Start and stop at the same spot, evenly spaced along the middle row.
    MiddleRow,
    Explicit {
        starts: Vec<[f64; 2]>,
        stops: Vec<[f64; 2]>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case", deny_unknown_fields)]
pub enum SnLayout {
    /// Uniform over the square, drawn once from `seed`.
    Uniform { seed: u64 },
    Explicit { positions: Vec<[f64; 2]> },
}

type Points = Vec<[f64; 2]>;

/// Every physical and scenario constant of the simulator.
///
/// Field names in config files follow the usual symbols (`tau0`, `E_max`,
/// `xi_th_db`, ...). Log-scale quantities are kept in dB/dBm here and
/// converted once when a [`World`] is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(rename = "N")]
    pub num_sns: usize,
    #[serde(rename = "M")]
    pub num_uavs: usize,
    #[serde(rename = "T")]
    pub horizon: u32,
    pub tau0: f64,
    pub area_side: f64,
    #[serde(rename = "z")]
    pub altitude: f64,
    pub v_max: f64,
    pub dphi_max: f64,
    pub d_safe: f64,
    #[serde(rename = "E_max")]
    pub e_max: f64,
    #[serde(rename = "E_sn_max")]
    pub e_sn_max: f64,
    #[serde(rename = "E_har")]
    pub e_har: f64,
    pub lambda_n: PerSn,
    #[serde(rename = "P_c")]
    pub p_c: f64,
    pub sigma2_dbm: f64,
    pub xi_th_db: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub eta_los_db: f64,
    pub eta_nlos_db: f64,
    pub f_c: f64,
    #[serde(rename = "c")]
    pub light_speed: f64,
    /// Path-loss exponent.
    pub varsigma: f64,
    pub rotor: RotorParams,
    /// AoI cap; `None` means the horizon `T`.
    pub delta_max: Option<u32>,
    pub initial_aoi: u32,
    /// Collision penalty `k1`; `None` means `N * delta_max`.
    pub k1: Option<f64>,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "N2")]
    pub n2: usize,
    pub endpoints: Endpoints,
    pub sn_layout: SnLayout,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_sns: 15,
            num_uavs: 3,
            horizon: 100,
            tau0: 0.5,
            area_side: 800.0,
            altitude: 100.0,
            v_max: 20.0,
            dphi_max: PI / 3.0,
            d_safe: 10.0,
            e_max: 2.4e4,
            e_sn_max: 5e-3,
            e_har: 0.42e-3,
            lambda_n: PerSn::Uniform(0.9),
            p_c: 5e-3,
            sigma2_dbm: -110.0,
            xi_th_db: 5.0,
            beta0: 11.95,
            beta1: 0.14,
            eta_los_db: 1.6,
            eta_nlos_db: 23.0,
            f_c: 2e9,
            light_speed: 3e8,
            varsigma: 2.0,
            rotor: RotorParams::default(),
            delta_max: None,
            initial_aoi: 1,
            k1: None,
            n1: 1,
            n2: 6,
            endpoints: Endpoints::BottomToTop,
            sn_layout: SnLayout::Uniform { seed: 2023 },
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl WorldConfig {
    /// Table I defaults with the given team and network sizes.
    pub fn table_i(num_uavs: usize, num_sns: usize) -> Self {
        Self {
            num_uavs,
            num_sns,
            ..Self::default()
        }
    }

    /// The reduced profile used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            num_sns: 10,
            num_uavs: 2,
            horizon: 60,
            endpoints: Endpoints::MiddleRow,
            ..Self::default()
        }
    }

    pub fn noise_power(&self) -> f64 {
        db_to_linear(self.sigma2_dbm - 30.0)
    }
    pub fn xi_th(&self) -> f64 {
        db_to_linear(self.xi_th_db)
    }
    pub fn eta_los(&self) -> f64 {
        db_to_linear(self.eta_los_db)
    }
    pub fn eta_nlos(&self) -> f64 {
        db_to_linear(self.eta_nlos_db)
    }
    pub fn delta_max(&self) -> u32 {
        self.delta_max.unwrap_or(self.horizon)
    }
    pub fn collision_penalty(&self) -> f64 {
        self.k1
            .unwrap_or(self.num_sns as f64 * f64::from(self.delta_max()))
    }
    /// Energy one status update costs a sensor.
    pub fn e_c(&self) -> f64 {
        self.p_c * self.tau0
    }
    /// Distance covered by one slot at maximum speed.
    pub fn cruise_step(&self) -> f64 {
        self.v_max * self.tau0
    }

    pub fn speed_levels(&self) -> Vec<f64> {
        (0..=self.n1)
            .map(|i| self.v_max * i as f64 / self.n1 as f64)
            .collect()
    }

    /// `N2` distinct headings; `2π` coincides with `0` and is dropped.
    pub fn heading_levels(&self) -> Vec<f64> {
        (0..self.n2)
            .map(|i| 2.0 * PI * i as f64 / self.n2 as f64)
            .collect()
    }

    fn endpoint_positions(&self) -> Result<(Points, Points), ConfigError> {
        let m = self.num_uavs;
        // Keep a 40 m margin from the far edges, as in the reference layout.
        let span = self.area_side - 40.0;
        let xs: Vec<f64> = if m == 1 {
            vec![span / 2.0]
        } else {
            (0..m).map(|i| span * i as f64 / (m - 1) as f64).collect()
        };
        match &self.endpoints {
            Endpoints::BottomToTop => Ok((
                xs.iter().map(|&x| [x, 0.0]).collect(),
                xs.iter().map(|&x| [x, span]).collect(),
            )),
            Endpoints::MiddleRow => {
                let row: Vec<[f64; 2]> = xs.iter().map(|&x| [x, span / 2.0]).collect();
                Ok((row.clone(), row))
            }
            Endpoints::Explicit { starts, stops } => {
                if starts.len() != m || stops.len() != m {
                    return Err(ConfigError::Invalid(format!(
                        "{} starts and {} stops for {} UAVs",
                        starts.len(),
                        stops.len(),
                        m
                    )));
                }
                Ok((starts.clone(), stops.clone()))
            }
        }
    }

    fn sn_positions(&self) -> Result<Vec<[f64; 2]>, ConfigError> {
        match &self.sn_layout {
            SnLayout::Uniform { seed } => {
                let mut rng = crate::rng::stream(*seed, "sn-layout");
                Ok((0..self.num_sns)
                    .map(|_| {
                        [
                            rng.gen::<f64>() * self.area_side,
                            rng.gen::<f64>() * self.area_side,
                        ]
                    })
                    .collect())
            }
            SnLayout::Explicit { positions } if positions.len() == self.num_sns => {
                Ok(positions.clone())
            }
            SnLayout::Explicit { positions } => Err(ConfigError::Invalid(format!(
                "{} sensor positions for N = {}",
                positions.len(),
                self.num_sns
            ))),
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.num_uavs == 0 || self.num_sns == 0 {
            return bad("N and M must be positive");
        }
        if self.horizon < 2 {
            return bad("T must be at least 2");
        }
        if self.n1 == 0 || self.n2 == 0 {
            return bad("N1 and N2 must be positive");
        }
        let positive = [
            ("tau0", self.tau0),
            ("area_side", self.area_side),
            ("z", self.altitude),
            ("v_max", self.v_max),
            ("dphi_max", self.dphi_max),
            ("d_safe", self.d_safe),
            ("E_max", self.e_max),
            ("E_sn_max", self.e_sn_max),
            ("P_c", self.p_c),
            ("f_c", self.f_c),
            ("c", self.light_speed),
            ("varsigma", self.varsigma),
            ("beta0", self.beta0),
            ("beta1", self.beta1),
            ("rotor.mass", self.rotor.mass),
            ("rotor.rho", self.rotor.rho),
            ("rotor.disc_area", self.rotor.disc_area),
            ("rotor.c_t", self.rotor.c_t),
            ("rotor.g", self.rotor.g),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.e_har < 0.0 {
            return bad("E_har must be non-negative");
        }
        if self.rotor.n_r == 0 {
            return bad("rotor.n_r must be positive");
        }
        if !(self.eta_nlos() > self.eta_los() && self.eta_los() > 1.0) {
            return bad("need eta_nlos > eta_los > 1 (linear)");
        }
        if self.e_c() > self.e_sn_max {
            return bad("a single update costs more than the sensor battery holds");
        }
        let dmax = self.delta_max();
        if dmax < 1 || self.initial_aoi < 1 || self.initial_aoi > dmax {
            return bad("need 1 <= initial_aoi <= delta_max");
        }
        for p in self.lambda_n.expand(self.num_sns)? {
            if !(0.0..=1.0).contains(&p) {
                return bad("lambda_n must be a probability");
            }
        }
        Ok(())
    }
}

/// A validated configuration with its derived constants.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub sn_positions: Vec<[f64; 2]>,
    pub starts: Vec<[f64; 2]>,
    pub stops: Vec<[f64; 2]>,
    pub harvest_prob: Vec<f64>,
    pub coverage_radius: f64,
    pub xi_th: f64,
    /// Largest single-slot propulsion energy over the speed grid.
    pub e_bar: f64,
    pub speed_levels: Vec<f64>,
    pub heading_levels: Vec<f64>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, ConfigError> {
        cfg.check()?;
        let (starts, stops) = cfg.endpoint_positions()?;
        let inside = |p: &[f64; 2]| {
            p.iter().all(|c| c.is_finite() && (0.0..=cfg.area_side).contains(c))
        };
        if !starts.iter().chain(stops.iter()).all(inside) {
            return Err(ConfigError::Invalid("start/stop outside the area".into()));
        }
        let sn_positions = cfg.sn_positions()?;
        if !sn_positions.iter().all(inside) {
            return Err(ConfigError::Invalid("sensor outside the area".into()));
        }
        let world = Self {
            harvest_prob: cfg.lambda_n.expand(cfg.num_sns)?,
            coverage_radius: coverage_radius(&cfg)?,
            xi_th: cfg.xi_th(),
            e_bar: feasibility::max_slot_energy(&cfg),
            speed_levels: cfg.speed_levels(),
            heading_levels: cfg.heading_levels(),
            sn_positions,
            starts,
            stops,
            cfg,
        };
        let initial = world.initial_state();
        for (m, pose) in initial.uavs.iter().enumerate() {
            if !feasibility::can_finish(pose, 1, world.stops[m], &world.cfg) {
                return Err(ConfigError::InfeasibleMission { uav: m });
            }
        }
        Ok(world)
    }

    pub fn num_uavs(&self) -> usize {
        self.cfg.num_uavs
    }
    pub fn num_sns(&self) -> usize {
        self.cfg.num_sns
    }

    /// `s(1)`: full batteries, fresh AoI, UAVs at rest on their starts and
    /// pointed at their destinations.
    pub fn initial_state(&self) -> WorldState {
        let cfg = &self.cfg;
        let sns = (0..cfg.num_sns)
            .map(|n| SensorNode {
                id: n + 1,
                position: self.sn_positions[n],
                battery: cfg.e_sn_max,
                aoi: cfg.initial_aoi,
                harvest_prob: self.harvest_prob[n],
            })
            .collect();
        let uavs = (0..cfg.num_uavs)
            .map(|m| {
                let start = self.starts[m];
                let stop = self.stops[m];
                let heading = if distance(start, stop) > feasibility::ARRIVAL_TOL {
                    feasibility::heading_to(start, stop)
                } else {
                    0.0
                };
                let mut pose = UavPose {
                    position: start,
                    speed: 0.0,
                    heading,
                    energy_spent: 0.0,
                    time_diff: 0,
                    energy_diff: 0.0,
                };
                let (td, ed) = feasibility::compute_diffs(&pose, 1, stop, cfg);
                pose.time_diff = td;
                pose.energy_diff = ed;
                pose
            })
            .collect();
        WorldState { t: 1, sns, uavs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorNode {
    /// 1-based, matching the schedule convention where 0 means "none".
    pub id: usize,
    pub position: [f64; 2],
    pub battery: f64,
    pub aoi: u32,
    pub harvest_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavPose {
    pub position: [f64; 2],
    pub speed: f64,
    /// Heading flown during the previous slot, in `[0, 2π)`.
    pub heading: f64,
    pub energy_spent: f64,
    /// Remaining slots minus slots required to reach the destination.
    pub time_diff: i64,
    /// Remaining energy minus energy required to reach the destination.
    pub energy_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    /// 1-based slot index of the slot about to be played.
    pub t: u32,
    pub sns: Vec<SensorNode>,
    pub uavs: Vec<UavPose>,
}

impl WorldState {
    pub fn total_aoi(&self) -> u64 {
        self.sns.iter().map(|s| u64::from(s.aoi)).sum()
    }
}

/// Fully resolved control for one UAV over one slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavCommand {
    pub speed_next: f64,
    pub heading: f64,
    /// 0-based sensor index, `None` for "fly without collecting".
    pub schedule: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmissionOutcome {
    pub uav: usize,
    /// 1-based sensor id, 0 when nothing was scheduled.
    pub sn: usize,
    pub los_drawn: bool,
    pub sinr: f64,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: WorldState,
    pub outcomes: Vec<TransmissionOutcome>,
    pub collision: bool,
    /// Propulsion energy each UAV spent in the slot.
    pub energy: Vec<f64>,
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Ground radius within which an NLoS link still clears the SINR threshold
/// without interference.
pub fn coverage_radius(cfg: &WorldConfig) -> Result<f64, WorldError> {
    // Antenna gains are 0 dB.
    let ratio = cfg.p_c / (cfg.xi_th() * cfg.noise_power() * cfg.eta_nlos());
    let d = cfg.light_speed / (4.0 * PI * cfg.f_c) * ratio.powf(1.0 / cfg.varsigma);
    if !(d >= cfg.altitude) {
        return Err(WorldError::AltitudeExceedsRange {
            distance: d,
            altitude: cfg.altitude,
        });
    }
    Ok((d * d - cfg.altitude * cfg.altitude).sqrt())
}

/// LoS probability for a link of 3D length `distance` at altitude `z`.
pub fn los_probability(distance: f64, z: f64, cfg: &WorldConfig) -> Result<f64, WorldError> {
    if !(distance >= z && z > 0.0) {
        return Err(WorldError::BadGeometry { distance, altitude: z });
    }
    let elevation_deg = (z / distance).asin().to_degrees();
    Ok(1.0 / (1.0 + cfg.beta0 * (-cfg.beta1 * (elevation_deg - cfg.beta0)).exp()))
}

/// Deterministic branch of the path-loss model.
pub fn path_loss(distance: f64, los: bool, cfg: &WorldConfig) -> f64 {
    let free = (4.0 * PI * cfg.f_c * distance / cfg.light_speed).powf(cfg.varsigma);
    free * if los { cfg.eta_los() } else { cfg.eta_nlos() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathLossSample {
    pub path_loss: f64,
    pub los: bool,
}

/// Draws the LoS state of a link (one uniform) and returns its path loss.
pub fn sample_path_loss(
    distance: f64,
    cfg: &WorldConfig,
    rng: &mut StreamRng,
) -> Result<PathLossSample, WorldError> {
    let p = los_probability(distance, cfg.altitude, cfg)?;
    let los = rng.gen::<f64>() < p;
    Ok(PathLossSample {
        path_loss: path_loss(distance, los, cfg),
        los,
    })
}

/// Channel gains of the links needed in one slot, indexed `[sensor][uav]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGains {
    num_uavs: usize,
    gains: Vec<Option<f64>>,
}

impl ChannelGains {
    pub fn new(num_sns: usize, num_uavs: usize) -> Self {
        Self {
            num_uavs,
            gains: vec![None; num_sns * num_uavs],
        }
    }
    pub fn set(&mut self, sn: usize, uav: usize, gain: f64) {
        self.gains[sn * self.num_uavs + uav] = Some(gain);
    }
    pub fn get(&self, sn: usize, uav: usize) -> Option<f64> {
        self.gains[sn * self.num_uavs + uav]
    }
}

/// SINR at UAV `m` for the sensor it schedules. Every sensor scheduled by
/// another UAV interferes once, except the one `m` is listening to.
pub fn sinr(
    m: usize,
    schedules: &[Option<usize>],
    gains: &ChannelGains,
    cfg: &WorldConfig,
) -> Result<f64, WorldError> {
    let n = schedules[m].ok_or(WorldError::NoScheduledSn { uav: m })?;
    let gain = |sn: usize| gains.get(sn, m).ok_or(WorldError::MissingGain { sn, uav: m });
    let mut interferers: Vec<usize> = schedules
        .iter()
        .enumerate()
        .filter(|&(other, s)| other != m && s.is_some() && *s != Some(n))
        .filter_map(|(_, s)| *s)
        .collect();
    interferers.sort_unstable();
    interferers.dedup();
    let mut interference = 0.0;
    for sn in interferers {
        interference += cfg.p_c * gain(sn)?;
    }
    Ok(cfg.p_c * gain(n)? / (cfg.noise_power() + interference))
}

/// Per-rotor thrust for a slot starting at speed `v` and ending at `v_next`.
pub fn rotor_thrust(v: f64, v_next: f64, cfg: &WorldConfig) -> f64 {
    let r = &cfg.rotor;
    let accel = (v_next - v) / cfg.tau0;
    let along = r.mass * accel + 0.5 * r.rho * v * v * r.s_fp;
    let weight = r.mass * r.g;
    (along * along + weight * weight).sqrt() / f64::from(r.n_r)
}

/// Propulsion energy (J) of one slot: blade profile, fuselage drag and
/// induced terms of the rotary-wing model.
pub fn propulsion_energy(v: f64, v_next: f64, cfg: &WorldConfig) -> f64 {
    let r = &cfg.rotor;
    let thrust = rotor_thrust(v, v_next, cfg);
    let v2 = v * v;
    let profile = r.sigma / 8.0
        * (thrust / (r.c_t * r.rho * r.disc_area) + 3.0 * v2)
        * (thrust * r.rho * r.c_s * r.c_s * r.disc_area / r.c_t).sqrt();
    let fuselage = 0.5 * r.d_0 * r.rho * r.c_s * r.disc_area * v2 * v;
    let hover_term = thrust * thrust / (4.0 * r.rho * r.rho * r.disc_area * r.disc_area);
    let induced_velocity_sq = ((hover_term + v2 * v2 / 4.0).sqrt() - v2 / 2.0).max(0.0);
    let induced = (1.0 + r.c_f) * thrust * induced_velocity_sq.sqrt();
    cfg.tau0 * f64::from(r.n_r) * (profile + fuselage + induced)
}

/// Next battery level of a sensor.
pub fn battery_step(
    battery: f64,
    harvested: bool,
    transmitted: bool,
    cfg: &WorldConfig,
) -> Result<f64, WorldError> {
    let e_c = cfg.e_c();
    if transmitted && battery < e_c {
        return Err(WorldError::EnergyCausalityViolation {
            sn: 0,
            battery,
            required: e_c,
        });
    }
    let gain = if harvested { cfg.e_har } else { 0.0 };
    let spend = if transmitted { e_c } else { 0.0 };
    Ok((battery + gain - spend).min(cfg.e_sn_max).max(0.0))
}

pub fn aoi_step(aoi: u32, delivered: bool, cfg: &WorldConfig) -> u32 {
    if delivered {
        1
    } else {
        (aoi + 1).min(cfg.delta_max())
    }
}

/// Position after a slot flown along `heading` while the speed ramps
/// linearly from `v` to `v_next`. Errors if the result leaves the area.
pub fn advance_position(
    u: [f64; 2],
    v: f64,
    v_next: f64,
    heading: f64,
    cfg: &WorldConfig,
) -> Result<[f64; 2], WorldError> {
    let p = displaced(u, v, v_next, heading, cfg.tau0);
    let side = cfg.area_side;
    if p.iter().any(|c| !(-AREA_EPS..=side + AREA_EPS).contains(c)) {
        return Err(WorldError::OutOfArea { uav: 0, x: p[0], y: p[1] });
    }
    Ok([p[0].clamp(0.0, side), p[1].clamp(0.0, side)])
}

pub(crate) fn displaced(u: [f64; 2], v: f64, v_next: f64, heading: f64, tau0: f64) -> [f64; 2] {
    let step = 0.5 * (v + v_next) * tau0;
    [u[0] + step * heading.cos(), u[1] + step * heading.sin()]
}

pub(crate) fn inside_area(p: [f64; 2], cfg: &WorldConfig) -> bool {
    p.iter()
        .all(|c| (-AREA_EPS..=cfg.area_side + AREA_EPS).contains(c))
}

/// All UAV pairs closer than `d_safe`.
pub fn check_collisions(positions: &[[f64; 2]], d_safe: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            if distance(positions[i], positions[j]) < d_safe {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Knobs for how strictly [`world_step`] treats out-of-area motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOptions {
    /// Clamp positions into the square instead of failing.
    pub clamp_to_area: bool,
}

/// Plays one slot.
///
/// Intra-slot order: channel draws and SINR, AoI, harvesting and batteries,
/// motion and propulsion energy, time/energy differences, collisions, slot
/// counter. Channel draws go UAV by UAV, and within a UAV over the needed
/// sensors in ascending order; then one harvest uniform per sensor.
pub fn world_step(
    world: &World,
    state: &WorldState,
    commands: &[UavCommand],
    rng: &mut StreamRng,
    opts: StepOptions,
) -> Result<StepResult, WorldError> {
    let cfg = &world.cfg;
    if state.t > cfg.horizon {
        return Err(WorldError::EpisodeOver {
            t: state.t,
            horizon: cfg.horizon,
        });
    }
    let m_count = cfg.num_uavs;
    let n_count = cfg.num_sns;
    assert_eq!(commands.len(), m_count, "one command per UAV");
    for (m, cmd) in commands.iter().enumerate() {
        if !(cmd.speed_next >= 0.0 && cmd.speed_next <= cfg.v_max + 1e-9) {
            return Err(WorldError::InvalidCommand {
                uav: m,
                reason: format!("speed {} outside [0, {}]", cmd.speed_next, cfg.v_max),
            });
        }
        if !cmd.heading.is_finite() {
            return Err(WorldError::InvalidCommand {
                uav: m,
                reason: "non-finite heading".into(),
            });
        }
        if let Some(n) = cmd.schedule {
            if n >= n_count {
                return Err(WorldError::InvalidCommand {
                    uav: m,
                    reason: format!("sensor index {n} out of range"),
                });
            }
        }
    }
    let schedules: Vec<Option<usize>> = commands.iter().map(|c| c.schedule).collect();

    // Channel.
    let mut gains = ChannelGains::new(n_count, m_count);
    let mut los = vec![false; n_count * m_count];
    for m in 0..m_count {
        let Some(own) = schedules[m] else { continue };
        let mut needed: Vec<usize> = schedules
            .iter()
            .enumerate()
            .filter(|&(other, _)| other != m)
            .filter_map(|(_, s)| *s)
            .chain(std::iter::once(own))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        for n in needed {
            let ground = distance(state.uavs[m].position, state.sns[n].position);
            let d3 = ground.hypot(cfg.altitude);
            let draw = sample_path_loss(d3, cfg, rng)?;
            gains.set(n, m, 1.0 / draw.path_loss);
            los[n * m_count + m] = draw.los;
        }
    }
    let mut outcomes = Vec::with_capacity(m_count);
    let mut delivered = vec![false; n_count];
    for m in 0..m_count {
        match schedules[m] {
            None => outcomes.push(TransmissionOutcome {
                uav: m,
                sn: 0,
                los_drawn: false,
                sinr: 0.0,
                success: false,
            }),
            Some(n) => {
                let ratio = sinr(m, &schedules, &gains, cfg)?;
                let success = ratio >= world.xi_th;
                delivered[n] |= success;
                outcomes.push(TransmissionOutcome {
                    uav: m,
                    sn: n + 1,
                    los_drawn: los[n * m_count + m],
                    sinr: ratio,
                    success,
                });
            }
        }
    }

    let mut next = state.clone();
    for (n, sn) in next.sns.iter_mut().enumerate() {
        sn.aoi = aoi_step(sn.aoi, delivered[n], cfg);
    }
    for (n, sn) in next.sns.iter_mut().enumerate() {
        let harvested = rng.gen::<f64>() < sn.harvest_prob;
        let transmitted = schedules.contains(&Some(n));
        sn.battery = battery_step(sn.battery, harvested, transmitted, cfg).map_err(|e| match e {
            WorldError::EnergyCausalityViolation { battery, required, .. } => {
                WorldError::EnergyCausalityViolation { sn: n + 1, battery, required }
            }
            other => other,
        })?;
    }

    let mut energy = Vec::with_capacity(m_count);
    for (m, (pose, cmd)) in next.uavs.iter_mut().zip(commands).enumerate() {
        let v_next = cmd.speed_next.min(cfg.v_max);
        let e = propulsion_energy(pose.speed, v_next, cfg);
        let position = if opts.clamp_to_area {
            let p = displaced(pose.position, pose.speed, v_next, cmd.heading, cfg.tau0);
            [p[0].clamp(0.0, cfg.area_side), p[1].clamp(0.0, cfg.area_side)]
        } else {
            advance_position(pose.position, pose.speed, v_next, cmd.heading, cfg).map_err(
                |e| match e {
                    WorldError::OutOfArea { x, y, .. } => WorldError::OutOfArea { uav: m, x, y },
                    other => other,
                },
            )?
        };
        pose.position = position;
        pose.speed = v_next;
        pose.heading = wrap_angle(cmd.heading);
        pose.energy_spent += e;
        energy.push(e);
    }
    next.t += 1;
    for (m, pose) in next.uavs.iter_mut().enumerate() {
        let (td, ed) = feasibility::compute_diffs(pose, next.t, world.stops[m], cfg);
        pose.time_diff = td;
        pose.energy_diff = ed;
    }
    let positions: Vec<[f64; 2]> = next.uavs.iter().map(|u| u.position).collect();
    let collision = !check_collisions(&positions, cfg.d_safe).is_empty();

    Ok(StepResult {
        state: next,
        outcomes,
        collision,
        energy,
    })
}
