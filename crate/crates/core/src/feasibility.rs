//! Return-to-destination bookkeeping and per-UAV action masks.
//!
//! `required_time`/`required_energy` give the closed-form budget to reach
//! the destination, `compute_diffs` turns them into the time and energy
//! slack carried in the state, and `movement_mask` decides whether the UAV
//! may still move freely or must follow the terminal controller.
//!
//! The closed-form budget does not account for hovering after arrival or for
//! the extra slot sometimes needed to come to rest exactly on the stop, so
//! free options are additionally screened by rolling the terminal controller
//! forward from the pose each option leads to. An option survives only if
//! that rollout lands at rest on the stop within the horizon, stays inside
//! the area, and fits the remaining energy budget including hover time.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::world::{
    displaced, distance, inside_area, propulsion_energy, wrap_angle, SensorNode, UavPose, World,
    WorldConfig,
};

/// Distance under which a UAV counts as sitting on its stop.
pub const ARRIVAL_TOL: f64 = 1e-6;
/// Speeds below this are treated as rest.
pub const REST_TOL: f64 = 1e-9;
/// Slack on battery comparisons, far below one harvest quantum.
pub const BATTERY_EPS: f64 = 1e-12;
const ANGLE_EPS: f64 = 1e-12;
const CEIL_EPS: f64 = 1e-9;

pub fn heading_to(from: [f64; 2], to: [f64; 2]) -> f64 {
    wrap_angle((to[1] - from[1]).atan2(to[0] - from[0]))
}

/// Circular distance between two headings, in `[0, π]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn ceil_tol(x: f64) -> i64 {
    (x - CEIL_EPS).ceil() as i64
}

fn at_rest(v: f64) -> bool {
    v <= REST_TOL
}

/// True when the UAV may point straight at its stop this slot.
fn can_turn_to_stop(u: [f64; 2], v: f64, heading: f64, stop: [f64; 2], cfg: &WorldConfig) -> bool {
    at_rest(v)
        || distance(u, stop) <= ARRIVAL_TOL
        || angular_distance(heading, heading_to(u, stop)) <= cfg.dphi_max + ANGLE_EPS
}

/// Slots needed to reach `stop`, never below 1.
///
/// | situation                               | formula                       |
/// |-----------------------------------------|-------------------------------|
/// | can turn toward the stop, or at rest    | `1 + ⌈(d − (v_max+v)τ0/2) / (v_max τ0)⌉` |
/// | moving away outside the turning window  | `2 + ⌈(d + vτ0/2 − v_max τ0/2) / (v_max τ0)⌉` |
///
/// Near the stop the first formula can dip to 0 or below; the result is
/// clamped to 1 because one more slot is always played.
pub fn required_time(u: [f64; 2], v: f64, heading: f64, stop: [f64; 2], cfg: &WorldConfig) -> i64 {
    let d = distance(u, stop);
    let step = cfg.cruise_step();
    let slots = if can_turn_to_stop(u, v, heading, stop, cfg) {
        1 + ceil_tol((d - (cfg.v_max + v) * cfg.tau0 / 2.0) / step)
    } else {
        2 + ceil_tol((d + v * cfg.tau0 / 2.0 - cfg.v_max * cfg.tau0 / 2.0) / step)
    };
    slots.max(1)
}

/// Energy of the closed-form return: accelerate (or brake, relaunch) then cruise.
pub fn required_energy(u: [f64; 2], v: f64, heading: f64, stop: [f64; 2], cfg: &WorldConfig) -> f64 {
    let t_req = required_time(u, v, heading, stop, cfg);
    let cruise = propulsion_energy(cfg.v_max, cfg.v_max, cfg);
    if can_turn_to_stop(u, v, heading, stop, cfg) {
        propulsion_energy(v, cfg.v_max, cfg) + (t_req - 1).max(0) as f64 * cruise
    } else {
        propulsion_energy(v, 0.0, cfg)
            + propulsion_energy(0.0, cfg.v_max, cfg)
            + (t_req - 2).max(0) as f64 * cruise
    }
}

/// `(time_diff, energy_diff)` of a pose about to play slot `t`.
pub fn compute_diffs(pose: &UavPose, t: u32, stop: [f64; 2], cfg: &WorldConfig) -> (i64, f64) {
    let t_req = required_time(pose.position, pose.speed, pose.heading, stop, cfg);
    let e_req = required_energy(pose.position, pose.speed, pose.heading, stop, cfg);
    let remaining = i64::from(cfg.horizon) - i64::from(t) + 1;
    (remaining - t_req, (cfg.e_max - pose.energy_spent) - e_req)
}

/// Largest single-slot propulsion energy over all speed-grid pairs.
pub fn max_slot_energy(cfg: &WorldConfig) -> f64 {
    let levels = cfg.speed_levels();
    let mut best = f64::MIN;
    for &v in &levels {
        for &w in &levels {
            best = best.max(propulsion_energy(v, w, cfg));
        }
    }
    best
}

/// One movement a UAV can take in a slot. Grid options carry their exact
/// grid values; the terminal controller produces off-grid values and is
/// labelled with the nearest grid indices so networks can consume it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementOption {
    pub speed_next: f64,
    pub heading: f64,
    pub speed_idx: usize,
    pub heading_idx: usize,
}

impl MovementOption {
    pub fn grid(speed_idx: usize, heading_idx: usize, cfg: &WorldConfig) -> Self {
        Self {
            speed_next: cfg.v_max * speed_idx as f64 / cfg.n1 as f64,
            heading: 2.0 * PI * heading_idx as f64 / cfg.n2 as f64,
            speed_idx,
            heading_idx,
        }
    }

    /// Snaps arbitrary values to their nearest grid labels.
    pub fn labelled(speed_next: f64, heading: f64, cfg: &WorldConfig) -> Self {
        let speed_idx = ((speed_next / cfg.v_max * cfg.n1 as f64).round() as usize).min(cfg.n1);
        let sector = 2.0 * PI / cfg.n2 as f64;
        let heading_idx = (wrap_angle(heading) / sector).round() as usize % cfg.n2;
        Self {
            speed_next,
            heading: wrap_angle(heading),
            speed_idx,
            heading_idx,
        }
    }

    /// Index into the `(N1+1)·N2` movement grid.
    pub fn movement_index(&self, cfg: &WorldConfig) -> usize {
        self.speed_idx * cfg.n2 + self.heading_idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementMask {
    pub options: Vec<MovementOption>,
    /// Set when the terminal controller took over; `options` then holds
    /// exactly its single move.
    pub forced: bool,
}

impl MovementMask {
    pub fn find(&self, movement_index: usize, cfg: &WorldConfig) -> Option<&MovementOption> {
        self.options
            .iter()
            .find(|o| o.movement_index(cfg) == movement_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    pub movement: MovementMask,
    /// Allowed schedules as 1-based sensor ids, always starting with 0.
    pub schedulable: Vec<usize>,
}

/// The terminal controller: head for the stop and land there at rest, or
/// brake first when the stop lies outside the turning window.
///
/// Heading toward the stop, it picks `v' = (d − vτ0/2)/τ0` clipped to
/// `[0, v_max]`, which is the speed that leaves exactly one braking slot
/// of distance once the stop is close.
pub fn forced_movement(pose: &UavPose, stop: [f64; 2], cfg: &WorldConfig) -> MovementOption {
    let d = distance(pose.position, stop);
    let v = pose.speed;
    if d <= ARRIVAL_TOL || !can_turn_to_stop(pose.position, v, pose.heading, stop, cfg) {
        return MovementOption::labelled(0.0, pose.heading, cfg);
    }
    let mut v_next = ((d - v * cfg.tau0 / 2.0) / cfg.tau0).clamp(0.0, cfg.v_max);
    if v_next <= REST_TOL {
        v_next = 0.0;
    }
    MovementOption::labelled(v_next, heading_to(pose.position, stop), cfg)
}

/// Outcome of following the terminal controller until the horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rollout {
    /// Slots until the UAV sits at rest on its stop.
    pub slots_to_rest: u32,
    /// Propulsion energy from the starting slot through the last slot `T`,
    /// including hovering after arrival.
    pub energy: f64,
}

/// Applies the controller from `pose` at slot `t`. `None` if it does not
/// come to rest on the stop by the end of slot `T`, or if it would leave
/// the area on the way.
pub fn forced_rollout(pose: &UavPose, t: u32, stop: [f64; 2], cfg: &WorldConfig) -> Option<Rollout> {
    let mut position = pose.position;
    let mut speed = pose.speed;
    let mut heading = pose.heading;
    let mut energy = 0.0;
    let mut slot = t;
    loop {
        if at_rest(speed) && distance(position, stop) <= ARRIVAL_TOL {
            let hover_slots = (i64::from(cfg.horizon) - i64::from(slot) + 1).max(0);
            let hover = propulsion_energy(0.0, 0.0, cfg);
            return Some(Rollout {
                slots_to_rest: slot - t,
                energy: energy + hover_slots as f64 * hover,
            });
        }
        if slot > cfg.horizon {
            return None;
        }
        let step = forced_movement(
            &UavPose {
                position,
                speed,
                heading,
                ..pose.clone()
            },
            stop,
            cfg,
        );
        energy += propulsion_energy(speed, step.speed_next, cfg);
        position = displaced(position, speed, step.speed_next, step.heading, cfg.tau0);
        if !inside_area(position, cfg) {
            return None;
        }
        speed = step.speed_next;
        heading = step.heading;
        slot += 1;
    }
}

/// True if the controller alone can still finish the mission from `pose`.
pub fn can_finish(pose: &UavPose, t: u32, stop: [f64; 2], cfg: &WorldConfig) -> bool {
    forced_rollout(pose, t, stop, cfg)
        .is_some_and(|r| pose.energy_spent + r.energy <= cfg.e_max)
}

fn free_regime(pose: &UavPose, world: &World) -> bool {
    pose.time_diff > 4 && pose.energy_diff > 4.0 * world.e_bar
}

/// Movements available to a UAV with pose `pose` about to play slot `t`.
pub fn movement_mask(pose: &UavPose, t: u32, stop: [f64; 2], world: &World) -> MovementMask {
    let cfg = &world.cfg;
    if free_regime(pose, world) {
        let mut options = Vec::new();
        for speed_idx in 0..=cfg.n1 {
            for heading_idx in 0..cfg.n2 {
                let opt = MovementOption::grid(speed_idx, heading_idx, cfg);
                if free_option_ok(pose, t, stop, &opt, cfg) {
                    options.push(opt);
                }
            }
        }
        if !options.is_empty() {
            return MovementMask {
                options,
                forced: false,
            };
        }
    }
    MovementMask {
        options: vec![forced_movement(pose, stop, cfg)],
        forced: true,
    }
}

fn free_option_ok(
    pose: &UavPose,
    t: u32,
    stop: [f64; 2],
    opt: &MovementOption,
    cfg: &WorldConfig,
) -> bool {
    if !at_rest(pose.speed) && angular_distance(pose.heading, opt.heading) > cfg.dphi_max + ANGLE_EPS
    {
        return false;
    }
    let next = displaced(pose.position, pose.speed, opt.speed_next, opt.heading, cfg.tau0);
    if !inside_area(next, cfg) {
        return false;
    }
    let brake = displaced(next, opt.speed_next, 0.0, opt.heading, cfg.tau0);
    if !inside_area(brake, cfg) {
        return false;
    }
    let next_pose = UavPose {
        position: next,
        speed: opt.speed_next,
        heading: wrap_angle(opt.heading),
        energy_spent: pose.energy_spent + propulsion_energy(pose.speed, opt.speed_next, cfg),
        ..pose.clone()
    };
    can_finish(&next_pose, t + 1, stop, cfg)
}

/// Sensors a UAV at `position` may poll, as 1-based ids with 0 first.
pub fn schedule_mask(position: [f64; 2], sns: &[SensorNode], world: &World) -> Vec<usize> {
    let e_c = world.cfg.e_c();
    std::iter::once(0)
        .chain(
            sns.iter()
                .enumerate()
                .filter(|(_, sn)| {
                    distance(position, sn.position) <= world.coverage_radius
                        && sn.battery >= e_c - BATTERY_EPS
                })
                .map(|(n, _)| n + 1),
        )
        .collect()
}

/// Full action mask of UAV `m` in `state`.
pub fn action_mask(state: &crate::world::WorldState, m: usize, world: &World) -> ActionMask {
    let pose = &state.uavs[m];
    ActionMask {
        movement: movement_mask(pose, state.t, world.stops[m], world),
        schedulable: schedule_mask(pose.position, &state.sns, world),
    }
}
