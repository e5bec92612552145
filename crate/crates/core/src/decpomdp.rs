//! Episodic Dec-POMDP view of the world: local observations, the discrete
//! action encoding, the shared cost, and the episode loop.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feasibility::{self, ActionMask, ARRIVAL_TOL};
use crate::rng::StreamRng;
use crate::world::{
    distance, world_step, StepOptions, UavCommand, World, WorldError, WorldState,
};

/// Value standing in for SN features outside a UAV's coverage.
pub const SENTINEL: f64 = -1.0;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("UAV {uav} chose action {action:?} outside its mask at slot {t}")]
    MaskViolation { uav: usize, t: u32, action: AgentAction },
    #[error("episode already finished")]
    Finished,
    #[error("UAV {uav} ended {distance:.6} m from its stop with {energy:.3} J spent")]
    ArrivalViolation { uav: usize, distance: f64, energy: f64 },
    #[error("failed to write record: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write record: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to serialize record: {0}")]
    Json(#[from] serde_json::Error),
}

/// Discrete action of one UAV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentAction {
    pub speed_idx: usize,
    pub heading_idx: usize,
    /// 1-based sensor id, 0 for none.
    pub schedule: usize,
}

/// Flat encoding of [`AgentAction`]s.
///
/// With `schedules = false` only movements are encoded and the schedule is
/// chosen outside the network (nearest-sensor baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub n1: usize,
    pub n2: usize,
    pub num_sns: usize,
    pub schedules: bool,
}

impl ActionSpace {
    pub fn new(world: &World, schedules: bool) -> Self {
        Self {
            n1: world.cfg.n1,
            n2: world.cfg.n2,
            num_sns: world.cfg.num_sns,
            schedules,
        }
    }

    pub fn movement_count(&self) -> usize {
        (self.n1 + 1) * self.n2
    }

    fn schedule_count(&self) -> usize {
        if self.schedules {
            self.num_sns + 1
        } else {
            1
        }
    }

    pub fn size(&self) -> usize {
        self.movement_count() * self.schedule_count()
    }

    pub fn encode(&self, a: &AgentAction) -> usize {
        let movement = a.speed_idx * self.n2 + a.heading_idx;
        if self.schedules {
            movement * (self.num_sns + 1) + a.schedule
        } else {
            movement
        }
    }

    /// Inverse of [`encode`](Self::encode); movement-only spaces decode
    /// with schedule 0.
    pub fn decode(&self, index: usize) -> AgentAction {
        let per = self.schedule_count();
        let movement = index / per;
        AgentAction {
            speed_idx: movement / self.n2,
            heading_idx: movement % self.n2,
            schedule: if self.schedules { index % per } else { 0 },
        }
    }

    /// Flat indices allowed by `mask`, ascending.
    pub fn allowed(&self, mask: &ActionMask, cfg: &crate::world::WorldConfig) -> Vec<usize> {
        let mut moves: Vec<usize> = mask
            .movement
            .options
            .iter()
            .map(|o| o.movement_index(cfg))
            .collect();
        moves.sort_unstable();
        if !self.schedules {
            return moves;
        }
        let per = self.num_sns + 1;
        let mut out = Vec::with_capacity(moves.len() * mask.schedulable.len());
        for mv in moves {
            for &b in &mask.schedulable {
                out.push(mv * per + b);
            }
        }
        out
    }
}

/// What UAV `m` sees at the start of a slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub position: [f64; 2],
    pub speed: f64,
    pub heading: f64,
    /// `None` for sensors outside coverage.
    pub aoi: Vec<Option<u32>>,
    pub battery: Vec<Option<f64>>,
    pub time_diff: i64,
    pub energy_diff: f64,
}

impl Observation {
    /// Normalized feature vector: own pose, per-sensor AoI, per-sensor
    /// battery, time and energy slack. Unobserved sensors read [`SENTINEL`].
    pub fn features(&self, world: &World) -> Vec<f64> {
        let cfg = &world.cfg;
        let mut f = Vec::with_capacity(observation_dim(world));
        f.push(self.position[0] / cfg.area_side);
        f.push(self.position[1] / cfg.area_side);
        f.push(self.speed / cfg.v_max);
        f.push(self.heading / (2.0 * std::f64::consts::PI));
        let dmax = f64::from(cfg.delta_max());
        for a in &self.aoi {
            f.push(a.map_or(SENTINEL, |a| norm_aoi(a, dmax)));
        }
        for b in &self.battery {
            f.push(b.map_or(SENTINEL, |b| b / cfg.e_sn_max));
        }
        f.push(self.time_diff as f64 / f64::from(cfg.horizon));
        f.push(self.energy_diff / cfg.e_max);
        f
    }
}

fn norm_aoi(a: u32, dmax: f64) -> f64 {
    if dmax > 1.0 {
        (f64::from(a) - 1.0) / (dmax - 1.0)
    } else {
        0.0
    }
}

pub fn observation_dim(world: &World) -> usize {
    6 + 2 * world.cfg.num_sns
}

pub fn observe(state: &WorldState, m: usize, world: &World) -> Observation {
    let pose = &state.uavs[m];
    let covered: Vec<bool> = state
        .sns
        .iter()
        .map(|sn| distance(pose.position, sn.position) <= world.coverage_radius)
        .collect();
    Observation {
        position: pose.position,
        speed: pose.speed,
        heading: pose.heading,
        aoi: state
            .sns
            .iter()
            .zip(&covered)
            .map(|(sn, &c)| c.then_some(sn.aoi))
            .collect(),
        battery: state
            .sns
            .iter()
            .zip(&covered)
            .map(|(sn, &c)| c.then_some(sn.battery))
            .collect(),
        time_diff: pose.time_diff,
        energy_diff: pose.energy_diff,
    }
}

/// Normalized global state for the mixing network.
pub fn state_features(state: &WorldState, world: &World) -> Vec<f64> {
    let cfg = &world.cfg;
    let mut f = Vec::with_capacity(state_dim(world));
    for u in &state.uavs {
        f.push(u.position[0] / cfg.area_side);
        f.push(u.position[1] / cfg.area_side);
        f.push(u.speed / cfg.v_max);
        f.push(u.heading / (2.0 * std::f64::consts::PI));
        f.push(u.time_diff as f64 / f64::from(cfg.horizon));
        f.push(u.energy_diff / cfg.e_max);
    }
    let dmax = f64::from(cfg.delta_max());
    for sn in &state.sns {
        f.push(norm_aoi(sn.aoi, dmax));
    }
    for sn in &state.sns {
        f.push(sn.battery / cfg.e_sn_max);
    }
    f.push(f64::from(state.t) / f64::from(cfg.horizon));
    f
}

pub fn state_dim(world: &World) -> usize {
    6 * world.cfg.num_uavs + 2 * world.cfg.num_sns + 1
}

/// Shared team cost of a slot, evaluated on the post-slot state.
pub fn cost(state_after: &WorldState, collision: bool, world: &World) -> f64 {
    let penalty = if collision {
        world.cfg.collision_penalty()
    } else {
        0.0
    };
    state_after.total_aoi() as f64 + penalty
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Collision,
    Horizon,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Only masked actions are legal; the terminal controller takes over
    /// near the end.
    #[default]
    Masked,
    /// Every grid action is legal. Infeasible parts are repaired (turns
    /// clipped, positions clamped, unusable schedules dropped) and UAVs
    /// that end away from their stop or over budget are penalized.
    Unmasked,
}

/// Everything observed and decided in one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: u32,
    pub state: WorldState,
    pub observations: Vec<Observation>,
    pub masks: Vec<ActionMask>,
    pub actions: Vec<AgentAction>,
    pub cost: f64,
    /// Sum of AoI after the slot.
    pub total_aoi: u64,
    pub collision: bool,
    /// Sensor ids whose update got through this slot.
    pub delivered: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub terminal: TerminalReason,
    pub final_state: WorldState,
    pub horizon: u32,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn cumulative_cost(&self) -> f64 {
        self.transitions.iter().map(|t| t.cost).sum()
    }

    /// Time-average total AoI. Collided episodes average over the slots
    /// actually played.
    pub fn total_average_aoi(&self) -> f64 {
        let sum: u64 = self.transitions.iter().map(|t| t.total_aoi).sum();
        sum as f64 / self.transitions.len().max(1) as f64
    }

    pub fn collided(&self) -> bool {
        self.terminal == TerminalReason::Collision
    }

    pub fn residual_energy(&self, world: &World) -> f64 {
        let spent: f64 = self.final_state.uavs.iter().map(|u| u.energy_spent).sum();
        world.cfg.e_max - spent / self.final_state.uavs.len() as f64
    }

    /// Line-delimited JSON: one line per transition, then a summary line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), EpisodeError> {
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({
                "terminal": self.terminal,
                "horizon": self.horizon,
                "final_state": self.final_state,
            }),
        )?;
        writeln!(w)?;
        Ok(())
    }

    /// Per-slot trajectory table: pose and schedule of every UAV, then AoI
    /// and battery of every sensor, as of the start of each slot plus a final
    /// row for the end state.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<(), EpisodeError> {
        let mut out = csv::Writer::from_writer(w);
        let m = self.final_state.uavs.len();
        let n = self.final_state.sns.len();
        let mut header = vec!["t".to_string()];
        for i in 0..m {
            for f in ["x", "y", "v", "heading", "b"] {
                header.push(format!("uav{i}_{f}"));
            }
        }
        for j in 1..=n {
            header.push(format!("sn{j}_aoi"));
        }
        for j in 1..=n {
            header.push(format!("sn{j}_battery"));
        }
        out.write_record(&header)?;
        let row = |state: &WorldState, actions: Option<&[AgentAction]>| {
            let mut r = vec![state.t.to_string()];
            for (i, u) in state.uavs.iter().enumerate() {
                r.push(u.position[0].to_string());
                r.push(u.position[1].to_string());
                r.push(u.speed.to_string());
                r.push(u.heading.to_string());
                r.push(actions.map_or(String::new(), |a| a[i].schedule.to_string()));
            }
            r.extend(state.sns.iter().map(|s| s.aoi.to_string()));
            r.extend(state.sns.iter().map(|s| s.battery.to_string()));
            r
        };
        for t in &self.transitions {
            out.write_record(row(&t.state, Some(&t.actions)))?;
        }
        out.write_record(row(&self.final_state, None))?;
        out.flush()?;
        Ok(())
    }
}

/// Mean total average AoI over episodes.
pub fn objective(episodes: &[EpisodeRecord]) -> f64 {
    assert!(!episodes.is_empty(), "objective needs at least one episode");
    episodes.iter().map(|e| e.total_average_aoi()).sum::<f64>() / episodes.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub cost: f64,
    pub done: bool,
    pub reason: Option<TerminalReason>,
}

/// One running episode.
pub struct Episode<'w> {
    world: &'w World,
    state: WorldState,
    rng: StreamRng,
    mode: MaskMode,
    transitions: Vec<Transition>,
    terminal: Option<TerminalReason>,
    masks: Vec<ActionMask>,
}

impl<'w> Episode<'w> {
    pub fn new(world: &'w World, rng: StreamRng, mode: MaskMode) -> Self {
        let state = world.initial_state();
        let masks = compute_masks(&state, world, mode);
        Self {
            world,
            state,
            rng,
            mode,
            transitions: Vec::with_capacity(world.cfg.horizon as usize),
            terminal: None,
            masks,
        }
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }
    pub fn world(&self) -> &World {
        self.world
    }
    pub fn masks(&self) -> &[ActionMask] {
        &self.masks
    }
    pub fn is_done(&self) -> bool {
        self.terminal.is_some()
    }
    pub fn observation(&self, m: usize) -> Observation {
        observe(&self.state, m, self.world)
    }
    pub fn observations(&self) -> Vec<Observation> {
        (0..self.world.cfg.num_uavs).map(|m| self.observation(m)).collect()
    }

    fn command(&self, m: usize, a: &AgentAction) -> Result<UavCommand, EpisodeError> {
        let cfg = &self.world.cfg;
        let mask = &self.masks[m];
        let violation = || EpisodeError::MaskViolation {
            uav: m,
            t: self.state.t,
            action: *a,
        };
        if a.speed_idx > cfg.n1 || a.heading_idx >= cfg.n2 || a.schedule > cfg.num_sns {
            return Err(violation());
        }
        match self.mode {
            MaskMode::Masked => {
                let idx = a.speed_idx * cfg.n2 + a.heading_idx;
                let opt = mask.movement.find(idx, cfg).ok_or_else(violation)?;
                if !mask.schedulable.contains(&a.schedule) {
                    return Err(violation());
                }
                Ok(UavCommand {
                    speed_next: opt.speed_next,
                    heading: opt.heading,
                    schedule: a.schedule.checked_sub(1),
                })
            }
            MaskMode::Unmasked => {
                let pose = &self.state.uavs[m];
                let opt = feasibility::MovementOption::grid(a.speed_idx, a.heading_idx, cfg);
                let heading = clip_turn(pose.speed, pose.heading, opt.heading, cfg.dphi_max);
                let usable = feasibility::schedule_mask(pose.position, &self.state.sns, self.world);
                let schedule = if usable.contains(&a.schedule) {
                    a.schedule.checked_sub(1)
                } else {
                    None
                };
                Ok(UavCommand {
                    speed_next: opt.speed_next,
                    heading,
                    schedule,
                })
            }
        }
    }

    /// Plays one slot with the given joint action.
    pub fn step(&mut self, actions: &[AgentAction]) -> Result<StepInfo, EpisodeError> {
        if self.terminal.is_some() {
            return Err(EpisodeError::Finished);
        }
        let commands = (0..actions.len())
            .map(|m| self.command(m, &actions[m]))
            .collect::<Result<Vec<_>, _>>()?;
        let opts = StepOptions {
            clamp_to_area: self.mode == MaskMode::Unmasked,
        };
        let result = world_step(self.world, &self.state, &commands, &mut self.rng, opts)?;
        let horizon_reached = result.state.t > self.world.cfg.horizon;
        let mut c = cost(&result.state, result.collision, self.world);
        let reason = if result.collision {
            Some(TerminalReason::Collision)
        } else if horizon_reached {
            Some(TerminalReason::Horizon)
        } else {
            None
        };
        if reason == Some(TerminalReason::Horizon) {
            match self.mode {
                MaskMode::Masked => check_arrival(&result.state, self.world)?,
                MaskMode::Unmasked => {
                    c += terminal_penalty(&result.state, self.world);
                }
            }
        }
        let mut delivered: Vec<usize> = result
            .outcomes
            .iter()
            .filter(|o| o.success)
            .map(|o| o.sn)
            .collect();
        delivered.sort_unstable();
        delivered.dedup();
        let before = std::mem::replace(&mut self.state, result.state);
        let masks = if reason.is_none() {
            compute_masks(&self.state, self.world, self.mode)
        } else {
            Vec::new()
        };
        self.transitions.push(Transition {
            t: before.t,
            observations: (0..self.world.cfg.num_uavs)
                .map(|m| observe(&before, m, self.world))
                .collect(),
            state: before,
            masks: std::mem::replace(&mut self.masks, masks),
            actions: actions.to_vec(),
            cost: c,
            total_aoi: self.state.total_aoi(),
            collision: result.collision,
            delivered,
        });
        self.terminal = reason;
        Ok(StepInfo {
            cost: c,
            done: reason.is_some(),
            reason,
        })
    }

    pub fn finish(self) -> Result<EpisodeRecord, EpisodeError> {
        let terminal = self.terminal.ok_or(EpisodeError::Finished)?;
        Ok(EpisodeRecord {
            transitions: self.transitions,
            terminal,
            final_state: self.state,
            horizon: self.world.cfg.horizon,
        })
    }
}

fn compute_masks(state: &WorldState, world: &World, mode: MaskMode) -> Vec<ActionMask> {
    let cfg = &world.cfg;
    (0..cfg.num_uavs)
        .map(|m| match mode {
            MaskMode::Masked => feasibility::action_mask(state, m, world),
            MaskMode::Unmasked => ActionMask {
                movement: feasibility::MovementMask {
                    options: (0..=cfg.n1)
                        .flat_map(|s| {
                            (0..cfg.n2).map(move |h| feasibility::MovementOption::grid(s, h, cfg))
                        })
                        .collect(),
                    forced: false,
                },
                schedulable: (0..=cfg.num_sns).collect(),
            },
        })
        .collect()
}

/// Turns beyond the window are clipped to its nearer edge.
fn clip_turn(speed: f64, prev: f64, wanted: f64, window: f64) -> f64 {
    if speed <= feasibility::REST_TOL
        || feasibility::angular_distance(prev, wanted) <= window + 1e-12
    {
        return wanted;
    }
    let delta = (wanted - prev).rem_euclid(2.0 * std::f64::consts::PI);
    let signed = if delta <= std::f64::consts::PI { window } else { -window };
    crate::world::wrap_angle(prev + signed)
}

fn check_arrival(state: &WorldState, world: &World) -> Result<(), EpisodeError> {
    for (m, u) in state.uavs.iter().enumerate() {
        let d = distance(u.position, world.stops[m]);
        if d > ARRIVAL_TOL * 10.0 || u.energy_spent > world.cfg.e_max {
            return Err(EpisodeError::ArrivalViolation {
                uav: m,
                distance: d,
                energy: u.energy_spent,
            });
        }
    }
    Ok(())
}

/// `k1` for each UAV that ends more than one cruise step from its stop or
/// over its energy budget.
pub fn terminal_penalty(state: &WorldState, world: &World) -> f64 {
    let cfg = &world.cfg;
    let misses = state
        .uavs
        .iter()
        .enumerate()
        .filter(|(m, u)| {
            distance(u.position, world.stops[*m]) > cfg.cruise_step() || u.energy_spent > cfg.e_max
        })
        .count();
    misses as f64 * cfg.collision_penalty()
}

/// Anything that picks a joint action each slot.
pub trait JointPolicy {
    /// Called before the first slot of every episode.
    fn reset(&mut self) {}
    fn act(&mut self, episode: &Episode<'_>) -> Vec<AgentAction>;
}

pub fn run_episode(
    world: &World,
    policy: &mut dyn JointPolicy,
    rng: StreamRng,
    mode: MaskMode,
) -> Result<EpisodeRecord, EpisodeError> {
    let mut ep = Episode::new(world, rng, mode);
    policy.reset();
    while !ep.is_done() {
        let actions = policy.act(&ep);
        ep.step(&actions)?;
    }
    ep.finish()
}

/// Uniformly random over each UAV's allowed actions.
pub struct RandomPolicy {
    pub rng: StreamRng,
    pub space: ActionSpace,
}

impl JointPolicy for RandomPolicy {
    fn act(&mut self, episode: &Episode<'_>) -> Vec<AgentAction> {
        let cfg = &episode.world().cfg;
        episode
            .masks()
            .iter()
            .map(|mask| {
                let allowed = self.space.allowed(mask, cfg);
                let pick = allowed[self.rng.gen_range(0..allowed.len())];
                self.space.decode(pick)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn world() -> World {
        World::new(WorldConfig::desk()).unwrap()
    }

    #[test]
    fn encoding_round_trips() {
        let w = world();
        for schedules in [true, false] {
            let space = ActionSpace::new(&w, schedules);
            for i in 0..space.size() {
                assert_eq!(space.encode(&space.decode(i)), i);
            }
        }
        assert_eq!(ActionSpace::new(&w, true).size(), 2 * 6 * 11);
    }

    #[test]
    fn cost_examples() {
        let w = World::new(WorldConfig::table_i(3, 15)).unwrap();
        let mut s = w.initial_state();
        assert_eq!(cost(&s, false, &w), 15.0);
        assert_eq!(cost(&s, true, &w), 15.0 + w.cfg.collision_penalty());
        for sn in &mut s.sns {
            sn.aoi = 100;
        }
        assert_eq!(cost(&s, false, &w), 1500.0);
    }

    #[test]
    fn sentinel_outside_coverage() {
        let w = world();
        let mut s = w.initial_state();
        s.sns[0].position = s.uavs[0].position;
        s.sns[1].position = [800.0, 800.0];
        s.uavs[0].position = [0.0, 0.0];
        s.sns[0].position = [0.0, 0.0];
        let o = observe(&s, 0, &w);
        assert_eq!(o.aoi[0], Some(s.sns[0].aoi));
        assert_eq!(o.aoi[1], None);
        let f = o.features(&w);
        assert_eq!(f.len(), observation_dim(&w));
        assert_eq!(f[4 + 1], SENTINEL);
    }

    #[test]
    fn random_masked_episode_returns_home() {
        let w = world();
        let mut policy = RandomPolicy {
            rng: crate::rng::stream(5, "policy"),
            space: ActionSpace::new(&w, true),
        };
        let rec = run_episode(&w, &mut policy, crate::rng::stream(5, "env"), MaskMode::Masked).unwrap();
        if !rec.collided() {
            assert_eq!(rec.len(), w.cfg.horizon as usize);
            let sum: f64 = rec.transitions.iter().map(|t| t.cost).sum();
            assert!((rec.total_average_aoi() - sum / f64::from(w.cfg.horizon)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_violation_is_an_error() {
        let w = world();
        let mut ep = Episode::new(&w, crate::rng::stream(1, "env"), MaskMode::Masked);
        let far_sensor = (1..=w.cfg.num_sns)
            .find(|b| !ep.masks()[0].schedulable.contains(b))
            .expect("some sensor out of range at the start");
        let mut actions = vec![AgentAction { speed_idx: 0, heading_idx: 0, schedule: 0 }; 2];
        actions[0].schedule = far_sensor;
        assert!(matches!(ep.step(&actions), Err(EpisodeError::MaskViolation { .. })));
    }

    #[test]
    fn turn_clipping() {
        use std::f64::consts::PI;
        assert!((clip_turn(20.0, 0.0, PI, PI / 3.0) - PI / 3.0).abs() < 1e-12
            || (clip_turn(20.0, 0.0, PI, PI / 3.0) - 5.0 * PI / 3.0).abs() < 1e-12);
        assert!((clip_turn(20.0, 0.0, 4.0 * PI / 3.0, PI / 3.0) - 5.0 * PI / 3.0).abs() < 1e-12);
        assert_eq!(clip_turn(0.0, 0.0, PI, PI / 3.0), PI);
    }
}
