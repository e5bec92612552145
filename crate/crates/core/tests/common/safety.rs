//! Channel statistics, slack drift bounds and mask safety over many random
//! masked episodes.

use aoi_core::decpomdp::{ActionSpace, Episode, JointPolicy, MaskMode, RandomPolicy};
use aoi_core::feasibility::{angular_distance, ARRIVAL_TOL, REST_TOL};
use aoi_core::rng::indexed_stream;
use aoi_core::world::{distance, los_probability, sample_path_loss, World, WorldConfig};
use rand::Rng;

/// Per geometry: 3D distance, expected LoS probability, empirical rate,
/// and the deviation in binomial standard deviations.
pub fn los_monte_carlo(geometries: u64, draws: u64) -> Vec<(f64, f64, f64, f64)> {
    let cfg = WorldConfig::default();
    let mut out = Vec::new();
    for g in 0..geometries {
        let mut geo = indexed_stream(3, "los-geometry", g);
        let horizontal = geo.gen_range(0.0..800.0 * std::f64::consts::SQRT_2);
        let d = horizontal.hypot(cfg.altitude);
        let p = los_probability(d, cfg.altitude, &cfg).unwrap();
        let mut rng = indexed_stream(3, "los-draws", g);
        let hits = (0..draws)
            .filter(|_| sample_path_loss(d, &cfg, &mut rng).unwrap().los)
            .count() as f64;
        let n = draws as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        out.push((d, p, hits / n, (hits - n * p).abs() / sigma));
    }
    out
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct DriftReport {
    pub transitions: usize,
    pub time_violations: usize,
    pub energy_violations: usize,
}

/// Checks `φ(t+1) ≥ φ(t) − 4` and `ψ(t+1) ≥ ψ(t) − 4Ē` for every UAV over
/// random masked joint transitions until at least `min_transitions` slots
/// have been played.
pub fn drift_bounds(world: &World, min_transitions: usize) -> DriftReport {
    let space = ActionSpace::new(world, true);
    let mut report = DriftReport::default();
    let mut episode = 0;
    while report.transitions < min_transitions {
        let mut policy = RandomPolicy {
            rng: indexed_stream(4, "drift-policy", episode),
            space,
        };
        let mut ep = Episode::new(world, indexed_stream(4, "drift-env", episode), MaskMode::Masked);
        while !ep.is_done() {
            let before = ep.state().uavs.clone();
            let actions = policy.act(&ep);
            ep.step(&actions).unwrap();
            report.transitions += 1;
            for (a, b) in before.iter().zip(&ep.state().uavs) {
                report.time_violations += usize::from(b.time_diff < a.time_diff - 4);
                report.energy_violations += usize::from(b.energy_diff < a.energy_diff - 4.0 * world.e_bar);
            }
        }
        episode += 1;
    }
    report
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct SafetyReport {
    pub episodes: usize,
    pub collided: usize,
    pub not_at_stop: usize,
    pub over_budget: usize,
    pub kinematic_violations: usize,
}

impl SafetyReport {
    pub fn all_safe(&self) -> bool {
        self.collided == 0 && self.not_at_stop == 0 && self.over_budget == 0 && self.kinematic_violations == 0
    }
}

/// Runs random-policy masked episodes and checks every slot's kinematics and
/// every episode's terminal pose and energy.
pub fn mask_safety(world: &World, episodes: u64) -> SafetyReport {
    let cfg = &world.cfg;
    let space = ActionSpace::new(world, true);
    let mut r = SafetyReport::default();
    for e in 0..episodes {
        let mut policy = RandomPolicy {
            rng: indexed_stream(6, "safety-policy", e),
            space,
        };
        let mut ep = Episode::new(world, indexed_stream(6, "safety-env", e), MaskMode::Masked);
        while !ep.is_done() {
            let before = ep.state().uavs.clone();
            let actions = policy.act(&ep);
            ep.step(&actions).unwrap();
            for (a, b) in before.iter().zip(&ep.state().uavs) {
                let flown = distance(a.position, b.position);
                let expected = 0.5 * (a.speed + b.speed) * cfg.tau0;
                let bad = !(0.0..=cfg.v_max).contains(&b.speed)
                    || (a.speed > REST_TOL && angular_distance(a.heading, b.heading) > cfg.dphi_max + 1e-9)
                    || (flown - expected).abs() > 1e-9
                    || b.position.iter().any(|c| !(0.0..=cfg.area_side).contains(c));
                r.kinematic_violations += usize::from(bad);
            }
        }
        let rec = ep.finish().unwrap();
        r.episodes += 1;
        r.collided += usize::from(rec.collided());
        let final_uavs = &rec.final_state.uavs;
        r.not_at_stop += usize::from(final_uavs.iter().enumerate().any(|(m, u)| {
            distance(u.position, world.stops[m]) > ARRIVAL_TOL || u.speed > REST_TOL
        }));
        r.over_budget += usize::from(final_uavs.iter().any(|u| u.energy_spent > cfg.e_max));
    }
    r
}
