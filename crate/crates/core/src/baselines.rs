//! Comparison policies: nearest-sensor scheduling, a K-means cluster
//! heuristic, and independent learners.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decpomdp::{AgentAction, Episode, JointPolicy};
use crate::qmix::{Algorithm, LearnError, LearnerConfig, Trainer};
use crate::world::{displaced, distance, World};

pub const LLOYD_MAX_ITERS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("{sns} sensors cannot fill {clusters} clusters")]
    TooFewSensors { sns: usize, clusters: usize },
}

/// Schedulable sensor (1-based id) closest to `position`, or 0.
pub fn nearest_schedule(position: [f64; 2], sn_positions: &[[f64; 2]], schedulable: &[usize]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for &id in schedulable.iter().filter(|&&id| id > 0) {
        let d = distance(position, sn_positions[id - 1]);
        if d < best_d || (d == best_d && id < best) {
            best = id;
            best_d = d;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// 0-based cluster (UAV) index of each sensor.
    pub cluster_of: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub iterations: usize,
}

fn nearest_centroid(p: [f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in centroids.iter().enumerate() {
        let d = distance(p, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Lloyd's algorithm seeded at the UAV starts. Stops when the assignment
/// no longer changes or after [`LLOYD_MAX_ITERS`] rounds. A cluster left
/// empty is re-seeded at the sensor farthest from its own centroid.
pub fn kmeans_cluster(sn_positions: &[[f64; 2]], starts: &[[f64; 2]]) -> Result<ClusterAssignment, ClusterError> {
    let k = starts.len();
    if sn_positions.len() < k {
        return Err(ClusterError::TooFewSensors {
            sns: sn_positions.len(),
            clusters: k,
        });
    }
    let mut centroids = starts.to_vec();
    let mut assignment: Option<Vec<usize>> = None;
    let mut iterations = 0;
    while iterations < LLOYD_MAX_ITERS {
        iterations += 1;
        let mut next: Vec<usize> = sn_positions.iter().map(|&p| nearest_centroid(p, &centroids)).collect();
        let mut reseeded = vec![false; sn_positions.len()];
        for c in 0..k {
            if next.contains(&c) {
                continue;
            }
            let far = (0..sn_positions.len())
                .filter(|&n| !reseeded[n])
                .max_by(|&a, &b| {
                    let da = distance(sn_positions[a], centroids[next[a]]);
                    let db = distance(sn_positions[b], centroids[next[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("at least k sensors");
            reseeded[far] = true;
            centroids[c] = sn_positions[far];
            next[far] = c;
        }
        let changed = assignment.as_ref() != Some(&next);
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<[f64; 2]> = sn_positions
                .iter()
                .zip(&next)
                .filter(|(_, &a)| a == c)
                .map(|(&p, _)| p)
                .collect();
            let n = members.len() as f64;
            *centroid = [
                members.iter().map(|p| p[0]).sum::<f64>() / n,
                members.iter().map(|p| p[1]).sum::<f64>() / n,
            ];
        }
        assignment = Some(next);
        if !changed {
            break;
        }
    }
    Ok(ClusterAssignment {
        cluster_of: assignment.expect("at least one round"),
        centroids,
        iterations,
    })
}

/// Each UAV chases the stalest sensor of its cluster and polls the stalest
/// sensor it can reach.
pub struct ClusterPolicy {
    pub assignment: ClusterAssignment,
    /// Restrict scheduling to the UAV's own cluster.
    pub own_cluster_only: bool,
}

impl ClusterPolicy {
    pub fn new(world: &World, own_cluster_only: bool) -> Result<Self, ClusterError> {
        Ok(Self {
            assignment: kmeans_cluster(&world.sn_positions, &world.starts)?,
            own_cluster_only,
        })
    }

    /// Action of UAV `m`. Sensor AoI is read from the reported values in
    /// the world state.
    pub fn step(&self, m: usize, episode: &Episode<'_>) -> AgentAction {
        let world = episode.world();
        let cfg = &world.cfg;
        let state = episode.state();
        let mask = &episode.masks()[m];
        let pose = &state.uavs[m];
        let in_cluster = |n: usize| self.assignment.cluster_of[n] == m;

        let stalest = |candidates: &mut dyn Iterator<Item = usize>| {
            candidates.fold(None, |best: Option<usize>, n| match best {
                Some(b) if state.sns[b].aoi >= state.sns[n].aoi => Some(b),
                _ => Some(n),
            })
        };
        let target = stalest(&mut (0..cfg.num_sns).filter(|&n| in_cluster(n)));
        let movement = match target {
            Some(n) => {
                let goal = state.sns[n].position;
                let mut best = mask.movement.options[0];
                let mut best_d = f64::INFINITY;
                for o in &mask.movement.options {
                    let p = displaced(pose.position, pose.speed, o.speed_next, o.heading, cfg.tau0);
                    let d = distance(p, goal);
                    if d < best_d {
                        best = *o;
                        best_d = d;
                    }
                }
                best
            }
            None => mask.movement.options[0],
        };
        let schedule = stalest(
            &mut mask
                .schedulable
                .iter()
                .filter(|&&id| id > 0 && (!self.own_cluster_only || in_cluster(id - 1)))
                .map(|&id| id - 1),
        )
        .map_or(0, |n| n + 1);
        AgentAction {
            speed_idx: movement.speed_idx,
            heading_idx: movement.heading_idx,
            schedule,
        }
    }
}

impl JointPolicy for ClusterPolicy {
    fn act(&mut self, episode: &Episode<'_>) -> Vec<AgentAction> {
        (0..episode.world().cfg.num_uavs)
            .map(|m| self.step(m, episode))
            .collect()
    }
}

/// Independent learners: one recurrent value network per UAV, no mixer.
pub fn idqn_train<'w>(world: &'w World, cfg: LearnerConfig, seed: u64) -> Result<Trainer<'w>, LearnError> {
    let mut trainer = Trainer::new(Algorithm::Idqn, world, cfg, seed);
    trainer.train()?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_examples() {
        let sns = [[50.0, 0.0], [80.0, 0.0], [10.0, 0.0]];
        assert_eq!(nearest_schedule([0.0, 0.0], &sns, &[0, 1, 2]), 1);
        assert_eq!(nearest_schedule([0.0, 0.0], &sns, &[0, 2]), 2);
        assert_eq!(nearest_schedule([0.0, 0.0], &sns, &[0]), 0);
    }

    #[test]
    fn singleton_clusters_when_far_apart() {
        let starts = [[0.0, 0.0], [400.0, 0.0], [800.0, 0.0]];
        let sns = [[790.0, 10.0], [5.0, 5.0], [400.0, 20.0]];
        let a = kmeans_cluster(&sns, &starts).unwrap();
        assert_eq!(a.cluster_of, vec![2, 0, 1]);
    }

    #[test]
    fn colocated_sensors_fill_every_cluster() {
        let starts = [[0.0, 0.0], [400.0, 0.0]];
        let sns = [[100.0, 100.0]; 4];
        let a = kmeans_cluster(&sns, &starts).unwrap();
        // All sit nearest to UAV 0; the empty cluster takes one sensor.
        assert_eq!(a.cluster_of.iter().filter(|&&c| c == 0).count(), 3);
        assert_eq!(a.cluster_of.iter().filter(|&&c| c == 1).count(), 1);
    }

    #[test]
    fn too_few_sensors() {
        assert!(kmeans_cluster(&[[0.0, 0.0]], &[[0.0, 0.0], [1.0, 1.0]]).is_err());
    }
}
