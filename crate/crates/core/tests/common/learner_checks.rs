//! Mixer monotonicity, argmin consistency and finite-difference gradient
//! checks on tiny networks.

use aoi_core::decpomdp::{run_episode, ActionSpace, MaskMode, RandomPolicy};
use aoi_core::qmix::{loss_and_grads, masked_argmin, td_targets, Algorithm, LearnerConfig, MixerNet, Model, ReplayEpisode};
use aoi_core::rng::{indexed_stream, stream};
use aoi_core::world::{Endpoints, World, WorldConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

const STATE_DIM: usize = 5;

fn random_mixer(n_agents: usize, draw: u64) -> MixerNet {
    let mut rng = indexed_stream(7, "mixer-draw", draw);
    let mut mixer = MixerNet::new(n_agents, STATE_DIM, 4, 4, &mut rng);
    let scale = rng.gen_range(0.5..3.0);
    mixer.params.scale(scale);
    mixer
}

fn q_tot(mixer: &MixerNet, q: &[f64], s: &[f64]) -> f64 {
    let q = Array2::from_shape_vec((1, q.len()), q.to_vec()).unwrap();
    let s = Array2::from_shape_vec((1, s.len()), s.to_vec()).unwrap();
    mixer.forward(&q.view(), &s.view()).0[0]
}

/// Smallest finite-difference and analytic `∂Q_tot/∂q_m` over `draws`
/// random mixers, states and agent values.
pub fn mixer_monotonicity(draws: u64) -> (f64, f64) {
    let mut min_fd = f64::INFINITY;
    let mut min_analytic = f64::INFINITY;
    let h = 1e-6;
    for draw in 0..draws {
        let n_agents = 2 + (draw % 2) as usize;
        let mixer = random_mixer(n_agents, draw);
        let mut rng = indexed_stream(7, "mixer-input", draw);
        let s: Vec<f64> = (0..STATE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..n_agents).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let qa = Array2::from_shape_vec((1, n_agents), q.clone()).unwrap();
        let sa = Array2::from_shape_vec((1, STATE_DIM), s.clone()).unwrap();
        let (_, cache) = mixer.forward(&qa.view(), &sa.view());
        let mut sink = mixer.params.zeros_like();
        let dq = mixer.backward(&cache, &[1.0], &mut sink);
        for m in 0..n_agents {
            let mut up = q.clone();
            let mut down = q.clone();
            up[m] += h;
            down[m] -= h;
            let fd = (q_tot(&mixer, &up, &s) - q_tot(&mixer, &down, &s)) / (2.0 * h);
            min_fd = min_fd.min(fd);
            min_analytic = min_analytic.min(dq[[0, m]]);
        }
    }
    (min_fd, min_analytic)
}

/// Trials where decentralized masked argmins differ from the brute-force
/// joint argmin of the mixed value.
pub fn igm_mismatches(trials: u64) -> usize {
    let mut mismatches = 0;
    for trial in 0..trials {
        let n_agents = 2 + (trial % 2) as usize;
        let mixer = random_mixer(n_agents, 10_000 + trial);
        let mut rng = indexed_stream(7, "igm", trial);
        let n_actions = rng.gen_range(2..=8);
        let s: Vec<f64> = (0..STATE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qs: Vec<Vec<f64>> = (0..n_agents)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let allowed: Vec<Vec<usize>> = (0..n_agents)
            .map(|_| {
                let mut all: Vec<usize> = (0..n_actions).collect();
                all.shuffle(&mut rng);
                let keep = rng.gen_range(1..=n_actions);
                let mut a = all[..keep].to_vec();
                a.sort_unstable();
                a
            })
            .collect();
        let greedy: Vec<usize> = (0..n_agents)
            .map(|m| masked_argmin(&qs[m], &allowed[m]).unwrap())
            .collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut joint = vec![0usize; n_agents];
        loop {
            let actions: Vec<usize> = (0..n_agents).map(|m| allowed[m][joint[m]]).collect();
            let q: Vec<f64> = (0..n_agents).map(|m| qs[m][actions[m]]).collect();
            let v = q_tot(&mixer, &q, &s);
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, actions));
            }
            let mut m = 0;
            while m < n_agents {
                joint[m] += 1;
                if joint[m] < allowed[m].len() {
                    break;
                }
                joint[m] = 0;
                m += 1;
            }
            if m == n_agents {
                break;
            }
        }
        if best.unwrap().1 != greedy {
            mismatches += 1;
        }
    }
    mismatches
}

/// Largest relative error per parameter group: (group, max error, count).
pub type GroupReport = Vec<(String, f64, usize)>;

/// Relative error with a floor on the denominator so exact zeros compare
/// as absolute differences.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn tiny_world() -> World {
    World::new(WorldConfig {
        num_sns: 3,
        num_uavs: 2,
        horizon: 6,
        endpoints: Endpoints::MiddleRow,
        ..WorldConfig::default()
    })
    .expect("tiny world")
}

/// Analytic gradients of the TD loss against central differences for every
/// parameter of a tiny model.
pub fn gradient_check(algorithm: Algorithm) -> GroupReport {
    let world = tiny_world();
    let cfg = LearnerConfig {
        agent_hidden: 3,
        mixer_hidden: 3,
        hyper_hidden: 3,
        ..LearnerConfig::default()
    };
    let mut model = Model::new(algorithm, &world, &cfg, 11);
    let target = Model::new(algorithm, &world, &cfg, 12);
    let mut policy = RandomPolicy {
        rng: stream(5, "grad-policy"),
        space: ActionSpace::new(&world, true),
    };
    let episodes: Vec<ReplayEpisode> = (0..3)
        .map(|i| {
            let rec = run_episode(&world, &mut policy, indexed_stream(5, "grad-env", i), MaskMode::Masked).unwrap();
            ReplayEpisode::from_record(&rec, &world, &model.space, 0.01)
        })
        .collect();
    let batch: Vec<&ReplayEpisode> = episodes.iter().collect();
    let targets = td_targets(&target, &batch, 0.9);
    let (_, grads) = loss_and_grads(&model, &batch, &targets);
    let analytic: Vec<_> = grads.agents.iter().chain(grads.mixer.iter()).cloned().collect();

    let h = 1e-6;
    let mut report = Vec::new();
    for (si, store) in analytic.iter().enumerate() {
        for (ti, tensor) in store.tensors.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for (idx, &a) in tensor.indexed_iter() {
                let original = model.stores()[si].tensors[ti][idx];
                model.stores_mut()[si].tensors[ti][idx] = original + h;
                let up = loss_and_grads(&model, &batch, &targets).0;
                model.stores_mut()[si].tensors[ti][idx] = original - h;
                let down = loss_and_grads(&model, &batch, &targets).0;
                model.stores_mut()[si].tensors[ti][idx] = original;
                worst = worst.max(grad_rel_err(a, (up - down) / (2.0 * h)));
            }
            let owner = if si < grads.agents.len() { format!("agent{si}") } else { "mixer".to_string() };
            report.push((format!("{owner}.{}", store.names[ti]), worst, tensor.len()));
        }
    }
    report
}
