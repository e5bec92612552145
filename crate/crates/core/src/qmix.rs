//! Value-decomposition learners with centralized training and decentralized
//! execution.
//!
//! One recurrent agent network scores the actions of each UAV from its own
//! observation history. In QMIX a state-conditioned mixer with non-negative
//! weights combines the chosen per-agent values into a team value, so the
//! per-agent greedy choice is also the team-greedy choice. The same
//! machinery trains independent learners (one network per agent, no mixer)
//! and the nearest-scheduling baseline (movement-only action space).
//!
//! Everything minimizes cost: greedy means argmin, targets use min.

use std::collections::VecDeque;

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decpomdp::{
    observation_dim, state_dim, ActionSpace, AgentAction, Episode, EpisodeError, EpisodeRecord,
    JointPolicy, MaskMode, Observation,
};
use crate::feasibility::ActionMask;
use crate::nn::{elu, elu_grad, relu, relu_backward, Adam, Gru, GruCache, Linear, ParamStore};
use crate::rng::{indexed_stream, stream, StreamCursor, StreamRng};
use crate::world::World;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("no allowed action for UAV {uav}")]
    EmptyMask { uav: usize },
    #[error("non-finite loss {loss} at update {update}")]
    NonFiniteLoss { loss: f64, update: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Shared agent network plus monotonic mixer.
    Qmix,
    /// One network per agent trained on its own TD error.
    Idqn,
    /// QMIX over movements only; each UAV polls its nearest schedulable sensor.
    Nearest,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Qmix => "qmix",
            Algorithm::Idqn => "idqn",
            Algorithm::Nearest => "nearest",
        }
    }
}

/// Learning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub episodes: usize,
    pub replay_capacity: usize,
    /// Training updates between target-network copies.
    pub target_interval: u64,
    pub batch_episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Linear decrement of ε per environment step.
    pub eps_decay: f64,
    pub lr: f64,
    /// Episodes stored before the first update.
    pub warmup: usize,
    pub gamma: f64,
    pub agent_hidden: usize,
    pub mixer_hidden: usize,
    pub hyper_hidden: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Multiplier applied to costs before learning; `None` means
    /// `1 / (N · delta_max)`, which puts one slot's cost in `(0, 1]`.
    pub cost_scale: Option<f64>,
    pub mask: MaskMode,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            episodes: 50_000,
            replay_capacity: 1000,
            target_interval: 200,
            batch_episodes: 32,
            eps_start: 0.99,
            eps_end: 0.01,
            eps_decay: 9.9e-6,
            lr: 5e-4,
            warmup: 32,
            gamma: 1.0,
            agent_hidden: 256,
            mixer_hidden: 256,
            hyper_hidden: 256,
            grad_clip: Some(10.0),
            cost_scale: None,
            mask: MaskMode::Masked,
        }
    }
}

impl LearnerConfig {
    /// CPU-sized networks and episode budget. The target interval shrinks
    /// with the budget so a run still sees on the order of a hundred syncs.
    pub fn desk() -> Self {
        Self {
            episodes: 3000,
            target_interval: 20,
            agent_hidden: 64,
            mixer_hidden: 32,
            hyper_hidden: 32,
            ..Self::default()
        }
    }

    pub fn epsilon(&self, env_steps: u64) -> f64 {
        (self.eps_start - self.eps_decay * env_steps as f64).max(self.eps_end)
    }

    pub fn cost_scale_for(&self, world: &World) -> f64 {
        self.cost_scale.unwrap_or_else(|| {
            1.0 / (world.cfg.num_sns as f64 * f64::from(world.cfg.delta_max()))
        })
    }
}

/// Fully connected → ReLU → GRU → fully connected, one Q-value per action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNet {
    pub params: ParamStore,
    fc1: Linear,
    gru: Gru,
    fc2: Linear,
    pub input_dim: usize,
    pub hidden: usize,
    pub n_actions: usize,
}

/// A batch of agent-network inputs: dense observation features plus, per
/// row, the active columns of the one-hot blocks that follow them.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput {
    pub dense: Array2<f64>,
    pub hot: Vec<Vec<usize>>,
}

impl AgentInput {
    pub fn zeros(rows: usize, dense_width: usize) -> Self {
        Self {
            dense: Array2::zeros((rows, dense_width)),
            hot: vec![Vec::new(); rows],
        }
    }

    pub fn to_dense(&self, width: usize) -> Array2<f64> {
        let mut x = Array2::zeros((self.dense.nrows(), width));
        x.slice_mut(s![.., ..self.dense.ncols()]).assign(&self.dense);
        for (r, cols) in self.hot.iter().enumerate() {
            for &c in cols {
                x[[r, c]] = 1.0;
            }
        }
        x
    }
}

/// Per-step values kept for backpropagation through time.
pub struct AgentTrace {
    xs: Vec<AgentInput>,
    acts: Vec<Array2<f64>>,
    caches: Vec<GruCache>,
    hs: Vec<Array2<f64>>,
    pub qs: Vec<Array2<f64>>,
}

impl AgentNet {
    pub fn new(input_dim: usize, hidden: usize, n_actions: usize, rng: &mut StreamRng) -> Self {
        let mut params = ParamStore::new();
        let fc1 = Linear::new(&mut params, "fc1", input_dim, hidden, rng);
        let gru = Gru::new(&mut params, "rnn", hidden, hidden, rng);
        let fc2 = Linear::new(&mut params, "fc2", hidden, n_actions, rng);
        Self {
            params,
            fc1,
            gru,
            fc2,
            input_dim,
            hidden,
            n_actions,
        }
    }

    pub fn initial_hidden(&self, rows: usize) -> Array2<f64> {
        Array2::zeros((rows, self.hidden))
    }

    /// First layer with the one-hot blocks applied as row gathers.
    fn input_layer(&self, x: &AgentInput) -> Array2<f64> {
        let w = &self.params.tensors[self.fc1.w];
        let d = x.dense.ncols();
        assert!(d <= self.input_dim, "agent input width");
        let mut y = x.dense.dot(&w.slice(s![..d, ..]));
        y += &self.params.tensors[self.fc1.b].row(0);
        for (r, cols) in x.hot.iter().enumerate() {
            let mut row = y.row_mut(r);
            for &c in cols {
                row += &w.row(c);
            }
        }
        y
    }

    fn input_layer_backward(&self, grads: &mut ParamStore, x: &AgentInput, da: &Array2<f64>) {
        let d = x.dense.ncols();
        {
            let gw = &mut grads.tensors[self.fc1.w];
            let mut top = gw.slice_mut(s![..d, ..]);
            general_mat_mul(1.0, &x.dense.t(), da, 1.0, &mut top);
            for (r, cols) in x.hot.iter().enumerate() {
                for &c in cols {
                    let mut row = gw.row_mut(c);
                    row += &da.row(r);
                }
            }
        }
        let mut gb = grads.tensors[self.fc1.b].row_mut(0);
        gb += &da.sum_axis(Axis(0));
    }

    /// One recurrent step over a batch of rows.
    pub fn forward(&self, x: &AgentInput, h: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(h.ncols(), self.hidden, "agent hidden width");
        let mut a = self.input_layer(x);
        relu(&mut a);
        let (h2, _) = self.gru.forward(&self.params, &a.view(), h);
        let q = self.fc2.forward(&self.params, &h2.view());
        (q, h2)
    }

    /// Runs a whole sequence from a zero hidden state, keeping caches.
    pub fn unroll(&self, xs: Vec<AgentInput>) -> AgentTrace {
        let rows = xs.first().map_or(0, |x| x.dense.nrows());
        let mut h = self.initial_hidden(rows);
        let mut trace = AgentTrace {
            acts: Vec::with_capacity(xs.len()),
            caches: Vec::with_capacity(xs.len()),
            hs: Vec::with_capacity(xs.len()),
            qs: Vec::with_capacity(xs.len()),
            xs: Vec::new(),
        };
        for x in &xs {
            let mut a = self.input_layer(x);
            relu(&mut a);
            let (h2, cache) = self.gru.forward(&self.params, &a.view(), &h);
            let q = self.fc2.forward(&self.params, &h2.view());
            trace.acts.push(a);
            trace.caches.push(cache);
            trace.qs.push(q);
            trace.hs.push(h2.clone());
            h = h2;
        }
        trace.xs = xs;
        trace
    }

    /// Q-values of a sequence, without caches.
    pub fn unroll_q(&self, xs: &[AgentInput]) -> Vec<Array2<f64>> {
        let rows = xs.first().map_or(0, |x| x.dense.nrows());
        let mut h = self.initial_hidden(rows);
        xs.iter()
            .map(|x| {
                let (q, h2) = self.forward(x, &h);
                h = h2;
                q
            })
            .collect()
    }

    /// Gradients of the parameters given `dL/dq` at every step.
    pub fn backward(&self, trace: &AgentTrace, dqs: &[Array2<f64>], grads: &mut ParamStore) {
        let steps = trace.qs.len();
        let rows = trace.qs.first().map_or(0, |q| q.nrows());
        let mut dh_next = Array2::zeros((rows, self.hidden));
        for t in (0..steps).rev() {
            let dh_out = self
                .fc2
                .backward(&self.params, grads, &trace.hs[t].view(), &dqs[t].view());
            let dh = dh_out + &dh_next;
            let (mut da, dh_prev) = self.gru.backward(
                &self.params,
                grads,
                &trace.acts[t].view(),
                &trace.caches[t],
                &dh,
            );
            relu_backward(&mut da, &trace.acts[t]);
            self.input_layer_backward(grads, &trace.xs[t], &da);
            dh_next = dh_prev;
        }
    }
}

/// State-conditioned monotonic mixer built from hypernetworks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerNet {
    pub params: ParamStore,
    hyper_w1: Linear,
    hyper_b1: Linear,
    hyper_w2: Linear,
    hyper_b2a: Linear,
    hyper_b2b: Linear,
    pub n_agents: usize,
    pub embed: usize,
    pub state_dim: usize,
}

pub struct MixerCache {
    q: Array2<f64>,
    s: Array2<f64>,
    hw1: Array2<f64>,
    pre: Array2<f64>,
    hid: Array2<f64>,
    hw2: Array2<f64>,
    v1: Array2<f64>,
}

impl MixerNet {
    pub fn new(
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let mut params = ParamStore::new();
        let hyper_w1 = Linear::new(&mut params, "hyper_w1", state_dim, n_agents * embed, rng);
        let hyper_b1 = Linear::new(&mut params, "hyper_b1", state_dim, embed, rng);
        let hyper_w2 = Linear::new(&mut params, "hyper_w2", state_dim, embed, rng);
        let hyper_b2a = Linear::new(&mut params, "hyper_b2.0", state_dim, hyper_hidden, rng);
        let hyper_b2b = Linear::new(&mut params, "hyper_b2.2", hyper_hidden, 1, rng);
        Self {
            params,
            hyper_w1,
            hyper_b1,
            hyper_w2,
            hyper_b2a,
            hyper_b2b,
            n_agents,
            embed,
            state_dim,
        }
    }

    /// Team values for `K` rows of per-agent values `q` (`K × M`) and
    /// states `s` (`K × state_dim`).
    pub fn forward(&self, q: &ArrayView2<f64>, s: &ArrayView2<f64>) -> (Vec<f64>, MixerCache) {
        assert_eq!(q.ncols(), self.n_agents, "mixer agent count");
        assert_eq!(s.ncols(), self.state_dim, "mixer state width");
        let p = &self.params;
        let (k, m_n, e_n) = (q.nrows(), self.n_agents, self.embed);
        let hw1 = self.hyper_w1.forward(p, s);
        let mut pre = self.hyper_b1.forward(p, s);
        for r in 0..k {
            for m in 0..m_n {
                let qv = q[[r, m]];
                for e in 0..e_n {
                    pre[[r, e]] += qv * hw1[[r, m * e_n + e]].abs();
                }
            }
        }
        let hid = pre.mapv(elu);
        let hw2 = self.hyper_w2.forward(p, s);
        let mut v1 = self.hyper_b2a.forward(p, s);
        relu(&mut v1);
        let v = self.hyper_b2b.forward(p, &v1.view());
        let out = (0..k)
            .map(|r| {
                (0..e_n).map(|e| hid[[r, e]] * hw2[[r, e]].abs()).sum::<f64>() + v[[r, 0]]
            })
            .collect();
        let cache = MixerCache {
            q: q.to_owned(),
            s: s.to_owned(),
            hw1,
            pre,
            hid,
            hw2,
            v1,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for `dL/dQ_tot` and returns `dL/dq`.
    pub fn backward(&self, cache: &MixerCache, dq_tot: &[f64], grads: &mut ParamStore) -> Array2<f64> {
        let p = &self.params;
        let (k, m_n, e_n) = (cache.q.nrows(), self.n_agents, self.embed);
        let s = cache.s.view();
        let dv = Array2::from_shape_vec((k, 1), dq_tot.to_vec()).expect("shape");
        let mut dv1 = self.hyper_b2b.backward(p, grads, &cache.v1.view(), &dv.view());
        relu_backward(&mut dv1, &cache.v1);
        self.hyper_b2a.backward_params(grads, &s, &dv1.view());

        let mut dhw2 = Array2::zeros((k, e_n));
        let mut dpre = Array2::zeros((k, e_n));
        for r in 0..k {
            for e in 0..e_n {
                let w = cache.hw2[[r, e]];
                dhw2[[r, e]] = dq_tot[r] * cache.hid[[r, e]] * w.signum() * f64::from(w != 0.0);
                dpre[[r, e]] = dq_tot[r] * w.abs() * elu_grad(cache.pre[[r, e]]);
            }
        }
        self.hyper_w2.backward_params(grads, &s, &dhw2.view());
        self.hyper_b1.backward_params(grads, &s, &dpre.view());
        let mut dq = Array2::zeros((k, m_n));
        let mut dhw1 = Array2::zeros((k, m_n * e_n));
        for r in 0..k {
            for m in 0..m_n {
                let qv = cache.q[[r, m]];
                let mut acc = 0.0;
                for e in 0..e_n {
                    let w = cache.hw1[[r, m * e_n + e]];
                    acc += dpre[[r, e]] * w.abs();
                    dhw1[[r, m * e_n + e]] = dpre[[r, e]] * qv * w.signum() * f64::from(w != 0.0);
                }
                dq[[r, m]] = acc;
            }
        }
        self.hyper_w1.backward_params(grads, &s, &dhw1.view());
        dq
    }
}

/// Networks of one learner: a shared agent network or one per agent, plus
/// the mixer when there is more than one agent to mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub algorithm: Algorithm,
    pub agents: Vec<AgentNet>,
    pub mixer: Option<MixerNet>,
    pub space: ActionSpace,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub agents: Vec<ParamStore>,
    pub mixer: Option<ParamStore>,
}

impl ModelGrads {
    fn stores(&self) -> impl Iterator<Item = &ParamStore> {
        self.agents.iter().chain(self.mixer.iter())
    }
    fn stores_mut(&mut self) -> impl Iterator<Item = &mut ParamStore> {
        self.agents.iter_mut().chain(self.mixer.iter_mut())
    }
    pub fn norm(&self) -> f64 {
        self.stores()
            .map(|s| s.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl Model {
    pub fn new(algorithm: Algorithm, world: &World, cfg: &LearnerConfig, seed: u64) -> Self {
        let n_agents = world.cfg.num_uavs;
        let space = ActionSpace::new(world, algorithm != Algorithm::Nearest);
        let obs_dim = observation_dim(world);
        let input = obs_dim + space.size() + n_agents;
        let n_nets = if algorithm == Algorithm::Idqn { n_agents } else { 1 };
        let agents = (0..n_nets)
            .map(|k| {
                let mut rng = indexed_stream(seed, "init-agent", k as u64);
                AgentNet::new(input, cfg.agent_hidden, space.size(), &mut rng)
            })
            .collect();
        let mixer = (algorithm != Algorithm::Idqn && n_agents > 1).then(|| {
            let mut rng = stream(seed, "init-mixer");
            MixerNet::new(
                n_agents,
                state_dim(world),
                cfg.mixer_hidden,
                cfg.hyper_hidden,
                &mut rng,
            )
        });
        Self {
            algorithm,
            agents,
            mixer,
            space,
            n_agents,
            obs_dim,
            state_dim: state_dim(world),
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            agents: self.agents.iter().map(|a| a.params.zeros_like()).collect(),
            mixer: self.mixer.as_ref().map(|m| m.params.zeros_like()),
        }
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        self.agents
            .iter()
            .map(|a| &a.params)
            .chain(self.mixer.iter().map(|m| &m.params))
            .collect()
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        self.agents
            .iter_mut()
            .map(|a| &mut a.params)
            .chain(self.mixer.iter_mut().map(|m| &mut m.params))
            .collect()
    }

    fn net_of(&self, m: usize) -> usize {
        if self.agents.len() == 1 {
            0
        } else {
            m
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.space.size() + self.n_agents
    }

    /// Active one-hot columns of the agent-network input: previous action
    /// (absent at the first slot), then agent id. Observation features
    /// occupy the first `obs_dim` columns.
    pub fn hot_columns(&self, prev_action: Option<usize>, agent: usize) -> Vec<usize> {
        let mut cols = Vec::with_capacity(2);
        if let Some(a) = prev_action {
            cols.push(self.obs_dim + a);
        }
        cols.push(self.obs_dim + self.space.size() + agent);
        cols
    }
}

/// Compact episode as stored in replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEpisode {
    pub len: usize,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `[t][m][feature]`, flattened.
    pub obs: Vec<f64>,
    /// `[t][feature]`, flattened.
    pub states: Vec<f64>,
    /// `[t][m]` flat action indices in the learner's action space.
    pub actions: Vec<usize>,
    /// `[t][m]` allowed flat actions at decision time.
    pub allowed: Vec<Vec<u16>>,
    /// Scaled learning costs, one per slot.
    pub costs: Vec<f64>,
}

impl ReplayEpisode {
    pub fn from_record(record: &EpisodeRecord, world: &World, space: &ActionSpace, cost_scale: f64) -> Self {
        let m_n = world.cfg.num_uavs;
        let len = record.len();
        let mut ep = Self {
            len,
            n_agents: m_n,
            obs_dim: observation_dim(world),
            state_dim: state_dim(world),
            obs: Vec::with_capacity(len * m_n * observation_dim(world)),
            states: Vec::with_capacity(len * state_dim(world)),
            actions: Vec::with_capacity(len * m_n),
            allowed: Vec::with_capacity(len * m_n),
            costs: Vec::with_capacity(len),
        };
        for tr in &record.transitions {
            for m in 0..m_n {
                ep.obs.extend(tr.observations[m].features(world));
                let mut a = tr.actions[m];
                if !space.schedules {
                    a.schedule = 0;
                }
                ep.actions.push(space.encode(&a));
                ep.allowed.push(
                    space
                        .allowed(&tr.masks[m], &world.cfg)
                        .into_iter()
                        .map(|i| i as u16)
                        .collect(),
                );
            }
            ep.states.extend(crate::decpomdp::state_features(&tr.state, world));
            ep.costs.push(tr.cost * cost_scale);
        }
        ep
    }

    fn obs_at(&self, t: usize, m: usize) -> &[f64] {
        let start = (t * self.n_agents + m) * self.obs_dim;
        &self.obs[start..start + self.obs_dim]
    }
    fn state_at(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }
    fn action_at(&self, t: usize, m: usize) -> usize {
        self.actions[t * self.n_agents + m]
    }
    fn allowed_at(&self, t: usize, m: usize) -> &[u16] {
        &self.allowed[t * self.n_agents + m]
    }
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug, Default)]
pub struct ReplayMemory {
    capacity: usize,
    episodes: VecDeque<ReplayEpisode>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
        }
    }
    pub fn len(&self) -> usize {
        self.episodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
    pub fn push(&mut self, ep: ReplayEpisode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }
    pub fn get(&self, i: usize) -> &ReplayEpisode {
        &self.episodes[i]
    }
    /// Distinct episodes drawn uniformly.
    pub fn sample(&self, count: usize, rng: &mut StreamRng) -> Vec<&ReplayEpisode> {
        let n = count.min(self.episodes.len());
        rand::seq::index::sample(rng, self.episodes.len(), n)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect()
    }
}

/// With probability `eps` a uniform allowed action, otherwise the allowed
/// action with the lowest value (lowest index on ties). Always draws one
/// uniform for the coin so the stream advances predictably.
pub fn masked_epsilon_greedy(
    q: &[f64],
    allowed: &[usize],
    eps: f64,
    rng: &mut StreamRng,
) -> Option<usize> {
    if allowed.is_empty() {
        return None;
    }
    if rng.gen::<f64>() < eps {
        return Some(allowed[rng.gen_range(0..allowed.len())]);
    }
    masked_argmin(q, allowed)
}

pub fn masked_argmin(q: &[f64], allowed: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &a in allowed {
        if best.is_none_or(|b| q[a] < q[b]) {
            best = Some(a);
        }
    }
    best
}

fn masked_min_u16(q: ndarray::ArrayView1<f64>, allowed: &[u16]) -> f64 {
    allowed
        .iter()
        .map(|&a| q[a as usize])
        .fold(f64::INFINITY, f64::min)
}

/// Which agents each network serves and where their rows sit in a batch.
struct NetBatch {
    net: usize,
    agents: Vec<usize>,
}

fn net_batches(model: &Model) -> Vec<NetBatch> {
    if model.agents.len() == 1 {
        vec![NetBatch {
            net: 0,
            agents: (0..model.n_agents).collect(),
        }]
    } else {
        (0..model.n_agents)
            .map(|m| NetBatch {
                net: m,
                agents: vec![m],
            })
            .collect()
    }
}

/// Padded per-step inputs for one network: rows ordered `(episode, agent)`.
fn build_inputs(model: &Model, batch: &[&ReplayEpisode], agents: &[usize], steps: usize) -> Vec<AgentInput> {
    let rows = batch.len() * agents.len();
    (0..steps)
        .map(|t| {
            let mut x = AgentInput::zeros(rows, model.obs_dim);
            for (b, ep) in batch.iter().enumerate() {
                if t >= ep.len {
                    continue;
                }
                for (j, &m) in agents.iter().enumerate() {
                    let r = b * agents.len() + j;
                    let prev = (t > 0).then(|| ep.action_at(t - 1, m));
                    x.dense
                        .row_mut(r)
                        .as_slice_mut()
                        .expect("contiguous row")
                        .copy_from_slice(ep.obs_at(t, m));
                    x.hot[r] = model.hot_columns(prev, m);
                }
            }
            x
        })
        .collect()
}

/// Per-transition TD targets.
///
/// Non-terminal transitions bootstrap from the target networks' masked
/// per-agent minima at the next slot, mixed with the target mixer when
/// there is one. The last transition of every stored episode is terminal.
/// Returns `[episode][t]` for the mixed case or `[episode][t][agent]`
/// flattened as `(t, agent)` for independent learners.
pub fn td_targets(target: &Model, batch: &[&ReplayEpisode], gamma: f64) -> Vec<Vec<f64>> {
    let steps = batch.iter().map(|e| e.len).max().unwrap_or(0);
    let m_n = target.n_agents;
    // next_min[b][t][m]: masked min of target Q at slot t.
    let mut next_min = vec![vec![vec![0.0; m_n]; steps]; batch.len()];
    for nb in net_batches(target) {
        let xs = build_inputs(target, batch, &nb.agents, steps);
        let qs = target.agents[nb.net].unroll_q(&xs);
        for (b, ep) in batch.iter().enumerate() {
            for t in 0..ep.len {
                for (j, &m) in nb.agents.iter().enumerate() {
                    let row = qs[t].row(b * nb.agents.len() + j);
                    next_min[b][t][m] = masked_min_u16(row, ep.allowed_at(t, m));
                }
            }
        }
    }
    let mixed = target.mixer.is_some() || target.algorithm != Algorithm::Idqn;
    batch
        .iter()
        .enumerate()
        .map(|(b, ep)| {
            if mixed {
                let mut boot = vec![0.0; ep.len];
                if let Some(mixer) = &target.mixer {
                    if ep.len > 1 {
                        let k = ep.len - 1;
                        let q = Array2::from_shape_fn((k, m_n), |(r, m)| next_min[b][r + 1][m]);
                        let s = Array2::from_shape_fn((k, target.state_dim), |(r, c)| ep.state_at(r + 1)[c]);
                        let (v, _) = mixer.forward(&q.view(), &s.view());
                        boot[..k].copy_from_slice(&v);
                    }
                } else {
                    for t in 0..ep.len.saturating_sub(1) {
                        boot[t] = next_min[b][t + 1][0];
                    }
                }
                (0..ep.len)
                    .map(|t| {
                        let terminal = t + 1 == ep.len;
                        ep.costs[t] + if terminal { 0.0 } else { gamma * boot[t] }
                    })
                    .collect()
            } else {
                let mut out = Vec::with_capacity(ep.len * m_n);
                for t in 0..ep.len {
                    for m in 0..m_n {
                        let terminal = t + 1 == ep.len;
                        out.push(ep.costs[t] + if terminal { 0.0 } else { gamma * next_min[b][t + 1][m] });
                    }
                }
                out
            }
        })
        .collect()
}

/// Mean squared TD error over all transitions of the batch and its gradient.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&ReplayEpisode],
    targets: &[Vec<f64>],
) -> (f64, ModelGrads) {
    let steps = batch.iter().map(|e| e.len).max().unwrap_or(0);
    let m_n = model.n_agents;
    let mut grads = model.zero_grads();
    let nbs = net_batches(model);
    let traces: Vec<AgentTrace> = nbs
        .iter()
        .map(|nb| model.agents[nb.net].unroll(build_inputs(model, batch, &nb.agents, steps)))
        .collect();
    // chosen[b][t][m]
    let mut chosen = vec![vec![vec![0.0; m_n]; steps]; batch.len()];
    for (nb, trace) in nbs.iter().zip(&traces) {
        for (b, ep) in batch.iter().enumerate() {
            for t in 0..ep.len {
                for (j, &m) in nb.agents.iter().enumerate() {
                    chosen[b][t][m] = trace.qs[t][[b * nb.agents.len() + j, ep.action_at(t, m)]];
                }
            }
        }
    }
    let transitions: usize = batch.iter().map(|e| e.len).sum();
    // dchosen[b][t][m]
    let mut dchosen = vec![vec![vec![0.0; m_n]; steps]; batch.len()];
    let mut loss = 0.0;
    if model.mixer.is_some() || model.algorithm != Algorithm::Idqn {
        let k = transitions as f64;
        match &model.mixer {
            Some(mixer) => {
                let mut q = Array2::zeros((transitions, m_n));
                let mut s = Array2::zeros((transitions, model.state_dim));
                let mut y = Vec::with_capacity(transitions);
                let mut r = 0;
                for (b, ep) in batch.iter().enumerate() {
                    for t in 0..ep.len {
                        for m in 0..m_n {
                            q[[r, m]] = chosen[b][t][m];
                        }
                        s.row_mut(r)
                            .as_slice_mut()
                            .expect("contiguous")
                            .copy_from_slice(ep.state_at(t));
                        y.push(targets[b][t]);
                        r += 1;
                    }
                }
                let (qtot, cache) = mixer.forward(&q.view(), &s.view());
                let dq_tot: Vec<f64> = qtot
                    .iter()
                    .zip(&y)
                    .map(|(qv, yv)| {
                        loss += (qv - yv).powi(2) / k;
                        2.0 * (qv - yv) / k
                    })
                    .collect();
                let dq = mixer.backward(&cache, &dq_tot, grads.mixer.as_mut().expect("mixer grads"));
                let mut r = 0;
                for (b, ep) in batch.iter().enumerate() {
                    for t in 0..ep.len {
                        for m in 0..m_n {
                            dchosen[b][t][m] = dq[[r, m]];
                        }
                        r += 1;
                    }
                }
            }
            None => {
                for (b, ep) in batch.iter().enumerate() {
                    for t in 0..ep.len {
                        let diff = chosen[b][t][0] - targets[b][t];
                        loss += diff * diff / k;
                        dchosen[b][t][0] = 2.0 * diff / k;
                    }
                }
            }
        }
    } else {
        let k = (transitions * m_n) as f64;
        for (b, ep) in batch.iter().enumerate() {
            for t in 0..ep.len {
                for m in 0..m_n {
                    let diff = chosen[b][t][m] - targets[b][t * m_n + m];
                    loss += diff * diff / k;
                    dchosen[b][t][m] = 2.0 * diff / k;
                }
            }
        }
    }
    for (nb, trace) in nbs.iter().zip(&traces) {
        let rows = batch.len() * nb.agents.len();
        let dqs: Vec<Array2<f64>> = (0..steps)
            .map(|t| {
                let mut d = Array2::zeros((rows, model.space.size()));
                for (b, ep) in batch.iter().enumerate() {
                    if t >= ep.len {
                        continue;
                    }
                    for (j, &m) in nb.agents.iter().enumerate() {
                        d[[b * nb.agents.len() + j, ep.action_at(t, m)]] = dchosen[b][t][m];
                    }
                }
                d
            })
            .collect();
        model.agents[nb.net].backward(trace, &dqs, &mut grads.agents[nb.net]);
    }
    (loss, grads)
}

/// Optimizer state for every network of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub agents: Vec<Adam>,
    pub mixer: Option<Adam>,
}

impl Optimizers {
    pub fn new(model: &Model, lr: f64) -> Self {
        Self {
            agents: model.agents.iter().map(|a| Adam::new(&a.params, lr)).collect(),
            mixer: model.mixer.as_ref().map(|m| Adam::new(&m.params, lr)),
        }
    }
}

/// One gradient step on a sampled batch. Returns the loss before the step.
pub fn train_step(
    model: &mut Model,
    target: &Model,
    opt: &mut Optimizers,
    batch: &[&ReplayEpisode],
    cfg: &LearnerConfig,
) -> f64 {
    let targets = td_targets(target, batch, cfg.gamma);
    let (loss, mut grads) = loss_and_grads(model, batch, &targets);
    if let Some(clip) = cfg.grad_clip {
        let norm = grads.norm();
        if norm > clip {
            for s in grads.stores_mut() {
                s.scale(clip / norm);
            }
        }
    }
    for (k, agent) in model.agents.iter_mut().enumerate() {
        opt.agents[k].update(&mut agent.params, &grads.agents[k]);
    }
    if let (Some(mixer), Some(adam), Some(g)) = (model.mixer.as_mut(), opt.mixer.as_mut(), grads.mixer.as_ref()) {
        adam.update(&mut mixer.params, g);
    }
    loss
}

pub fn target_sync(model: &Model, target: &mut Model) {
    target.clone_from(model);
}

/// Decentralized actor: each UAV keeps its own recurrent state and acts on
/// its own observation only.
pub struct Actor<'m> {
    pub model: &'m Model,
    hidden: Vec<Array2<f64>>,
    prev: Vec<Option<usize>>,
}

impl<'m> Actor<'m> {
    pub fn new(model: &'m Model) -> Self {
        let hidden = (0..model.n_agents)
            .map(|m| model.agents[model.net_of(m)].initial_hidden(1))
            .collect();
        Self {
            model,
            hidden,
            prev: vec![None; model.n_agents],
        }
    }

    pub fn reset(&mut self) {
        for h in &mut self.hidden {
            h.fill(0.0);
        }
        self.prev.fill(None);
    }

    /// Q-values of UAV `m` for this slot; advances its hidden state.
    pub fn q_values(&mut self, m: usize, obs: &Observation, world: &World) -> Vec<f64> {
        let feats = obs.features(world);
        let x = AgentInput {
            dense: Array2::from_shape_vec((1, feats.len()), feats).expect("row shape"),
            hot: vec![self.model.hot_columns(self.prev[m], m)],
        };
        let net = &self.model.agents[self.model.net_of(m)];
        let (q, h) = net.forward(&x, &self.hidden[m]);
        self.hidden[m] = h;
        q.index_axis(Axis(0), 0).to_vec()
    }

    /// Picks an action for UAV `m` from its own observation and mask.
    pub fn act(
        &mut self,
        m: usize,
        obs: &Observation,
        mask: &ActionMask,
        world: &World,
        eps: f64,
        rng: &mut StreamRng,
    ) -> Result<AgentAction, LearnError> {
        let q = self.q_values(m, obs, world);
        let allowed = self.model.space.allowed(mask, &world.cfg);
        let idx = masked_epsilon_greedy(&q, &allowed, eps, rng).ok_or(LearnError::EmptyMask { uav: m })?;
        self.prev[m] = Some(idx);
        let mut action = self.model.space.decode(idx);
        if self.model.algorithm == Algorithm::Nearest {
            action.schedule =
                crate::baselines::nearest_schedule(obs.position, &world.sn_positions, &mask.schedulable);
        }
        Ok(action)
    }
}

/// Joint policy wrapper around an [`Actor`].
pub struct ActorPolicy<'m> {
    pub actor: Actor<'m>,
    pub eps: f64,
    pub rng: StreamRng,
    pub error: Option<LearnError>,
}

impl JointPolicy for ActorPolicy<'_> {
    fn reset(&mut self) {
        self.actor.reset();
    }
    fn act(&mut self, episode: &Episode<'_>) -> Vec<AgentAction> {
        let world = episode.world();
        (0..world.cfg.num_uavs)
            .map(|m| {
                let obs = episode.observation(m);
                match self.actor.act(m, &obs, &episode.masks()[m], world, self.eps, &mut self.rng) {
                    Ok(a) => a,
                    Err(e) => {
                        self.error = Some(e);
                        AgentAction { speed_idx: 0, heading_idx: 0, schedule: 0 }
                    }
                }
            })
            .collect()
    }
}

/// Greedy rollout of a trained model.
pub fn execute(model: &Model, world: &World, env_rng: StreamRng, mode: MaskMode) -> Result<EpisodeRecord, LearnError> {
    let mut policy = ActorPolicy {
        actor: Actor::new(model),
        eps: 0.0,
        rng: stream(0, "greedy-unused"),
        error: None,
    };
    let rec = crate::decpomdp::run_episode(world, &mut policy, env_rng, mode)?;
    match policy.error {
        Some(e) => Err(e),
        None => Ok(rec),
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    /// Unscaled sum of costs of the episode, penalties included.
    pub cumulative_cost: f64,
    pub epsilon: f64,
    /// Loss of the update after this episode; NaN during warm-up.
    pub loss: f64,
    pub collided: bool,
}

/// Learner state that evolves during training.
pub struct Trainer<'w> {
    pub world: &'w World,
    pub cfg: LearnerConfig,
    pub model: Model,
    pub target: Model,
    pub opt: Optimizers,
    pub replay: ReplayMemory,
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub episode: usize,
    pub explore_rng: StreamRng,
    pub replay_rng: StreamRng,
    pub curve: Vec<CurvePoint>,
    cost_scale: f64,
}

impl<'w> Trainer<'w> {
    pub fn new(algorithm: Algorithm, world: &'w World, cfg: LearnerConfig, seed: u64) -> Self {
        let model = Model::new(algorithm, world, &cfg, seed);
        let opt = Optimizers::new(&model, cfg.lr);
        Self {
            target: model.clone(),
            cost_scale: cfg.cost_scale_for(world),
            replay: ReplayMemory::new(cfg.replay_capacity),
            world,
            model,
            opt,
            seed,
            env_steps: 0,
            updates: 0,
            episode: 0,
            explore_rng: stream(seed, "explore"),
            replay_rng: stream(seed, "replay"),
            curve: Vec::new(),
            cfg,
        }
    }

    /// Plays one ε-greedy episode, stores it, and trains once if warm.
    pub fn run_episode(&mut self) -> Result<&CurvePoint, LearnError> {
        let env_rng = indexed_stream(self.seed, "env-train", self.episode as u64);
        let world = self.world;
        let mut ep = Episode::new(world, env_rng, self.cfg.mask);
        let mut actor = Actor::new(&self.model);
        let mut eps = self.cfg.epsilon(self.env_steps);
        while !ep.is_done() {
            eps = self.cfg.epsilon(self.env_steps);
            let mut actions = Vec::with_capacity(world.cfg.num_uavs);
            for m in 0..world.cfg.num_uavs {
                let obs = ep.observation(m);
                actions.push(actor.act(m, &obs, &ep.masks()[m], world, eps, &mut self.explore_rng)?);
            }
            ep.step(&actions)?;
            self.env_steps += 1;
        }
        let record = ep.finish()?;
        self.replay.push(ReplayEpisode::from_record(
            &record,
            world,
            &self.model.space,
            self.cost_scale,
        ));
        let mut loss = f64::NAN;
        if self.replay.len() >= self.cfg.warmup.max(1) {
            let batch = self.replay.sample(self.cfg.batch_episodes, &mut self.replay_rng);
            loss = train_step(&mut self.model, &self.target, &mut self.opt, &batch, &self.cfg);
            self.updates += 1;
            if !loss.is_finite() {
                return Err(LearnError::NonFiniteLoss {
                    loss,
                    update: self.updates,
                });
            }
            if self.updates.is_multiple_of(self.cfg.target_interval) {
                target_sync(&self.model, &mut self.target);
            }
        }
        self.curve.push(CurvePoint {
            episode: self.episode,
            cumulative_cost: record.cumulative_cost(),
            epsilon: eps,
            loss,
            collided: record.collided(),
        });
        self.episode += 1;
        Ok(self.curve.last().expect("just pushed"))
    }

    pub fn train(&mut self) -> Result<(), LearnError> {
        while self.episode < self.cfg.episodes {
            self.run_episode()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            algorithm: self.model.algorithm,
            config_hash: config_hash.to_string(),
            seed: self.seed,
            episode: self.episode,
            env_steps: self.env_steps,
            updates: self.updates,
            model: self.model.clone(),
            target: self.target.clone(),
            optimizers: self.opt.clone(),
            explore_rng: StreamCursor::capture(&self.explore_rng),
            replay_rng: StreamCursor::capture(&self.replay_rng),
        }
    }
}

/// Self-describing snapshot of a learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub algorithm: Algorithm,
    pub config_hash: String,
    pub seed: u64,
    pub episode: usize,
    pub env_steps: u64,
    pub updates: u64,
    pub model: Model,
    pub target: Model,
    pub optimizers: Optimizers,
    pub explore_rng: StreamCursor,
    pub replay_rng: StreamCursor,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<(), LearnError> {
        let file = std::fs::File::create(path).map_err(|e| LearnError::Checkpoint(e.to_string()))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| LearnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, LearnError> {
        let file = std::fs::File::open(path).map_err(|e| LearnError::Checkpoint(e.to_string()))?;
        let ck: Self = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| LearnError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(LearnError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}
