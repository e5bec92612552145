//! Minimal dense layers with hand-written backward passes, enough for the
//! recurrent agent network and the hypernetwork mixer.
//!
//! Parameters of a model live in one [`ParamStore`] so that optimizers,
//! target copies, checkpoints and finite-difference checks treat every
//! model the same way. Biases are stored as `1 × n` matrices.

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.fill(value);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Concatenates two stores, prefixing names.
    pub fn merged(parts: &[(&str, &ParamStore)]) -> Self {
        let mut out = Self::new();
        for (prefix, store) in parts {
            for (n, t) in store.names.iter().zip(&store.tensors) {
                out.add(format!("{prefix}.{n}"), t.clone());
            }
        }
        out
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform `[-bound, bound]` initialisation.
pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut StreamRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

fn add_bias(y: &mut Array2<f64>, b: &Array2<f64>) {
    *y += &b.row(0);
}

fn accumulate_bias(grad: &mut Array2<f64>, dy: &ArrayView2<f64>) {
    let sum = dy.sum_axis(Axis(0));
    let mut row = grad.row_mut(0);
    row += &sum;
}

/// `y = x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// PyTorch-style init: weights and bias uniform in `±1/√input`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(input, output, bound, rng));
        let b = store.add(format!("{name}.bias"), uniform(1, output, bound, rng));
        Self { w, b, input, output }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.tensors[self.w]);
        add_bias(&mut y, &p.tensors[self.b]);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &ParamStore,
        grads: &mut ParamStore,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        self.backward_params(grads, x, dy);
        dy.dot(&p.tensors[self.w].t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&self, grads: &mut ParamStore, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grads.tensors[self.w]);
        accumulate_bias(&mut grads.tensors[self.b], dy);
    }
}

pub fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` where the post-activation value was not positive.
pub fn relu_backward(dy: &mut Array2<f64>, activated: &Array2<f64>) {
    Zip::from(dy).and(activated).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Gated recurrent unit with reset gate `r`, update gate `z` and tanh
/// candidate `n`, gate blocks ordered `[r | z | n]`:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gru {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Values saved by [`Gru::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub h_prev: Array2<f64>,
    pub r: Array2<f64>,
    pub z: Array2<f64>,
    pub n: Array2<f64>,
    pub gh_n: Array2<f64>,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.weight_ih"), uniform(input, 3 * hidden, bound, rng));
        let w_hh = store.add(format!("{name}.weight_hh"), uniform(hidden, 3 * hidden, bound, rng));
        let b_ih = store.add(format!("{name}.bias_ih"), uniform(1, 3 * hidden, bound, rng));
        let b_hh = store.add(format!("{name}.bias_hh"), uniform(1, 3 * hidden, bound, rng));
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            input,
            hidden,
        }
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: &ArrayView2<f64>,
        h: &Array2<f64>,
    ) -> (Array2<f64>, GruCache) {
        let hd = self.hidden;
        let mut gi = x.dot(&p.tensors[self.w_ih]);
        add_bias(&mut gi, &p.tensors[self.b_ih]);
        let mut gh = h.dot(&p.tensors[self.w_hh]);
        add_bias(&mut gh, &p.tensors[self.b_hh]);
        let rows = x.nrows();
        let mut r = Array2::zeros((rows, hd));
        let mut z = Array2::zeros((rows, hd));
        let mut n = Array2::zeros((rows, hd));
        let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
        let mut h_next = Array2::zeros((rows, hd));
        {
            let gi = gi.as_slice().expect("contiguous");
            let gh = gh.as_slice().expect("contiguous");
            let h = h.as_standard_layout();
            let h = h.as_slice().expect("contiguous");
            let (rs, zs, ns) = (
                r.as_slice_mut().expect("contiguous"),
                z.as_slice_mut().expect("contiguous"),
                n.as_slice_mut().expect("contiguous"),
            );
            let out = h_next.as_slice_mut().expect("contiguous");
            for i in 0..rows {
                let gi = &gi[i * 3 * hd..(i + 1) * 3 * hd];
                let gh = &gh[i * 3 * hd..(i + 1) * 3 * hd];
                for j in 0..hd {
                    let k = i * hd + j;
                    let rv = sigmoid(gi[j] + gh[j]);
                    let zv = sigmoid(gi[hd + j] + gh[hd + j]);
                    let nv = (gi[2 * hd + j] + rv * gh[2 * hd + j]).tanh();
                    rs[k] = rv;
                    zs[k] = zv;
                    ns[k] = nv;
                    out[k] = (1.0 - zv) * nv + zv * h[k];
                }
            }
        }
        let cache = GruCache {
            h_prev: h.as_standard_layout().into_owned(),
            r,
            z,
            n,
            gh_n,
        };
        (h_next, cache)
    }

    /// Given `dL/dh'`, accumulates parameter gradients and returns
    /// `(dL/dx, dL/dh)`.
    pub fn backward(
        &self,
        p: &ParamStore,
        grads: &mut ParamStore,
        x: &ArrayView2<f64>,
        cache: &GruCache,
        dh_next: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let hd = self.hidden;
        let rows = dh_next.nrows();
        let mut dgi = Array2::zeros((rows, 3 * hd));
        let mut dgh = Array2::zeros((rows, 3 * hd));
        let mut dh = Array2::zeros((rows, hd));
        {
            let d_all = dh_next.as_standard_layout();
            let d_all = d_all.as_slice().expect("contiguous");
            let (rs, zs, ns) = (
                cache.r.as_slice().expect("contiguous"),
                cache.z.as_slice().expect("contiguous"),
                cache.n.as_slice().expect("contiguous"),
            );
            let hps = cache.h_prev.as_slice().expect("contiguous");
            let ghn = cache.gh_n.as_slice().expect("contiguous");
            let dgi_s = dgi.as_slice_mut().expect("contiguous");
            let dgh_s = dgh.as_slice_mut().expect("contiguous");
            let dh_s = dh.as_slice_mut().expect("contiguous");
            for i in 0..rows {
                let base = i * 3 * hd;
                for j in 0..hd {
                    let k = i * hd + j;
                    let d = d_all[k];
                    let (rv, zv, nv) = (rs[k], zs[k], ns[k]);
                    let dn_pre = d * (1.0 - zv) * (1.0 - nv * nv);
                    let dz_pre = d * (hps[k] - nv) * zv * (1.0 - zv);
                    let dr_pre = dn_pre * ghn[k] * rv * (1.0 - rv);
                    dgi_s[base + j] = dr_pre;
                    dgi_s[base + hd + j] = dz_pre;
                    dgi_s[base + 2 * hd + j] = dn_pre;
                    dgh_s[base + j] = dr_pre;
                    dgh_s[base + hd + j] = dz_pre;
                    dgh_s[base + 2 * hd + j] = dn_pre * rv;
                    dh_s[k] = d * zv;
                }
            }
        }
        general_mat_mul(1.0, &x.t(), &dgi, 1.0, &mut grads.tensors[self.w_ih]);
        accumulate_bias(&mut grads.tensors[self.b_ih], &dgi.view());
        general_mat_mul(1.0, &cache.h_prev.t(), &dgh, 1.0, &mut grads.tensors[self.w_hh]);
        accumulate_bias(&mut grads.tensors[self.b_hh], &dgh.view());
        let dx = dgi.dot(&p.tensors[self.w_ih].t());
        general_mat_mul(1.0, &dgh, &p.tensors[self.w_hh].t(), 1.0, &mut dh);
        (dx, dh)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        for k in 0..params.tensors.len() {
            Zip::from(&mut params.tensors[k])
                .and(&grads.tensors[k])
                .and(&mut self.m.tensors[k])
                .and(&mut self.v.tensors[k])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn loss_of(y: &Array2<f64>, target: &Array2<f64>) -> f64 {
        (y - target).mapv(|v| v * v).sum() * 0.5
    }

    #[test]
    fn linear_gradient_matches_differences() {
        let mut rng = stream(1, "nn-test");
        let mut p = ParamStore::new();
        let lin = Linear::new(&mut p, "fc", 4, 3, &mut rng);
        let x = uniform(5, 4, 1.0, &mut rng);
        let target = uniform(5, 3, 1.0, &mut rng);
        let y = lin.forward(&p, &x.view());
        let mut g = p.zeros_like();
        lin.backward(&p, &mut g, &x.view(), &(&y - &target).view());
        for k in 0..p.tensors.len() {
            for idx in 0..p.tensors[k].len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.tensors[k].as_slice_mut().unwrap()[idx] += 1e-6;
                minus.tensors[k].as_slice_mut().unwrap()[idx] -= 1e-6;
                let fd = (loss_of(&lin.forward(&plus, &x.view()), &target)
                    - loss_of(&lin.forward(&minus, &x.view()), &target))
                    / 2e-6;
                let an = g.tensors[k].as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()));
            }
        }
    }

    #[test]
    fn gru_gradient_matches_differences() {
        let mut rng = stream(2, "nn-test");
        let mut p = ParamStore::new();
        let gru = Gru::new(&mut p, "gru", 3, 4, &mut rng);
        let x = uniform(2, 3, 1.0, &mut rng);
        let h = uniform(2, 4, 0.5, &mut rng);
        let target = uniform(2, 4, 1.0, &mut rng);
        let (y, cache) = gru.forward(&p, &x.view(), &h);
        let mut g = p.zeros_like();
        let (dx, dh) = gru.backward(&p, &mut g, &x.view(), &cache, &(&y - &target));
        let f = |p: &ParamStore, x: &Array2<f64>, h: &Array2<f64>| loss_of(&gru.forward(p, &x.view(), h).0, &target);
        let eps = 1e-6;
        for k in 0..p.tensors.len() {
            for idx in 0..p.tensors[k].len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.tensors[k].as_slice_mut().unwrap()[idx] += eps;
                minus.tensors[k].as_slice_mut().unwrap()[idx] -= eps;
                let fd = (f(&plus, &x, &h) - f(&minus, &x, &h)) / (2.0 * eps);
                let an = g.tensors[k].as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{} {fd} {an}", p.names[k]);
            }
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (f(&p, &xp, &h) - f(&p, &xm, &h)) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        for idx in 0..h.len() {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp.as_slice_mut().unwrap()[idx] += eps;
            hm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (f(&p, &x, &hp) - f(&p, &x, &hm)) / (2.0 * eps);
            assert!((fd - dh.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = ParamStore::new();
        p.add("w", Array2::from_elem((1, 2), 1.0));
        let mut g = p.zeros_like();
        g.tensors[0][[0, 0]] = 2.0;
        g.tensors[0][[0, 1]] = -3.0;
        let mut opt = Adam::new(&p, 0.1);
        opt.update(&mut p, &g);
        assert!((p.tensors[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.tensors[0][[0, 1]] - 1.1).abs() < 1e-6);
    }
}
