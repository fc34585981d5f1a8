//! Layers, parameter storage and the Adam optimizer.
//!
//! Parameters live in a [`ParamSet`] owned by each network; layers hold
//! [`ParamId`] handles plus non-trainable state (batch-norm running
//! statistics). Binding a parameter onto a [`Tape`] yields a leaf whose
//! gradient is read back by key after `backward`.

use crate::graph::{Grads, ParamKey, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Tensor};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_SET_TAG: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter within its owning [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Arena of trainable tensors with a process-unique tag, so parameters from
/// different networks never collide on one tape.
pub struct ParamSet<T> {
    tag: u64,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tag: NEXT_SET_TAG.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
        }
    }

    pub fn alloc(&mut self, tensor: Tensor<T>) -> ParamId {
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            set: self.tag,
            index: id.0,
        }
    }

    pub fn key_at(&self, index: usize) -> ParamKey {
        ParamKey {
            set: self.tag,
            index,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn at(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(self.key(id), &self.tensors[id.0])
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.tensors.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.tensors.len(), "snapshot size mismatch");
        for (dst, src) in self.tensors.iter_mut().zip(snapshot) {
            *dst = src.clone();
        }
    }
}

/// Standard-normal draw via Box-Muller; consumes exactly two uniforms per
/// call so rng streams stay reproducible.
pub fn sample_normal<T: Scalar, R: Rng>(rng: &mut R, mean: f64, std: f64) -> T {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    T::cast(mean + std * z)
}

fn normal_tensor<T: Scalar, R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| sample_normal(rng, mean, std))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Strided convolution layer (weights `(c_out, c_in, k, k)`).
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let w = params.alloc(normal_tensor(
            &[c_out, c_in, geom.kernel, geom.kernel],
            0.0,
            0.02,
            rng,
        ));
        let b = params.alloc(Tensor::zeros(&[c_out]));
        Conv2d { w, b, geom }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Var {
        let w = params.bind(tape, self.w);
        let b = params.bind(tape, self.b);
        tape.conv2d(x, w, b, self.geom)
    }
}

/// Strided transposed-convolution layer (weights `(c_in, c_out, k, k)`).
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let w = params.alloc(normal_tensor(
            &[c_in, c_out, geom.kernel, geom.kernel],
            0.0,
            0.02,
            rng,
        ));
        let b = params.alloc(Tensor::zeros(&[c_out]));
        ConvTranspose2d { w, b, geom }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Var {
        let w = params.bind(tape, self.w);
        let b = params.bind(tape, self.b);
        tape.conv_transpose2d(x, w, b, self.geom)
    }
}

/// Which statistics/affine branch a batch-norm forward uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnBranch {
    Main,
    /// AdvProp-style auxiliary branch reserved for generated inputs.
    Aux,
}

/// How a batch-norm forward treats statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates of the selected branch updated.
    Train,
    /// Running statistics used, nothing updated (inference, or a frozen pass
    /// on true-anomaly data during training).
    Eval,
}

struct BnBranchState<T> {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
}

impl<T: Scalar> BnBranchState<T> {
    fn new<R: Rng>(params: &mut ParamSet<T>, channels: usize, rng: &mut R) -> Self {
        BnBranchState {
            gamma: params.alloc(normal_tensor(&[channels], 1.0, 0.02, rng)),
            beta: params.alloc(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Batch normalization with an optional auxiliary branch that duplicates both
/// the affine parameters and the running statistics.
pub struct BatchNorm2d<T> {
    main: BnBranchState<T>,
    aux: Option<BnBranchState<T>>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new<R: Rng>(
        params: &mut ParamSet<T>,
        channels: usize,
        with_aux: bool,
        rng: &mut R,
    ) -> Self {
        let main = BnBranchState::new(params, channels, rng);
        let aux = with_aux.then(|| BnBranchState::new(params, channels, rng));
        BatchNorm2d {
            main,
            aux,
            momentum: T::cast(0.1),
            eps: T::cast(1e-5),
        }
    }

    fn branch(&self, branch: BnBranch) -> &BnBranchState<T> {
        match branch {
            BnBranch::Main => &self.main,
            BnBranch::Aux => self
                .aux
                .as_ref()
                .expect("auxiliary batch-norm branch not allocated"),
        }
    }

    /// Training-capable forward; `BnMode::Train` updates the selected
    /// branch's running statistics and leaves the other branch untouched.
    pub fn forward(
        &mut self,
        params: &ParamSet<T>,
        tape: &mut Tape<T>,
        x: Var,
        branch: BnBranch,
        mode: BnMode,
    ) -> Var {
        match mode {
            BnMode::Eval => self.forward_eval(params, tape, x, branch),
            BnMode::Train => {
                let (gamma_id, beta_id) = {
                    let b = self.branch(branch);
                    (b.gamma, b.beta)
                };
                let gamma = params.bind(tape, gamma_id);
                let beta = params.bind(tape, beta_id);
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps);
                let m = self.momentum;
                let b = match branch {
                    BnBranch::Main => &mut self.main,
                    BnBranch::Aux => self.aux.as_mut().expect("aux branch not allocated"),
                };
                for (r, &v) in b.running_mean.data_mut().iter_mut().zip(mean.data()) {
                    *r = (T::one() - m) * *r + m * v;
                }
                for (r, &v) in b.running_var.data_mut().iter_mut().zip(var.data()) {
                    *r = (T::one() - m) * *r + m * v;
                }
                y
            }
        }
    }

    /// Read-only forward with the selected branch's running statistics.
    pub fn forward_eval(
        &self,
        params: &ParamSet<T>,
        tape: &mut Tape<T>,
        x: Var,
        branch: BnBranch,
    ) -> Var {
        let b = self.branch(branch);
        let gamma = params.bind(tape, b.gamma);
        let beta = params.bind(tape, b.beta);
        tape.batch_norm_eval(x, gamma, beta, &b.running_mean, &b.running_var, self.eps)
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// Running-statistic buffers in a fixed order (main mean, main var, then
    /// aux mean, aux var when present). Used for checkpoints and snapshots.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.main.running_mean, &self.main.running_var];
        if let Some(aux) = &self.aux {
            out.push(&aux.running_mean);
            out.push(&aux.running_var);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.main.running_mean, &mut self.main.running_var];
        if let Some(aux) = &mut self.aux {
            out.push(&mut aux.running_mean);
            out.push(&mut aux.running_var);
        }
        out
    }
}

/// Adam with per-parameter moment buffers and step counters.
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T, betas: (T, T), eps: T) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.at(i).shape()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.at(i).shape()))
            .collect();
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m,
            v,
            t: vec![0; params.len()],
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, tape: &Tape<T>, grads: &Grads<T>) {
        for i in 0..params.len() {
            let Some(g) = tape.param_grad(grads, params.key_at(i)) else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let bias1 = T::one() - b1.powi(t);
            let bias2 = T::one() - b2.powi(t);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.at_mut(i);
            for ((pv, mv), (vv, &gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Optimizer state in a stable order for checkpointing.
    pub fn state(&self) -> (&[Tensor<T>], &[Tensor<T>], &[u64]) {
        (&self.m, &self.v, &self.t)
    }

    pub fn restore_state(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: Vec<u64>) {
        assert_eq!(m.len(), self.m.len(), "adam state size mismatch");
        assert_eq!(v.len(), self.v.len(), "adam state size mismatch");
        assert_eq!(t.len(), self.t.len(), "adam state size mismatch");
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        // Single parameter, loss = mean((p - target)^2)
        let mut params: ParamSet<f64> = ParamSet::new();
        let id = params.alloc(Tensor::from_vec(&[2], vec![5.0, -3.0]));
        let target = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let mut adam = Adam::new(&params, 0.1, (0.9, 0.999), 1e-8);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, id);
            let t = tape.leaf(target.clone());
            let d = tape.sub(p, t);
            let sq = tape.sqr(d);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut params, &tape, &grads);
        }
        let p = params.get(id);
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
        assert!((p.data()[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn bn_aux_branch_is_isolated() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut bn = BatchNorm2d::new(&mut params, 3, true, &mut rng);
        let x = Tensor::from_vec(
            &[2, 3, 2, 2],
            (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect(),
        );
        let main_before: Vec<f64> = bn.main.running_mean.data().to_vec();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        bn.forward(&params, &mut tape, xv, BnBranch::Aux, BnMode::Train);
        assert_eq!(bn.main.running_mean.data(), main_before.as_slice());
        assert_ne!(
            bn.aux.as_ref().unwrap().running_mean.data(),
            vec![0.0; 3].as_slice()
        );
    }

    #[test]
    fn bn_eval_does_not_update() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut bn = BatchNorm2d::new(&mut params, 2, false, &mut rng);
        let x = Tensor::full(&[1, 2, 2, 2], 0.7);
        let before = bn.main.running_mean.clone();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        bn.forward(&params, &mut tape, xv, BnBranch::Main, BnMode::Eval);
        assert_eq!(bn.main.running_mean, before);
    }

    #[test]
    fn sample_normal_is_deterministic_per_seed() {
        let mut a = ChaCha12Rng::seed_from_u64(1);
        let mut b = ChaCha12Rng::seed_from_u64(1);
        let xa: f64 = sample_normal(&mut a, 0.0, 1.0);
        let xb: f64 = sample_normal(&mut b, 0.0, 1.0);
        assert_eq!(xa, xb);
    }
}
