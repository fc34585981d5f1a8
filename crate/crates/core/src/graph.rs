//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! topological. [`Tape::backward`] can run any number of times against
//! different scalar roots of the same forward pass; each run returns a fresh
//! [`Grads`] without touching stored values. That is what lets one forward
//! pass serve both the generator and the discriminator objectives.

use crate::scalar::Scalar;
use crate::tensor::{
    conv2d_bwd, conv2d_fwd, conv_transpose2d_bwd, conv_transpose2d_fwd, ConvGeom, Tensor,
};
use std::collections::HashMap;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Identity of a trainable parameter: (parameter-set tag, index within set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub set: u64,
    pub index: usize,
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[Tensor<T>], &mut Grads<T>) + Send>;

/// Gradient slots produced by one backward pass, indexed like the tape.
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    fn new(len: usize) -> Self {
        Grads {
            slots: (0..len).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, var: Var, g: Tensor<T>) {
        match &mut self.slots[var.0] {
            Some(existing) => existing.add_inplace(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.slots[var.0].as_ref()
    }
}

/// Append-only computation tape.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    backs: Vec<Option<BackFn<T>>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.values[var.0]
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.values[var.0].shape()
    }

    fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Constant input; gradients still accumulate on it but are discarded by
    /// callers that do not ask for them.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// Leaf bound to a trainable parameter. Binding the same key twice on one
    /// tape returns the same node, so gradient contributions accumulate.
    pub fn param(&mut self, key: ParamKey, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), None);
        self.params.insert(key, v);
        v
    }

    /// Gradient of a parameter after [`Tape::backward`], if it was reached.
    pub fn param_grad<'g>(&self, grads: &'g Grads<T>, key: ParamKey) -> Option<&'g Tensor<T>> {
        self.params.get(&key).and_then(|&v| grads.get(v))
    }

    /// Runs reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads = Grads::new(self.values.len());
        grads.slots[root.0] = Some(Tensor::full(self.values[root.0].shape(), T::one()));
        for i in (0..=root.0).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = grads.slots[i].take().expect("checked above");
                back(&g, &self.values, &mut grads);
            }
        }
        grads
    }

    // ---- elementwise ops ------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        self.push(
            value,
            Some(Box::new(move |g, _vals, grads| {
                grads.accumulate(a, g.clone());
                grads.accumulate(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        self.push(
            value,
            Some(Box::new(move |g, _vals, grads| {
                grads.accumulate(a, g.clone());
                grads.accumulate(b, g.map(|v| -v));
            })),
        )
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(&mut self, x: Var, alpha: T, beta: T) -> Var {
        let value = self.values[x.0].map(|v| alpha * v + beta);
        self.push(
            value,
            Some(Box::new(move |g, _vals, grads| {
                grads.accumulate(x, g.map(|v| alpha * v));
            })),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| v.abs());
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(x, g.zip_map(&vals[x.0], |gv, xv| gv * xv.signum_or_zero()));
            })),
        )
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| v * v);
        let two = T::cast(2.0);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(x, g.zip_map(&vals[x.0], |gv, xv| two * gv * xv));
            })),
        )
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| v.ln());
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(x, g.zip_map(&vals[x.0], |gv, xv| gv / xv));
            })),
        )
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| T::one() / v);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(x, g.zip_map(&vals[x.0], |gv, xv| -gv / (xv * xv)));
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| v.tanh());
        let out_pos = self.values.len();
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(
                    x,
                    g.zip_map(&vals[out_pos], |gv, yv| gv * (T::one() - yv * yv)),
                );
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| T::one() / (T::one() + (-v).exp()));
        let out_pos = self.values.len();
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(
                    x,
                    g.zip_map(&vals[out_pos], |gv, yv| gv * yv * (T::one() - yv)),
                );
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(
                    x,
                    g.zip_map(&vals[x.0], |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.values[x.0].map(|v| if v > T::zero() { v } else { slope * v });
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(
                    x,
                    g.zip_map(&vals[x.0], |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            slope * gv
                        }
                    }),
                );
            })),
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.values[x.0].map(|v| v.max(lo).min(hi));
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                grads.accumulate(
                    x,
                    g.zip_map(&vals[x.0], |gv, xv| {
                        if xv >= lo && xv <= hi {
                            gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            })),
        )
    }

    // ---- reductions and shape ops ---------------------------------------

    /// Mean over every element, producing a rank-0 scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        assert!(n > 0, "mean of empty tensor");
        let inv = T::cast(1.0 / n as f64);
        let value = Tensor::scalar(self.values[x.0].sum() * inv);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let gv = g.item() * inv;
                grads.accumulate(x, Tensor::full(vals[x.0].shape(), gv));
            })),
        )
    }

    /// Mean over spatial dims of `(n, c, h, w)`, producing `(n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "global_avg_pool expects rank 4");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let inv = T::cast(1.0 / hw as f64);
        let xv = &self.values[x.0];
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let mut acc = T::zero();
                for k in 0..hw {
                    acc += xv.data()[base + k];
                }
                out.data_mut()[i * c + ch] = acc * inv;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch] * inv;
                        let base = (i * c + ch) * hw;
                        gx.data_mut()[base..base + hw].fill(gv);
                    }
                }
                grads.accumulate(x, gx);
            })),
        )
    }

    /// Flattens `(n, c, 1, 1)`-style trailing dims into `(n, c)`.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.values[x.0].clone().reshape(shape);
        let old_shape = self.shape(x).to_vec();
        self.push(
            value,
            Some(Box::new(move |g, _vals, grads| {
                grads.accumulate(x, g.clone().reshape(&old_shape));
            })),
        )
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 4, "concat_channels expects rank 4");
        let (n, h, w) = (first[0], first[2], first[3]);
        let channels: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s[0], n, "concat batch mismatch");
                assert_eq!(s[2], h, "concat height mismatch");
                assert_eq!(s[3], w, "concat width mismatch");
                s[1]
            })
            .collect();
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        for i in 0..n {
            let mut offset = 0usize;
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = &self.values[p.0].data()[i * c * hw..(i + 1) * c * hw];
                out.data_mut()[(i * c_total + offset) * hw..(i * c_total + offset + c) * hw]
                    .copy_from_slice(src);
                offset += c;
            }
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let mut offset = 0usize;
                for (&p, &c) in parts.iter().zip(&channels) {
                    let mut gp = Tensor::zeros(&[n, c, h, w]);
                    for i in 0..n {
                        let src = &g.data()
                            [(i * c_total + offset) * hw..(i * c_total + offset + c) * hw];
                        gp.data_mut()[i * c * hw..(i + 1) * c * hw].copy_from_slice(src);
                    }
                    grads.accumulate(p, gp);
                    offset += c;
                }
            })),
        )
    }

    // ---- convolution ops --------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let value = conv2d_fwd(&self.values[x.0], &self.values[w.0], &self.values[b.0], geom);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let (gx, gw, gb) = conv2d_bwd(&vals[x.0], &vals[w.0], g, geom);
                grads.accumulate(x, gx);
                grads.accumulate(w, gw);
                grads.accumulate(b, gb);
            })),
        )
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let value =
            conv_transpose2d_fwd(&self.values[x.0], &self.values[w.0], &self.values[b.0], geom);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let (gx, gw, gb) = conv_transpose2d_bwd(&vals[x.0], &vals[w.0], g, geom);
                grads.accumulate(x, gx);
                grads.accumulate(w, gw);
                grads.accumulate(b, gb);
            })),
        )
    }

    // ---- batch normalization ----------------------------------------------

    /// Training-mode batch norm over `(n, c, h, w)` using biased batch
    /// statistics. Returns the output along with the batch mean/variance so
    /// the caller can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Tensor<T>, Tensor<T>) {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "batch_norm expects rank 4");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let m = n * hw;
        let inv_m = T::cast(1.0 / m as f64);

        let xv = &self.values[x.0];
        let mut mean = Tensor::zeros(&[c]);
        let mut var = Tensor::zeros(&[c]);
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for k in 0..hw {
                    acc += xv.data()[base + k];
                }
            }
            mean.data_mut()[ch] = acc * inv_m;
        }
        for ch in 0..c {
            let mu = mean.data()[ch];
            let mut acc = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for k in 0..hw {
                    let d = xv.data()[base + k] - mu;
                    acc += d * d;
                }
            }
            var.data_mut()[ch] = acc * inv_m;
        }

        let invstd: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&shape);
        let mut out = Tensor::zeros(&shape);
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (mu, istd) = (mean.data()[ch], invstd[ch]);
                let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                for k in 0..hw {
                    let xh = (xv.data()[base + k] - mu) * istd;
                    xhat.data_mut()[base + k] = xh;
                    out.data_mut()[base + k] = ga * xh + be;
                }
            }
        }

        let mean_out = mean.clone();
        let var_out = var.clone();
        let out_var = self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gamma_v = &vals[gamma.0];
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                #[allow(clippy::needless_range_loop)]
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for k in 0..hw {
                            let gy = g.data()[base + k];
                            sum_g += gy;
                            sum_gx += gy * xhat.data()[base + k];
                        }
                    }
                    ggamma.data_mut()[ch] = sum_gx;
                    gbeta.data_mut()[ch] = sum_g;
                    let coeff = gamma_v.data()[ch] * invstd[ch];
                    let mean_g = sum_g * inv_m;
                    let mean_gx = sum_gx * inv_m;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for k in 0..hw {
                            let gy = g.data()[base + k];
                            gx.data_mut()[base + k] =
                                coeff * (gy - mean_g - xhat.data()[base + k] * mean_gx);
                        }
                    }
                }
                grads.accumulate(x, gx);
                grads.accumulate(gamma, ggamma);
                grads.accumulate(beta, gbeta);
            })),
        );
        (out_var, mean_out, var_out)
    }

    /// Inference-mode batch norm: normalizes with the supplied running
    /// statistics, which are treated as constants.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "batch_norm expects rank 4");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let invstd: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mu: Vec<T> = mean.data().to_vec();

        let xv = &self.values[x.0];
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        let mut out = Tensor::zeros(&shape);
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (m0, istd) = (mu[ch], invstd[ch]);
                let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                for k in 0..hw {
                    out.data_mut()[base + k] = ga * (xv.data()[base + k] - m0) * istd + be;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gamma_v = &vals[gamma.0];
                let xval = &vals[x.0];
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                #[allow(clippy::needless_range_loop)]
                for ch in 0..c {
                    let (m0, istd) = (mu[ch], invstd[ch]);
                    let coeff = gamma_v.data()[ch] * istd;
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for k in 0..hw {
                            let gy = g.data()[base + k];
                            sum_g += gy;
                            sum_gx += gy * (xval.data()[base + k] - m0) * istd;
                            gx.data_mut()[base + k] = coeff * gy;
                        }
                    }
                    ggamma.data_mut()[ch] = sum_gx;
                    gbeta.data_mut()[ch] = sum_g;
                }
                grads.accumulate(x, gx);
                grads.accumulate(gamma, ggamma);
                grads.accumulate(beta, gbeta);
            })),
        )
    }
}

/// Extension trait so `abs` backward can use a zero-at-zero sign.
trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-0.9..0.9))
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Checks d(mean(f(x)))/dx against central differences on every element.
    fn gradcheck(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = rand_tensor(shape, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        let gx = grads.get(x).expect("grad missing").clone();

        let h = 1e-5;
        let eval = |t: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(t.clone());
            let y = build(&mut tape, x);
            let loss = tape.mean_all(y);
            tape.value(loss).item()
        };
        for idx in 0..x0.len() {
            let mut up = x0.clone();
            up.data_mut()[idx] += h;
            let mut dn = x0.clone();
            dn.data_mut()[idx] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = gx.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        gradcheck(&[2, 3], 1, |t, x| t.tanh(x));
        gradcheck(&[2, 3], 2, |t, x| t.sigmoid(x));
        gradcheck(&[2, 3], 3, |t, x| t.leaky_relu(x, 0.2));
        gradcheck(&[2, 3], 4, |t, x| t.sqr(x));
        gradcheck(&[2, 3], 5, |t, x| t.abs(x));
        gradcheck(&[2, 3], 6, |t, x| t.affine(x, -2.5, 0.75));
        gradcheck(&[2, 3], 7, |t, x| {
            let s = t.affine(x, 0.25, 2.0); // keep positive for ln
            t.ln(s)
        });
        gradcheck(&[2, 3], 8, |t, x| {
            let s = t.affine(x, 0.25, 2.0);
            t.recip(s)
        });
        gradcheck(&[2, 3], 9, |t, x| t.clamp(x, -0.5, 0.5));
    }

    #[test]
    fn structural_gradients() {
        gradcheck(&[2, 3, 4, 4], 10, |t, x| t.global_avg_pool(x));
        gradcheck(&[2, 2, 4, 4], 11, |t, x| {
            let y = t.sqr(x);
            t.concat_channels(&[x, y])
        });
        gradcheck(&[2, 8], 12, |t, x| {
            let a = t.tanh(x);
            let b = t.sigmoid(x);
            t.sub(a, b)
        });
    }

    #[test]
    fn conv_op_gradients() {
        let geom = ConvGeom {
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let w0 = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let b0 = rand_tensor(&[3], &mut rng);
        gradcheck(&[2, 2, 6, 6], 21, move |t, x| {
            let w = t.leaf(w0.clone());
            let b = t.leaf(b0.clone());
            t.conv2d(x, w, b, geom)
        });
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let w1 = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let b1 = rand_tensor(&[3], &mut rng);
        gradcheck(&[2, 2, 4, 4], 23, move |t, x| {
            let w = t.leaf(w1.clone());
            let b = t.leaf(b1.clone());
            t.conv_transpose2d(x, w, b, geom)
        });
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let gamma0 = rand_tensor(&[3], &mut rng).map(|v| v + 1.5);
        let beta0 = rand_tensor(&[3], &mut rng);
        let g1 = gamma0.clone();
        let b1 = beta0.clone();
        gradcheck(&[4, 3, 2, 2], 31, move |t, x| {
            let gamma = t.leaf(g1.clone());
            let beta = t.leaf(b1.clone());
            let (y, _, _) = t.batch_norm_train(x, gamma, beta, 1e-5);
            // mean(BN(x)) is constant in x; square to get a usable loss
            t.sqr(y)
        });
        let mean = rand_tensor(&[3], &mut ChaCha12Rng::seed_from_u64(32));
        let var = rand_tensor(&[3], &mut ChaCha12Rng::seed_from_u64(33)).map(|v| v.abs() + 0.5);
        gradcheck(&[4, 3, 2, 2], 34, move |t, x| {
            let gamma = t.leaf(gamma0.clone());
            let beta = t.leaf(beta0.clone());
            t.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5)
        });
    }

    #[test]
    fn batch_norm_parameter_gradients() {
        // Gradients w.r.t. gamma/beta, checked through param leaves.
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let x0 = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let gamma0 = rand_tensor(&[2], &mut rng).map(|v| v + 1.2);
        let beta0 = rand_tensor(&[2], &mut rng);
        let key_g = ParamKey { set: 1, index: 0 };
        let key_b = ParamKey { set: 1, index: 1 };

        let eval = |gamma: &Tensor<f64>, beta: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let g = tape.param(key_g, gamma);
            let b = tape.param(key_b, beta);
            let (y, _, _) = tape.batch_norm_train(x, g, b, 1e-5);
            let sq = tape.sqr(y);
            let loss = tape.mean_all(sq);
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.param(key_g, &gamma0);
        let b = tape.param(key_b, &beta0);
        let (y, _, _) = tape.batch_norm_train(x, g, b, 1e-5);
        let sq = tape.sqr(y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let gg = tape.param_grad(&grads, key_g).unwrap().clone();
        let gb = tape.param_grad(&grads, key_b).unwrap().clone();

        let h = 1e-6;
        for idx in 0..2 {
            let mut up = gamma0.clone();
            up.data_mut()[idx] += h;
            let mut dn = gamma0.clone();
            dn.data_mut()[idx] -= h;
            let fd = (eval(&up, &beta0) - eval(&dn, &beta0)) / (2.0 * h);
            assert!((fd - gg.data()[idx]).abs() < 1e-6);

            let mut up = beta0.clone();
            up.data_mut()[idx] += h;
            let mut dn = beta0.clone();
            dn.data_mut()[idx] -= h;
            let fd = (eval(&gamma0, &up) - eval(&gamma0, &dn)) / (2.0 * h);
            assert!((fd - gb.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn two_backwards_on_one_tape_are_independent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![0.3f64, -0.4]));
        let a = tape.sqr(x);
        let b = tape.abs(x);
        let la = tape.mean_all(a);
        let lb = tape.mean_all(b);
        let ga = tape.backward(la);
        let gb = tape.backward(lb);
        assert_eq!(ga.get(x).unwrap().data(), &[0.3, -0.4]); // d mean(x^2) = 2x/2
        assert_eq!(gb.get(x).unwrap().data(), &[0.5, -0.5]); // d mean(|x|) = sign/2
    }
}
