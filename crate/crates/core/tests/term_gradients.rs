//! Per-term gradient checks: each individual loss term, evaluated through a
//! two-layer toy generator and a small discriminator, must match central
//! finite differences in double precision.

use mirage_core::graph::{Tape, Var};
use mirage_core::losses::{
    adversarial_loss, contextual_adversarial_loss, contextual_loss, latent_loss, BinaryTarget,
};
use mirage_core::models::{BnStrategy, Discriminator};
use mirage_core::nn::{BatchNorm2d, BnBranch, BnMode, Conv2d, ConvTranspose2d, ParamSet};
use mirage_core::seeding::derive_rng;
use mirage_core::tensor::{ConvGeom, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

const K4S2: ConvGeom = ConvGeom {
    kernel: 4,
    stride: 2,
    pad: 1,
};

struct ToyGen {
    params: ParamSet<f64>,
    conv: Conv2d,
    bn: BatchNorm2d<f64>,
    convt: ConvTranspose2d,
}

impl ToyGen {
    fn build(rng: &mut ChaCha12Rng) -> Self {
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, 1, 3, K4S2, rng);
        let bn = BatchNorm2d::new(&mut params, 3, false, rng);
        let convt = ConvTranspose2d::new(&mut params, 3, 1, K4S2, rng);
        ToyGen {
            params,
            conv,
            bn,
            convt,
        }
    }

    fn forward(&mut self, tape: &mut Tape<f64>, x: Var) -> Var {
        let h = self.conv.forward(&self.params, tape, x);
        let h = self
            .bn
            .forward(&self.params, tape, h, BnBranch::Main, BnMode::Train);
        let h = tape.leaky_relu(h, 0.2);
        let h = self.convt.forward(&self.params, tape, h);
        tape.tanh(h)
    }

    fn add_flat(&mut self, direction: &[f64], scale: f64) {
        let mut offset = 0;
        for i in 0..self.params.len() {
            for v in self.params.at_mut(i).data_mut() {
                *v += scale * direction[offset];
                offset += 1;
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Term {
    Adversarial,
    Contextual,
    ContextualAdversarial,
    Latent,
}

fn term_loss(
    gen: &mut ToyGen,
    disc: &mut Discriminator<f64>,
    x0: &Tensor<f64>,
    term: Term,
) -> (Tape<f64>, Var) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let x_hat = gen.forward(&mut tape, x);
    let loss = match term {
        Term::Adversarial => {
            let d_fake = disc
                .forward_train(&mut tape, x_hat, false, BnStrategy::SHARED)
                .unwrap();
            adversarial_loss(&mut tape, d_fake.y, BinaryTarget::Real).unwrap()
        }
        Term::Contextual => contextual_loss(&mut tape, x, x_hat).unwrap(),
        Term::ContextualAdversarial => {
            let x_hat_prime = gen.forward(&mut tape, x_hat);
            contextual_adversarial_loss(&mut tape, x_hat, x_hat_prime).unwrap()
        }
        Term::Latent => {
            let d_real = disc
                .forward_train(&mut tape, x, false, BnStrategy::SHARED)
                .unwrap();
            let d_fake = disc
                .forward_train(&mut tape, x_hat, false, BnStrategy::SHARED)
                .unwrap();
            latent_loss(&mut tape, d_real.z, d_fake.z).unwrap()
        }
    };
    (tape, loss)
}

#[test]
fn every_term_gradient_matches_finite_differences() {
    let mut rng = derive_rng(2001, "term-gradcheck");
    let mut gen = ToyGen::build(&mut rng);
    let mut disc = Discriminator::<f64>::build(1, 4, &mut rng).unwrap();
    let x0 = Tensor::from_vec(
        &[3, 1, 8, 8],
        (0..3 * 64).map(|_| rng.random_range(-0.6..0.6)).collect(),
    );
    let h = 1e-5;

    for term in [
        Term::Adversarial,
        Term::Contextual,
        Term::ContextualAdversarial,
        Term::Latent,
    ] {
        let gen_buffers: Vec<Tensor<f64>> = gen.bn.buffers().into_iter().cloned().collect();
        let disc_buffers: Vec<Tensor<f64>> = disc.buffers().into_iter().cloned().collect();
        let restore = |gen: &mut ToyGen, disc: &mut Discriminator<f64>| {
            for (dst, src) in gen.bn.buffers_mut().into_iter().zip(&gen_buffers) {
                *dst = src.clone();
            }
            for (dst, src) in disc.buffers_mut().into_iter().zip(&disc_buffers) {
                *dst = src.clone();
            }
        };

        let (tape, loss) = term_loss(&mut gen, &mut disc, &x0, term);
        let grads = tape.backward(loss);
        let flat: Vec<f64> = (0..gen.params.len())
            .flat_map(|i| match tape.param_grad(&grads, gen.params.key_at(i)) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; gen.params.at(i).len()],
            })
            .collect();
        restore(&mut gen, &mut disc);

        for direction in 0..6 {
            let mut u: Vec<f64> = (0..flat.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = flat.iter().zip(&u).map(|(g, d)| g * d).sum();

            let central = |gen: &mut ToyGen, disc: &mut Discriminator<f64>, step: f64| {
                gen.add_flat(&u, step);
                let (tape, loss) = term_loss(gen, disc, &x0, term);
                let up = tape.value(loss).item();
                restore(gen, disc);
                gen.add_flat(&u, -2.0 * step);
                let (tape, loss) = term_loss(gen, disc, &x0, term);
                let dn = tape.value(loss).item();
                restore(gen, disc);
                gen.add_flat(&u, step);
                (up - dn) / (2.0 * step)
            };

            let fd = central(&mut gen, &mut disc, h);
            let denom = analytic.abs().max(fd.abs()).max(1e-10);
            let mut rel = (analytic - fd).abs() / denom;
            if rel >= 1e-4 {
                // nonsmooth crossing inside the interval; verify finer
                let fd_fine = central(&mut gen, &mut disc, h / 10.0);
                rel = (analytic - fd_fine).abs() / analytic.abs().max(fd_fine.abs()).max(1e-10);
            }
            assert!(
                rel < 1e-4,
                "{term:?} direction {direction}: analytic {analytic} vs fd {fd} (rel {rel})"
            );
        }
    }
}
