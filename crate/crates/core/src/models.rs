//! Generator backbones, the discriminator with its latent tap, and the
//! batch-normalization strategies used to keep pseudo-anomaly and
//! true-anomaly statistics out of the learned normal-data statistics.
//!
//! All three generators are stride-2 encoder-decoders with kernel 4 and
//! padding 1, so spatial size halves per encoder stage and the output always
//! matches the input shape. The naive backbone bottlenecks through a latent
//! feature map; `skip` adds plain encoder-to-decoder concatenations; and
//! `dense_skip` fills the grid of intermediate nodes with nested dense skip
//! pathways.

use crate::graph::{Tape, Var};
use crate::nn::{Adam, BatchNorm2d, BnBranch, BnMode, Conv2d, ConvTranspose2d, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

const K4S2: ConvGeom = ConvGeom {
    kernel: 4,
    stride: 2,
    pad: 1,
};
const K3S1: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 1,
    pad: 1,
};
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model build error: {0}")]
    Build(String),
    #[error("forward error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Generator architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Naive,
    Skip,
    DenseSkip,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Backbone::Naive => "naive",
            Backbone::Skip => "skip",
            Backbone::DenseSkip => "dense_skip",
        };
        f.write_str(s)
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Backbone::Naive),
            "skip" => Ok(Backbone::Skip),
            "dense_skip" => Ok(Backbone::DenseSkip),
            other => Err(format!(
                "unknown backbone {other:?} (expected naive, skip or dense_skip)"
            )),
        }
    }
}

/// Generator construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub backbone: Backbone,
    pub in_channels: usize,
    /// Channel count of the naive bottleneck feature map.
    pub latent_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 stages; inputs must be divisible by `2^depth`.
    pub depth: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            backbone: Backbone::Naive,
            in_channels: 1,
            latent_channels: 100,
            base_width: 64,
            depth: 4,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_channels == 0 {
            return Err(ModelError::Build("latent_channels must be >= 1".into()));
        }
        if self.base_width == 0 {
            return Err(ModelError::Build("base_width must be >= 1".into()));
        }
        if self.depth < 2 {
            return Err(ModelError::Build("depth must be >= 2".into()));
        }
        if self.in_channels == 0 {
            return Err(ModelError::Build("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Ensures a spatial size is compatible with the stride-2 stages.
    pub fn check_size(&self, size: usize) -> Result<(), ModelError> {
        let div = 1usize << self.depth;
        if size == 0 || !size.is_multiple_of(div) {
            return Err(ModelError::Build(format!(
                "input size {size} is not divisible by 2^{} = {div}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Encoder channel schedule `base_width * 2^i`.
    fn channels(&self) -> Vec<usize> {
        (0..self.depth - 1).map(|i| self.base_width << i).collect()
    }
}

/// Batch-normalization strategy switches.
///
/// `auxiliary_for_pseudo` routes generator passes over generated inputs
/// through a duplicated batch-norm branch so main statistics only ever see
/// real data. `freeze_for_true_anomaly` runs the discriminator's batch norms
/// in inference mode on true-anomaly inputs so anomaly statistics never
/// contaminate the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BnStrategy {
    pub auxiliary_for_pseudo: bool,
    pub freeze_for_true_anomaly: bool,
}

impl BnStrategy {
    pub const SHARED: BnStrategy = BnStrategy {
        auxiliary_for_pseudo: false,
        freeze_for_true_anomaly: false,
    };
    pub const ADVPROP: BnStrategy = BnStrategy {
        auxiliary_for_pseudo: true,
        freeze_for_true_anomaly: false,
    };
    pub const FREEZE: BnStrategy = BnStrategy {
        auxiliary_for_pseudo: false,
        freeze_for_true_anomaly: true,
    };
    pub const ADVPROP_FREEZE: BnStrategy = BnStrategy {
        auxiliary_for_pseudo: true,
        freeze_for_true_anomaly: true,
    };
}

impl fmt::Display for BnStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match (self.auxiliary_for_pseudo, self.freeze_for_true_anomaly) {
            (false, false) => "shared",
            (true, false) => "advprop",
            (false, true) => "freeze",
            (true, true) => "advprop+freeze",
        };
        f.write_str(s)
    }
}

impl FromStr for BnStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared" => Ok(BnStrategy::SHARED),
            "advprop" => Ok(BnStrategy::ADVPROP),
            "freeze" => Ok(BnStrategy::FREEZE),
            "advprop+freeze" => Ok(BnStrategy::ADVPROP_FREEZE),
            other => Err(format!(
                "unknown bn strategy {other:?} (expected shared, advprop, freeze or advprop+freeze)"
            )),
        }
    }
}

/// Whether a generator forward sees real data or its own reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Real,
    Pseudo,
}

/// Batch-norm dispatch resolved per forward call.
#[derive(Clone, Copy)]
enum BnCtl {
    Train(BnBranch),
    Eval,
}

impl BnCtl {
    fn apply<T: Scalar>(
        self,
        bn: &mut BatchNorm2d<T>,
        params: &ParamSet<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Var {
        match self {
            BnCtl::Train(branch) => bn.forward(params, tape, x, branch, BnMode::Train),
            BnCtl::Eval => bn.forward(params, tape, x, BnBranch::Main, BnMode::Eval),
        }
    }
}

/// Conv + optional BN + LeakyReLU(0.2).
struct EncBlock<T> {
    conv: Conv2d,
    bn: Option<BatchNorm2d<T>>,
}

impl<T: Scalar> EncBlock<T> {
    fn new<R: Rng>(
        params: &mut ParamSet<T>,
        c_in: usize,
        c_out: usize,
        with_bn: bool,
        with_aux: bool,
        rng: &mut R,
    ) -> Self {
        EncBlock {
            conv: Conv2d::new(params, c_in, c_out, K4S2, rng),
            bn: with_bn.then(|| BatchNorm2d::new(params, c_out, with_aux, rng)),
        }
    }

    fn forward(&mut self, params: &ParamSet<T>, tape: &mut Tape<T>, x: Var, ctl: BnCtl) -> Var {
        let mut h = self.conv.forward(params, tape, x);
        if let Some(bn) = &mut self.bn {
            h = ctl.apply(bn, params, tape, h);
        }
        tape.leaky_relu(h, T::cast(LEAKY_SLOPE))
    }
}

/// ConvTranspose + BN + ReLU.
struct UpBlock<T> {
    up: ConvTranspose2d,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> UpBlock<T> {
    fn new<R: Rng>(
        params: &mut ParamSet<T>,
        c_in: usize,
        c_out: usize,
        with_aux: bool,
        rng: &mut R,
    ) -> Self {
        UpBlock {
            up: ConvTranspose2d::new(params, c_in, c_out, K4S2, rng),
            bn: BatchNorm2d::new(params, c_out, with_aux, rng),
        }
    }

    fn forward(&mut self, params: &ParamSet<T>, tape: &mut Tape<T>, x: Var, ctl: BnCtl) -> Var {
        let h = self.up.forward(params, tape, x);
        let h = ctl.apply(&mut self.bn, params, tape, h);
        tape.relu(h)
    }
}

/// Dense-skip grid node: upsample the deeper feature, concatenate every
/// same-level predecessor, then mix with a 3x3 conv.
struct DenseNode<T> {
    up: UpBlock<T>,
    conv: Conv2d,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> DenseNode<T> {
    fn new<R: Rng>(
        params: &mut ParamSet<T>,
        c_here: usize,
        c_below: usize,
        n_skips: usize,
        with_aux: bool,
        rng: &mut R,
    ) -> Self {
        DenseNode {
            up: UpBlock::new(params, c_below, c_here, with_aux, rng),
            conv: Conv2d::new(params, c_here * (n_skips + 1), c_here, K3S1, rng),
            bn: BatchNorm2d::new(params, c_here, with_aux, rng),
        }
    }

    fn forward(
        &mut self,
        params: &ParamSet<T>,
        tape: &mut Tape<T>,
        skips: &[Var],
        below: Var,
        ctl: BnCtl,
    ) -> Var {
        let up = self.up.forward(params, tape, below, ctl);
        let mut parts: Vec<Var> = skips.to_vec();
        parts.push(up);
        let cat = tape.concat_channels(&parts);
        let h = self.conv.forward(params, tape, cat);
        let h = ctl.apply(&mut self.bn, params, tape, h);
        tape.relu(h)
    }
}

enum GenNet<T> {
    Naive {
        enc: Vec<EncBlock<T>>,
        to_latent: Conv2d,
        dec: Vec<UpBlock<T>>,
        to_image: ConvTranspose2d,
    },
    Skip {
        enc: Vec<EncBlock<T>>,
        dec: Vec<UpBlock<T>>,
        to_image: ConvTranspose2d,
    },
    Dense {
        enc: Vec<EncBlock<T>>,
        /// `nodes[j-1][i]` is grid node `(level i, column j)`.
        nodes: Vec<Vec<DenseNode<T>>>,
        to_image: ConvTranspose2d,
    },
}

/// Reconstruction generator. See [`GeneratorSpec`] for the configuration.
pub struct Generator<T> {
    spec: GeneratorSpec,
    params: ParamSet<T>,
    net: GenNet<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn build<R: Rng>(spec: GeneratorSpec, rng: &mut R) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let ch = spec.channels();
        let aux = true; // auxiliary branches are always allocated; forward selects
        let net = match spec.backbone {
            Backbone::Naive => {
                let mut enc = Vec::new();
                let mut c_prev = spec.in_channels;
                for (i, &c) in ch.iter().enumerate() {
                    enc.push(EncBlock::new(&mut params, c_prev, c, i > 0, aux, rng));
                    c_prev = c;
                }
                let to_latent = Conv2d::new(&mut params, c_prev, spec.latent_channels, K4S2, rng);
                let mut dec = Vec::new();
                let mut c_prev = spec.latent_channels;
                for &c in ch.iter().rev() {
                    dec.push(UpBlock::new(&mut params, c_prev, c, aux, rng));
                    c_prev = c;
                }
                let to_image =
                    ConvTranspose2d::new(&mut params, c_prev, spec.in_channels, K4S2, rng);
                GenNet::Naive {
                    enc,
                    to_latent,
                    dec,
                    to_image,
                }
            }
            Backbone::Skip => {
                let full = full_channels(&spec);
                let mut enc = Vec::new();
                let mut c_prev = spec.in_channels;
                for (i, &c) in full.iter().enumerate() {
                    enc.push(EncBlock::new(&mut params, c_prev, c, i > 0, aux, rng));
                    c_prev = c;
                }
                let mut dec = Vec::new();
                let mut c_in = full[spec.depth - 1];
                for i in (0..spec.depth - 1).rev() {
                    dec.push(UpBlock::new(&mut params, c_in, full[i], aux, rng));
                    c_in = 2 * full[i]; // concatenated with the encoder feature
                }
                let to_image = ConvTranspose2d::new(&mut params, c_in, spec.in_channels, K4S2, rng);
                GenNet::Skip { enc, dec, to_image }
            }
            Backbone::DenseSkip => {
                let full = full_channels(&spec);
                let mut enc = Vec::new();
                let mut c_prev = spec.in_channels;
                for (i, &c) in full.iter().enumerate() {
                    enc.push(EncBlock::new(&mut params, c_prev, c, i > 0, aux, rng));
                    c_prev = c;
                }
                let mut nodes = Vec::new();
                for j in 1..spec.depth {
                    let mut column = Vec::new();
                    for i in 0..spec.depth - j {
                        column.push(DenseNode::new(
                            &mut params,
                            full[i],
                            full[i + 1],
                            j,
                            aux,
                            rng,
                        ));
                    }
                    nodes.push(column);
                }
                let to_image =
                    ConvTranspose2d::new(&mut params, full[0], spec.in_channels, K4S2, rng);
                GenNet::Dense {
                    enc,
                    nodes,
                    to_image,
                }
            }
        };
        Ok(Generator { spec, params, net })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn new_optimizer(&self, lr: T, betas: (T, T), eps: T) -> Adam<T> {
        Adam::new(&self.params, lr, betas, eps)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<(), ModelError> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.spec.in_channels || shape[2] != shape[3] {
            return Err(ModelError::Shape(format!(
                "generator expects (n, {}, s, s), got {:?}",
                self.spec.in_channels, shape
            )));
        }
        self.spec.check_size(shape[2])?;
        Ok(())
    }

    /// Training-mode forward. A pseudo pass (input is a reconstruction) uses
    /// the auxiliary batch-norm branch when the strategy asks for it, leaving
    /// main running statistics untouched.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        pass: PassKind,
        strategy: BnStrategy,
    ) -> Result<Var, ModelError> {
        self.check_input(tape, x)?;
        let branch = if pass == PassKind::Pseudo && strategy.auxiliary_for_pseudo {
            BnBranch::Aux
        } else {
            BnBranch::Main
        };
        Ok(self.wire(tape, x, BnCtl::Train(branch)).1)
    }

    /// Inference-mode forward; batch norms use main running statistics and
    /// nothing is updated.
    pub fn forward_eval(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, ModelError> {
        self.check_input(tape, x)?;
        Ok(self.wire(tape, x, BnCtl::Eval).1)
    }

    /// Eval-mode reconstruction of a raw batch tensor.
    pub fn reconstruct(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        let y = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode bottleneck features (the latent map of the naive backbone,
    /// the deepest encoder feature otherwise).
    pub fn latent_map(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        self.check_input(&tape, x)?;
        let (latent, _) = self.wire(&mut tape, x, BnCtl::Eval);
        Ok(tape.value(latent).clone())
    }

    /// Shared wiring for every mode; returns `(bottleneck, output)`.
    fn wire(&mut self, tape: &mut Tape<T>, x: Var, ctl: BnCtl) -> (Var, Var) {
        let params = &self.params;
        match &mut self.net {
            GenNet::Naive {
                enc,
                to_latent,
                dec,
                to_image,
            } => {
                let mut h = x;
                for block in enc.iter_mut() {
                    h = block.forward(params, tape, h, ctl);
                }
                let latent = to_latent.forward(params, tape, h);
                let mut h = latent;
                for block in dec.iter_mut() {
                    h = block.forward(params, tape, h, ctl);
                }
                let out = to_image.forward(params, tape, h);
                (latent, tape.tanh(out))
            }
            GenNet::Skip { enc, dec, to_image } => {
                let mut feats = Vec::with_capacity(enc.len());
                let mut h = x;
                for block in enc.iter_mut() {
                    h = block.forward(params, tape, h, ctl);
                    feats.push(h);
                }
                let bottleneck = h;
                let mut cur = bottleneck;
                for (k, block) in dec.iter_mut().enumerate() {
                    let level = enc.len() - 2 - k;
                    cur = block.forward(params, tape, cur, ctl);
                    cur = tape.concat_channels(&[cur, feats[level]]);
                }
                let out = to_image.forward(params, tape, cur);
                (bottleneck, tape.tanh(out))
            }
            GenNet::Dense {
                enc,
                nodes,
                to_image,
            } => {
                let depth = enc.len();
                // grid[i][j] = node output at level i, column j
                let mut grid: Vec<Vec<Var>> = vec![Vec::new(); depth];
                let mut h = x;
                for (i, block) in enc.iter_mut().enumerate() {
                    h = block.forward(params, tape, h, ctl);
                    grid[i].push(h);
                }
                let bottleneck = h;
                for (j, column) in nodes.iter_mut().enumerate() {
                    for (i, node) in column.iter_mut().enumerate() {
                        let below = grid[i + 1][j];
                        let skips = grid[i].clone();
                        let out = node.forward(params, tape, &skips, below, ctl);
                        grid[i].push(out);
                    }
                }
                let top = *grid[0].last().expect("dense grid has a top node");
                let out = to_image.forward(params, tape, top);
                (bottleneck, tape.tanh(out))
            }
        }
    }

    /// Batch-norm running-statistic buffers in a fixed traversal order.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        match &self.net {
            GenNet::Naive { enc, dec, .. } => {
                for b in enc {
                    if let Some(bn) = &b.bn {
                        out.extend(bn.buffers());
                    }
                }
                for b in dec {
                    out.extend(b.bn.buffers());
                }
            }
            GenNet::Skip { enc, dec, .. } => {
                for b in enc {
                    if let Some(bn) = &b.bn {
                        out.extend(bn.buffers());
                    }
                }
                for b in dec {
                    out.extend(b.bn.buffers());
                }
            }
            GenNet::Dense { enc, nodes, .. } => {
                for b in enc {
                    if let Some(bn) = &b.bn {
                        out.extend(bn.buffers());
                    }
                }
                for column in nodes {
                    for node in column {
                        out.extend(node.up.bn.buffers());
                        out.extend(node.bn.buffers());
                    }
                }
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        match &mut self.net {
            GenNet::Naive { enc, dec, .. } => {
                for b in enc.iter_mut() {
                    if let Some(bn) = &mut b.bn {
                        out.extend(bn.buffers_mut());
                    }
                }
                for b in dec.iter_mut() {
                    out.extend(b.bn.buffers_mut());
                }
            }
            GenNet::Skip { enc, dec, .. } => {
                for b in enc.iter_mut() {
                    if let Some(bn) = &mut b.bn {
                        out.extend(bn.buffers_mut());
                    }
                }
                for b in dec.iter_mut() {
                    out.extend(b.bn.buffers_mut());
                }
            }
            GenNet::Dense { enc, nodes, .. } => {
                for b in enc.iter_mut() {
                    if let Some(bn) = &mut b.bn {
                        out.extend(bn.buffers_mut());
                    }
                }
                for column in nodes.iter_mut() {
                    for node in column.iter_mut() {
                        out.extend(node.up.bn.buffers_mut());
                        out.extend(node.bn.buffers_mut());
                    }
                }
            }
        }
        out
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        crate::checkpoint::write_store(path, &self.params, &self.buffers())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), ModelError> {
        let param_shapes: Vec<Vec<usize>> = (0..self.params.len())
            .map(|i| self.params.at(i).shape().to_vec())
            .collect();
        let buffer_shapes: Vec<Vec<usize>> =
            self.buffers().iter().map(|b| b.shape().to_vec()).collect();
        let (ps, bs) = crate::checkpoint::read_store(path, &param_shapes, &buffer_shapes)?;
        for (i, t) in ps.into_iter().enumerate() {
            *self.params.at_mut(i) = t;
        }
        for (dst, src) in self.buffers_mut().into_iter().zip(bs) {
            *dst = src;
        }
        Ok(())
    }
}

fn full_channels(spec: &GeneratorSpec) -> Vec<usize> {
    (0..spec.depth).map(|i| spec.base_width << i).collect()
}

/// Classification score and latent features for one batch.
pub struct DiscriminatorOutput {
    /// Sigmoid probability per example, shape `(n, 1)`.
    pub y: Var,
    /// Globally average-pooled features after the second block, `(n, 2*width)`.
    pub z: Var,
}

/// Two conv blocks plus a fully convolutional classifier head.
pub struct Discriminator<T> {
    in_channels: usize,
    width: usize,
    params: ParamSet<T>,
    conv1: Conv2d,
    conv2: Conv2d,
    bn2: BatchNorm2d<T>,
    head: Conv2d,
}

impl<T: Scalar> Discriminator<T> {
    pub fn build<R: Rng>(in_channels: usize, width: usize, rng: &mut R) -> Result<Self, ModelError> {
        if width == 0 || in_channels == 0 {
            return Err(ModelError::Build(
                "discriminator width and channels must be >= 1".into(),
            ));
        }
        let mut params = ParamSet::new();
        let conv1 = Conv2d::new(&mut params, in_channels, width, K4S2, rng);
        let conv2 = Conv2d::new(&mut params, width, 2 * width, K4S2, rng);
        let bn2 = BatchNorm2d::new(&mut params, 2 * width, false, rng);
        let head = Conv2d::new(&mut params, 2 * width, 1, K4S2, rng);
        Ok(Discriminator {
            in_channels,
            width,
            params,
            conv1,
            conv2,
            bn2,
            head,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn new_optimizer(&self, lr: T, betas: (T, T), eps: T) -> Adam<T> {
        Adam::new(&self.params, lr, betas, eps)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<(), ModelError> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] != shape[3] {
            return Err(ModelError::Shape(format!(
                "discriminator expects (n, {}, s, s), got {:?}",
                self.in_channels, shape
            )));
        }
        if shape[2] < 8 {
            return Err(ModelError::Shape(format!(
                "discriminator needs inputs of at least 8x8, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Training-mode forward. True-anomaly inputs run batch norms in
    /// inference mode when the strategy freezes them, so running statistics
    /// stay untouched by anomalous data.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        is_true_anomaly: bool,
        strategy: BnStrategy,
    ) -> Result<DiscriminatorOutput, ModelError> {
        self.check_input(tape, x)?;
        let ctl = if is_true_anomaly && strategy.freeze_for_true_anomaly {
            BnCtl::Eval
        } else {
            BnCtl::Train(BnBranch::Main)
        };
        Ok(self.wire(tape, x, ctl))
    }

    pub fn forward_eval(&mut self, tape: &mut Tape<T>, x: Var) -> Result<DiscriminatorOutput, ModelError> {
        self.check_input(tape, x)?;
        Ok(self.wire(tape, x, BnCtl::Eval))
    }

    fn wire(&mut self, tape: &mut Tape<T>, x: Var, ctl: BnCtl) -> DiscriminatorOutput {
        let params = &self.params;
        let slope = T::cast(LEAKY_SLOPE);
        let h = self.conv1.forward(params, tape, x);
        let h = tape.leaky_relu(h, slope);
        let h = self.conv2.forward(params, tape, h);
        let h = ctl.apply(&mut self.bn2, params, tape, h);
        let feats = tape.leaky_relu(h, slope);
        let z = tape.global_avg_pool(feats);
        let logits = self.head.forward(params, tape, feats);
        let pooled = tape.global_avg_pool(logits); // (n, 1)
        let y = tape.sigmoid(pooled);
        DiscriminatorOutput { y, z }
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.bn2.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.bn2.buffers_mut()
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        crate::checkpoint::write_store(path, &self.params, &self.buffers())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), ModelError> {
        let param_shapes: Vec<Vec<usize>> = (0..self.params.len())
            .map(|i| self.params.at(i).shape().to_vec())
            .collect();
        let buffer_shapes: Vec<Vec<usize>> =
            self.buffers().iter().map(|b| b.shape().to_vec()).collect();
        let (ps, bs) = crate::checkpoint::read_store(path, &param_shapes, &buffer_shapes)?;
        for (i, t) in ps.into_iter().enumerate() {
            *self.params.at_mut(i) = t;
        }
        for (dst, src) in self.buffers_mut().into_iter().zip(bs) {
            *dst = src;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;

    fn small_spec(backbone: Backbone, in_channels: usize) -> GeneratorSpec {
        GeneratorSpec {
            backbone,
            in_channels,
            latent_channels: 16,
            base_width: 4,
            depth: 4,
        }
    }

    fn batch(n: usize, c: usize, s: usize, fill: f64) -> Tensor<f64> {
        Tensor::full(&[n, c, s, s], fill)
    }

    #[test]
    fn all_backbones_reconstruct_input_shape() {
        for backbone in [Backbone::Naive, Backbone::Skip, Backbone::DenseSkip] {
            for (c, s) in [(1usize, 32usize), (3, 32), (1, 64), (3, 64), (1, 128), (3, 128)] {
                let mut rng = derive_rng(1, "build");
                let mut gen =
                    Generator::<f64>::build(small_spec(backbone, c), &mut rng).unwrap();
                let out = gen.reconstruct(&batch(2, c, s, 0.25)).unwrap();
                assert_eq!(out.shape(), &[2, c, s, s], "{backbone} {c}x{s}");
            }
        }
    }

    #[test]
    fn naive_latent_map_shape() {
        let mut rng = derive_rng(2, "build");
        let spec = GeneratorSpec {
            latent_channels: 100,
            base_width: 8,
            ..small_spec(Backbone::Naive, 1)
        };
        let mut gen = Generator::<f64>::build(spec, &mut rng).unwrap();
        let latent = gen.latent_map(&batch(2, 1, 32, 0.1)).unwrap();
        assert_eq!(latent.shape(), &[2, 100, 2, 2]);
    }

    #[test]
    fn generator_output_within_tanh_range() {
        let mut rng = derive_rng(3, "build");
        let mut gen = Generator::<f64>::build(small_spec(Backbone::Skip, 1), &mut rng).unwrap();
        let out = gen.reconstruct(&batch(2, 1, 32, 0.9)).unwrap();
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn parameter_count_ordering_at_defaults() {
        let mut rng = derive_rng(4, "build");
        let naive = Generator::<f32>::build(
            GeneratorSpec {
                backbone: Backbone::Naive,
                ..GeneratorSpec::default()
            },
            &mut rng,
        )
        .unwrap();
        let skip = Generator::<f32>::build(
            GeneratorSpec {
                backbone: Backbone::Skip,
                ..GeneratorSpec::default()
            },
            &mut rng,
        )
        .unwrap();
        let dense = Generator::<f32>::build(
            GeneratorSpec {
                backbone: Backbone::DenseSkip,
                ..GeneratorSpec::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(naive.num_params() < skip.num_params());
        assert!(skip.num_params() < dense.num_params());
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let mut rng = derive_rng(5, "build");
        let mut gen = Generator::<f64>::build(small_spec(Backbone::Naive, 1), &mut rng).unwrap();
        let err = gen.reconstruct(&batch(1, 1, 24, 0.0)).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn discriminator_shapes_and_range() {
        let mut rng = derive_rng(6, "build");
        let mut disc = Discriminator::<f64>::build(1, 64, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(batch(3, 1, 32, 0.3));
        let out = disc.forward_eval(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.y), &[3, 1]);
        assert_eq!(tape.shape(out.z), &[3, 128]);
        assert!(tape
            .value(out.y)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_eval_is_deterministic() {
        let mut rng = derive_rng(7, "build");
        let mut disc = Discriminator::<f64>::build(1, 8, &mut rng).unwrap();
        let x = batch(2, 1, 16, 0.5);
        let run = |d: &mut Discriminator<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = d.forward_eval(&mut tape, xv).unwrap();
            (
                tape.value(out.y).data().to_vec(),
                tape.value(out.z).data().to_vec(),
            )
        };
        assert_eq!(run(&mut disc), run(&mut disc));
    }

    #[test]
    fn aux_branch_keeps_main_statistics_bit_identical() {
        let mut rng = derive_rng(8, "build");
        let mut gen = Generator::<f64>::build(small_spec(Backbone::Naive, 1), &mut rng).unwrap();
        let x = batch(2, 1, 32, 0.4);

        // one real pass must move the main stats
        let before: Vec<Tensor<f64>> = gen.buffers().into_iter().cloned().collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        gen.forward_train(&mut tape, xv, PassKind::Real, BnStrategy::ADVPROP)
            .unwrap();
        let after_real: Vec<Tensor<f64>> = gen.buffers().into_iter().cloned().collect();
        assert_ne!(before, after_real);

        // pseudo passes with the auxiliary branch leave main stats untouched
        let main_before = snapshot_main(&gen);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            gen.forward_train(&mut tape, xv, PassKind::Pseudo, BnStrategy::ADVPROP)
                .unwrap();
        }
        assert_eq!(main_before, snapshot_main(&gen));

        // without the strategy, pseudo passes share the main branch
        let main_before = snapshot_main(&gen);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        gen.forward_train(&mut tape, xv, PassKind::Pseudo, BnStrategy::SHARED)
            .unwrap();
        assert_ne!(main_before, snapshot_main(&gen));
    }

    /// Main-branch running stats are the first two of each BN's four buffers.
    fn snapshot_main(gen: &Generator<f64>) -> Vec<Vec<u64>> {
        gen.buffers()
            .chunks(4)
            .flat_map(|chunk| chunk[..2].iter().map(|t| bits(t)))
            .collect()
    }

    fn bits(t: &Tensor<f64>) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn frozen_bn_keeps_discriminator_statistics() {
        let mut rng = derive_rng(9, "build");
        let mut disc = Discriminator::<f64>::build(1, 8, &mut rng).unwrap();
        let x = batch(2, 1, 16, -0.3);

        let before: Vec<Vec<u64>> = disc.buffers().iter().map(|t| bits(t)).collect();
        for _ in 0..5 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            disc.forward_train(&mut tape, xv, true, BnStrategy::FREEZE)
                .unwrap();
        }
        let after: Vec<Vec<u64>> = disc.buffers().iter().map(|t| bits(t)).collect();
        assert_eq!(before, after);

        // without freeze, a true-anomaly batch updates stats as usual
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        disc.forward_train(&mut tape, xv, true, BnStrategy::SHARED)
            .unwrap();
        let moved: Vec<Vec<u64>> = disc.buffers().iter().map(|t| bits(t)).collect();
        assert_ne!(before, moved);
    }

    #[test]
    fn strategy_parsing_roundtrip() {
        for s in ["shared", "advprop", "freeze", "advprop+freeze"] {
            let parsed: BnStrategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("bogus".parse::<BnStrategy>().is_err());
        for b in ["naive", "skip", "dense_skip"] {
            let parsed: Backbone = b.parse().unwrap();
            assert_eq!(parsed.to_string(), b);
        }
    }
}
