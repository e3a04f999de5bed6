//! Deep reward model: a shared base network maps state features to reward
//! features, and one affine head per intention maps reward features to a
//! scalar state reward.
//!
//! Gradients are computed by hand for this fixed architecture. Every
//! objective handled here has the form `Σ_k Σ_s w_{k,s} R_k(s)` for given
//! per-state weights, which is the shape of the max-ent M-step.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MIIRLNET";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture of the reward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    /// Number of ReLU hidden layers in the base network.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Output width of the base network (input width of every head).
    pub reward_feature_dim: usize,
    /// Affine heads when true, purely linear otherwise.
    pub head_bias: bool,
}

impl NetShape {
    /// Two hidden layers of 32 units.
    pub fn desk() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 32,
            reward_feature_dim: 16,
            head_bias: true,
        }
    }

    /// Five hidden layers of 256 units.
    pub fn paper() -> Self {
        Self {
            hidden_layers: 5,
            hidden_width: 256,
            ..Self::desk()
        }
    }
}

impl Default for NetShape {
    fn default() -> Self {
        Self::desk()
    }
}

/// Fully connected layer, weights stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Self {
            weights: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.gen_range(-scale..scale)
            }),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Intention-specific affine map from reward features to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl Head {
    fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            weights: Array1::from_shape_simple_fn(dim, || rng.gen_range(-scale..scale)),
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseMoments {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

impl DenseMoments {
    fn zeros(layer: &Dense) -> Self {
        Self {
            m_w: Array2::zeros(layer.weights.raw_dim()),
            v_w: Array2::zeros(layer.weights.raw_dim()),
            m_b: Array1::zeros(layer.bias.len()),
            v_b: Array1::zeros(layer.bias.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadMoments {
    m_w: Array1<f64>,
    v_w: Array1<f64>,
    m_b: f64,
    v_b: f64,
    step: u64,
}

impl HeadMoments {
    fn zeros(dim: usize) -> Self {
        Self {
            m_w: Array1::zeros(dim),
            v_w: Array1::zeros(dim),
            m_b: 0.0,
            v_b: 0.0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    base: Vec<DenseMoments>,
    base_step: u64,
    heads: Vec<HeadMoments>,
}

/// Base network `Θ₀` plus intention heads `Θ₁..Θ_K`, with Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    shape: NetShape,
    feature_dim: usize,
    base: Vec<Dense>,
    heads: Vec<Head>,
    adam: AdamState,
}

/// Cached base-network activations for one feature matrix.
#[derive(Debug, Clone)]
pub struct BaseCache {
    /// Input of every base layer; the last entry is the reward-feature matrix.
    activations: Vec<Array2<f64>>,
}

impl BaseCache {
    /// `n_states × reward_feature_dim` reward features.
    pub fn reward_features(&self) -> &Array2<f64> {
        self.activations
            .last()
            .expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weights: Array1<f64>,
    pub bias: f64,
}

/// Gradients for every parameter tensor. Heads that took no part in the
/// objective are `None` and are skipped by [`RewardNet::adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub base: Vec<DenseGrad>,
    pub heads: Vec<Option<HeadGrad>>,
    /// Width of every head's weight vector.
    pub head_dim: usize,
}

impl Gradients {
    pub fn zeros(net: &RewardNet) -> Self {
        Self {
            base: net
                .base
                .iter()
                .map(|l| DenseGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            heads: vec![None; net.heads.len()],
            head_dim: net.shape.reward_feature_dim,
        }
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.base.len() != other.base.len() || self.heads.len() != other.heads.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient sets",
                expected: self.base.len() + self.heads.len(),
                actual: other.base.len() + other.heads.len(),
            });
        }
        for (a, b) in self.base.iter_mut().zip(&other.base) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            match (a.as_mut(), b) {
                (_, None) => {}
                (None, Some(b)) => *a = Some(b.clone()),
                (Some(a), Some(b)) => {
                    a.weights += &b.weights;
                    a.bias += b.bias;
                }
            }
        }
        Ok(())
    }

    /// All gradient entries in checkpoint order; absent heads contribute zeros.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.base {
            out.extend(g.weights.iter());
            out.extend(g.bias.iter());
        }
        let head_dim = self.head_dim;
        for h in &self.heads {
            match h {
                Some(h) => {
                    out.extend(h.weights.iter());
                    out.push(h.bias);
                }
                None => out.extend(std::iter::repeat_n(0.0, head_dim + 1)),
            }
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        for (i, g) in self.base.iter().enumerate() {
            if g.weights
                .iter()
                .chain(g.bias.iter())
                .any(|x| !x.is_finite())
            {
                return Err(Error::NonFinite(format!("gradient of base layer {i}")));
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            if let Some(h) = h {
                if h.weights.iter().any(|x| !x.is_finite()) || !h.bias.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of head {k}")));
                }
            }
        }
        Ok(())
    }
}

impl RewardNet {
    /// Weights uniform on `±1/√fan_in`, biases zero.
    pub fn new(feature_dim: usize, shape: NetShape, k_init: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || shape.reward_feature_dim == 0 || k_init == 0 {
            return Err(Error::InvalidArgument(
                "feature dim, reward feature dim and initial head count must be >= 1".into(),
            ));
        }
        if shape.hidden_layers > 0 && shape.hidden_width == 0 {
            return Err(Error::InvalidArgument("hidden width must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![feature_dim];
        widths.extend(std::iter::repeat_n(shape.hidden_width, shape.hidden_layers));
        widths.push(shape.reward_feature_dim);
        let base: Vec<Dense> = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        let heads: Vec<Head> = (0..k_init)
            .map(|_| Head::init(shape.reward_feature_dim, &mut rng))
            .collect();
        let adam = AdamState {
            base: base.iter().map(DenseMoments::zeros).collect(),
            base_step: 0,
            heads: heads
                .iter()
                .map(|_| HeadMoments::zeros(shape.reward_feature_dim))
                .collect(),
        };
        Ok(Self {
            shape,
            feature_dim,
            base,
            heads,
            adam,
        })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn base_layers(&self) -> &[Dense] {
        &self.base
    }

    pub fn base_layers_mut(&mut self) -> &mut [Dense] {
        &mut self.base
    }

    pub fn head(&self, k: usize) -> &Head {
        &self.heads[k]
    }

    pub fn head_mut(&mut self, k: usize) -> &mut Head {
        &mut self.heads[k]
    }

    /// Adam step counter of head `k`.
    pub fn head_step(&self, k: usize) -> u64 {
        self.adam.heads[k].step
    }

    pub fn base_step(&self) -> u64 {
        self.adam.base_step
    }

    fn check_head(&self, k: usize) -> Result<()> {
        if k < self.heads.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "head {k} out of range (K = {})",
                self.heads.len()
            )))
        }
    }

    /// Runs the base network on an `n_states × feature_dim` matrix.
    pub fn base_forward(&self, features: &Array2<f64>) -> Result<BaseCache> {
        if features.ncols() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                context: "feature width",
                expected: self.feature_dim,
                actual: features.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.base.len() + 1);
        activations.push(features.to_owned());
        let last = self.base.len() - 1;
        for (i, layer) in self.base.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|x| x.max(0.0));
            }
            activations.push(z);
        }
        Ok(BaseCache { activations })
    }

    /// Per-state reward of head `k` from cached base activations.
    pub fn head_forward(&self, cache: &BaseCache, k: usize) -> Result<Vec<f64>> {
        self.check_head(k)?;
        let head = &self.heads[k];
        let bias = if self.shape.head_bias { head.bias } else { 0.0 };
        Ok(cache
            .reward_features()
            .dot(&head.weights)
            .iter()
            .map(|r| r + bias)
            .collect())
    }

    /// Per-state reward of head `k`.
    pub fn forward(&self, features: &Array2<f64>, k: usize) -> Result<Vec<f64>> {
        self.check_head(k)?;
        let cache = self.base_forward(features)?;
        self.head_forward(&cache, k)
    }

    /// Gradient of `Σ_s state_weights[s] · R_k(s)` with respect to all parameters.
    pub fn backward(
        &self,
        features: &Array2<f64>,
        k: usize,
        state_weights: &[f64],
    ) -> Result<Gradients> {
        let cache = self.base_forward(features)?;
        self.backward_cached(&cache, &[(k, state_weights)])
    }

    /// Gradient of `Σ_j Σ_s w_j[s] · R_{k_j}(s)` over the given `(k_j, w_j)` terms.
    pub fn backward_cached(
        &self,
        cache: &BaseCache,
        terms: &[(usize, &[f64])],
    ) -> Result<Gradients> {
        let r = cache.reward_features();
        let n = r.nrows();
        let mut grads = Gradients::zeros(self);
        let mut d_r = Array2::<f64>::zeros(r.raw_dim());

        for &(k, weights) in terms {
            self.check_head(k)?;
            if weights.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "state weights",
                    expected: n,
                    actual: weights.len(),
                });
            }
            let w = Array1::from(weights.to_vec());
            let head = &self.heads[k];
            let g = HeadGrad {
                weights: r.t().dot(&w),
                bias: if self.shape.head_bias { w.sum() } else { 0.0 },
            };
            match &mut grads.heads[k] {
                Some(acc) => {
                    acc.weights += &g.weights;
                    acc.bias += g.bias;
                }
                slot @ None => *slot = Some(g),
            }
            let w_col = w.insert_axis(Axis(1));
            let h_row = head.weights.view().insert_axis(Axis(0));
            d_r += &w_col.dot(&h_row);
        }

        let mut upstream = d_r;
        for i in (0..self.base.len()).rev() {
            let input = &self.activations_input(cache, i);
            grads.base[i].weights = upstream.t().dot(*input);
            grads.base[i].bias = upstream.sum_axis(Axis(0));
            if i > 0 {
                let mut down = upstream.dot(&self.base[i].weights);
                // input of layer i is the ReLU output of layer i-1
                ndarray::Zip::from(&mut down).and(*input).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                upstream = down;
            }
        }
        grads.check_finite()?;
        Ok(grads)
    }

    fn activations_input<'a>(&self, cache: &'a BaseCache, layer: usize) -> &'a Array2<f64> {
        &cache.activations[layer]
    }

    /// One Adam ascent step. Heads whose gradient is `None` keep their
    /// parameters, moments and step counter.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.base.len() != self.base.len() || grads.heads.len() != self.heads.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient set vs network",
                expected: self.base.len() + self.heads.len(),
                actual: grads.base.len() + grads.heads.len(),
            });
        }
        for (g, layer) in grads.base.iter().zip(&self.base) {
            if g.weights.raw_dim() != layer.weights.raw_dim() || g.bias.len() != layer.bias.len() {
                return Err(Error::DimensionMismatch {
                    context: "base layer gradient",
                    expected: layer.weights.len(),
                    actual: g.weights.len(),
                });
            }
        }
        grads.check_finite()?;

        let mut updated = self.clone();
        updated.adam.base_step += 1;
        let t = updated.adam.base_step;
        for ((layer, moments), g) in updated
            .base
            .iter_mut()
            .zip(updated.adam.base.iter_mut())
            .zip(&grads.base)
        {
            adam_update(
                layer.weights.as_slice_mut().expect("contiguous"),
                moments.m_w.as_slice_mut().expect("contiguous"),
                moments.v_w.as_slice_mut().expect("contiguous"),
                g.weights.as_slice().expect("contiguous"),
                lr,
                t,
            );
            adam_update(
                layer.bias.as_slice_mut().expect("contiguous"),
                moments.m_b.as_slice_mut().expect("contiguous"),
                moments.v_b.as_slice_mut().expect("contiguous"),
                g.bias.as_slice().expect("contiguous"),
                lr,
                t,
            );
        }
        let head_bias = self.shape.head_bias;
        for ((head, moments), g) in updated
            .heads
            .iter_mut()
            .zip(updated.adam.heads.iter_mut())
            .zip(&grads.heads)
        {
            let Some(g) = g else { continue };
            moments.step += 1;
            adam_update(
                head.weights.as_slice_mut().expect("contiguous"),
                moments.m_w.as_slice_mut().expect("contiguous"),
                moments.v_w.as_slice_mut().expect("contiguous"),
                g.weights.as_slice().expect("contiguous"),
                lr,
                moments.step,
            );
            if head_bias {
                adam_update(
                    std::slice::from_mut(&mut head.bias),
                    std::slice::from_mut(&mut moments.m_b),
                    std::slice::from_mut(&mut moments.v_b),
                    &[g.bias],
                    lr,
                    moments.step,
                );
            }
        }
        if let Some(bad) = updated.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "parameters of {bad} after Adam step"
            )));
        }
        *self = updated;
        Ok(())
    }

    fn first_non_finite(&self) -> Option<String> {
        for (i, l) in self.base.iter().enumerate() {
            if l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|x| !x.is_finite())
            {
                return Some(format!("base layer {i}"));
            }
        }
        self.heads
            .iter()
            .position(|h| h.weights.iter().any(|x| !x.is_finite()) || !h.bias.is_finite())
            .map(|k| format!("head {k}"))
    }

    /// Appends a freshly initialized head and returns its index.
    pub fn spawn_head(&mut self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.shape.reward_feature_dim;
        self.heads.push(Head::init(dim, &mut rng));
        self.adam.heads.push(HeadMoments::zeros(dim));
        self.heads.len() - 1
    }

    /// Keeps only the heads in `occupied`, preserving their order. Returns the
    /// old-to-new index map.
    pub fn prune_heads(&mut self, occupied: &[usize]) -> Result<Vec<Option<usize>>> {
        if occupied.is_empty() {
            return Err(Error::InvalidArgument("cannot prune every head".into()));
        }
        if let Some(&bad) = occupied.iter().find(|&&k| k >= self.heads.len()) {
            return Err(Error::InvalidArgument(format!("head {bad} out of range")));
        }
        let mut remap = vec![None; self.heads.len()];
        let mut next = 0;
        for (k, slot) in remap.iter_mut().enumerate() {
            if occupied.contains(&k) {
                *slot = Some(next);
                next += 1;
            }
        }
        let mut k = 0;
        self.heads.retain(|_| {
            k += 1;
            remap[k - 1].is_some()
        });
        let mut k = 0;
        self.adam.heads.retain(|_| {
            k += 1;
            remap[k - 1].is_some()
        });
        Ok(remap)
    }

    /// Removes head `k`, shifting later heads down by one.
    pub fn remove_head(&mut self, k: usize) -> Result<()> {
        self.check_head(k)?;
        if self.heads.len() == 1 {
            return Err(Error::InvalidArgument("cannot remove the last head".into()));
        }
        self.heads.remove(k);
        self.adam.heads.remove(k);
        Ok(())
    }

    /// All parameters in checkpoint order: each base layer's weights
    /// (row-major) then bias, then each head's weights then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.base {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        for h in &self.heads {
            out.extend(h.weights.iter());
            out.push(h.bias);
        }
        out
    }

    /// Inverse of [`RewardNet::parameters`].
    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.parameters().len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected,
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.base {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x = it.next().unwrap());
        }
        for h in &mut self.heads {
            h.weights.iter_mut().for_each(|x| *x = it.next().unwrap());
            h.bias = it.next().unwrap();
        }
        Ok(())
    }

    /// Writes the binary checkpoint: magic `MIIRLNET`, version (u32), then
    /// u64 feature_dim, hidden_layers, hidden_width, reward_feature_dim,
    /// head_bias (0/1), K, then every parameter as little-endian f64 in
    /// [`RewardNet::parameters`] order. Adam state is not stored.
    pub fn save<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [
            self.feature_dim,
            self.shape.hidden_layers,
            self.shape.hidden_width,
            self.shape.reward_feature_dim,
            self.shape.head_bias as usize,
            self.heads.len(),
        ] {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for x in self.parameters() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`RewardNet::save`]; Adam state starts fresh.
    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let parse_err = |e: std::io::Error| Error::Parse(format!("checkpoint: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(parse_err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("checkpoint: bad magic".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(parse_err)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf).map_err(parse_err)?;
            *d = u64::from_le_bytes(buf) as usize;
        }
        let [feature_dim, hidden_layers, hidden_width, reward_feature_dim, head_bias, k] = dims;
        let shape = NetShape {
            hidden_layers,
            hidden_width,
            reward_feature_dim,
            head_bias: head_bias != 0,
        };
        let mut net = RewardNet::new(feature_dim, shape, k, 0)?;
        let mut values = Vec::with_capacity(net.parameters().len());
        for _ in 0..net.parameters().len() {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf).map_err(parse_err)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest).map_err(parse_err)?;
        if !rest.is_empty() {
            return Err(Error::Parse("checkpoint: trailing bytes".into()));
        }
        net.set_parameters(&values)?;
        Ok(net)
    }
}

fn adam_update(params: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64], lr: f64, step: u64) {
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
}
