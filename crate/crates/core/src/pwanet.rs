//! Piecewise-affine neural networks.
//!
//! A network with `L` layers evaluates
//!
//! ```text
//! z⁽ˡ⁾ = σ(F⁽ˡ⁾ z⁽ˡ⁻¹⁾ + b⁽ˡ⁾),   l = 1 … L-1
//! y    = F⁽ᴸ⁾ z⁽ᴸ⁻¹⁾ + b⁽ᴸ⁾
//! ```
//!
//! with an activation `σ` whose single breakpoint sits at zero. Fixing the
//! activation pattern (which neurons have positive pre-activation) turns every
//! layer into an affine map, so the whole network restricted to the set of
//! inputs sharing one pattern is the affine function returned by
//! [`PwaNetwork::affine_piece`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dot, Hyperplane};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PwaError {
    #[error("dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("neuron {neuron} of layer {layer} has constant pre-activation {constant} on this region")]
    Degenerate { layer: usize, neuron: usize, constant: f64 },
    #[error("lyapunov network does not vanish at the origin (V(0) = {0:e})")]
    NonzeroAtOrigin(f64),
}

/// Activation with a single breakpoint at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    /// Slope applied to non-positive pre-activations.
    #[inline]
    pub fn inactive_slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.inactive_slope() * z
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `out × in`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Self {
        Layer { weights, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, |r| r.len())
    }
}

/// Feed-forward network with piecewise-affine hidden activations and a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct PwaNetwork {
    input_dim: usize,
    layers: Vec<Layer>,
    activation: Activation,
}

/// Per-hidden-layer activation bits; bit `true` iff the pre-activation is `> 0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivationPattern {
    pub layers: Vec<Vec<bool>>,
}

impl ActivationPattern {
    pub fn num_bits(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// First-layer bits packed into words (bit `j` of word `j / 64`).
    pub fn first_layer_mask(&self) -> Vec<u64> {
        pack_bits(self.layers.first().map_or(&[][..], |v| v.as_slice()))
    }
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64).max(1)];
    for (j, &b) in bits.iter().enumerate() {
        if b {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    words
}

/// The affine map `x ↦ c·x + d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinePiece {
    pub c: Vec<f64>,
    pub d: f64,
}

impl AffinePiece {
    pub fn new(c: Vec<f64>, d: f64) -> Self {
        AffinePiece { c, d }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.c, x) + self.d
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }
}

/// Affine map from the input to the post-activations of some layer.
#[derive(Clone, Debug)]
pub struct AffineMap {
    /// `rows × input_dim`
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    fn identity(n: usize) -> Self {
        let matrix = (0..n)
            .map(|i| {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r
            })
            .collect();
        AffineMap {
            matrix,
            offset: vec![0.0; n],
        }
    }

    /// `F·self + b`
    fn compose(&self, layer: &Layer) -> AffineMap {
        let n = self.matrix.first().map_or(0, |r| r.len());
        let mut matrix = Vec::with_capacity(layer.out_dim());
        let mut offset = Vec::with_capacity(layer.out_dim());
        for (row, &b) in layer.weights.iter().zip(&layer.bias) {
            let mut m = vec![0.0; n];
            let mut o = b;
            for (k, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (mi, &s) in m.iter_mut().zip(&self.matrix[k]) {
                    *mi += w * s;
                }
                o += w * self.offset[k];
            }
            matrix.push(m);
            offset.push(o);
        }
        AffineMap { matrix, offset }
    }

    fn scale_rows(&mut self, factors: impl Iterator<Item = f64>) {
        for ((row, o), f) in self.matrix.iter_mut().zip(self.offset.iter_mut()).zip(factors) {
            if f != 1.0 {
                for v in row.iter_mut() {
                    *v *= f;
                }
                *o *= f;
            }
        }
    }
}

impl PwaNetwork {
    pub fn new(input_dim: usize, layers: Vec<Layer>, activation: Activation) -> Result<Self, PwaError> {
        if input_dim == 0 {
            return Err(PwaError::Invalid("input dimension must be positive".into()));
        }
        if layers.is_empty() {
            return Err(PwaError::Invalid("network has no layers".into()));
        }
        if let Activation::LeakyRelu(s) = activation {
            if !(s.is_finite() && (0.0..1.0).contains(&s)) {
                return Err(PwaError::Invalid(format!("leaky slope {s} outside [0, 1)")));
            }
        }
        let mut prev = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.len() != layer.bias.len() || layer.bias.is_empty() {
                return Err(PwaError::Invalid(format!(
                    "layer {l}: {} weight rows but {} biases",
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
            if layer.weights.iter().any(|r| r.len() != prev) {
                return Err(PwaError::Invalid(format!("layer {l}: rows must have length {prev}")));
            }
            if layer
                .weights
                .iter()
                .flatten()
                .chain(&layer.bias)
                .any(|v| !v.is_finite())
            {
                return Err(PwaError::Invalid(format!("layer {l}: non-finite parameter")));
            }
            prev = layer.out_dim();
        }
        if prev != 1 {
            return Err(PwaError::Invalid(format!("output dimension must be 1, found {prev}")));
        }
        Ok(PwaNetwork {
            input_dim,
            layers,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of hidden (activated) layers, `L - 1`.
    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.num_hidden()].iter().map(Layer::out_dim).collect()
    }

    pub fn num_neurons(&self) -> usize {
        self.hidden_widths().iter().sum()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), PwaError> {
        if x.len() != self.input_dim {
            return Err(PwaError::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, PwaError> {
        self.check_dim(x)?;
        Ok(self.eval(x))
    }

    /// Forward pass without the dimension check.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut z = x.to_vec();
        let mut next = Vec::new();
        let act = self.activation;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            next.clear();
            for (row, &b) in layer.weights.iter().zip(&layer.bias) {
                let pre = dot(row, &z) + b;
                next.push(if l < last { act.apply(pre) } else { pre });
            }
            std::mem::swap(&mut z, &mut next);
        }
        z[0]
    }

    /// Pre-activation values of every hidden layer.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, PwaError> {
        self.check_dim(x)?;
        let mut out = Vec::with_capacity(self.num_hidden());
        let mut z = x.to_vec();
        for layer in &self.layers[..self.num_hidden()] {
            let pre: Vec<f64> = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, &b)| dot(row, &z) + b)
                .collect();
            z = pre.iter().map(|&p| self.activation.apply(p)).collect();
            out.push(pre);
        }
        Ok(out)
    }

    pub fn activation_pattern(&self, x: &[f64]) -> Result<ActivationPattern, PwaError> {
        Ok(ActivationPattern {
            layers: self
                .pre_activations(x)?
                .into_iter()
                .map(|pre| pre.into_iter().map(|p| p > 0.0).collect())
                .collect(),
        })
    }

    fn check_pattern(&self, ap: &[Vec<bool>], upto: usize) -> Result<(), PwaError> {
        if ap.len() < upto {
            return Err(PwaError::DimensionMismatch {
                expected: upto,
                found: ap.len(),
            });
        }
        for (l, bits) in ap.iter().take(upto).enumerate() {
            let w = self.layers[l].out_dim();
            if bits.len() != w {
                return Err(PwaError::DimensionMismatch {
                    expected: w,
                    found: bits.len(),
                });
            }
        }
        Ok(())
    }

    /// Affine map from the input to the outputs of hidden layer `upto - 1`
    /// (the identity when `upto == 0`), given the bits of the first `upto` layers.
    pub fn prefix_map(&self, ap_prefix: &[Vec<bool>], upto: usize) -> Result<AffineMap, PwaError> {
        if upto > self.num_hidden() {
            return Err(PwaError::Invalid(format!("layer {upto} is not hidden")));
        }
        self.check_pattern(ap_prefix, upto)?;
        let slope = self.activation.inactive_slope();
        let mut map = AffineMap::identity(self.input_dim);
        for (layer, bits) in self.layers.iter().zip(ap_prefix).take(upto) {
            map = map.compose(layer);
            map.scale_rows(bits.iter().map(|&b| if b { 1.0 } else { slope }));
        }
        Ok(map)
    }

    /// Pre-activation of every neuron in hidden layer `layer` as an affine map
    /// of the input, valid on the region where the earlier layers follow `ap_prefix`.
    pub fn layer_pre_activation_map(&self, ap_prefix: &[Vec<bool>], layer: usize) -> Result<AffineMap, PwaError> {
        if layer >= self.num_hidden() {
            return Err(PwaError::Invalid(format!("layer {layer} is not hidden")));
        }
        Ok(self.prefix_map(ap_prefix, layer)?.compose(&self.layers[layer]))
    }

    /// Output as an affine function on the region with pattern `ap`.
    pub fn affine_piece(&self, ap: &ActivationPattern) -> Result<AffinePiece, PwaError> {
        let h = self.num_hidden();
        let map = self.prefix_map(&ap.layers, h)?.compose(&self.layers[h]);
        Ok(AffinePiece {
            c: map.matrix.into_iter().next().unwrap(),
            d: map.offset[0],
        })
    }

    /// The hyperplane `{x : z_pre,j^(layer)(x) = 0}` for the region selected by
    /// `ap_prefix` (0-based `layer` and `neuron`).
    pub fn neuron_hyperplane(
        &self,
        ap_prefix: &[Vec<bool>],
        layer: usize,
        neuron: usize,
    ) -> Result<Hyperplane, PwaError> {
        let map = self.layer_pre_activation_map(ap_prefix, layer)?;
        if neuron >= map.offset.len() {
            return Err(PwaError::Invalid(format!("layer {layer} has no neuron {neuron}")));
        }
        pre_activation_plane(&map.matrix[neuron], map.offset[neuron], layer, neuron)
    }

    /// Hyperplanes of the first hidden layer (independent of any pattern).
    pub fn first_layer_planes(&self) -> Vec<Result<Hyperplane, PwaError>> {
        let layer = &self.layers[0];
        layer
            .weights
            .iter()
            .zip(&layer.bias)
            .enumerate()
            .map(|(j, (row, &b))| pre_activation_plane(row, b, 0, j))
            .collect()
    }

    /// Shifts the output bias so that `eval(0) == 0` holds exactly.
    pub fn zero_at_origin(&mut self) {
        let zero = vec![0.0; self.input_dim];
        let mut z = zero;
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            z = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, &b)| self.activation.apply(dot(row, &z) + b))
                .collect();
        }
        let s = dot(&self.layers[last].weights[0], &z);
        self.layers[last].bias[0] = -s;
    }

    /// Checks the Lyapunov precondition `V(0) = 0` within `tol`.
    pub fn check_origin(&self, tol: f64) -> Result<(), PwaError> {
        let v0 = self.eval(&vec![0.0; self.input_dim]);
        if v0.abs() > tol {
            return Err(PwaError::NonzeroAtOrigin(v0));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim() * (l.in_dim() + 1)).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for row in &l.weights {
                p.extend_from_slice(row);
            }
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut it = p.iter().copied();
        for l in &mut self.layers {
            for row in &mut l.weights {
                for w in row.iter_mut() {
                    *w = it.next().unwrap();
                }
            }
            for b in &mut l.bias {
                *b = it.next().unwrap();
            }
        }
    }

    /// Output value; accumulates `scale · ∂out/∂params` into `grad`.
    pub fn backprop(&self, x: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.num_params());
        let last = self.layers.len() - 1;
        // forward with caches
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut slopes: Vec<Vec<f64>> = Vec::with_capacity(last);
        let mut z = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre: Vec<f64> = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, &b)| dot(row, &z) + b)
                .collect();
            inputs.push(std::mem::take(&mut z));
            if l < last {
                let s: Vec<f64> = pre
                    .iter()
                    .map(|&p| if p > 0.0 { 1.0 } else { self.activation.inactive_slope() })
                    .collect();
                z = pre.iter().zip(&s).map(|(p, s)| p * s).collect();
                slopes.push(s);
            } else {
                z = pre;
            }
        }
        let out = z[0];
        // offsets of each layer's block in the flat parameter vector
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.out_dim() * (l.in_dim() + 1);
        }
        let mut delta = vec![scale];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &inputs[l];
            let (nin, base) = (layer.in_dim(), offsets[l]);
            for (i, &di) in delta.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                let wrow = &mut grad[base + i * nin..base + (i + 1) * nin];
                for (g, &v) in wrow.iter_mut().zip(input) {
                    *g += di * v;
                }
                grad[base + layer.out_dim() * nin + i] += di;
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; nin];
            for (i, &di) in delta.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&layer.weights[i]) {
                    *p += di * w;
                }
            }
            for (p, s) in prev.iter_mut().zip(&slopes[l - 1]) {
                *p *= s;
            }
            delta = prev;
        }
        out
    }
}

pub(crate) fn pre_activation_plane(
    normal: &[f64],
    constant: f64,
    layer: usize,
    neuron: usize,
) -> Result<Hyperplane, PwaError> {
    let scale = normal.iter().fold(constant.abs(), |m, v| m.max(v.abs())).max(1.0);
    if normal.iter().all(|v| v.abs() <= 1e-14 * scale) {
        return Err(PwaError::Degenerate {
            layer,
            neuron,
            constant,
        });
    }
    Ok(Hyperplane {
        normal: normal.to_vec(),
        offset: -constant,
    })
}

/// Linear map `r ↦ E·r` from references to equilibrium states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMap {
    /// `state_dim × reference_dim`, row-major.
    pub matrix: Vec<Vec<f64>>,
}

impl ReferenceMap {
    pub fn new(matrix: Vec<Vec<f64>>) -> Result<Self, PwaError> {
        let nr = matrix.first().map_or(0, |r| r.len());
        if matrix.is_empty() || matrix.iter().any(|r| r.len() != nr) {
            return Err(PwaError::Invalid(
                "reference map must be a non-empty rectangular matrix".into(),
            ));
        }
        Ok(ReferenceMap { matrix })
    }

    /// `E = 0` with the given shape.
    pub fn zero(state_dim: usize, reference_dim: usize) -> Self {
        ReferenceMap {
            matrix: vec![vec![0.0; reference_dim]; state_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn reference_dim(&self) -> usize {
        self.matrix[0].len()
    }

    /// Equilibrium `x̄_r = E·r`.
    pub fn equilibrium(&self, r: &[f64]) -> Vec<f64> {
        self.matrix.iter().map(|row| dot(row, r)).collect()
    }

    /// `x - E·r`
    pub fn shift(&self, x: &[f64], r: &[f64]) -> Vec<f64> {
        x.iter().zip(self.equilibrium(r)).map(|(a, b)| a - b).collect()
    }
}

/// Reference-dependent value `V(x, r) = V'(x - E·r)`.
pub fn rdlf_value(net: &PwaNetwork, emap: &ReferenceMap, x: &[f64], r: &[f64]) -> Result<f64, PwaError> {
    if emap.state_dim() != net.input_dim() {
        return Err(PwaError::DimensionMismatch {
            expected: net.input_dim(),
            found: emap.state_dim(),
        });
    }
    if r.len() != emap.reference_dim() {
        return Err(PwaError::DimensionMismatch {
            expected: emap.reference_dim(),
            found: r.len(),
        });
    }
    net.check_dim(x)?;
    Ok(net.eval(&emap.shift(x, r)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn abs_net() -> PwaNetwork {
        PwaNetwork::new(
            1,
            vec![
                Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0]),
                Layer::new(vec![vec![1.0, 1.0]], vec![0.0]),
            ],
            Activation::Relu,
        )
        .unwrap()
    }

    pub(crate) fn random_net(widths: &[usize], input: usize, seed: u64, bias: bool) -> PwaNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = input;
        for &w in widths.iter().chain(std::iter::once(&1)) {
            let weights = (0..w)
                .map(|_| (0..prev).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let b = (0..w)
                .map(|_| if bias { rng.gen_range(-0.5..0.5) } else { 0.0 })
                .collect();
            layers.push(Layer::new(weights, b));
            prev = w;
        }
        PwaNetwork::new(input, layers, Activation::Relu).unwrap()
    }

    /// Straight-line evaluator kept separate from `eval`.
    fn reference_forward(net: &PwaNetwork, x: &[f64]) -> f64 {
        let mut z: Vec<f64> = x.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim()];
            for i in 0..layer.out_dim() {
                let mut s = layer.bias[i];
                for k in 0..layer.in_dim() {
                    s += layer.weights[i][k] * z[k];
                }
                out[i] = if l + 1 < n { s.max(0.0) } else { s };
            }
            z = out;
        }
        z[0]
    }

    #[test]
    fn abs_values() {
        let net = abs_net();
        assert!((net.forward(&[-0.3]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(net.forward(&[0.0]).unwrap(), 0.0);
        assert_eq!(net.activation_pattern(&[0.5]).unwrap().layers, vec![vec![true, false]]);
        assert_eq!(net.activation_pattern(&[0.0]).unwrap().layers, vec![vec![false, false]]);
        let p = net
            .affine_piece(&ActivationPattern {
                layers: vec![vec![true, false]],
            })
            .unwrap();
        assert_eq!((p.c.clone(), p.d), (vec![1.0], 0.0));
        let p = net
            .affine_piece(&ActivationPattern {
                layers: vec![vec![false, false]],
            })
            .unwrap();
        assert_eq!((p.c.clone(), p.d), (vec![0.0], 0.0));
        let h = net.neuron_hyperplane(&[], 0, 0).unwrap();
        assert_eq!((h.normal.clone(), h.offset), (vec![1.0], 0.0));
    }

    #[test]
    fn dimension_errors() {
        let net = abs_net();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(PwaError::DimensionMismatch { .. })
        ));
        assert!(PwaNetwork::new(2, vec![Layer::new(vec![vec![1.0]], vec![0.0])], Activation::Relu).is_err());
    }

    #[test]
    fn zero_bias_vanishes_at_origin() {
        let net = random_net(&[6, 5], 3, 11, false);
        assert_eq!(net.forward(&[0.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn forward_matches_reference_evaluator() {
        let net = random_net(&[8], 2, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            assert!((net.eval(&x) - reference_forward(&net, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn first_layer_plane_ignores_prefix() {
        let net = random_net(&[4, 4], 2, 9, true);
        let h = net.neuron_hyperplane(&[], 0, 2).unwrap();
        let l0 = &net.layers()[0];
        assert_eq!(h.normal, l0.weights[2]);
        assert_eq!(h.offset, -l0.bias[2]);
    }

    #[test]
    fn second_layer_plane_matches_theta_product() {
        // 2-2-2-1 network, prefix (1, 1): the pre-activation is F2·(F1 x + b1) + b2.
        let l1 = Layer::new(vec![vec![1.0, 2.0], vec![-0.5, 1.5]], vec![0.1, -0.2]);
        let l2 = Layer::new(vec![vec![0.3, -1.0], vec![2.0, 0.5]], vec![0.05, 0.4]);
        let l3 = Layer::new(vec![vec![1.0, 1.0]], vec![0.0]);
        let net = PwaNetwork::new(2, vec![l1, l2, l3], Activation::Relu).unwrap();
        // Θ-product oracle: θ_j^(2) · Λ^(1) Θ^(1), homogeneous 3-vectors
        let theta1 = [[1.0, 2.0, 0.1], [-0.5, 1.5, -0.2], [0.0, 0.0, 1.0]];
        let theta2_row = [0.3, -1.0, 0.05];
        let mut prod = [0.0; 3];
        for k in 0..3 {
            for (i, t) in theta2_row.iter().enumerate() {
                prod[k] += t * theta1[i][k];
            }
        }
        let h = net.neuron_hyperplane(&[vec![true, true]], 1, 0).unwrap();
        assert!((h.normal[0] - prod[0]).abs() < 1e-15);
        assert!((h.normal[1] - prod[1]).abs() < 1e-15);
        assert!((h.offset + prod[2]).abs() < 1e-15);
        // prefix (0, 0) kills the input dependence entirely
        assert!(matches!(
            net.neuron_hyperplane(&[vec![false, false]], 1, 0),
            Err(PwaError::Degenerate { .. })
        ));
    }

    #[test]
    fn pattern_bits_match_recomputed_signs() {
        let net = random_net(&[4, 4], 2, 21, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let ap = net.activation_pattern(&x).unwrap();
            for l in 0..2 {
                let map = net.layer_pre_activation_map(&ap.layers, l).unwrap();
                for j in 0..4 {
                    let z = dot(&map.matrix[j], &x) + map.offset[j];
                    assert_eq!(ap.layers[l][j], z > 0.0);
                }
            }
        }
    }

    #[test]
    fn leaky_pieces_agree_with_forward() {
        let mut net = random_net(&[5, 3], 2, 8, true);
        net.activation = Activation::LeakyRelu(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let piece = net.affine_piece(&net.activation_pattern(&x).unwrap()).unwrap();
            assert!((piece.eval(&x) - net.eval(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_at_origin_is_exact() {
        let mut net = random_net(&[7, 3], 2, 4, true);
        net.zero_at_origin();
        assert_eq!(net.eval(&[0.0, 0.0]), 0.0);
        assert!(net.check_origin(1e-8).is_ok());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = random_net(&[5, 4], 3, 17, true);
        let x = [0.3, -0.2, 0.7];
        let mut g = vec![0.0; net.num_params()];
        net.backprop(&x, 1.0, &mut g);
        let p0 = net.params();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut n2 = net.clone();
            let mut p = p0.clone();
            p[i] += h;
            n2.set_params(&p);
            let up = n2.eval(&x);
            p[i] -= 2.0 * h;
            n2.set_params(&p);
            let dn = n2.eval(&x);
            assert!((g[i] - (up - dn) / (2.0 * h)).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn rdlf_shift() {
        let net = random_net(&[6], 2, 12, false);
        let emap = ReferenceMap::new(vec![vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(rdlf_value(&net, &emap, &[0.4, 0.0], &[0.4]).unwrap(), 0.0);
        let x = [0.3, -0.1];
        assert_eq!(rdlf_value(&net, &emap, &x, &[0.0]).unwrap(), net.eval(&x));
    }
}
