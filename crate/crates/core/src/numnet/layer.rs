use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::optim::Tensor;
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Selu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Selu => "selu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "selu" => Some(Activation::Selu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    preactivation: Matrix,
}

/// Fully connected layer `y = act(x·Wᵀ + b)` with weight of shape `out × in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
    grad_weight: Matrix,
    grad_bias: Vec<f64>,
    cache: Option<LayerCache>,
}

impl DenseLayer {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = Matrix::random_uniform(out_dim, in_dim, bound, rng);
        Self::assemble(weight, vec![0.0; out_dim], activation)
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("DenseLayer bias", weight.rows(), bias.len()));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("DenseLayer parameters".into()));
        }
        Ok(Self::assemble(weight, bias, activation))
    }

    fn assemble(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Self {
        let grad_weight = Matrix::zeros(weight.rows(), weight.cols());
        let grad_bias = vec![0.0; bias.len()];
        Self {
            weight,
            bias,
            activation,
            grad_weight,
            grad_bias,
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn grad_weight(&self) -> &Matrix {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    fn preactivation(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("dense layer input", self.in_dim(), x.cols()));
        }
        let mut z = x.matmul_t(&self.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn activate(&self, z: &Matrix) -> Result<Matrix> {
        let mut y = z.clone();
        for v in y.as_mut_slice() {
            *v = self.activation.apply(*v);
        }
        if !y.is_finite() {
            return Err(Error::NonFinite("dense layer output".into()));
        }
        Ok(y)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let z = self.preactivation(x)?;
        let y = self.activate(&z)?;
        self.cache = Some(LayerCache {
            input: x.clone(),
            preactivation: z,
        });
        Ok(y)
    }

    /// Forward pass without touching the cache.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.preactivation(x)?;
        self.activate(&z)
    }

    /// Overwrites the gradient buffers from `upstream` (dL/dy) and returns dL/dx.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if upstream.shape() != cache.preactivation.shape() {
            return Err(Error::shape(
                "dense layer upstream gradient",
                format!("{:?}", cache.preactivation.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut dz = upstream.clone();
        for (d, &z) in dz.as_mut_slice().iter_mut().zip(cache.preactivation.as_slice()) {
            *d *= self.activation.derivative(z);
        }
        self.grad_weight = dz.t_matmul(&cache.input)?;
        self.grad_bias.fill(0.0);
        for r in 0..dz.rows() {
            for (g, d) in self.grad_bias.iter_mut().zip(dz.row(r)) {
                *g += d;
            }
        }
        dz.matmul(&self.weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn tensors_mut(&mut self) -> [Tensor<'_>; 2] {
        [
            Tensor::new(self.weight.as_mut_slice(), self.grad_weight.as_mut_slice()),
            Tensor::new(&mut self.bias, &mut self.grad_bias),
        ]
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp", "at least one layer required"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    format!("mlp layer {} input", i + 1),
                    w[0].out_dim(),
                    w[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `dims = [in, h1, ..., out]`; `hidden` between layers, `output` on the last.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("mlp dims", format!("{dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("mlp input", self.in_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("mlp input", self.in_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(DenseLayer::zero_grad);
    }

    pub fn tensors_mut(&mut self) -> Vec<Tensor<'_>> {
        self.layers
            .iter_mut()
            .flat_map(DenseLayer::tensors_mut)
            .collect()
    }

    /// Flattened copy of every parameter, in layer order (weight then bias).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Flattened gradient buffers, aligned with [`Mlp::parameters`].
    pub fn gradients(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.grad_weight.as_slice());
            out.extend_from_slice(&l.grad_bias);
        }
        out
    }

    /// Overwrites every parameter from a flat slice laid out like [`Mlp::parameters`].
    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum();
        if flat.len() != total {
            return Err(Error::shape("Mlp::set_parameters", total, flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut layer =
            DenseLayer::from_parts(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity)
                .unwrap();
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 4.0]);

        let up = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let dx = layer.backward(&up).unwrap();
        assert_eq!(dx.as_slice(), &[1.0, 0.0]);
        // cached_inputᵀ · upstream, stored as out × in
        assert_eq!(layer.grad_weight().as_slice(), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(layer.grad_bias(), &[1.0, 0.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let w = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        let mut layer = DenseLayer::from_parts(w, vec![0.0, 0.0], Activation::Relu).unwrap();
        let y = layer.forward(&Matrix::from_rows(&[[2.0]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn selu_fixes_origin() {
        let mut layer =
            DenseLayer::from_parts(Matrix::zeros(3, 4), vec![0.0; 3], Activation::Selu).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0, 0.5]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().as_slice(), &[0.0; 3]);
    }

    #[test]
    fn selu_is_continuous_at_zero() {
        let eps = 1e-12;
        let left = Activation::Selu.apply(-eps);
        let right = Activation::Selu.apply(eps);
        assert!((left - right).abs() < 1e-10);
        assert_eq!(Activation::Selu.apply(0.0), 0.0);
    }

    #[test]
    fn backward_requires_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = DenseLayer::new(2, 2, Activation::Tanh, &mut rng);
        let err = layer.backward(&Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn backward_checks_batch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = DenseLayer::new(2, 2, Activation::Tanh, &mut rng);
        layer.forward(&Matrix::zeros(3, 2)).unwrap();
        assert!(layer.backward(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mlp = Mlp::new(&[3, 5, 2], Activation::Selu, Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        mlp.forward(&x).unwrap();
        let dx = mlp.backward(&Matrix::zeros(4, 2)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(mlp.gradients().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(&[3, 4, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let err = mlp.forward(&Matrix::zeros(1, 2)).unwrap_err();
        assert!(err.to_string().contains('3') && err.to_string().contains('2'));
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[4, 8, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Matrix::random_uniform(5, 4, 2.0, &mut rng);
        let a = mlp.forward(&x).unwrap();
        let b = mlp.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, mlp.infer(&x).unwrap());
    }

    #[test]
    fn init_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = DenseLayer::new(16, 8, Activation::Relu, &mut rng);
        let bound = 0.25;
        assert!(layer.weight().as_slice().iter().all(|w| w.abs() <= bound));
        assert!(layer.bias().iter().all(|&b| b == 0.0));
    }
}
