use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use survfuse::numnet::{Activation, DenseLayer, Matrix, Mlp};
use survfuse::smoothing::{mix_samples, CellProfile};

const H: f64 = 1e-5;

/// Scalar head `Σ c_ij · y_ij` with fixed random coefficients.
fn head(y: &Matrix, c: &Matrix) -> f64 {
    y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// ReLU and SELU change slope at zero; a perturbation of size `reach` that can
/// carry pre-activation `(k, j)` across zero leaves nothing to compare.
fn near_kink(layer: &DenseLayer, x: &Matrix, k: usize, j: usize, reach: f64) -> bool {
    if !matches!(layer.activation(), Activation::Relu | Activation::Selu) {
        return false;
    }
    let w = layer.weight().row(j);
    let z: f64 = w.iter().zip(x.row(k)).map(|(a, b)| a * b).sum::<f64>() + layer.bias()[j];
    z.abs() <= reach * (1.0 + 1e-9) + 1e-15
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Identity),
        Just(Activation::Relu),
        Just(Activation::Selu),
        Just(Activation::Tanh),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dense_layer_gradients_match_finite_differences(
        batch in 1usize..=8, din in 1usize..=16, dout in 1usize..=16,
        act in activation(), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = DenseLayer::new(din, dout, act, &mut rng);
        let x = Matrix::random_uniform(batch, din, 1.5, &mut rng);
        let c = Matrix::random_uniform(batch, dout, 1.0, &mut rng);
        let y = layer.forward(&x).unwrap();
        let _ = head(&y, &c);
        layer.backward(&c).unwrap();
        let gw = layer.grad_weight().clone();
        let gb = layer.grad_bias().to_vec();
        for idx in 0..din * dout {
            let w0 = layer.weight().as_slice()[idx];
            layer.weight_mut().as_mut_slice()[idx] = w0 + H;
            let up = head(&layer.infer(&x).unwrap(), &c);
            layer.weight_mut().as_mut_slice()[idx] = w0 - H;
            let down = head(&layer.infer(&x).unwrap(), &c);
            layer.weight_mut().as_mut_slice()[idx] = w0;
            let fd = (up - down) / (2.0 * H);
            let (j, i) = (idx / din, idx % din);
            if (0..batch).any(|k| near_kink(&layer, &x, k, j, x.get(k, i).abs() * H)) {
                continue;
            }
            prop_assert!(rel(gw.as_slice()[idx], fd) <= 1e-6, "w[{}]: {} vs {}", idx, gw.as_slice()[idx], fd);
        }
        for j in 0..dout {
            let b0 = layer.bias()[j];
            layer.bias_mut()[j] = b0 + H;
            let up = head(&layer.infer(&x).unwrap(), &c);
            layer.bias_mut()[j] = b0 - H;
            let down = head(&layer.infer(&x).unwrap(), &c);
            layer.bias_mut()[j] = b0;
            if (0..batch).any(|k| near_kink(&layer, &x, k, j, H)) {
                continue;
            }
            prop_assert!(rel(gb[j], (up - down) / (2.0 * H)) <= 1e-6);
        }
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences(batch in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::new(&[5, 7, 3], Activation::Selu, Activation::Tanh, &mut rng).unwrap();
        let mut x = Matrix::random_uniform(batch, 5, 1.0, &mut rng);
        let c = Matrix::random_uniform(batch, 3, 1.0, &mut rng);
        mlp.forward(&x).unwrap();
        let dx = mlp.backward(&c).unwrap();
        for idx in 0..batch * 5 {
            let v = x.as_slice()[idx];
            x.as_mut_slice()[idx] = v + H;
            let up = head(&mlp.infer(&x).unwrap(), &c);
            x.as_mut_slice()[idx] = v - H;
            let down = head(&mlp.infer(&x).unwrap(), &c);
            x.as_mut_slice()[idx] = v;
            prop_assert!(rel(dx.as_slice()[idx], (up - down) / (2.0 * H)) <= 1e-6);
        }
    }

    #[test]
    fn mixing_is_symmetric_and_targets_are_on_the_simplex(
        a in prop::collection::vec(0.0f64..5.0, 6),
        b in prop::collection::vec(0.0f64..5.0, 6),
        ta in 0usize..5, tb in 0usize..5,
        lambda in 0.0f64..=1.0,
    ) {
        let ca = CellProfile::new(a, ta, 5).unwrap();
        let cb = CellProfile::new(b, tb, 5).unwrap();
        let ab = mix_samples(&ca, &cb, lambda).unwrap();
        let ba = mix_samples(&cb, &ca, 1.0 - lambda).unwrap();
        for (x, y) in ab.mixed_expression.iter().zip(&ba.mixed_expression) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!(ab.target.iter().all(|t| *t >= 0.0));
        prop_assert!((ab.target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mixing_endpoints_return_the_inputs() {
    let a = CellProfile::new(vec![1.0, 2.0, 3.0], 0, 3).unwrap();
    let b = CellProfile::new(vec![1.5, 0.5, 7.0], 2, 3).unwrap();
    assert_eq!(mix_samples(&a, &b, 1.0).unwrap().mixed_expression, a.expression());
    assert_eq!(mix_samples(&a, &b, 0.0).unwrap().mixed_expression, b.expression());
    assert!(mix_samples(&a, &b, 1.5).is_err());
}
