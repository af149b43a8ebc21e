use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient and optimizer moment buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Matrix,
    #[serde(skip, default)]
    pub grad: Option<Matrix>,
    #[serde(skip, default)]
    pub(crate) state: OptimizerState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct OptimizerState {
    pub first_moment: Option<Matrix>,
    pub second_moment: Option<Matrix>,
    pub steps: u64,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        Self {
            value,
            grad: None,
            state: OptimizerState::default(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(Matrix::filled(1, 1, v))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut Matrix {
        let (r, c) = self.value.shape();
        self.grad.get_or_insert_with(|| Matrix::zeros(r, c))
    }

    pub fn grad(&self) -> Matrix {
        self.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn accumulate_grad(&mut self, g: &Matrix) -> Result<()> {
        self.grad_mut().add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that owns trainable parameters.
pub trait HasParams {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Fully-connected layer `y = x·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// He-style initialization scaled by `sqrt(2 / fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        Self::with_std(fan_in, fan_out, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Parameter::new(Matrix::from_vec(fan_in, fan_out, w).expect("sized")),
            bias: Parameter::new(Matrix::zeros(1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter gradients for `grad_out` and returns the input gradient.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        let gw = x.t_matmul(grad_out)?;
        self.weight.accumulate_grad(&gw)?;
        self.bias.accumulate_grad(&grad_out.sum_rows())?;
        grad_out.matmul_t(&self.weight.value)
    }
}

impl HasParams for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `x·W + b`, with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, weight: &Parameter, bias: &Parameter) -> Result<Matrix> {
    if x.cols() != weight.value.rows() {
        return Err(Error::Dimension(format!(
            "linear input {}x{} against weight {}x{}",
            x.rows(),
            x.cols(),
            weight.value.rows(),
            weight.value.cols()
        )));
    }
    x.matmul(&weight.value)?.add_row_broadcast(&bias.value)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Masks `grad_out` where the pre-activation was not positive.
pub fn relu_backward(pre: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    pre.zip_map(grad_out, |p, g| if p > 0.0 { g } else { 0.0 })
}

/// Row-wise softmax, max-shifted for stability.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean cross-entropy of softmax(logits) against class indices.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Invalid(format!(
            "target index {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let batch = targets.len().max(1) as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(r);
        g[t] -= 1.0;
        for v in g.iter_mut() {
            *v /= batch;
        }
    }
    let loss = loss / batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

/// Mean squared error over all entries, with gradient w.r.t. `pred`.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred.sub(target)?;
    let count = diff.data().len().max(1) as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / count;
    Ok((loss, diff.scale(2.0 / count)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_scalar() {
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let w = Parameter::new(Matrix::identity(2));
        let b = Parameter::new(Matrix::zeros(1, 2));
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 1.0]);

        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let w = Parameter::scalar(3.0);
        let b = Parameter::scalar(1.0);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[7.0]);
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::new(4, 3, &mut rng);
        let x = Matrix::from_vec(5, 4, (0..20).map(|i| (i as f64).sin()).collect()).unwrap();
        let y = layer.forward(&x).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                let mut s = layer.bias.value.get(0, c);
                for k in 0..4 {
                    s += x.get(r, k) * layer.weight.value.get(k, c);
                }
                assert!((y.get(r, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::new(4, 3, &mut rng);
        assert!(matches!(
            layer.forward(&Matrix::zeros(2, 5)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_values_and_mask() {
        let x = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(relu(&Matrix::filled(2, 2, -0.5)), Matrix::zeros(2, 2));
        let pre = Matrix::from_rows(&[[3.0, -3.0]]).unwrap();
        let g = relu_backward(&pre, &Matrix::filled(1, 2, 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_fixed_points() {
        let (l, _) = softmax_cross_entropy(&Matrix::zeros(1, 2), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) =
            softmax_cross_entropy(&Matrix::from_rows(&[[10.0, -10.0]]).unwrap(), &[0]).unwrap();
        assert!(l < 1e-4);
        assert!(matches!(
            softmax_cross_entropy(&Matrix::zeros(1, 2), &[2]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m =
            Matrix::from_vec(6, 5, (0..30).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap();
        for row in softmax(&m).row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    struct Logits(Parameter, Vec<usize>);
    impl HasParams for Logits {
        fn params(&self) -> Vec<&Parameter> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits =
                Matrix::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect())
                    .unwrap();
            let targets = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let mut model = Logits(Parameter::new(logits), targets);
            let report = finite_difference_check(
                &mut model,
                |m| {
                    let (loss, g) = softmax_cross_entropy(&m.0.value, &m.1)?;
                    m.0.accumulate_grad(&g)?;
                    Ok(loss)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4, 1e-7), "seed {seed}: {report:?}");
        }
    }

    struct Mlp {
        a: Linear,
        b: Linear,
        x: Matrix,
        y: Matrix,
    }
    impl HasParams for Mlp {
        fn params(&self) -> Vec<&Parameter> {
            let mut p = self.a.params();
            p.extend(self.b.params());
            p
        }
        fn params_mut(&mut self) -> Vec<&mut Parameter> {
            let mut p = self.a.params_mut();
            p.extend(self.b.params_mut());
            p
        }
    }

    #[test]
    fn linear_relu_mse_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let y =
                Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut model = Mlp {
                a: Linear::new(4, 5, &mut rng),
                b: Linear::new(5, 2, &mut rng),
                x,
                y,
            };
            let report = finite_difference_check(
                &mut model,
                |m| {
                    let pre = m.a.forward(&m.x)?;
                    let h = relu(&pre);
                    let out = m.b.forward(&h)?;
                    let (loss, g) = mse(&out, &m.y)?;
                    let gh = m.b.backward(&h, &g)?;
                    let gpre = relu_backward(&pre, &gh)?;
                    m.a.backward(&m.x, &gpre)?;
                    Ok(loss)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4, 1e-7), "seed {seed}: {report:?}");
        }
    }
}
