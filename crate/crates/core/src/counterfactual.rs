//! Twin-branch counterfactual classifier.
//!
//! Classifier A maps real features to labels. Classifier B is trained on
//! generated features and its logits `l` are debiased as `(1 - a) l - c`,
//! where `a` (clamped to `[0, 1]`) and `c` are trained scalars. The two
//! branches are fused with variance weights,
//! `fused = (var_real * fake_out + var_fake * real_out) / (var_real + var_fake)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrainingSet;
use crate::error::{Error, Result};
use crate::generator::FakeFeatureBatch;
use crate::numerics::{
    self, softmax_cross_entropy, HasParams, Linear, Matrix, OptimizerSpec, Parameter,
};

/// Linear map from features to class logits (a 1x1 convolution at feature level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub linear: Linear,
}

/// Classifier A, fed with real features.
pub type ClassifierRl = LinearClassifier;
/// Classifier B, fed with generated features.
pub type ClassifierFl = LinearClassifier;

impl LinearClassifier {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::with_std(
                feature_dim,
                n_classes,
                (1.0 / feature_dim as f64).sqrt() * 0.1,
                rng,
            ),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.linear.forward(x)
    }

    pub fn backward(&mut self, x: &Matrix, grad_logits: &Matrix) -> Result<()> {
        self.linear.backward(x, grad_logits).map(|_| ())
    }
}

impl HasParams for LinearClassifier {
    fn params(&self) -> Vec<&Parameter> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.linear.params_mut()
    }
}

/// The trainable debiasing scalars. Both start at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualParams {
    pub a_raw: Parameter,
    /// Stands for the sum `c1 + c2` of the reference constants.
    pub c_total: Parameter,
}

impl Default for CounterfactualParams {
    fn default() -> Self {
        Self::new(0.0, 0.0)
    }
}

impl CounterfactualParams {
    pub fn new(a_raw: f64, c_total: f64) -> Self {
        Self {
            a_raw: Parameter::scalar(a_raw),
            c_total: Parameter::scalar(c_total),
        }
    }

    /// Effective `a = clamp(a_raw, 0, 1)`.
    pub fn a(&self) -> f64 {
        self.a_raw.value.get(0, 0).clamp(0.0, 1.0)
    }

    pub fn c(&self) -> f64 {
        self.c_total.value.get(0, 0)
    }

    fn a_slope(&self) -> f64 {
        let raw = self.a_raw.value.get(0, 0);
        if (0.0..=1.0).contains(&raw) {
            1.0
        } else {
            0.0
        }
    }
}

impl HasParams for CounterfactualParams {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.a_raw, &self.c_total]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.a_raw, &mut self.c_total]
    }
}

/// Logits under void inputs: every entry equals `c_total`.
pub fn reference_logits(params: &CounterfactualParams, rows: usize, n_classes: usize) -> Matrix {
    Matrix::filled(rows, n_classes, params.c())
}

/// `(1 - a) · logits - c`.
pub fn counterfactual_transform(logits: &Matrix, params: &CounterfactualParams) -> Matrix {
    let (a, c) = (params.a(), params.c());
    logits.map(|l| (1.0 - a) * l - c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectDecomposition {
    pub te: Matrix,
    pub nde: Matrix,
    pub nie: Matrix,
    pub out_fl: Matrix,
}

/// Effect decomposition of already computed classifier-B logits.
///
/// With `L` the full-treatment logits and the reference `c`: `te = L - c`,
/// `nde = nie = a L - c`, and `out_fl = (1 - a) L - c`.
pub fn decompose_logits(full: &Matrix, params: &CounterfactualParams) -> EffectDecomposition {
    let (a, c) = (params.a(), params.c());
    let reference = reference_logits(params, full.rows(), full.cols());
    let te = full.sub(&reference).expect("same shape");
    let scaled = full.scale(a).sub(&reference).expect("same shape");
    EffectDecomposition {
        te,
        nde: scaled.clone(),
        nie: scaled,
        out_fl: full.map(|l| (1.0 - a) * l - c),
    }
}

pub fn effect_decomposition(
    fl: &ClassifierFl,
    fake_features: &Matrix,
    params: &CounterfactualParams,
) -> Result<EffectDecomposition> {
    Ok(decompose_logits(&fl.logits(fake_features)?, params))
}

/// True when `TE != NDE + NIE` somewhere, beyond 1e-9.
pub fn check_te_inequality(d: &EffectDecomposition) -> bool {
    d.te.data()
        .iter()
        .zip(d.nde.data())
        .zip(d.nie.data())
        .any(|((te, nde), nie)| (te - (nde + nie)).abs() > 1e-9)
}

/// Convex fusion weights: `var_r` weighs the fake branch, `var_f` the real one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub fl: f64,
    pub rl: f64,
}

impl FusionWeights {
    pub fn from_variances(var_r: f64, var_f: f64) -> Result<Self> {
        if !(var_r >= 0.0 && var_f >= 0.0) || !var_r.is_finite() || !var_f.is_finite() {
            return Err(Error::Fusion(format!(
                "variances must be finite and non-negative, got var(R)={var_r} var(F)={var_f}"
            )));
        }
        let total = var_r + var_f;
        if total <= 0.0 {
            return Err(Error::Fusion("var(R) + var(F) = 0".into()));
        }
        let fl = var_r / total;
        Ok(Self { fl, rl: 1.0 - fl })
    }
}

pub fn fuse(out_fl: &Matrix, out_rl: &Matrix, var_r: f64, var_f: f64) -> Result<Matrix> {
    let w = FusionWeights::from_variances(var_r, var_f)?;
    fuse_weighted(out_fl, out_rl, w)
}

fn fuse_weighted(out_fl: &Matrix, out_rl: &Matrix, w: FusionWeights) -> Result<Matrix> {
    if w.rl == 0.0 {
        // exact pass-through; 0 * inf style surprises stay out of the result
        if out_fl.shape() != out_rl.shape() {
            return Err(Error::Dimension(format!(
                "fusing {:?} with {:?}",
                out_fl.shape(),
                out_rl.shape()
            )));
        }
        return Ok(out_fl.clone());
    }
    out_fl.zip_map(out_rl, |f, r| w.fl * f + w.rl * r)
}

/// Population variance pooled over every entry of the batch.
pub fn batch_variance(features: &Matrix) -> Result<f64> {
    if features.rows() < 2 {
        return Err(Error::Invalid(format!(
            "variance needs at least 2 rows, got {}",
            features.rows()
        )));
    }
    let n = features.data().len() as f64;
    let mean = features.sum() / n;
    Ok(features
        .data()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointLoss {
    /// Fake-branch + real-branch + fused loss.
    pub total: f64,
    pub fl: f64,
    pub rl: f64,
    pub fused: f64,
    pub grad_out_fl: Matrix,
    pub grad_out_rl: Matrix,
}

/// Sum of three cross-entropies, with gradients routed back through the fusion.
pub fn joint_loss(
    out_fl: &Matrix,
    out_rl: &Matrix,
    weights: FusionWeights,
    targets: &[usize],
) -> Result<JointLoss> {
    let fused = fuse_weighted(out_fl, out_rl, weights)?;
    let (fl, g_fl) = softmax_cross_entropy(out_fl, targets)?;
    let (rl, g_rl) = softmax_cross_entropy(out_rl, targets)?;
    let (fused_loss, g_h) = softmax_cross_entropy(&fused, targets)?;
    Ok(JointLoss {
        total: fl + rl + fused_loss,
        fl,
        rl,
        fused: fused_loss,
        grad_out_fl: g_fl.add(&g_h.scale(weights.fl))?,
        grad_out_rl: g_rl.add(&g_h.scale(weights.rl))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub logits: Matrix,
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Both classifiers, the debiasing scalars and the variances frozen at the end of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualModel {
    pub classifier_rl: ClassifierRl,
    pub classifier_fl: ClassifierFl,
    pub params: CounterfactualParams,
    pub var_r: f64,
    pub var_f: f64,
}

/// What a training step should touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Rl,
    Fl,
    Fusion,
    Joint,
}

impl CounterfactualModel {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            classifier_rl: LinearClassifier::new(feature_dim, n_classes, rng),
            classifier_fl: LinearClassifier::new(feature_dim, n_classes, rng),
            params: CounterfactualParams::default(),
            var_r: 1.0,
            var_f: 1.0,
        }
    }

    pub fn out_rl(&self, x: &Matrix) -> Result<Matrix> {
        self.classifier_rl.logits(x)
    }

    pub fn out_fl(&self, x: &Matrix) -> Result<Matrix> {
        Ok(counterfactual_transform(
            &self.classifier_fl.logits(x)?,
            &self.params,
        ))
    }

    /// Loss of one branch (or the full joint loss) on `x`, accumulating gradients.
    ///
    /// Variances enter through `weights` as constants.
    pub fn loss_and_backward(
        &mut self,
        branch: Branch,
        x: &Matrix,
        targets: &[usize],
        weights: FusionWeights,
    ) -> Result<f64> {
        let l_fl = self.classifier_fl.logits(x)?;
        let out_fl = counterfactual_transform(&l_fl, &self.params);
        let out_rl = self.classifier_rl.logits(x)?;
        let (loss, g_fl, g_rl) = match branch {
            Branch::Rl => {
                let (l, g) = softmax_cross_entropy(&out_rl, targets)?;
                (l, None, Some(g))
            }
            Branch::Fl => {
                let (l, g) = softmax_cross_entropy(&out_fl, targets)?;
                (l, Some(g), None)
            }
            Branch::Fusion => {
                let fused = fuse_weighted(&out_fl, &out_rl, weights)?;
                let (l, g) = softmax_cross_entropy(&fused, targets)?;
                (l, Some(g.scale(weights.fl)), Some(g.scale(weights.rl)))
            }
            Branch::Joint => {
                let j = joint_loss(&out_fl, &out_rl, weights, targets)?;
                (j.total, Some(j.grad_out_fl), Some(j.grad_out_rl))
            }
        };
        if let Some(g) = g_rl {
            self.classifier_rl.backward(x, &g)?;
        }
        if let Some(g) = g_fl {
            let a = self.params.a();
            self.classifier_fl.backward(x, &g.scale(1.0 - a))?;
            // d out_fl / d a = -L, d out_fl / d c = -1
            let ga = -g.hadamard(&l_fl)?.sum() * self.params.a_slope();
            let gc = -g.sum();
            self.params
                .a_raw
                .accumulate_grad(&Matrix::filled(1, 1, ga))?;
            self.params
                .c_total
                .accumulate_grad(&Matrix::filled(1, 1, gc))?;
        }
        Ok(loss)
    }

    pub fn fusion_weights(&self) -> Result<FusionWeights> {
        FusionWeights::from_variances(self.var_r, self.var_f)
    }

    pub fn predict(&self, features: &Matrix) -> Result<Prediction> {
        if features.cols() != self.classifier_rl.feature_dim() {
            return Err(Error::Dimension(format!(
                "features of length {} for a model expecting {}",
                features.cols(),
                self.classifier_rl.feature_dim()
            )));
        }
        let fused = fuse(
            &self.out_fl(features)?,
            &self.out_rl(features)?,
            self.var_r,
            self.var_f,
        )?;
        Ok(Prediction {
            classes: argmax_rows(&fused),
            logits: fused,
        })
    }
}

impl HasParams for CounterfactualModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.classifier_rl.params();
        p.extend(self.classifier_fl.params());
        p.extend(self.params.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.classifier_rl.params_mut();
        p.extend(self.classifier_fl.params_mut());
        p.extend(self.params.params_mut());
        p
    }
}

/// The confounded control: one classifier trained on real seen plus fake unseen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub classifier: LinearClassifier,
}

impl BaselineModel {
    pub fn predict(&self, features: &Matrix) -> Result<Prediction> {
        let logits = self.classifier.logits(features)?;
        Ok(Prediction {
            classes: argmax_rows(&logits),
            logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Optimizer for `a_raw` and `c_total`.
    pub scalar_optimizer: OptimizerSpec,
    /// Keep `a` fixed at its initial value (ablation).
    pub freeze_a: bool,
    /// Which batch the fusion step trains on.
    pub fusion_batch: FusionBatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionBatch {
    Real,
    #[default]
    Fake,
    Both,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerSpec::sgd_classifier(),
            scalar_optimizer: OptimizerSpec::sgd_classifier(),
            freeze_a: false,
            fusion_batch: FusionBatch::Fake,
        }
    }
}

impl ClassifierTraining {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.scalar_optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(
                "classifier batch_size must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

fn rows_of<T: TrainingSet + ?Sized>(data: &T, indices: &[usize]) -> Result<(Matrix, Vec<usize>)> {
    let samples: Vec<_> = indices.iter().map(|&i| data.sample(i)).collect();
    let m = Matrix::from_rows(
        &samples
            .iter()
            .map(|s| s.values.as_slice())
            .collect::<Vec<_>>(),
    )?;
    Ok((m, samples.iter().map(|s| s.class_id).collect()))
}

/// Per-epoch mean losses of a counterfactual training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub rl: Vec<f64>,
    pub fl: Vec<f64>,
    pub fused: Vec<f64>,
}

impl TrainingCurve {
    /// Real-branch + fake-branch + fused loss per epoch.
    pub fn total(&self) -> Vec<f64> {
        self.rl
            .iter()
            .zip(&self.fl)
            .zip(&self.fused)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

/// Trains both branches and the fusion.
///
/// Each step (1) updates classifier A on a batch of real seen features,
/// (2) updates classifier B on a batch of fake features through the
/// counterfactual transform, and (3) updates both classifiers and the two
/// scalars on the fusion loss over the batch chosen by `fusion_batch` (the fake
/// batch by default), with variances taken from the current batches. The variances stored in the returned model
/// are the averages over the final epoch.
pub fn train_counterfactual<T, R>(
    data: &T,
    fakes: &FakeFeatureBatch,
    settings: &ClassifierTraining,
    rng: &mut R,
) -> Result<(CounterfactualModel, TrainingCurve)>
where
    T: TrainingSet + ?Sized,
    R: Rng + ?Sized,
{
    settings.validate()?;
    let n = data.n_classes();
    let l = data.feature_dim();
    let mut real_order = data.seen_indices();
    if real_order.len() < 2 || fakes.len() < 2 {
        return Err(Error::Invalid(
            "counterfactual training needs at least 2 real and 2 fake samples".into(),
        ));
    }
    if fakes.features.cols() != l {
        return Err(Error::Dimension(format!(
            "fake features of length {} for real features of length {l}",
            fakes.features.cols()
        )));
    }
    let mut model = CounterfactualModel::new(l, n, rng);
    let mut curve = TrainingCurve::default();
    let bs = settings.batch_size;
    let mut fake_order: Vec<usize> = (0..fakes.len()).collect();
    let mut fake_cursor = fakes.len();
    let steps_per_epoch = real_order.len().div_ceil(bs);

    for epoch in 0..settings.epochs {
        real_order.shuffle(rng);
        let (mut sum_rl, mut sum_fl, mut sum_h) = (0.0, 0.0, 0.0);
        let (mut sum_var_r, mut sum_var_f) = (0.0, 0.0);
        let mut steps = 0usize;
        for chunk in real_order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let (x_real, y_real) = rows_of(data, chunk)?;
            let mut fake_idx = Vec::with_capacity(bs);
            while fake_idx.len() < bs.min(fakes.len()) {
                if fake_cursor == fakes.len() {
                    fake_order.shuffle(rng);
                    fake_cursor = 0;
                }
                fake_idx.push(fake_order[fake_cursor]);
                fake_cursor += 1;
            }
            let x_fake = fakes.features.select_rows(&fake_idx);
            let y_fake: Vec<usize> = fake_idx.iter().map(|&i| fakes.class_ids[i]).collect();
            let var_r = batch_variance(&x_real)?;
            let var_f = batch_variance(&x_fake)?;
            let weights = FusionWeights::from_variances(var_r, var_f)?;

            // (1) classifier A on real features
            model.zero_grad();
            let loss_rl = model.loss_and_backward(Branch::Rl, &x_real, &y_real, weights)?;
            numerics::step(&mut model.classifier_rl.params_mut(), &settings.optimizer);

            // (2) classifier B on fake features
            model.zero_grad();
            let loss_fl = model.loss_and_backward(Branch::Fl, &x_fake, &y_fake, weights)?;
            numerics::step(&mut model.classifier_fl.params_mut(), &settings.optimizer);

            // (3) fusion
            let (x_h, y_h) = match settings.fusion_batch {
                FusionBatch::Real => (x_real, y_real),
                FusionBatch::Fake => (x_fake, y_fake),
                FusionBatch::Both => {
                    let mut y = y_real;
                    y.extend(&y_fake);
                    (x_real.vstack(&x_fake)?, y)
                }
            };
            model.zero_grad();
            let loss_h = model.loss_and_backward(Branch::Fusion, &x_h, &y_h, weights)?;
            numerics::step(&mut model.classifier_rl.params_mut(), &settings.optimizer);
            numerics::step(&mut model.classifier_fl.params_mut(), &settings.optimizer);
            if settings.freeze_a {
                numerics::step(&mut [&mut model.params.c_total], &settings.scalar_optimizer);
            } else {
                numerics::step(&mut model.params.params_mut(), &settings.scalar_optimizer);
            }

            for (name, v) in [
                ("real-branch loss", loss_rl),
                ("fake-branch loss", loss_fl),
                ("fused loss", loss_h),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{name} at epoch {epoch}")));
                }
            }
            sum_rl += loss_rl;
            sum_fl += loss_fl;
            sum_h += loss_h;
            sum_var_r += var_r;
            sum_var_f += var_f;
            steps += 1;
        }
        debug_assert!(steps <= steps_per_epoch);
        let k = steps.max(1) as f64;
        curve.rl.push(sum_rl / k);
        curve.fl.push(sum_fl / k);
        curve.fused.push(sum_h / k);
        model.var_r = sum_var_r / k;
        model.var_f = sum_var_f / k;
    }
    Ok((model, curve))
}

/// Trains the confounded control on real seen and fake unseen features.
pub fn train_baseline<T, R>(
    data: &T,
    fakes: &FakeFeatureBatch,
    settings: &ClassifierTraining,
    rng: &mut R,
) -> Result<(BaselineModel, Vec<f64>)>
where
    T: TrainingSet + ?Sized,
    R: Rng + ?Sized,
{
    settings.validate()?;
    let n = data.n_classes();
    let l = data.feature_dim();
    let unseen = data.unseen_ids();
    let fake_rows: Vec<usize> = (0..fakes.len())
        .filter(|&i| unseen.contains(&fakes.class_ids[i]))
        .collect();
    // pool entries: Ok(real index) or Err(fake row)
    let mut pool: Vec<std::result::Result<usize, usize>> =
        data.seen_indices().into_iter().map(Ok).collect();
    pool.extend(fake_rows.iter().map(|&i| Err(i)));
    if pool.len() < 2 {
        return Err(Error::Invalid(
            "baseline training needs at least 2 samples".into(),
        ));
    }
    let mut model = BaselineModel {
        classifier: LinearClassifier::new(l, n, rng),
    };
    let mut curve = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        pool.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in pool.chunks(settings.batch_size) {
            let mut x = Matrix::zeros(chunk.len(), l);
            let mut y = Vec::with_capacity(chunk.len());
            for (r, entry) in chunk.iter().enumerate() {
                match *entry {
                    Ok(i) => {
                        let s = data.sample(i);
                        x.row_mut(r).copy_from_slice(&s.values);
                        y.push(s.class_id);
                    }
                    Err(i) => {
                        x.row_mut(r).copy_from_slice(fakes.features.row(i));
                        y.push(fakes.class_ids[i]);
                    }
                }
            }
            model.classifier.zero_grad();
            let logits = model.classifier.logits(&x)?;
            let (loss, g) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("baseline loss at epoch {epoch}")));
            }
            model.classifier.backward(&x, &g)?;
            numerics::step(&mut model.classifier.params_mut(), &settings.optimizer);
            total += loss;
            steps += 1;
        }
        curve.push(total / steps.max(1) as f64);
    }
    Ok((model, curve))
}
