//! Embedding-to-feature generator (the W → F mapping).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ClassEmbedding, TrainingSet};
use crate::error::{Error, Result};
use crate::numerics::{
    self, mse, relu, relu_backward, HasParams, Linear, Matrix, OptimizerSpec, Parameter,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeOrigin {
    MlpGenerator,
    GcnImputed,
    Mixed,
}

/// Generated feature rows with their class ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FakeFeatureBatch {
    pub features: Matrix,
    pub class_ids: Vec<usize>,
    pub origin: FakeOrigin,
}

impl FakeFeatureBatch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Three fully-connected layers with ReLU between them: `(w + noise) → h → h → ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub embedding_dim: usize,
    pub noise_dim: usize,
    pub hidden_width: usize,
    pub feature_dim: usize,
    layers: [Linear; 3],
}

struct Activations {
    input: Matrix,
    pre1: Matrix,
    h1: Matrix,
    pre2: Matrix,
    h2: Matrix,
}

impl GeneratorNet {
    pub fn new<R: Rng + ?Sized>(
        embedding_dim: usize,
        noise_dim: usize,
        hidden_width: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let input = embedding_dim + noise_dim;
        Self {
            embedding_dim,
            noise_dim,
            hidden_width,
            feature_dim,
            layers: [
                Linear::new(input, hidden_width, rng),
                Linear::new(hidden_width, hidden_width, rng),
                Linear::with_std(
                    hidden_width,
                    feature_dim,
                    (1.0 / hidden_width as f64).sqrt(),
                    rng,
                ),
            ],
        }
    }

    fn forward_cached(&self, input: &Matrix) -> Result<(Matrix, Activations)> {
        let pre1 = self.layers[0].forward(input)?;
        let h1 = relu(&pre1);
        let pre2 = self.layers[1].forward(&h1)?;
        let h2 = relu(&pre2);
        let out = self.layers[2].forward(&h2)?;
        Ok((
            out,
            Activations {
                input: input.clone(),
                pre1,
                h1,
                pre2,
                h2,
            },
        ))
    }

    /// Maps `[embedding | noise]` rows to feature rows.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(input)?.0)
    }

    fn backward(&mut self, acts: &Activations, grad_out: &Matrix) -> Result<()> {
        let g = self.layers[2].backward(&acts.h2, grad_out)?;
        let g = relu_backward(&acts.pre2, &g)?;
        let g = self.layers[1].backward(&acts.h1, &g)?;
        let g = relu_backward(&acts.pre1, &g)?;
        self.layers[0].backward(&acts.input, &g)?;
        Ok(())
    }

    /// MSE between generated and target rows; accumulates parameter gradients.
    pub fn loss_and_backward(&mut self, input: &Matrix, target: &Matrix) -> Result<f64> {
        let (out, acts) = self.forward_cached(input)?;
        let (loss, grad) = mse(&out, target)?;
        self.backward(&acts, &grad)?;
        Ok(loss)
    }

    /// Builds generator input rows: the class embedding followed by fresh noise.
    fn input_rows<R: Rng + ?Sized>(
        &self,
        embeddings: &[ClassEmbedding],
        class_ids: &[usize],
        rng: &mut R,
    ) -> Result<Matrix> {
        let width = self.embedding_dim + self.noise_dim;
        let mut m = Matrix::zeros(class_ids.len(), width);
        for (r, &c) in class_ids.iter().enumerate() {
            let e = embeddings
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("unknown class id {c}")))?;
            if e.vector.len() != self.embedding_dim {
                return Err(Error::Dimension(format!(
                    "embedding of length {} for a generator expecting {}",
                    e.vector.len(),
                    self.embedding_dim
                )));
            }
            let row = m.row_mut(r);
            row[..self.embedding_dim].copy_from_slice(&e.vector);
            for v in &mut row[self.embedding_dim..] {
                *v = rng.sample(StandardNormal);
            }
        }
        Ok(m)
    }
}

impl HasParams for GeneratorNet {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerSpec::adam_generator(),
        }
    }
}

/// Fits the generator to real seen features by regression from class embeddings.
///
/// Returns the mean training loss of every epoch.
pub fn train_generator<T, R>(
    gen: &mut GeneratorNet,
    data: &T,
    settings: &GeneratorTraining,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    T: TrainingSet + ?Sized,
    R: Rng + ?Sized,
{
    settings.optimizer.validate()?;
    let mut order = data.seen_indices();
    if order.is_empty() {
        return Err(Error::Invalid(
            "generator training needs at least one seen sample".into(),
        ));
    }
    if data.feature_dim() != gen.feature_dim {
        return Err(Error::Dimension(format!(
            "features of length {} for a generator producing {}",
            data.feature_dim(),
            gen.feature_dim
        )));
    }
    let batch = settings.batch_size.max(1);
    let mut curve = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let samples: Vec<_> = chunk.iter().map(|&i| data.sample(i)).collect();
            let ids: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
            let input = gen.input_rows(data.embeddings(), &ids, rng)?;
            let target = Matrix::from_rows(
                &samples
                    .iter()
                    .map(|s| s.values.as_slice())
                    .collect::<Vec<_>>(),
            )?;
            gen.zero_grad();
            let loss = gen.loss_and_backward(&input, &target)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "generator loss at epoch {epoch}, step {steps}"
                )));
            }
            numerics::step(&mut gen.params_mut(), &settings.optimizer);
            total += loss;
            steps += 1;
        }
        curve.push(total / steps.max(1) as f64);
    }
    Ok(curve)
}

/// Generates `samples_per_class` rows for each listed class, in order.
pub fn generate<R: Rng + ?Sized>(
    gen: &GeneratorNet,
    embeddings: &[ClassEmbedding],
    class_ids: &[usize],
    samples_per_class: usize,
    rng: &mut R,
) -> Result<FakeFeatureBatch> {
    let ids: Vec<usize> = class_ids
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, samples_per_class))
        .collect();
    let input = gen.input_rows(embeddings, &ids, rng)?;
    let features = if ids.is_empty() {
        Matrix::zeros(0, gen.feature_dim)
    } else {
        gen.forward(&input)?
    };
    Ok(FakeFeatureBatch {
        features,
        class_ids: ids,
        origin: FakeOrigin::MlpGenerator,
    })
}
