//! Synthetic zero-shot feature tasks, embedding ingestion and the seen/unseen split.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub class_id: usize,
    pub name: String,
    pub vector: Vec<f64>,
}

/// One real feature sample and its class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotTaskSpec {
    pub n_classes: usize,
    pub n_unseen: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub cluster_spread: f64,
    pub embedding_feature_coupling: f64,
    /// Cosine-like closeness of each unseen class embedding to its seen
    /// neighbor (class `k mod n_seen` for the k-th unseen class). 0 places
    /// unseen embeddings independently.
    pub unseen_proximity: f64,
    pub seed: u64,
}

impl Default for ZeroShotTaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_unseen: 2,
            feature_dim: 64,
            embedding_dim: 32,
            samples_per_class: 200,
            test_samples_per_class: 100,
            cluster_spread: 1.0,
            embedding_feature_coupling: 0.8,
            unseen_proximity: 0.7,
            seed: 0,
        }
    }
}

impl ZeroShotTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_unseen == 0 || self.n_unseen >= self.n_classes {
            return Err(Error::Config(format!(
                "need 0 < n_unseen < n_classes, got n_unseen={} n_classes={}",
                self.n_unseen, self.n_classes
            )));
        }
        self.validate_features()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.unseen_proximity) {
            return Err(Error::Config("unseen_proximity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn validate_features(&self) -> Result<()> {
        if self.samples_per_class < 2 {
            return Err(Error::Config(
                "samples_per_class must be at least 2 so variances exist".into(),
            ));
        }
        if self.test_samples_per_class == 0 {
            return Err(Error::Config(
                "test_samples_per_class must be positive".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.embedding_feature_coupling) {
            return Err(Error::Config(
                "embedding_feature_coupling must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn n_seen(&self) -> usize {
        self.n_classes - self.n_unseen
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotDataset {
    pub spec: Option<ZeroShotTaskSpec>,
    pub embeddings: Vec<ClassEmbedding>,
    pub train: Vec<FeatureVector>,
    pub test: Vec<FeatureVector>,
    pub unseen_ids: BTreeSet<usize>,
}

impl ZeroShotDataset {
    pub fn n_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.train
            .first()
            .or_else(|| self.test.first())
            .map_or(0, |f| f.values.len())
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.n_classes())
            .filter(|c| !self.unseen_ids.contains(c))
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.embeddings.iter().map(|e| e.name.clone()).collect()
    }

    pub fn test_matrix(&self) -> Result<(Matrix, Vec<usize>)> {
        let rows: Vec<&[f64]> = self.test.iter().map(|f| f.values.as_slice()).collect();
        let m = Matrix::from_rows(&rows)?;
        Ok((m, self.test.iter().map(|f| f.class_id).collect()))
    }

    /// Serialized form with fields `spec, embeddings, train, test, unseen_ids`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Read access to the real training features.
///
/// Every training path reads real samples through this trait only, which lets
/// tests interpose an auditing double. Training code selects samples with
/// [`TrainingSet::seen_indices`], so unseen-class features are never read even
/// when the set still holds them.
pub trait TrainingSet {
    fn embeddings(&self) -> &[ClassEmbedding];
    fn unseen_ids(&self) -> &BTreeSet<usize>;
    fn feature_dim(&self) -> usize;
    fn len(&self) -> usize;
    /// Class of a sample, without touching its features.
    fn label(&self, index: usize) -> usize;
    fn sample(&self, index: usize) -> &FeatureVector;

    /// Indices of samples whose class is seen.
    fn seen_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.unseen_ids().contains(&self.label(i)))
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn n_classes(&self) -> usize {
        self.embeddings().len()
    }

    fn seen_ids(&self) -> Vec<usize> {
        (0..self.n_classes())
            .filter(|c| !self.unseen_ids().contains(c))
            .collect()
    }
}

impl TrainingSet for ZeroShotDataset {
    fn embeddings(&self) -> &[ClassEmbedding] {
        &self.embeddings
    }

    fn unseen_ids(&self) -> &BTreeSet<usize> {
        &self.unseen_ids
    }

    fn feature_dim(&self) -> usize {
        ZeroShotDataset::feature_dim(self)
    }

    fn len(&self) -> usize {
        self.train.len()
    }

    fn label(&self, index: usize) -> usize {
        self.train[index].class_id
    }

    fn sample(&self, index: usize) -> &FeatureVector {
        &self.train[index]
    }
}

/// Test double that records the class id of every real sample read.
pub struct AuditedTrainingSet<'a, T: TrainingSet + ?Sized> {
    inner: &'a T,
    reads: RefCell<Vec<usize>>,
}

impl<'a, T: TrainingSet + ?Sized> AuditedTrainingSet<'a, T> {
    pub fn new(inner: &'a T) -> Self {
        Self {
            inner,
            reads: RefCell::new(Vec::new()),
        }
    }

    /// Class ids of all reads so far, in order.
    pub fn reads(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }

    /// Reads whose class is unseen.
    pub fn leaked_reads(&self) -> Vec<usize> {
        let unseen = self.inner.unseen_ids();
        self.reads
            .borrow()
            .iter()
            .copied()
            .filter(|c| unseen.contains(c))
            .collect()
    }
}

impl<T: TrainingSet + ?Sized> TrainingSet for AuditedTrainingSet<'_, T> {
    fn embeddings(&self) -> &[ClassEmbedding] {
        self.inner.embeddings()
    }

    fn unseen_ids(&self) -> &BTreeSet<usize> {
        self.inner.unseen_ids()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, index: usize) -> usize {
        self.inner.label(index)
    }

    fn sample(&self, index: usize) -> &FeatureVector {
        let s = self.inner.sample(index);
        self.reads.borrow_mut().push(s.class_id);
        s
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn synthetic_embeddings(spec: &ZeroShotTaskSpec) -> Vec<ClassEmbedding> {
    let mut rng = substream(spec.seed, "data.embeddings");
    let n_seen = spec.n_seen();
    let mut out: Vec<ClassEmbedding> = Vec::with_capacity(spec.n_classes);
    for class_id in 0..spec.n_classes {
        let fresh = gaussian_vec(&mut rng, spec.embedding_dim, 1.0);
        let vector = if class_id >= n_seen && spec.unseen_proximity > 0.0 {
            let neighbor = &out[(class_id - n_seen) % n_seen].vector;
            let q = spec.unseen_proximity;
            let r = (1.0 - q * q).max(0.0).sqrt();
            neighbor
                .iter()
                .zip(&fresh)
                .map(|(a, b)| q * a + r * b)
                .collect()
        } else {
            fresh
        };
        out.push(ClassEmbedding {
            class_id,
            name: format!("class_{class_id:02}"),
            vector,
        });
    }
    out
}

/// Synthesizes a task with training samples for every class and no unseen set.
pub fn synthesize_pool(spec: &ZeroShotTaskSpec) -> Result<ZeroShotDataset> {
    spec.validate()?;
    let embeddings = synthetic_embeddings(spec);
    let mut pool = synthesize_features(&embeddings, spec)?;
    pool.spec = Some(spec.clone());
    Ok(pool)
}

/// Synthesizes a task and withholds its last `n_unseen` classes from training.
pub fn synthesize(spec: &ZeroShotTaskSpec) -> Result<ZeroShotDataset> {
    let pool = synthesize_pool(spec)?;
    let names: Vec<String> = pool.embeddings[spec.n_seen()..]
        .iter()
        .map(|e| e.name.clone())
        .collect();
    split(&pool, &names)
}

/// Draws Gaussian feature clusters whose means follow the given embeddings.
///
/// Each class mean is `coupling * (G · embedding) + (1 - coupling) * z` with a
/// fixed random map `G` and an independent draw `z`; samples add isotropic noise
/// of scale `cluster_spread`. Uses the feature fields and seed of `spec`; its
/// class counts are ignored.
pub fn synthesize_features(
    embeddings: &[ClassEmbedding],
    spec: &ZeroShotTaskSpec,
) -> Result<ZeroShotDataset> {
    spec.validate_features()?;
    let w = check_embeddings(embeddings)?;
    let l = spec.feature_dim;
    let mut map_rng = substream(spec.seed, "data.map");
    let map = gaussian_vec(&mut map_rng, l * w, 1.0 / (w as f64).sqrt());

    let mut mean_rng = substream(spec.seed, "data.means");
    let coupling = spec.embedding_feature_coupling;
    let means: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let independent = gaussian_vec(&mut mean_rng, l, 1.0);
            (0..l)
                .map(|i| {
                    let projected: f64 = map[i * w..(i + 1) * w]
                        .iter()
                        .zip(&e.vector)
                        .map(|(g, v)| g * v)
                        .sum();
                    coupling * projected + (1.0 - coupling) * independent[i]
                })
                .collect()
        })
        .collect();

    let mut sample_rng = substream(spec.seed, "data.samples");
    let mut draw = |class_id: usize, count: usize| -> Vec<FeatureVector> {
        (0..count)
            .map(|_| FeatureVector {
                values: means[class_id]
                    .iter()
                    .zip(gaussian_vec(&mut sample_rng, l, spec.cluster_spread))
                    .map(|(m, n)| m + n)
                    .collect(),
                class_id,
            })
            .collect()
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class_id in 0..embeddings.len() {
        train.extend(draw(class_id, spec.samples_per_class));
    }
    for class_id in 0..embeddings.len() {
        test.extend(draw(class_id, spec.test_samples_per_class));
    }
    Ok(ZeroShotDataset {
        spec: None,
        embeddings: embeddings.to_vec(),
        train,
        test,
        unseen_ids: BTreeSet::new(),
    })
}

/// Common embedding width; errors on an empty list, ragged or non-finite vectors.
fn check_embeddings(embeddings: &[ClassEmbedding]) -> Result<usize> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Invalid("no embeddings".into()))?;
    let w = first.vector.len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.vector.len() != w {
            return Err(Error::Dimension(format!(
                "embedding '{}' has length {}, expected {w}",
                e.name,
                e.vector.len()
            )));
        }
        if e.class_id != i {
            return Err(Error::Invalid(format!(
                "embedding '{}' has class_id {} at position {i}",
                e.name, e.class_id
            )));
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding '{}'", e.name)));
        }
    }
    Ok(w)
}

/// Removes the named classes from training; the test set is untouched.
pub fn split(
    dataset: &ZeroShotDataset,
    unseen_names: &[impl AsRef<str>],
) -> Result<ZeroShotDataset> {
    let by_name: HashMap<&str, usize> = dataset
        .embeddings
        .iter()
        .map(|e| (e.name.as_str(), e.class_id))
        .collect();
    let mut unseen = dataset.unseen_ids.clone();
    for name in unseen_names {
        let id = by_name
            .get(name.as_ref())
            .ok_or_else(|| Error::Invalid(format!("unknown class name '{}'", name.as_ref())))?;
        unseen.insert(*id);
    }
    if unseen.len() >= dataset.n_classes() {
        return Err(Error::Config("at least one seen class is required".into()));
    }
    Ok(ZeroShotDataset {
        spec: dataset.spec.clone(),
        embeddings: dataset.embeddings.clone(),
        train: dataset
            .train
            .iter()
            .filter(|f| !unseen.contains(&f.class_id))
            .cloned()
            .collect(),
        test: dataset.test.clone(),
        unseen_ids: unseen,
    })
}

/// Parses `name v1 ... vw` lines. A leading `count dim` header is skipped.
pub fn parse_embeddings(text: &str) -> Result<Vec<ClassEmbedding>> {
    let mut lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if let Some(&(_, first)) = lines.first() {
        let toks: Vec<&str> = first.split_whitespace().collect();
        let is_header = toks.len() == 2
            && toks[0].parse::<usize>().is_ok()
            && lines.get(1).is_some_and(|(_, next)| {
                toks[1]
                    .parse::<usize>()
                    .is_ok_and(|dim| next.split_whitespace().count() == dim + 1)
            });
        if is_header {
            lines.remove(0);
        }
    }
    if lines.is_empty() {
        return Err(Error::Invalid("no embeddings".into()));
    }

    let mut out = Vec::with_capacity(lines.len());
    let mut seen_names = HashMap::new();
    let mut width = None;
    for (line_no, line) in lines {
        let mut toks = line.split_whitespace();
        let name = toks.next().expect("non-empty line");
        let vector = toks
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("'{t}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vector.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("'{name}' has no vector values"),
            });
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("non-finite value {bad}"),
            });
        }
        match width {
            None => width = Some(vector.len()),
            Some(w) if w != vector.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {w} values, found {}", vector.len()),
                })
            }
            _ => {}
        }
        if let Some(prev) = seen_names.insert(name.to_string(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate name '{name}' (first on line {prev})"),
            });
        }
        out.push(ClassEmbedding {
            class_id: out.len(),
            name: name.to_string(),
            vector,
        });
    }
    Ok(out)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<ClassEmbedding>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_embeddings(&text)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}
