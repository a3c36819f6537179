//! Single-round federated learning simulation under an honest-but-curious
//! server: the victim shares a batch-averaged gradient, the server keeps it.
//!
//! Ground-truth pixels stay inside [`SealedGroundTruth`], which only opens
//! for a finished [`AttackResult`]. Attack code cannot construct one, so it
//! cannot read the truth early:
//!
//! ```compile_fail
//! fn peek(t: &gipip::flsim::SealedGroundTruth) -> &gipip::tensor::Tensor {
//!     &t.images
//! }
//! ```
//!
//! ```compile_fail
//! fn forge() -> gipip::attack::AttackResult {
//!     gipip::attack::AttackResult { recovered: todo!(), trace: vec![], best_restart: 0 }
//! }
//! ```

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::AttackResult;
use crate::data::{Dataset, ImageSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_batch, MetricReport};
use crate::nn::ClassifierParams;
use crate::tensor::{GradientVector, Graph, Tensor};

/// Private client data for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientBatch {
    images: Tensor,
    labels: Vec<usize>,
}

impl ClientBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!("client batch must be NCHW, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        Ok(ClientBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// What the server receives: the averaged gradient, the batch size, the
/// labels, and a fingerprint of the model that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGradient {
    gradient: GradientVector,
    labels: Vec<usize>,
    model_fingerprint: String,
}

impl SharedGradient {
    pub fn gradient(&self) -> &GradientVector {
        &self.gradient
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }
}

/// Gradient of the mean cross-entropy over the batch, in canonical
/// parameter order.
pub fn client_compute_gradient(theta_g: &ClassifierParams, batch: &ClientBatch) -> Result<SharedGradient> {
    if batch.is_empty() {
        return Err(Error::arg("client batch is empty"));
    }
    let mut g = Graph::new();
    let p = theta_g.params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let logits = theta_g.forward(&mut g, &p, x)?;
    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
    let grads = g.gradients(loss, &p)?;
    let names = theta_g.params.entries().iter().map(|(n, _)| n.clone());
    Ok(SharedGradient {
        gradient: GradientVector::from_named(names.zip(grads)),
        labels: batch.labels.clone(),
        model_fingerprint: theta_g.fingerprint(),
    })
}

/// How the auxiliary set is carved out of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AuxMode {
    /// Auxiliary = held-out partition, targets = training partition.
    NamedSplit,
    /// A seeded random fraction of all samples becomes auxiliary.
    Fraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Provenance {
    NamedSplit,
    Fraction { fraction: f64, seed: u64 },
}

/// Disjoint auxiliary and target index sets over a [`Dataset`].
///
/// Indices are global: `0..train_len` address the training partition and
/// `train_len..train_len + test_len` the held-out one.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    auxiliary: Vec<usize>,
    targets: Vec<usize>,
    train_len: usize,
    test_len: usize,
    provenance: Provenance,
}

fn check_disjoint(aux: &[usize], targets: &[usize]) -> Result<()> {
    let a: HashSet<usize> = aux.iter().copied().collect();
    if let Some(i) = targets.iter().find(|i| a.contains(i)) {
        return Err(Error::PartitionViolation(format!("index {i} is both auxiliary and target")));
    }
    Ok(())
}

/// Builds a split for a dataset with `train_len` training and `test_len`
/// held-out samples.
pub fn make_partition(train_len: usize, test_len: usize, mode: AuxMode, seed: u64) -> Result<DatasetSplit> {
    let total = train_len + test_len;
    if total == 0 {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    let (auxiliary, targets, provenance) = match mode {
        AuxMode::NamedSplit => {
            if test_len == 0 || train_len == 0 {
                return Err(Error::config("named split needs both a training and a held-out partition"));
            }
            ((train_len..total).collect(), (0..train_len).collect(), Provenance::NamedSplit)
        }
        AuxMode::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("auxiliary fraction must lie in (0, 1), got {f}")));
            }
            if total < 2 {
                return Err(Error::config("fraction split needs at least two samples"));
            }
            let mut all: Vec<usize> = (0..total).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let k = ((f * total as f64).round() as usize).clamp(1, total - 1);
            let mut aux = all[..k].to_vec();
            let mut tgt = all[k..].to_vec();
            aux.sort_unstable();
            tgt.sort_unstable();
            (aux, tgt, Provenance::Fraction { fraction: f, seed })
        }
    };
    check_disjoint(&auxiliary, &targets)?;
    Ok(DatasetSplit { auxiliary, targets, train_len, test_len, provenance })
}

/// [`make_partition`] sized from a loaded dataset.
pub fn partition_dataset(ds: &Dataset, mode: AuxMode, seed: u64) -> Result<DatasetSplit> {
    make_partition(ds.train.len(), ds.test.as_ref().map_or(0, ImageSet::len), mode, seed)
}

impl DatasetSplit {
    pub fn auxiliary(&self) -> &[usize] {
        &self.auxiliary
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Re-runs the exact disjointness check.
    pub fn verify(&self) -> Result<()> {
        check_disjoint(&self.auxiliary, &self.targets)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let test_len = ds.test.as_ref().map_or(0, ImageSet::len);
        if ds.train.len() != self.train_len || test_len != self.test_len {
            return Err(Error::arg(format!(
                "split built for {}+{} samples, dataset has {}+{test_len}",
                self.train_len,
                self.test_len,
                ds.train.len()
            )));
        }
        Ok(())
    }

    fn gather(&self, ds: &Dataset, indices: &[usize]) -> Result<ImageSet> {
        self.check_dataset(ds)?;
        let train: Vec<usize> = indices.iter().copied().filter(|&i| i < self.train_len).collect();
        let test: Vec<usize> = indices.iter().filter(|&&i| i >= self.train_len).map(|i| i - self.train_len).collect();
        if test.is_empty() {
            return Ok(ds.train.subset(&train));
        }
        let held = ds.test.as_ref().expect("held-out indices imply a held-out partition");
        if train.is_empty() {
            return Ok(held.subset(&test));
        }
        let a = ds.train.subset(&train);
        let b = held.subset(&test);
        let mut pixels = a.pixels().to_vec();
        pixels.extend_from_slice(b.pixels());
        let mut labels = a.labels().to_vec();
        labels.extend_from_slice(b.labels());
        ImageSet::new(a.image_shape(), pixels, labels, a.num_classes())
    }

    /// Auxiliary images in index order.
    pub fn auxiliary_images(&self, ds: &Dataset) -> Result<ImageSet> {
        self.gather(ds, &self.auxiliary)
    }

    fn label_of(&self, ds: &Dataset, i: usize) -> usize {
        if i < self.train_len {
            ds.train.labels()[i]
        } else {
            ds.test.as_ref().map_or(0, |t| t.labels()[i - self.train_len])
        }
    }

    /// Keeps only auxiliary samples whose label is in `classes`.
    pub fn restrict_auxiliary(&self, ds: &Dataset, classes: &[usize]) -> Result<DatasetSplit> {
        self.check_dataset(ds)?;
        let mut out = self.clone();
        out.auxiliary.retain(|&i| classes.contains(&self.label_of(ds, i)));
        Ok(out)
    }

    /// The first `count` target indices with a label in `classes`
    /// (any label when `classes` is empty).
    pub fn pick_targets(&self, ds: &Dataset, classes: &[usize], count: usize) -> Result<Vec<usize>> {
        self.check_dataset(ds)?;
        let picked: Vec<usize> = self
            .targets
            .iter()
            .copied()
            .filter(|&i| classes.is_empty() || classes.contains(&self.label_of(ds, i)))
            .take(count)
            .collect();
        if picked.len() < count {
            return Err(Error::config(format!(
                "only {} target samples match classes {classes:?}, {count} requested",
                picked.len()
            )));
        }
        Ok(picked)
    }
}

/// Ground truth of one round, readable only with a finished attack result.
#[derive(Clone, Debug)]
pub struct SealedGroundTruth {
    images: Tensor,
    labels: Vec<usize>,
}

impl SealedGroundTruth {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    fn check(&self, result: &AttackResult) -> Result<()> {
        if result.recovered().shape() != self.images.shape() {
            return Err(Error::arg(format!(
                "recovered batch {:?} does not match sealed batch {:?}",
                result.recovered().shape(),
                self.images.shape()
            )));
        }
        Ok(())
    }

    /// Scores a finished attack against the sealed images.
    pub fn evaluate(&self, result: &AttackResult, assignment: bool) -> Result<MetricReport> {
        self.check(result)?;
        evaluate_batch(result.recovered(), &self.images, assignment)
    }

    /// Opens the container for reporting once an attack has finished.
    pub fn reveal(&self, result: &AttackResult) -> Result<(&Tensor, &[usize])> {
        self.check(result)?;
        Ok((&self.images, &self.labels))
    }
}

/// One captured gradient and the truth that produced it.
#[derive(Clone, Debug)]
pub struct RoundCapture {
    pub shared: SharedGradient,
    pub truth: SealedGroundTruth,
}

/// Runs the client side over `target_indices` in consecutive batches.
pub fn simulate_round(
    theta_g: &ClassifierParams,
    ds: &Dataset,
    split: &DatasetSplit,
    target_indices: &[usize],
    batch_size: usize,
) -> Result<Vec<RoundCapture>> {
    split.verify()?;
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let allowed: HashSet<usize> = split.targets.iter().copied().collect();
    if let Some(i) = target_indices.iter().find(|i| !allowed.contains(i)) {
        return Err(Error::PartitionViolation(format!("index {i} is not in the target set")));
    }
    if target_indices.len() % batch_size != 0 {
        return Err(Error::config(format!(
            "{} targets do not divide into batches of {batch_size}",
            target_indices.len()
        )));
    }
    let mut out = Vec::with_capacity(target_indices.len() / batch_size);
    for chunk in target_indices.chunks(batch_size) {
        let set = split.gather(ds, chunk)?;
        let all: Vec<usize> = (0..set.len()).collect();
        let batch = ClientBatch::new(set.batch(&all)?, set.labels().to_vec())?;
        let shared = client_compute_gradient(theta_g, &batch)?;
        out.push(RoundCapture { shared, truth: SealedGroundTruth { images: batch.images, labels: batch.labels } });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::{init_classifier, Arch, ClassifierSpec, InitScheme};

    fn model() -> ClassifierParams {
        init_classifier(ClassifierSpec::new(Arch::Mlp2, [1, 4, 4], 3), InitScheme::kaiming(2)).unwrap()
    }

    #[test]
    fn scalar_linear_hand_check() {
        // f(x) = w·x with loss (f − y)²: dL/dw = 2(wx − y)x = 8 at w=1, x=2, y=0
        let mut g = Graph::new();
        let w = g.variable(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let x = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let l = g.mul(y, y).unwrap();
        let l = g.sum(l);
        assert_eq!(g.gradients(l, &[w]).unwrap()[0].data(), &[8.0]);
    }

    #[test]
    fn duplicate_sample_matches_singleton() {
        let ds = synthetic_dataset(4, 2, [1, 4, 4], 3, 1).unwrap();
        let m = model();
        let one = ClientBatch::new(ds.train.batch(&[0]).unwrap(), vec![ds.train.labels()[0]]).unwrap();
        let two = ClientBatch::new(ds.train.batch(&[0, 0]).unwrap(), vec![ds.train.labels()[0]; 2]).unwrap();
        let a = client_compute_gradient(&m, &one).unwrap().gradient.flatten();
        let b = client_compute_gradient(&m, &two).unwrap().gradient.flatten();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
    }

    #[test]
    fn named_split_sizes() {
        let s = make_partition(50000, 10000, AuxMode::NamedSplit, 0).unwrap();
        assert_eq!(s.auxiliary().len(), 10000);
        assert_eq!(s.targets().len(), 50000);
        assert!(s.targets().iter().all(|&i| i < 50000));
        s.verify().unwrap();
    }

    #[test]
    fn fraction_bounds_and_determinism() {
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(make_partition(10, 0, AuxMode::Fraction(f), 0), Err(Error::Config(_))));
        }
        let a = make_partition(100, 20, AuxMode::Fraction(0.5), 7).unwrap();
        let b = make_partition(100, 20, AuxMode::Fraction(0.5), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.auxiliary().len(), 60);
        a.verify().unwrap();
    }

    #[test]
    fn aux_index_as_target_is_violation() {
        let ds = synthetic_dataset(8, 4, [1, 4, 4], 3, 1).unwrap();
        let split = partition_dataset(&ds, AuxMode::NamedSplit, 0).unwrap();
        let err = simulate_round(&model(), &ds, &split, &[0, 9], 1).unwrap_err();
        assert!(matches!(err, Error::PartitionViolation(_)));
    }

    #[test]
    fn batches_of_four_over_eight() {
        let ds = synthetic_dataset(8, 4, [1, 4, 4], 3, 1).unwrap();
        let split = partition_dataset(&ds, AuxMode::NamedSplit, 0).unwrap();
        let m = model();
        let caps = simulate_round(&m, &ds, &split, &(0..8).collect::<Vec<_>>(), 4).unwrap();
        assert_eq!(caps.len(), 2);
        assert!(caps.iter().all(|c| c.shared.batch_size() == 4 && c.shared.model_fingerprint() == m.fingerprint()));
        assert!(matches!(simulate_round(&m, &ds, &split, &[0, 1, 2], 2), Err(Error::Config(_))));
    }
}
