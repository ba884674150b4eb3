use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::MlError;

const TRUTH_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;
const PARTITION_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Shape of a synthetic dataset. `skew` only affects [`partition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n: usize,
    pub d: usize,
    pub task: Task,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub skew: f64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<(), MlError> {
        if self.n == 0 || self.d == 0 {
            return Err(MlError::InvalidData("n and d must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(MlError::InvalidData(format!("skew {} outside [0, 1]", self.skew)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(MlError::InvalidData(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub sample_ids: Vec<u64>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<f64>, sample_ids: Vec<u64>) -> Result<Self, MlError> {
        let n = features.rows();
        if n == 0 {
            return Err(MlError::Empty("dataset"));
        }
        if targets.len() != n || sample_ids.len() != n {
            return Err(MlError::Dimension {
                context: "dataset rows",
                expected: n,
                actual: targets.len().min(sample_ids.len()),
            });
        }
        let mut sorted = sample_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(MlError::InvalidData("duplicate sample id".into()));
        }
        Ok(Self {
            features,
            targets,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            sample_ids: rows.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }

    /// Rows holding the given sample ids, in the order given. Unknown ids are skipped.
    pub fn rows_for_ids(&self, ids: &[u64]) -> Vec<usize> {
        ids.iter()
            .filter_map(|id| self.sample_ids.iter().position(|s| s == id))
            .collect()
    }

    /// Row index ranges for consecutive mini-batches; `0` means one full batch.
    pub fn batch_ranges(&self, batch_size: usize) -> Vec<(usize, usize)> {
        let n = self.len();
        if batch_size == 0 || batch_size >= n {
            return vec![(0, n)];
        }
        (0..n)
            .step_by(batch_size)
            .map(|lo| (lo, (lo + batch_size).min(n)))
            .collect()
    }

    pub fn batch(&self, lo: usize, hi: usize) -> (Matrix, &[f64]) {
        let rows: Vec<usize> = (lo..hi).collect();
        (self.features.select_rows(&rows), &self.targets[lo..hi])
    }

    pub fn label_mean(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.len() as f64
    }
}

/// True weights and bias of the generating linear rule.
pub fn ground_truth(spec: &DataSpec, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = stream(seed, TRUTH_STREAM);
    let w: Vec<f64> = (0..spec.d).map(|_| rng.sample(StandardNormal)).collect();
    let b: f64 = rng.sample(StandardNormal);
    (w, 0.5 * b)
}

/// Samples `spec.n` rows `x ~ N(0, I)` with targets from the ground-truth linear rule.
///
/// Regression: `y = w·x + b + noise·ε`. Classification: `y = 1[w·x + b + noise·ε > 0]`.
pub fn gen_synthetic_dataset(spec: &DataSpec, seed: u64) -> Result<Dataset, MlError> {
    spec.validate()?;
    generate(spec, seed, spec.n, SAMPLE_STREAM, 0)
}

/// Evaluation rows drawn from the same rule on a reserved stream; ids start after the training ids.
pub fn heldout_dataset(spec: &DataSpec, seed: u64, n: usize) -> Result<Dataset, MlError> {
    spec.validate()?;
    if n == 0 {
        return Err(MlError::InvalidData("held-out size must be at least 1".into()));
    }
    generate(spec, seed, n, HELDOUT_STREAM, spec.n as u64)
}

fn generate(spec: &DataSpec, seed: u64, n: usize, stream_id: u64, id_base: u64) -> Result<Dataset, MlError> {
    let (w, b) = ground_truth(spec, seed);
    let mut rng = stream(seed, stream_id);
    let mut features = Vec::with_capacity(n * spec.d);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = b;
        for wk in &w {
            let x: f64 = rng.sample(StandardNormal);
            features.push(x);
            z += wk * x;
        }
        let eps: f64 = rng.sample(StandardNormal);
        let y = z + spec.noise * eps;
        targets.push(match spec.task {
            Task::Regression => y,
            Task::Classification => f64::from(u8::from(y > 0.0)),
        });
    }
    Dataset::new(
        Matrix::from_vec(n, spec.d, features)?,
        targets,
        (id_base..id_base + n as u64).collect(),
    )
}

/// Splits a dataset into `shards` pieces.
///
/// A shuffled fraction `1 - skew` of the rows is dealt round-robin; the rest is
/// sorted by target and cut into contiguous chunks, one per shard.
pub fn partition(data: &Dataset, shards: usize, skew: f64, seed: u64) -> Result<Vec<Dataset>, MlError> {
    if shards == 0 || shards > data.len() {
        return Err(MlError::InvalidData(format!(
            "cannot cut {} rows into {} shards",
            data.len(),
            shards
        )));
    }
    if !(0.0..=1.0).contains(&skew) {
        return Err(MlError::InvalidData(format!("skew {skew} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(seed, PARTITION_STREAM));
    let sorted_count = (skew * data.len() as f64).round() as usize;
    let (sorted_part, iid_part) = order.split_at(sorted_count);

    let mut sorted_part = sorted_part.to_vec();
    sorted_part.sort_by(|&a, &b| {
        data.targets[a]
            .total_cmp(&data.targets[b])
            .then(data.sample_ids[a].cmp(&data.sample_ids[b]))
    });

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); shards];
    let chunk = sorted_part.len() / shards;
    let extra = sorted_part.len() % shards;
    let mut at = 0;
    for (s, bucket) in rows.iter_mut().enumerate() {
        let take = chunk + usize::from(s < extra);
        bucket.extend_from_slice(&sorted_part[at..at + take]);
        at += take;
    }
    // Deal IID rows so shard sizes even out.
    let mut by_size: Vec<usize> = (0..shards).collect();
    for &row in iid_part {
        by_size.sort_by_key(|&s| (rows[s].len(), s));
        rows[by_size[0]].push(row);
    }
    rows.into_iter()
        .map(|mut r| {
            r.sort_unstable();
            if r.is_empty() {
                Err(MlError::InvalidData("partition produced an empty shard".into()))
            } else {
                Ok(data.subset(&r))
            }
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task, skew: f64) -> DataSpec {
        DataSpec {
            n: 400,
            d: 3,
            task,
            noise: 0.1,
            skew,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(Task::Regression, 0.0);
        assert_eq!(gen_synthetic_dataset(&s, 7).unwrap(), gen_synthetic_dataset(&s, 7).unwrap());
        assert_ne!(gen_synthetic_dataset(&s, 7).unwrap(), gen_synthetic_dataset(&s, 8).unwrap());
    }

    #[test]
    fn heldout_shares_rule_but_not_rows() {
        let s = spec(Task::Regression, 0.0);
        let train = gen_synthetic_dataset(&s, 1).unwrap();
        let test = heldout_dataset(&s, 1, 50).unwrap();
        assert_ne!(train.features.row(0), test.features.row(0));
        assert!(test.sample_ids.iter().all(|id| *id >= 400));
    }

    #[test]
    fn classification_labels_binary() {
        let data = gen_synthetic_dataset(&spec(Task::Classification, 0.0), 3).unwrap();
        assert!(data.targets.iter().all(|&y| y == 0.0 || y == 1.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(Task::Regression, 0.0);
        s.n = 0;
        assert!(gen_synthetic_dataset(&s, 0).is_err());
        let mut s = spec(Task::Regression, 1.5);
        assert!(gen_synthetic_dataset(&s, 0).is_err());
        s.skew = 0.0;
        s.noise = -1.0;
        assert!(gen_synthetic_dataset(&s, 0).is_err());
    }

    #[test]
    fn full_skew_shards_are_label_sorted() {
        let data = gen_synthetic_dataset(&spec(Task::Regression, 1.0), 5).unwrap();
        let shards = partition(&data, 4, 1.0, 5).unwrap();
        for pair in shards.windows(2) {
            let max_a = pair[0].targets.iter().cloned().fold(f64::MIN, f64::max);
            let min_b = pair[1].targets.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max_a <= min_b);
        }
    }

    #[test]
    fn partition_keeps_every_row_once() {
        let data = gen_synthetic_dataset(&spec(Task::Classification, 0.5), 2).unwrap();
        let shards = partition(&data, 3, 0.5, 2).unwrap();
        let mut ids: Vec<u64> = shards.iter().flat_map(|s| s.sample_ids.clone()).collect();
        ids.sort_unstable();
        assert_eq!(ids, data.sample_ids);
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = Matrix::zeros(2, 1);
        assert!(Dataset::new(f, vec![0.0, 1.0], vec![3, 3]).is_err());
    }

    #[test]
    fn batch_ranges_cover_rows() {
        let data = gen_synthetic_dataset(&spec(Task::Regression, 0.0), 0).unwrap();
        assert_eq!(data.batch_ranges(0), vec![(0, 400)]);
        let r = data.batch_ranges(150);
        assert_eq!(r, vec![(0, 150), (150, 300), (300, 400)]);
    }
}
