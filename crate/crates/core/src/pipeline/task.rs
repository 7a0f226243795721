//! Synthetic teacher-student tasks: a frozen random dense MLP labels the
//! data, students are pruned/quantized copies fine-tuned to recover it.
//! Splits are disjoint by construction (independent derived RNG streams) and
//! fully determined by the seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};
use crate::train::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Targets `teacher(x) + gaussian noise`.
    Regression,
    /// Labels `argmax(teacher(x))` over the teacher's output classes.
    Classification,
}

/// Frozen dense ReLU MLP that generates the data.
#[derive(Debug, Clone)]
pub struct Teacher {
    weights: Vec<Matrix>,
}

impl Teacher {
    /// Random dense teacher over the given layer widths, e.g. `[64, 64, 8]`.
    /// Weights are uniform with a variance-preserving bound so activations
    /// neither vanish nor blow up through the ReLU stack.
    pub fn random(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "teacher dims {dims:?} need at least two positive entries"
            )));
        }
        let mut weights = Vec::new();
        for pair in dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let bound = (6.0 / in_dim as f64).sqrt();
            weights.push(rng.uniform_matrix(out_dim, in_dim, -bound, bound));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.weights[0].cols()];
        dims.extend(self.weights.iter().map(|w| w.rows()));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().expect("nonempty").rows()
    }

    /// `Y = W_L relu(... relu(W_1 X))`, columns are samples.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (idx, w) in self.weights.iter().enumerate() {
            h = w.matmul(&h)?;
            if idx + 1 < self.weights.len() {
                for i in 0..h.rows() {
                    for j in 0..h.cols() {
                        if h.get(i, j) < 0.0 {
                            h.set(i, j, 0.0);
                        }
                    }
                }
            }
        }
        Ok(h)
    }

    /// Input activations of every layer when `x` flows through the teacher
    /// (index 0 is `x` itself). Used for pruning calibration.
    pub fn layer_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for (idx, w) in self.weights.iter().enumerate() {
            inputs.push(h.clone());
            h = w.matmul(&h)?;
            if idx + 1 < self.weights.len() {
                for i in 0..h.rows() {
                    for j in 0..h.cols() {
                        if h.get(i, j) < 0.0 {
                            h.set(i, j, 0.0);
                        }
                    }
                }
            }
        }
        Ok(inputs)
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub teacher: Teacher,
    pub noise_sigma: f64,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Task {
    /// Irreducible regression error under the training loss (sum over output
    /// dims, mean over samples): `out_dim * sigma^2`.
    pub fn noise_floor(&self) -> f64 {
        match self.kind {
            TaskKind::Regression => self.teacher.out_dim() as f64 * self.noise_sigma.powi(2),
            TaskKind::Classification => 0.0,
        }
    }
}

/// Sizes of the three splits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 4096,
            validation: 512,
            test: 512,
        }
    }
}

pub fn make_task(
    kind: TaskKind,
    dims: &[usize],
    sizes: SplitSizes,
    noise_sigma: f64,
    seed: u64,
) -> Result<Task> {
    if sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 {
        return Err(Error::Config("all split sizes must be positive".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be nonnegative".into()));
    }
    let mut teacher_rng = Rng::new(seed).derive("teacher");
    let teacher = Teacher::random(dims, &mut teacher_rng)?;
    if kind == TaskKind::Classification && teacher.out_dim() < 2 {
        return Err(Error::Config(
            "classification needs at least two output classes".into(),
        ));
    }

    let split = |label: &str, n: usize| -> Result<Dataset> {
        let mut rng = Rng::new(seed).derive(label);
        let x = rng.normal_matrix(teacher.in_dim(), n);
        let logits = teacher.forward(&x)?;
        let targets = match kind {
            TaskKind::Regression => {
                let mut y = logits;
                for i in 0..y.rows() {
                    for j in 0..y.cols() {
                        y.set(i, j, y.get(i, j) + noise_sigma * rng.normal());
                    }
                }
                y
            }
            TaskKind::Classification => {
                let mut labels = Matrix::zeros(1, n);
                for col in 0..n {
                    let mut arg = 0usize;
                    for i in 1..logits.rows() {
                        if logits.get(i, col) > logits.get(arg, col) {
                            arg = i;
                        }
                    }
                    labels.set(0, col, arg as f64);
                }
                labels
            }
        };
        Ok(Dataset { x, targets })
    };

    let train = split("split-train", sizes.train)?;
    let validation = split("split-validation", sizes.validation)?;
    let test = split("split-test", sizes.test)?;
    Ok(Task {
        kind,
        teacher,
        noise_sigma,
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(n: usize) -> SplitSizes {
        SplitSizes {
            train: n,
            validation: n / 2,
            test: n / 2,
        }
    }

    #[test]
    fn same_seed_identical_datasets() {
        let a = make_task(TaskKind::Regression, &[16, 16, 1], sizes(64), 0.01, 7).unwrap();
        let b = make_task(TaskKind::Regression, &[16, 16, 1], sizes(64), 0.01, 7).unwrap();
        assert_eq!(a.train.x, b.train.x);
        assert_eq!(a.train.targets, b.train.targets);
        assert_eq!(a.test.targets, b.test.targets);
        let c = make_task(TaskKind::Regression, &[16, 16, 1], sizes(64), 0.01, 8).unwrap();
        assert_ne!(a.train.x, c.train.x);
    }

    #[test]
    fn splits_are_disjoint() {
        let t = make_task(TaskKind::Regression, &[8, 8, 1], sizes(32), 0.01, 9).unwrap();
        // Continuous inputs collide with probability zero; check first columns.
        assert_ne!(t.train.x.get(0, 0), t.validation.x.get(0, 0));
        assert_ne!(t.train.x.get(0, 0), t.test.x.get(0, 0));
        assert_ne!(t.validation.x.get(0, 0), t.test.x.get(0, 0));
    }

    #[test]
    fn teacher_regression_mse_hits_noise_floor() {
        let t = make_task(TaskKind::Regression, &[64, 64, 1], sizes(4096), 0.01, 11).unwrap();
        let pred = t.teacher.forward(&t.train.x).unwrap();
        let mse = pred.sub(&t.train.targets).unwrap().frobenius_sq() / t.train.len() as f64;
        let floor = t.noise_floor();
        assert!(
            (mse - floor).abs() <= 0.2 * floor,
            "mse {mse} vs floor {floor}"
        );
    }

    #[test]
    fn classification_teacher_is_perfectly_accurate() {
        let t = make_task(TaskKind::Classification, &[16, 16, 8], sizes(128), 0.0, 13).unwrap();
        let logits = t.teacher.forward(&t.test.x).unwrap();
        for col in 0..t.test.len() {
            let mut arg = 0usize;
            for i in 1..logits.rows() {
                if logits.get(i, col) > logits.get(arg, col) {
                    arg = i;
                }
            }
            assert_eq!(arg as f64, t.test.targets.get(0, col));
        }
    }

    #[test]
    fn classification_labels_cover_multiple_classes() {
        let t = make_task(TaskKind::Classification, &[16, 16, 8], sizes(256), 0.0, 15).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for col in 0..t.train.len() {
            seen.insert(t.train.targets.get(0, col) as u64);
        }
        assert!(seen.len() >= 4, "only {} classes seen", seen.len());
    }

    #[test]
    fn layer_inputs_chain() {
        let t = make_task(TaskKind::Regression, &[8, 6, 4, 1], sizes(16), 0.01, 17).unwrap();
        let inputs = t.teacher.layer_inputs(&t.train.x).unwrap();
        assert_eq!(inputs.len(), 3);
        assert_eq!(inputs[0], t.train.x);
        assert_eq!(inputs[1].rows(), 6);
        assert_eq!(inputs[2].rows(), 4);
        // Recomputing the forward from the last cached input matches.
        let out = t.teacher.weights()[2].matmul(&inputs[2]).unwrap();
        assert_eq!(out, t.teacher.forward(&t.train.x).unwrap());
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(make_task(TaskKind::Regression, &[8], sizes(16), 0.01, 1).is_err());
        assert!(make_task(TaskKind::Classification, &[8, 1], sizes(16), 0.0, 1).is_err());
        assert!(make_task(
            TaskKind::Regression,
            &[8, 8, 1],
            SplitSizes {
                train: 0,
                validation: 1,
                test: 1
            },
            0.01,
            1
        )
        .is_err());
    }
}
