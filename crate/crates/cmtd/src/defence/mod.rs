//! Robust label-pair defence: empirical vulnerability estimation, the
//! Classmap (each class paired with the class least likely to absorb its
//! misclassifications), the collaborative multi-task training objective,
//! and the pair-match detector.

mod objective;

pub use objective::{build_objective, multitask_train, LossWeights};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AdversarialBatch;
use crate::nn::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DefenceError {
    #[error("class {0} has no examples in the adversarial set")]
    EmptyClass(u8),
    #[error("no robust label for class {0}")]
    MissingRobustLabel(u8),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("invalid Classmap: {0}")]
    InvalidClassmap(String),
    #[error("model variant {0:?} exposes no auxiliary head")]
    NotDefended(crate::nn::Variant),
    #[error("Classmap file error: {0}")]
    ClassmapIo(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-class mean confidence of adversarial examples: row i is the mean
/// softmax output over adversarial examples whose original class is i.
#[derive(Debug, Clone)]
pub struct VulnerabilityMatrix {
    rows: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl VulnerabilityMatrix {
    pub fn class_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, class: u8) -> &[f64] {
        &self.rows[class as usize]
    }

    pub fn count(&self, class: u8) -> usize {
        self.counts[class as usize]
    }

    /// Builds a matrix from explicit rows (used by tests).
    pub fn from_rows(rows: Vec<Vec<f64>>, counts: Vec<usize>) -> Self {
        Self { rows, counts }
    }
}

/// Feeds the adversarial set through the model and averages the softmax
/// confidence per originating class. Every class must be represented.
pub fn estimate_vulnerability(
    model: &Model,
    adversarial_set: &AdversarialBatch,
) -> Result<VulnerabilityMatrix, DefenceError> {
    let k = model.class_count();
    let mut sums = vec![vec![0.0f64; k]; k];
    let mut counts = vec![0usize; k];

    let heads = model.forward_heads(&adversarial_set.perturbed)?;
    let logits = heads.main();
    let mut tape = crate::tensor::Tape::new();
    let leaf = tape.leaf(logits, false);
    let probs = tape.softmax(&leaf)?;

    for (i, &label) in adversarial_set.true_labels.iter().enumerate() {
        let row = &probs.values()[i * k..(i + 1) * k];
        for (j, &p) in row.iter().enumerate() {
            sums[label as usize][j] += p;
        }
        counts[label as usize] += 1;
    }
    for class in 0..k {
        if counts[class] == 0 {
            return Err(DefenceError::EmptyClass(class as u8));
        }
        for v in &mut sums[class] {
            *v /= counts[class] as f64;
        }
    }
    Ok(VulnerabilityMatrix { rows: sums, counts })
}

/// Robust label-pair table: `pairs[i]` is the class least likely to
/// absorb misclassifications originating from class i, never i itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Classmap {
    pairs: Vec<u8>,
    pub source_attack: String,
    pub epsilon: f64,
    pub model_hash: String,
    pub examples_per_class: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ClassmapFile {
    classes: usize,
    pairs: Vec<[u8; 2]>,
    source_attack: String,
    epsilon: f64,
    model_hash: String,
    examples_per_class: Vec<usize>,
}

impl Classmap {
    pub fn new(
        pairs: Vec<u8>,
        source_attack: impl Into<String>,
        epsilon: f64,
        model_hash: impl Into<String>,
        examples_per_class: Vec<usize>,
    ) -> Result<Self, DefenceError> {
        let map = Self {
            pairs,
            source_attack: source_attack.into(),
            epsilon,
            model_hash: model_hash.into(),
            examples_per_class,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<(), DefenceError> {
        for (class, &robust) in self.pairs.iter().enumerate() {
            if robust as usize == class {
                return Err(DefenceError::InvalidClassmap(format!(
                    "class {class} paired with itself"
                )));
            }
            if robust as usize >= self.pairs.len() {
                return Err(DefenceError::InvalidClassmap(format!(
                    "class {class} paired with out-of-range {robust}"
                )));
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.pairs.len()
    }

    /// The paired robust label of a true label.
    pub fn robust_label(&self, label: u8) -> u8 {
        self.pairs[label as usize]
    }

    /// Detector acceptance is exactly membership of (main, auxiliary) in
    /// the pair table.
    pub fn matches(&self, main_label: u8, auxiliary_label: u8) -> bool {
        (main_label as usize) < self.pairs.len()
            && self.pairs[main_label as usize] == auxiliary_label
    }

    /// Fraction of classes on which two tables agree.
    pub fn agreement(&self, other: &Classmap) -> Result<f64, DefenceError> {
        if self.class_count() != other.class_count() {
            return Err(DefenceError::InvalidClassmap(format!(
                "class counts differ: {} vs {}",
                self.class_count(),
                other.class_count()
            )));
        }
        let same = self.pairs.iter().zip(&other.pairs).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.pairs.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), DefenceError> {
        let file = ClassmapFile {
            classes: self.pairs.len(),
            pairs: self.pairs.iter().enumerate().map(|(i, &r)| [i as u8, r]).collect(),
            source_attack: self.source_attack.clone(),
            epsilon: self.epsilon,
            model_hash: self.model_hash.clone(),
            examples_per_class: self.examples_per_class.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| DefenceError::ClassmapIo(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| DefenceError::ClassmapIo(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DefenceError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| DefenceError::ClassmapIo(format!("{}: {e}", path.display())))?;
        let file: ClassmapFile = serde_json::from_str(&json)
            .map_err(|e| DefenceError::ClassmapIo(format!("{}: {e}", path.display())))?;
        let mut pairs = vec![0u8; file.classes];
        let mut seen = vec![false; file.classes];
        for [label, robust] in file.pairs {
            if label as usize >= file.classes {
                return Err(DefenceError::InvalidClassmap(format!("label {label} out of range")));
            }
            pairs[label as usize] = robust;
            seen[label as usize] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(DefenceError::InvalidClassmap("missing class pair".into()));
        }
        Classmap::new(pairs, file.source_attack, file.epsilon, file.model_hash, file.examples_per_class)
    }
}

/// Picks each row's robust label: the argmin over the off-diagonal
/// confidences, ties resolved to the lowest class index.
pub fn encode_classmap(
    matrix: &VulnerabilityMatrix,
    source_attack: impl Into<String>,
    epsilon: f64,
    model_hash: impl Into<String>,
) -> Classmap {
    let k = matrix.class_count();
    let mut pairs = Vec::with_capacity(k);
    for i in 0..k {
        let row = &matrix.rows[i];
        let mut best = usize::MAX;
        let mut best_v = f64::INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != i && v < best_v {
                best_v = v;
                best = j;
            }
        }
        pairs.push(best as u8);
    }
    Classmap {
        pairs,
        source_attack: source_attack.into(),
        epsilon,
        model_hash: model_hash.into(),
        examples_per_class: matrix.counts.clone(),
    }
}

/// Outcome of the pair-match check for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    /// accepted iff the (main, auxiliary) pair is in the Classmap
    pub accepted: bool,
    /// main-head argmax (the classification result when accepted)
    pub predicted: u8,
    /// auxiliary-head argmax
    pub auxiliary: u8,
    pub matched_pair: bool,
}

/// Checks one example against the Classmap.
pub fn detect(model: &Model, classmap: &Classmap, x: &Tensor) -> Result<DetectionVerdict, DefenceError> {
    Ok(classify_or_reject(model, classmap, x)?.remove(0))
}

/// Vectorized pair-match check over a batch; one forward pass.
pub fn classify_or_reject(
    model: &Model,
    classmap: &Classmap,
    images: &Tensor,
) -> Result<Vec<DetectionVerdict>, DefenceError> {
    if images.shape()[0] == 0 {
        return Ok(Vec::new());
    }
    let heads = model.forward_heads(images)?;
    let aux = heads
        .auxiliary()
        .ok_or(DefenceError::NotDefended(model.variant()))?
        .clone();
    let main = heads.main();
    let verdicts = (0..images.shape()[0])
        .map(|i| {
            let predicted = main.argmax_row(i) as u8;
            let auxiliary = aux.argmax_row(i) as u8;
            let matched = classmap.matches(predicted, auxiliary);
            DetectionVerdict {
                accepted: matched,
                predicted,
                auxiliary,
                matched_pair: matched,
            }
        })
        .collect();
    Ok(verdicts)
}

/// Fraction of verdicts rejected; the mis-detection rate when the batch
/// is benign.
pub fn rejection_rate(verdicts: &[DetectionVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| !v.accepted).count() as f64 / verdicts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelSpec, Variant};

    #[test]
    fn single_example_rows_equal_softmax() {
        let model = build_model(&ModelSpec::linear([1, 1, 2], 3), 8).unwrap();
        // one adversarial example per class
        let images = Tensor::new(vec![3, 1, 1, 2], vec![0.1, 0.9, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let batch = AdversarialBatch {
            originals: images.clone(),
            perturbed: images.clone(),
            true_labels: vec![0, 1, 2],
            attack_name: "fgsm".into(),
            config: serde_json::Value::Null,
            success: vec![true; 3],
            l2: vec![0.0; 3],
            linf: vec![0.0; 3],
        };
        let matrix = estimate_vulnerability(&model, &batch).unwrap();
        for class in 0..3u8 {
            let row = matrix.row(class);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "row sums to {sum}");
            assert_eq!(matrix.count(class), 1);
        }
        // with one example per class the row is exactly that example's softmax
        let heads = model.forward_heads(&images).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let leaf = tape.leaf(&heads.z, false);
        let probs = tape.softmax(&leaf).unwrap();
        for class in 0..3usize {
            for j in 0..3 {
                assert!((matrix.row(class as u8)[j] - probs.values()[class * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_class_rejected_by_name() {
        let model = build_model(&ModelSpec::linear([1, 1, 2], 3), 8).unwrap();
        let images = Tensor::new(vec![2, 1, 1, 2], vec![0.1, 0.9, 0.5, 0.5]).unwrap();
        let batch = AdversarialBatch {
            originals: images.clone(),
            perturbed: images,
            true_labels: vec![0, 1],
            attack_name: "fgsm".into(),
            config: serde_json::Value::Null,
            success: vec![true; 2],
            l2: vec![0.0; 2],
            linf: vec![0.0; 2],
        };
        match estimate_vulnerability(&model, &batch) {
            Err(DefenceError::EmptyClass(2)) => {}
            other => panic!("expected EmptyClass(2), got {other:?}"),
        }
    }

    #[test]
    fn uniform_off_diagonal_breaks_ties_low() {
        let rows = vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.1, 0.7, 0.1, 0.1],
            vec![0.1, 0.1, 0.7, 0.1],
            vec![0.1, 0.1, 0.1, 0.7],
        ];
        let matrix = VulnerabilityMatrix::from_rows(rows, vec![5; 4]);
        let map = encode_classmap(&matrix, "fgsm", 0.1, "h");
        assert_eq!(map.robust_label(0), 1); // lowest index j != 0
        assert_eq!(map.robust_label(1), 0);
        assert_eq!(map.robust_label(2), 0);
        assert_eq!(map.robust_label(3), 0);
    }

    #[test]
    fn unique_minimum_found_by_brute_force() {
        let row3 = vec![0.1, 0.05, 0.2, 0.3, 0.05, 0.1, 0.05, 0.05, 0.05, 0.05];
        // brute-force argmin over j != 3
        let expected = row3
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != 3)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let mut rows = vec![vec![0.1; 10]; 10];
        rows[3] = row3;
        let matrix = VulnerabilityMatrix::from_rows(rows, vec![1; 10]);
        let map = encode_classmap(&matrix, "fgsm", 0.1, "h");
        assert_eq!(map.robust_label(3) as usize, expected);
        assert_eq!(expected, 1);
    }

    #[test]
    fn encoding_invariant_under_row_rescaling() {
        let mut rows = vec![vec![0.0; 6]; 6];
        let mut rng = crate::rng::SplitMix64::new(12);
        for row in rows.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.uniform(0.01, 1.0);
            }
        }
        let a = encode_classmap(&VulnerabilityMatrix::from_rows(rows.clone(), vec![1; 6]), "x", 0.1, "h");
        for (i, row) in rows.iter_mut().enumerate() {
            let scale = 1.0 + i as f64;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        let b = encode_classmap(&VulnerabilityMatrix::from_rows(rows, vec![1; 6]), "x", 0.1, "h");
        assert_eq!(a.agreement(&b).unwrap(), 1.0);
    }

    #[test]
    fn robust_label_never_self() {
        let mut rng = crate::rng::SplitMix64::new(7);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..10).map(|_| rng.next_f64()).collect())
                .collect();
            let map = encode_classmap(&VulnerabilityMatrix::from_rows(rows, vec![1; 10]), "x", 0.1, "h");
            for class in 0..10u8 {
                assert_ne!(map.robust_label(class), class);
            }
        }
    }

    #[test]
    fn classmap_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let map = Classmap::new(vec![3, 2, 1, 0], "fgsm", 0.1, "abc123", vec![10, 10, 10, 10]).unwrap();
        map.save(&path).unwrap();
        let loaded = Classmap::load(&path).unwrap();
        assert_eq!(loaded, map);
        // spec'd JSON field names
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["classes"], 4);
        assert!(raw["pairs"].is_array());
        assert_eq!(raw["source_attack"], "fgsm");
        assert_eq!(raw["epsilon"], 0.1);
        assert_eq!(raw["model_hash"], "abc123");
        assert_eq!(raw["examples_per_class"][0], 10);
    }

    #[test]
    fn self_pair_rejected() {
        assert!(matches!(
            Classmap::new(vec![0, 0], "x", 0.1, "h", vec![1, 1]),
            Err(DefenceError::InvalidClassmap(_))
        ));
    }

    #[test]
    fn detector_acceptance_is_pair_membership() {
        // synthetic-head property: with controllable logits the verdict is
        // exactly set membership
        let mut model = build_model(
            &ModelSpec {
                input_shape: [1, 1, 2],
                class_count: 3,
                variant: Variant::DefendedNolock,
                layers: vec![],
                padding: crate::tensor::Padding::Valid,
            },
            1,
        )
        .unwrap();
        // main head returns argmax = pixel 0 rounded to a class via weights
        model
            .set_param("head_z.w", Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        model
            .set_param("head_zp.w", Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, -1.0]).unwrap())
            .unwrap();
        let map = Classmap::new(vec![1, 2, 0], "t", 0.1, "h", vec![1; 3]).unwrap();

        let mut rng = crate::rng::SplitMix64::new(5);
        for _ in 0..100 {
            let x = Tensor::new(vec![1, 1, 1, 2], (0..2).map(|_| rng.next_f64()).collect()).unwrap();
            let verdict = detect(&model, &map, &x).unwrap();
            assert_eq!(verdict.accepted, verdict.matched_pair);
            assert_eq!(verdict.accepted, map.matches(verdict.predicted, verdict.auxiliary));
        }
    }

    #[test]
    fn plain_model_cannot_detect() {
        let model = build_model(&ModelSpec::linear([1, 1, 2], 3), 1).unwrap();
        let map = Classmap::new(vec![1, 2, 0], "t", 0.1, "h", vec![1; 3]).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            detect(&model, &map, &x),
            Err(DefenceError::NotDefended(_))
        ));
    }

    #[test]
    fn empty_batch_empty_verdicts() {
        let model = build_model(
            &ModelSpec {
                input_shape: [1, 1, 2],
                class_count: 3,
                variant: Variant::DefendedNolock,
                layers: vec![],
                padding: crate::tensor::Padding::Valid,
            },
            1,
        )
        .unwrap();
        let map = Classmap::new(vec![1, 2, 0], "t", 0.1, "h", vec![1; 3]).unwrap();
        let empty = Tensor::zeros(vec![0, 1, 1, 2]);
        assert!(classify_or_reject(&model, &map, &empty).unwrap().is_empty());
    }
}
