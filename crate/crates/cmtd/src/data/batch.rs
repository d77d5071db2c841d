//! Adversarial-batch persistence: originals, perturbed examples, labels,
//! outcome flags and distortions, stored in the shared record container
//! with magic `CMTB`. The attack name and configuration travel in the
//! manifest; unknown attack names are carried as opaque strings.

use std::path::Path;

use super::DataError;
use crate::container::{read_container, write_container, Record};
use crate::tensor::Tensor;

pub const BATCH_MAGIC: [u8; 4] = *b"CMTB";
pub const BATCH_VERSION: u16 = 1;

/// Crafted adversarial examples paired with their originals.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub true_labels: Vec<u8>,
    pub attack_name: String,
    /// configuration echo (attack parameters as JSON)
    pub config: serde_json::Value,
    pub success: Vec<bool>,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    /// Recomputes per-example distortions from the stored tensor pair.
    pub fn recompute_distortions(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mut l2 = Vec::with_capacity(n);
        let mut linf = Vec::with_capacity(n);
        for i in 0..n {
            let a = self.originals.slice_batch(i);
            let b = self.perturbed.slice_batch(i);
            l2.push(a.l2_distance(&b));
            linf.push(a.linf_distance(&b));
        }
        (l2, linf)
    }
}

pub fn save_batch(batch: &AdversarialBatch, path: &Path) -> Result<(), DataError> {
    let manifest = serde_json::json!({
        "attack": batch.attack_name,
        "config": batch.config,
        "count": batch.len(),
    });
    let as_f64 = |it: &[bool]| it.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
    let records = vec![
        Record {
            name: "originals".into(),
            shape: batch.originals.shape().to_vec(),
            values: batch.originals.values().to_vec(),
        },
        Record {
            name: "perturbed".into(),
            shape: batch.perturbed.shape().to_vec(),
            values: batch.perturbed.values().to_vec(),
        },
        Record {
            name: "labels".into(),
            shape: vec![batch.true_labels.len()],
            values: batch.true_labels.iter().map(|&l| f64::from(l)).collect(),
        },
        Record {
            name: "success".into(),
            shape: vec![batch.success.len()],
            values: as_f64(&batch.success),
        },
        Record {
            name: "l2".into(),
            shape: vec![batch.l2.len()],
            values: batch.l2.clone(),
        },
        Record {
            name: "linf".into(),
            shape: vec![batch.linf.len()],
            values: batch.linf.clone(),
        },
    ];
    write_container(path, BATCH_MAGIC, BATCH_VERSION, &manifest, &records)?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<AdversarialBatch, DataError> {
    let (manifest, records) = read_container(path, BATCH_MAGIC, BATCH_VERSION)?;
    let find = |name: &str| -> Result<&Record, DataError> {
        records.iter().find(|r| r.name == name).ok_or_else(|| {
            DataError::DimensionMismatch {
                path: path.display().to_string(),
                reason: format!("missing record {name}"),
            }
        })
    };
    let originals = find("originals")?;
    let perturbed = find("perturbed")?;
    let labels = find("labels")?;
    if originals.shape != perturbed.shape {
        return Err(DataError::DimensionMismatch {
            path: path.display().to_string(),
            reason: "originals and perturbed shapes differ".into(),
        });
    }
    Ok(AdversarialBatch {
        originals: Tensor::new(originals.shape.clone(), originals.values.clone())?,
        perturbed: Tensor::new(perturbed.shape.clone(), perturbed.values.clone())?,
        true_labels: labels.values.iter().map(|&v| v as u8).collect(),
        attack_name: manifest["attack"].as_str().unwrap_or("unknown").to_string(),
        config: manifest.get("config").cloned().unwrap_or(serde_json::Value::Null),
        success: find("success")?.values.iter().map(|&v| v != 0.0).collect(),
        l2: find("l2")?.values.clone(),
        linf: find("linf")?.values.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch(n: usize) -> AdversarialBatch {
        let mut rng = crate::rng::SplitMix64::new(5);
        let originals =
            Tensor::new(vec![n, 1, 3, 3], (0..n * 9).map(|_| rng.next_f64() * 0.5).collect()).unwrap();
        let mut perturbed = originals.detached();
        for v in perturbed.values_mut() {
            *v = (*v + 0.05).min(1.0);
        }
        let slice = |t: &Tensor, i: usize| t.slice_batch(i);
        let l2 = (0..n).map(|i| slice(&originals, i).l2_distance(&slice(&perturbed, i))).collect();
        let linf = (0..n).map(|i| slice(&originals, i).linf_distance(&slice(&perturbed, i))).collect();
        AdversarialBatch {
            originals,
            perturbed,
            true_labels: (0..n as u8).collect(),
            attack_name: "fgsm".into(),
            config: serde_json::json!({"epsilon": 0.1}),
            success: (0..n).map(|i| i % 2 == 0).collect(),
            l2,
            linf,
        }
    }

    #[test]
    fn roundtrip_equality() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cmtb");
        let batch = sample_batch(10);
        save_batch(&batch, &path).unwrap();
        let loaded = load_batch(&path).unwrap();
        assert_eq!(loaded.originals.values(), batch.originals.values());
        assert_eq!(loaded.perturbed.values(), batch.perturbed.values());
        assert_eq!(loaded.true_labels, batch.true_labels);
        assert_eq!(loaded.success, batch.success);
        assert_eq!(loaded.l2, batch.l2);
        assert_eq!(loaded.linf, batch.linf);
        assert_eq!(loaded.attack_name, "fgsm");
        assert_eq!(loaded.config["epsilon"], 0.1);
    }

    #[test]
    fn distortions_recompute_within_1e12() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cmtb");
        save_batch(&sample_batch(6), &path).unwrap();
        let loaded = load_batch(&path).unwrap();
        let (l2, linf) = loaded.recompute_distortions();
        for i in 0..loaded.len() {
            assert!((l2[i] - loaded.l2[i]).abs() <= 1e-12);
            assert!((linf[i] - loaded.linf[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn unknown_attack_name_is_opaque() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cmtb");
        let mut batch = sample_batch(2);
        batch.attack_name = "quantum_meddler_v9".into();
        save_batch(&batch, &path).unwrap();
        let loaded = load_batch(&path).unwrap();
        assert_eq!(loaded.attack_name, "quantum_meddler_v9");
    }

    #[test]
    fn weight_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cmtb");
        crate::container::write_container(&path, *b"CMTD", 1, &serde_json::json!({}), &[]).unwrap();
        assert!(load_batch(&path).is_err());
    }
}
