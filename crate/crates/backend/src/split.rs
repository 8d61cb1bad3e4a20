use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPart {
    pub patients: Vec<String>,
    pub records: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: SplitPart,
    pub val: SplitPart,
    pub test: SplitPart,
}

/// Partitions patients (never individual records) into train/val/test by a
/// seeded shuffle of the sorted patient ids and rounded ratio cuts.
/// `records` are `(record_id, patient_id)` pairs.
pub fn split_dataset_by_patient(
    records: &[(String, Option<String>)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, Error> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRequest(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (record, patient) in records {
        let p = patient.as_deref().ok_or_else(|| Error::MissingPatientId(record.clone()))?;
        by_patient.entry(p).or_default().push(record);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = patients.len();
    let n_train = ((rt * n as f64).round() as usize).min(n);
    let n_val = ((rv * n as f64).round() as usize).min(n - n_train);
    let part = |ids: &[&str]| {
        let set: BTreeSet<&str> = ids.iter().copied().collect();
        SplitPart {
            patients: set.iter().map(|s| s.to_string()).collect(),
            records: set
                .iter()
                .flat_map(|p| by_patient[p].iter().map(|r| r.to_string()))
                .collect(),
        }
    };
    Ok(DatasetSplit {
        train: part(&patients[..n_train]),
        val: part(&patients[n_train..n_train + n_val]),
        test: part(&patients[n_train + n_val..]),
    })
}
