use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::episode::Episode;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const DEFAULT_SPLIT_RATIOS: [f64; 4] = [0.6, 0.1, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Episode>,
    pub validation: Vec<Episode>,
    pub calibration: Vec<Episode>,
    pub test: Vec<Episode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub calibration: usize,
    pub test: usize,
}

impl SplitDataset {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            validation: self.validation.len(),
            calibration: self.calibration.len(),
            test: self.test.len(),
        }
    }

    pub fn parts(&self) -> [(&'static str, &[Episode]); 4] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("calibration", &self.calibration),
            ("test", &self.test),
        ]
    }
}

/// Floor allocation for validation, calibration and test; train takes the
/// remainder.
pub fn split_counts(n_patients: usize, ratios: [f64; 4]) -> Result<SplitCounts> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, expected 1")));
    }
    if n_patients < 4 {
        return Err(Error::UnderpopulatedSplit {
            split: "all",
            n_patients,
        });
    }
    let alloc = |r: f64| ((n_patients as f64) * r + 1e-9).floor() as usize;
    let validation = alloc(ratios[1]);
    let calibration = alloc(ratios[2]);
    let test = alloc(ratios[3]);
    let train = n_patients - validation - calibration - test;
    let counts = SplitCounts {
        train,
        validation,
        calibration,
        test,
    };
    for (name, c) in [
        ("train", train),
        ("validation", validation),
        ("calibration", calibration),
        ("test", test),
    ] {
        if c == 0 {
            return Err(Error::UnderpopulatedSplit {
                split: name,
                n_patients,
            });
        }
    }
    Ok(counts)
}

/// Patient-level shuffle and split. Each split is returned sorted by
/// patient id.
pub fn split_patients(episodes: &[Episode], ratios: [f64; 4], seed: u64) -> Result<SplitDataset> {
    let counts = split_counts(episodes.len(), ratios)?;
    let mut ids: Vec<u64> = episodes.iter().map(|e| e.patient_id).collect();
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Domain("duplicate patient ids".into()));
    }
    ids.sort_unstable();
    ids.shuffle(&mut seeded(seed));

    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_unstable_by_key(|&i| episodes[i].patient_id);
    let by_id = |id: u64| -> &Episode {
        let pos = order
            .binary_search_by_key(&id, |&i| episodes[i].patient_id)
            .expect("id present");
        &episodes[order[pos]]
    };

    let take = |range: std::ops::Range<usize>| -> Vec<Episode> {
        let mut part: Vec<u64> = ids[range].to_vec();
        part.sort_unstable();
        part.into_iter().map(|id| by_id(id).clone()).collect()
    };
    let a = counts.train;
    let b = a + counts.validation;
    let c = b + counts.calibration;
    let d = c + counts.test;
    Ok(SplitDataset {
        train: take(0..a),
        validation: take(a..b),
        calibration: take(b..c),
        test: take(c..d),
    })
}
