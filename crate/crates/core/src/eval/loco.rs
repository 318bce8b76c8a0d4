use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::tensor_store::IGNORE_LABEL;

/// Leave-one-class-out split of one label map.
///
/// Known classes are compacted to `0..num_known`; the held-out class maps to
/// `num_known` (UNKNOWN). Ignored pixels stay at `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocoSplit {
    pub uuc: usize,
    pub num_known: usize,
    pub id_map: IdMap,
    pub train_mask: Vec<bool>,
    pub eval_labels: Vec<i32>,
}

/// Original class id -> compacted id (`None` for the held-out class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub uuc: usize,
    pub compact: Vec<Option<u32>>,
}

impl IdMap {
    pub fn new(num_classes: usize, uuc: usize) -> Result<Self, EvalError> {
        if uuc >= num_classes {
            return Err(EvalError::BadClass { uuc, num_classes });
        }
        let mut next = 0;
        let compact = (0..num_classes)
            .map(|c| {
                (c != uuc).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Ok(Self { uuc, compact })
    }

    pub fn num_known(&self) -> usize {
        self.compact.len() - 1
    }

    /// Original id of compacted class `k`.
    pub fn original(&self, k: u32) -> usize {
        self.compact.iter().position(|&c| c == Some(k)).expect("compacted id in range")
    }
}

impl LocoSplit {
    pub fn unknown_label(&self) -> i32 {
        self.num_known as i32
    }

    /// Evaluation labels with the UUC turned into ignore, for fitting.
    pub fn train_labels(&self) -> Vec<i32> {
        self.eval_labels
            .iter()
            .zip(&self.train_mask)
            .map(|(&l, &keep)| if keep { l } else { IGNORE_LABEL })
            .collect()
    }

    /// True for UUC pixels; meaningful only where `eval_labels != -1`.
    pub fn unknown_mask(&self) -> Vec<bool> {
        let u = self.unknown_label();
        self.eval_labels.iter().map(|&l| l == u).collect()
    }
}

pub fn loco_remap(labels: &[i32], num_classes: usize, uuc: usize) -> Result<LocoSplit, EvalError> {
    let id_map = IdMap::new(num_classes, uuc)?;
    let num_known = id_map.num_known();
    let mut train_mask = Vec::with_capacity(labels.len());
    let mut eval_labels = Vec::with_capacity(labels.len());
    for &l in labels {
        if l == IGNORE_LABEL {
            train_mask.push(false);
            eval_labels.push(IGNORE_LABEL);
            continue;
        }
        let c = usize::try_from(l)
            .ok()
            .filter(|&c| c < num_classes)
            .ok_or(EvalError::LabelOutOfRange { value: l })?;
        match id_map.compact[c] {
            Some(k) => {
                train_mask.push(true);
                eval_labels.push(k as i32);
            }
            None => {
                train_mask.push(false);
                eval_labels.push(num_known as i32);
            }
        }
    }
    Ok(LocoSplit {
        uuc,
        num_known,
        id_map,
        train_mask,
        eval_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remaps_and_compacts() {
        let split = loco_remap(&[0, 1, 2, 2, 1], 3, 1).unwrap();
        assert_eq!(split.eval_labels, vec![0, 2, 1, 1, 2]);
        assert_eq!(split.train_mask, vec![true, false, true, true, false]);
        assert_eq!(split.id_map.compact, vec![Some(0), None, Some(1)]);
        assert_eq!(split.id_map.original(1), 2);
        assert_eq!(split.train_labels(), vec![0, -1, 1, 1, -1]);
    }

    #[test]
    fn bad_class() {
        assert_eq!(
            loco_remap(&[0], 5, 7),
            Err(EvalError::BadClass { uuc: 7, num_classes: 5 })
        );
    }

    #[test]
    fn all_ignore() {
        let split = loco_remap(&[-1; 6], 3, 0).unwrap();
        assert!(split.train_mask.iter().all(|&m| !m));
        assert!(split.eval_labels.iter().all(|&l| l == -1));
    }
}
