use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing list of epochs at which checkpoints are taken.
/// Epoch 0 is the initialized network before any update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EpochGrid(Vec<u32>);

impl EpochGrid {
    pub fn new(epochs: Vec<u32>) -> Result<Self> {
        let grid = EpochGrid(epochs);
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("epoch grid is empty".into()));
        }
        if let Some(w) = self.0.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "epoch grid must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(())
    }

    /// `0, step, 2·step, ...` up to and including `last`.
    pub fn every(step: u32, last: u32) -> Result<Self> {
        if step == 0 {
            return Err(Error::Config("grid step must be positive".into()));
        }
        Self::new((0..=last).step_by(step as usize).collect())
    }

    pub fn epochs(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, epoch: u32) -> bool {
        self.0.binary_search(&epoch).is_ok()
    }

    pub fn position(&self, epoch: u32) -> Option<usize> {
        self.0.binary_search(&epoch).ok()
    }

    pub fn last(&self) -> u32 {
        *self.0.last().expect("grid is nonempty")
    }
}

/// Every epoch up to 300, every `step_mid`-th epoch from 300 to 900, and every
/// `step_late`-th epoch from 900 on, stopping before `total_epochs`.
pub fn paper_epoch_grid(total_epochs: u32, step_mid: u32, step_late: u32) -> Result<EpochGrid> {
    if total_epochs == 0 || step_mid == 0 || step_late == 0 {
        return Err(Error::Config(
            "total_epochs and grid steps must be positive".into(),
        ));
    }
    let end = total_epochs; // exclusive
    let mut epochs: Vec<u32> = (0..=300.min(end - 1)).collect();
    epochs.extend((300..=900).step_by(step_mid as usize).filter(|&t| t < end));
    epochs.extend((900..end).step_by(step_late as usize));
    epochs.sort_unstable();
    epochs.dedup();
    EpochGrid::new(epochs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_count_matches_enumeration() {
        // Enumerated independently: |{0..=300} ∪ {300,303,..,900} ∪ {900,905,..,3995}|
        let mut set = std::collections::BTreeSet::new();
        set.extend(0..=300u32);
        let mut t = 300;
        while t <= 900 {
            set.insert(t);
            t += 3;
        }
        let mut t = 900;
        while t < 4000 {
            set.insert(t);
            t += 5;
        }
        assert_eq!(set.len(), 1120);
        let grid = paper_epoch_grid(4000, 3, 5).unwrap();
        assert_eq!(grid.len(), 1120);
        assert_eq!(grid.epochs(), set.into_iter().collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn membership_spot_checks() {
        let grid = paper_epoch_grid(4000, 3, 5).unwrap();
        for (t, expected) in [(299, true), (301, false), (303, true), (904, false), (905, true), (3995, true), (3999, false)] {
            assert_eq!(grid.contains(t), expected, "epoch {t}");
        }
    }

    #[test]
    fn closed_form_predicate() {
        let grid = paper_epoch_grid(4000, 3, 5).unwrap();
        for t in 0..4000u32 {
            let rule = t <= 300 || (t <= 900 && t % 3 == 0) || (t >= 900 && t % 5 == 0);
            assert_eq!(grid.contains(t), rule, "epoch {t}");
        }
    }

    #[test]
    fn truncation() {
        let grid = paper_epoch_grid(10, 3, 5).unwrap();
        assert_eq!(grid.epochs(), (0..10).collect::<Vec<_>>().as_slice());
        assert_eq!(paper_epoch_grid(1, 3, 5).unwrap().epochs(), &[0]);
    }

    #[test]
    fn rejects_unsorted() {
        assert!(EpochGrid::new(vec![0, 5, 5]).is_err());
        assert!(EpochGrid::new(vec![3, 1]).is_err());
        assert!(EpochGrid::new(vec![]).is_err());
    }

    #[test]
    fn every_includes_last_multiple() {
        let g = EpochGrid::every(5, 200).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!(g.last(), 200);
    }
}
