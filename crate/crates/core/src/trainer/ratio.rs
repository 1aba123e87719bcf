use crate::error::{Error, Result};
use crate::losses::{SlotCounts, Stage};
use serde::{Deserialize, Serialize};

/// Positive and background slot tallies for one semi-supervised step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub iteration: usize,
    pub stage: Stage,
    pub slots_per_image: usize,
    pub labeled_images: usize,
    pub unlabeled_images: usize,
    /// Matched ground truth and the background rest.
    pub labeled: SlotCounts,
    /// Matched pseudo-labels, confident student background, and slots left out.
    pub unlabeled: SlotCounts,
    pub pseudo_labels: usize,
    pub dropped: usize,
}

fn share(part: usize, images: usize, slots: usize) -> f64 {
    if images == 0 || slots == 0 {
        0.0
    } else {
        part as f64 / (images * slots) as f64
    }
}

impl RatioEntry {
    /// Fraction of unlabeled slots trained towards background.
    pub fn background_share(&self) -> f64 {
        share(self.unlabeled.negative, self.unlabeled_images, self.slots_per_image)
    }

    pub fn positive_share(&self) -> f64 {
        share(self.unlabeled.positive, self.unlabeled_images, self.slots_per_image)
    }

    pub fn labeled_background_share(&self) -> f64 {
        share(self.labeled.negative, self.labeled_images, self.slots_per_image)
    }

    /// Every slot of every image lands in exactly one bucket.
    pub fn check(&self) -> Result<()> {
        let n = self.slots_per_image;
        if self.labeled.total() != n * self.labeled_images
            || self.unlabeled.total() != n * self.unlabeled_images
            || self.labeled.ignored != 0
        {
            return Err(Error::Training(format!(
                "slot tallies do not cover {n} slots per image: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioLog {
    pub entries: Vec<RatioEntry>,
}

impl RatioLog {
    pub fn push(&mut self, entry: RatioEntry) -> Result<()> {
        entry.check()?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn background_shares(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.background_share()).collect()
    }

    /// Mean background share over entries whose iteration lies in `[lo, hi)`.
    pub fn mean_background_share(&self, lo: usize, hi: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.iteration >= lo && e.iteration < hi)
            .map(|e| e.background_share())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean background share over `windows` consecutive, equally sized runs
    /// of entries; trailing entries that do not fill a window are dropped.
    pub fn background_profile(&self, windows: usize) -> Vec<f64> {
        if windows == 0 || self.entries.len() < windows {
            return Vec::new();
        }
        let w = self.entries.len() / windows;
        self.entries
            .chunks_exact(w)
            .take(windows)
            .map(|c| c.iter().map(|e| e.background_share()).sum::<f64>() / w as f64)
            .collect()
    }
}

/// Index of the highest value when it is strictly above both ends, so the
/// series rises before it falls.
pub fn interior_peak(profile: &[f64]) -> Option<usize> {
    let (i, &m) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    let (first, last) = (profile[0], profile[profile.len() - 1]);
    (i > 0 && i + 1 < profile.len() && m > first && m > last).then_some(i)
}
