use super::scene::SceneRecord;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Fewest keypoints a figure needs to be worth annotating.
pub const MIN_KEYPOINTS: usize = 7;
/// Most figures annotated per image.
pub const MAX_FIGURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Rule {
    /// A figure with some but too few annotated keypoints.
    TooFewKeypoints,
    /// More annotated figures than the per-image cap.
    TooManyFigures,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub scene_id: String,
    pub rule: Rule,
    /// Offending person for per-figure rules.
    pub person: Option<usize>,
    pub msg: String,
}

/// Advisory checks of the annotation guidelines that can be read off the
/// labels. Judgments about occlusion guesses and profile-view eyes and ears
/// were made by annotators and leave no trace to check here.
pub fn validate_popart_rules(scene: &SceneRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, p) in scene.persons.iter().enumerate() {
        let n = p.num_annotated();
        if (1..MIN_KEYPOINTS).contains(&n) {
            out.push(Violation {
                scene_id: scene.id.clone(),
                rule: Rule::TooFewKeypoints,
                person: Some(i),
                msg: format!("person {i} has {n} annotated keypoints, fewer than {MIN_KEYPOINTS}"),
            });
        }
    }
    let figures = scene.persons.iter().filter(|p| p.num_annotated() > 0).count();
    if figures > MAX_FIGURES {
        out.push(Violation {
            scene_id: scene.id.clone(),
            rule: Rule::TooManyFigures,
            person: None,
            msg: format!("{figures} annotated figures, more than {MAX_FIGURES}"),
        });
    }
    out
}

/// Seeded partition into train, validation and test sets. Sizes are the
/// floors of `fraction · n` for validation and test; train takes the rest.
pub fn split_dataset<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !f.is_finite() || *f < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (b * n as f64).floor() as usize;
    let n_test = ((c * n as f64).floor() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let take = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}
