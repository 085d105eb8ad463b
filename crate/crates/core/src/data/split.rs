use rand::seq::SliceRandom;

use super::{DataError, ImageSet};
use crate::rng;

/// Disjoint train / validation / test partitions of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTriple {
    pub train: ImageSet,
    pub validation: ImageSet,
    pub test: ImageSet,
}

/// Holds out `round(fraction * n_c)` items of every class (clamped so both
/// sides keep at least one item). Both outputs preserve the input order.
pub fn stratified_split(set: &ImageSet, fraction: f64, seed: u64) -> Result<(ImageSet, ImageSet), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let classes = set.class_indices();
    let small: Vec<usize> = classes.iter().filter(|(_, v)| v.len() < 2).map(|(c, _)| *c).collect();
    if !small.is_empty() {
        return Err(DataError::TooFewItems(small));
    }
    let mut held = vec![false; set.len()];
    for (class, mut members) in classes {
        let mut r = rng::seeded(rng::derive_seed(seed, class as u64));
        members.shuffle(&mut r);
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        for &i in &members[..take] {
            held[i] = true;
        }
    }
    let kept: Vec<usize> = (0..set.len()).filter(|&i| !held[i]).collect();
    let out: Vec<usize> = (0..set.len()).filter(|&i| held[i]).collect();
    Ok((set.subset(&kept), set.subset(&out)))
}

/// Test split first, then `val_fraction` of the remainder as validation.
pub fn train_val_test_split(
    set: &ImageSet,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitTriple, DataError> {
    let (rest, test) = stratified_split(set, test_fraction, rng::derive_seed(seed, rng::tag("test-split")))?;
    let (train, validation) = stratified_split(&rest, val_fraction, rng::derive_seed(seed, rng::tag("val-split")))?;
    Ok(SplitTriple {
        train,
        validation,
        test,
    })
}
