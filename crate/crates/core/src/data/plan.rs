use rand::seq::SliceRandom;

use super::DataError;
use crate::rng;

/// Which classes form the base task and in what order the rest arrive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionPlan {
    /// Ascending class ids trained jointly first.
    pub base_classes: Vec<usize>,
    /// One class per incremental session, in arrival order.
    pub incremental_order: Vec<usize>,
    pub seed: u64,
}

impl SessionPlan {
    pub fn class_count(&self) -> usize {
        self.base_classes.len() + self.incremental_order.len()
    }

    /// Classes in the order they are first seen: base (ascending), then the
    /// incremental order.
    pub fn arrival_order(&self) -> Vec<usize> {
        self.base_classes
            .iter()
            .chain(&self.incremental_order)
            .copied()
            .collect()
    }

    /// Truncates the incremental schedule to `sessions` classes.
    pub fn limit_sessions(&self, sessions: usize) -> SessionPlan {
        SessionPlan {
            base_classes: self.base_classes.clone(),
            incremental_order: self.incremental_order.iter().take(sessions).copied().collect(),
            seed: self.seed,
        }
    }
}

impl std::fmt::Display for SessionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        writeln!(f, "base {:?}", self.base_classes)?;
        for (i, c) in self.incremental_order.iter().enumerate() {
            writeln!(f, "session {} class {}", i + 1, c)?;
        }
        Ok(())
    }
}

/// A random half (rounded down) of the classes becomes the base set; the
/// remainder, shuffled, is the incremental order.
pub fn make_session_plan(class_count: usize, seed: u64) -> Result<SessionPlan, DataError> {
    if class_count < 4 {
        return Err(DataError::TooFewClasses(class_count));
    }
    let mut classes: Vec<usize> = (0..class_count).collect();
    classes.shuffle(&mut rng::stream(seed, "session-plan"));
    let half = class_count / 2;
    let mut base_classes = classes[..half].to_vec();
    base_classes.sort_unstable();
    Ok(SessionPlan {
        base_classes,
        incremental_order: classes[half..].to_vec(),
        seed,
    })
}
