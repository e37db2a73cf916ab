use rayon::prelude::*;

use crate::{Error, Result};

/// Scores and outputs of every candidate, plus the winner.
#[derive(Debug, Clone)]
pub struct GridOutcome<A> {
    /// Index of the winning candidate.
    pub best: usize,
    pub scores: Vec<f64>,
    pub outputs: Vec<A>,
}

impl<A> GridOutcome<A> {
    pub fn best_score(&self) -> f64 {
        self.scores[self.best]
    }

    pub fn into_best(mut self) -> A {
        self.outputs.swap_remove(self.best)
    }
}

/// Index of the highest score; ties and NaNs resolve to the earliest
/// candidate.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if s > scores[b] || (scores[b].is_nan() && !s.is_nan()) => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Evaluate every candidate (in parallel, results kept in declared order) and
/// pick the one with the highest validation score.
pub fn grid_search<C, A, F>(candidates: &[C], evaluate: F) -> Result<GridOutcome<A>>
where
    C: Sync,
    A: Send,
    F: Fn(&C) -> Result<(f64, A)> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Empty("grid search needs at least one candidate".into()));
    }
    let results: Vec<(f64, A)> = candidates.par_iter().map(&evaluate).collect::<Result<_>>()?;
    let (scores, outputs): (Vec<f64>, Vec<A>) = results.into_iter().unzip();
    let best = argmax_first(&scores).expect("nonempty");
    Ok(GridOutcome { best, scores, outputs })
}
