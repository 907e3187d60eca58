use serde::Serialize;

use crate::error::{Error, Result};

/// `acc[round][task]`, defined for `task ≤ round`: round `r` has `r + 1`
/// entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rounds: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rounds(rounds: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::default();
        for row in rounds {
            m.push_round(row)?;
        }
        Ok(m)
    }

    pub fn push_round(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rounds.len() + 1;
        if row.len() != expected {
            return Err(Error::LengthMismatch {
                op: "AccuracyMatrix::push_round",
                expected,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("AccuracyMatrix entry"));
        }
        self.rounds.push(row);
        Ok(())
    }

    pub fn rounds(&self) -> &[Vec<f64>] {
        &self.rounds
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Score of `task` across the rounds after it was learned.
    pub fn task_curve(&self, task: usize) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.get(task).copied()).collect()
    }
}

/// Mean over rounds of the mean over tasks seen so far.
pub fn average_accuracy(acc: &AccuracyMatrix) -> Result<f64> {
    if acc.rounds.is_empty() {
        return Err(Error::EmptyInput("average_accuracy"));
    }
    let per_round = acc
        .rounds
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64);
    Ok(per_round.sum::<f64>() / acc.rounds.len() as f64)
}

/// `½[(a₁ − a₂) + (a₁ − a₃)]` for the first task's scores after rounds 1–3.
/// Negative values mean backward transfer.
pub fn forgetting_first_task(acc: &AccuracyMatrix) -> Result<f64> {
    if acc.rounds.len() < 3 {
        return Err(Error::invalid("rounds", acc.rounds.len(), "forgetting needs at least 3 rounds"));
    }
    let a = |r: usize| acc.rounds[r][0];
    Ok(0.5 * ((a(0) - a(1)) + (a(0) - a(2))))
}
