//! Parameter-free aggregation of trained models: probability stacking,
//! per-task hard voting, and statistics over repeated runs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{argmax_first, Matrix};
use crate::parallel::{try_map, Execution};
use crate::training::MetricsReport;

/// Probability outputs (`B x 2`) of several models on the same test rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearnerBank {
    members: Vec<Matrix>,
}

impl LearnerBank {
    pub fn new(members: Vec<Matrix>) -> Result<Self> {
        let mut bank = LearnerBank::default();
        for m in members {
            bank.push(m)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, probs: Matrix) -> Result<()> {
        if let Some(first) = self.members.first() {
            if first.shape() != probs.shape() {
                return Err(Error::shape(
                    "learner bank",
                    format!("{:?}", first.shape()),
                    format!("{:?}", probs.shape()),
                ));
            }
        }
        self.members.push(probs);
        Ok(())
    }

    pub fn members(&self) -> &[Matrix] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn first(&self) -> Result<&Matrix> {
        self.members
            .first()
            .ok_or_else(|| Error::Argument("cannot aggregate an empty bank".into()))
    }
}

/// Element-wise mean of the member probabilities.
pub fn stack_mean(bank: &LearnerBank) -> Result<Matrix> {
    let first = bank.first()?;
    let k = bank.len() as f64;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for m in bank.members() {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    Ok(out.map(|v| v / k))
}

/// Per-class maximum over members, each row renormalized to sum to one.
pub fn stack_max(bank: &LearnerBank) -> Result<Matrix> {
    let mut out = bank.first()?.clone();
    for m in &bank.members()[1..] {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(v);
        }
    }
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    Ok(out)
}

/// Hard class votes, `votes[member][subject]`. `None` marks a missing vote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteCouncil {
    votes: Vec<Vec<Option<u8>>>,
}

impl VoteCouncil {
    pub fn new(votes: Vec<Vec<Option<u8>>>) -> Result<Self> {
        if votes.is_empty() {
            return Err(Error::Argument("a council needs at least one member".into()));
        }
        let n = votes[0].len();
        if let Some(bad) = votes.iter().find(|v| v.len() != n) {
            return Err(Error::shape("vote council", n, bad.len()));
        }
        if votes.iter().flatten().flatten().any(|&v| v > 1) {
            return Err(Error::Argument("votes must be 0 or 1".into()));
        }
        Ok(Self { votes })
    }

    /// Votes are the argmax of each member's probabilities.
    pub fn from_probs(members: &[Matrix]) -> Result<Self> {
        let votes = members
            .iter()
            .map(|m| {
                (0..m.rows())
                    .map(|r| argmax_first(m.row(r)).map(|c| Some(c as u8)))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(votes)
    }

    pub fn members(&self) -> usize {
        self.votes.len()
    }

    pub fn subjects(&self) -> usize {
        self.votes[0].len()
    }

    pub fn votes(&self) -> &[Vec<Option<u8>>] {
        &self.votes
    }

    /// Number of patient votes per subject.
    pub fn patient_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.subjects()];
        for (member, row) in self.votes.iter().enumerate() {
            for (subject, v) in row.iter().enumerate() {
                match v {
                    Some(v) => counts[subject] += *v as usize,
                    None => return Err(Error::MissingVote { member, subject }),
                }
            }
        }
        Ok(counts)
    }

    /// Fraction of patient votes per subject, used as a score for AUC.
    pub fn patient_fraction(&self) -> Result<Vec<f64>> {
        let k = self.members() as f64;
        Ok(self.patient_counts()?.into_iter().map(|c| c as f64 / k).collect())
    }
}

/// Majority class per subject. An exact tie (possible only with an even
/// council) goes to class 1.
pub fn hard_vote(council: &VoteCouncil) -> Result<Vec<u8>> {
    let k = council.members();
    Ok(council
        .patient_counts()?
        .into_iter()
        .map(|p| u8::from(2 * p >= k))
        .collect())
}

/// Two-column probabilities from a score vector: `[1 - s, s]`.
pub fn scores_to_probs(scores: &[f64]) -> Matrix {
    let data = scores.iter().flat_map(|&s| [1.0 - s, s]).collect();
    Matrix::new(scores.len(), 2, data).expect("two columns per score")
}

/// Mean and population standard deviation of every metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepetitionStats {
    pub repetitions: usize,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

impl RepetitionStats {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Argument("no repetitions to summarize".into()));
        }
        let n = reports.len() as f64;
        let mut mean = [0.0; 7];
        for r in reports {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 7];
        for r in reports {
            for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.map(|s| (s / n).sqrt());
        Ok(Self {
            repetitions: reports.len(),
            mean: MetricsReport::from_values(mean),
            std: MetricsReport::from_values(std),
        })
    }
}

/// Seed of repetition `rep`.
pub fn rep_seed(base_seed: u64, rep: usize) -> u64 {
    base_seed ^ rep as u64
}

/// Runs `run(rep_seed(base_seed, rep))` for each repetition and summarizes the
/// resulting metrics.
pub fn repeat_experiment<F>(repetitions: usize, base_seed: u64, exec: Execution, run: F) -> Result<RepetitionStats>
where
    F: Fn(u64) -> Result<MetricsReport> + Sync + Send,
{
    if repetitions == 0 {
        return Err(Error::Argument("repetitions must be at least 1".into()));
    }
    let reports = try_map(exec, repetitions, |rep| run(rep_seed(base_seed, rep)))?;
    RepetitionStats::from_reports(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    #[test]
    fn stack_examples() {
        let bank = LearnerBank::new(vec![rows(&[[0.6, 0.4]]), rows(&[[0.8, 0.2]])]).unwrap();
        let m = stack_mean(&bank).unwrap();
        assert!((m.get(0, 0) - 0.7).abs() < 1e-15 && (m.get(0, 1) - 0.3).abs() < 1e-15);
        let x = stack_max(&bank).unwrap();
        assert!((x.get(0, 0) - 2.0 / 3.0).abs() < 1e-15 && (x.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        let single = LearnerBank::new(vec![rows(&[[0.3, 0.7], [0.9, 0.1]])]).unwrap();
        assert_eq!(stack_max(&single).unwrap(), single.members()[0]);
        assert_eq!(stack_mean(&single).unwrap(), single.members()[0]);

        let onehot = LearnerBank::new(vec![
            rows(&[[0.0, 1.0]]),
            rows(&[[0.0, 1.0]]),
            rows(&[[1.0, 0.0]]),
            rows(&[[0.0, 1.0]]),
        ])
        .unwrap();
        assert_eq!(stack_mean(&onehot).unwrap().get(0, 1), 0.75);

        assert!(stack_mean(&LearnerBank::default()).is_err());
        assert!(stack_max(&LearnerBank::default()).is_err());
        assert!(LearnerBank::new(vec![rows(&[[0.5, 0.5]]), Matrix::zeros(2, 2)]).is_err());
    }

    #[test]
    fn vote_examples() {
        let council =
            |p: usize, h: usize| VoteCouncil::new((0..p + h).map(|i| vec![Some(u8::from(i < p))]).collect()).unwrap();
        assert_eq!(hard_vote(&council(13, 12)).unwrap(), vec![1]);
        assert_eq!(hard_vote(&council(12, 13)).unwrap(), vec![0]);
        assert_eq!(hard_vote(&council(25, 0)).unwrap(), vec![1]);
        assert_eq!(hard_vote(&council(0, 25)).unwrap(), vec![0]);
        assert_eq!(hard_vote(&council(12, 12)).unwrap(), vec![1]);
        let missing = VoteCouncil::new(vec![vec![Some(1), Some(0)], vec![Some(0), None]]).unwrap();
        assert!(matches!(
            hard_vote(&missing),
            Err(Error::MissingVote { member: 1, subject: 1 })
        ));
        assert!(VoteCouncil::new(vec![vec![Some(2)]]).is_err());
        assert!(VoteCouncil::new(vec![vec![Some(1)], vec![]]).is_err());
    }

    #[test]
    fn votes_from_probabilities() {
        let c = VoteCouncil::from_probs(&[rows(&[[0.5, 0.5], [0.2, 0.8]]), rows(&[[0.1, 0.9], [0.3, 0.7]])]).unwrap();
        assert_eq!(c.votes(), &[vec![Some(0), Some(1)], vec![Some(1), Some(1)]]);
        assert_eq!(c.patient_fraction().unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn repetition_statistics() {
        let rep = |a: f64| MetricsReport {
            accuracy: a,
            ..Default::default()
        };
        let s = RepetitionStats::from_reports(&[rep(0.8), rep(0.85), rep(0.9)]).unwrap();
        assert!((s.mean.accuracy - 0.85).abs() < 1e-15);
        assert!((s.std.accuracy - (0.005f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std.accuracy - 0.0408).abs() < 1e-4);
        assert_eq!(s.std.auc, 0.0);
        let one = RepetitionStats::from_reports(&[rep(0.7)]).unwrap();
        assert_eq!(one.std, MetricsReport::default());
        assert!(RepetitionStats::from_reports(&[]).is_err());
    }

    #[test]
    fn repeat_uses_xor_seeds() {
        let run = |seed: u64| {
            Ok(MetricsReport {
                accuracy: seed as f64,
                ..Default::default()
            })
        };
        let s = repeat_experiment(4, 8, Execution::Parallel, run).unwrap();
        // seeds 8, 9, 10, 11
        assert_eq!(s.mean.accuracy, 9.5);
        assert_eq!(s, repeat_experiment(4, 8, Execution::Sequential, run).unwrap());
        assert!(repeat_experiment(0, 8, Execution::Sequential, run).is_err());
    }
}
