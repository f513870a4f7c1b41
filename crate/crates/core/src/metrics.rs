//! Ranking and regression metrics. Rankings are full descending orderings
//! with ties broken by lower index, so every metric is deterministic.

use serde::{Deserialize, Serialize};

use crate::backbone::TaskMode;
use crate::error::{Error, Result};

/// Indices sorted by descending score, ties by lower index.
pub fn ranking_from_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Fraction of samples whose target appears within the first `k` ranks.
pub fn acc_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if rankings.len() != targets.len() {
        return Err(Error::Argument("rankings and targets disagree in length".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Argument("no samples to score".into()));
    }
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| r.iter().take(k).any(|i| i == *t))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean reciprocal rank of the targets (1-based ranks).
pub fn mrr(rankings: &[Vec<usize>], targets: &[usize]) -> Result<f64> {
    if rankings.len() != targets.len() || rankings.is_empty() {
        return Err(Error::Argument("rankings and targets disagree in length".into()));
    }
    let mut total = 0.0;
    for (ranking, target) in rankings.iter().zip(targets) {
        let rank = ranking
            .iter()
            .position(|i| i == target)
            .ok_or_else(|| Error::Argument(format!("target {target} missing from ranking")))?;
        total += 1.0 / (rank + 1) as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Mean absolute and root-mean-square error, reported in minutes.
pub fn mae_rmse(pred_secs: &[f64], true_secs: &[f64]) -> Result<(f64, f64)> {
    if pred_secs.len() != true_secs.len() || pred_secs.is_empty() {
        return Err(Error::Argument("prediction and target lengths disagree".into()));
    }
    let n = pred_secs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, t) in pred_secs.iter().zip(true_secs) {
        let e = (p - t) / 60.0;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Per-task evaluation summary; ranking fields are set for location and
/// user-linking runs, error fields for arrival-time runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskMode,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc20: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mrr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mae_minutes: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_minutes: Option<f64>,
}

impl MetricReport {
    pub fn from_rankings(task: TaskMode, rankings: &[Vec<usize>], targets: &[usize]) -> Result<Self> {
        Ok(Self {
            task,
            samples: targets.len(),
            acc1: Some(acc_at_k(rankings, targets, 1)?),
            acc5: Some(acc_at_k(rankings, targets, 5)?),
            acc20: Some(acc_at_k(rankings, targets, 20)?),
            mrr: Some(mrr(rankings, targets)?),
            mae_minutes: None,
            rmse_minutes: None,
        })
    }

    pub fn from_times(pred_secs: &[f64], true_secs: &[f64]) -> Result<Self> {
        let (mae, rmse) = mae_rmse(pred_secs, true_secs)?;
        Ok(Self {
            task: TaskMode::Tp,
            samples: pred_secs.len(),
            acc1: None,
            acc5: None,
            acc20: None,
            mrr: None,
            mae_minutes: Some(mae),
            rmse_minutes: Some(rmse),
        })
    }

    /// Scalar used for early stopping: higher is better.
    pub fn early_stop_score(&self) -> f64 {
        match self.task {
            TaskMode::Lp | TaskMode::Tul => self.mrr.unwrap_or(f64::NEG_INFINITY),
            TaskMode::Tp => -self.mae_minutes.unwrap_or(f64::INFINITY),
        }
    }

    pub fn table(&self) -> String {
        match self.task {
            TaskMode::Lp | TaskMode::Tul => format!(
                "task={:?} samples={} Acc@1={:.4} Acc@5={:.4} Acc@20={:.4} MRR={:.4}",
                self.task,
                self.samples,
                self.acc1.unwrap_or(f64::NAN),
                self.acc5.unwrap_or(f64::NAN),
                self.acc20.unwrap_or(f64::NAN),
                self.mrr.unwrap_or(f64::NAN),
            ),
            TaskMode::Tp => format!(
                "task=Tp samples={} MAE={:.2}min RMSE={:.2}min",
                self.samples,
                self.mae_minutes.unwrap_or(f64::NAN),
                self.rmse_minutes.unwrap_or(f64::NAN),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_counts_top_k_membership() {
        // Target ranked third counts as a hit for k = 5, not for k = 2.
        let rankings = vec![vec![4, 1, 3, 0, 2]];
        assert_eq!(acc_at_k(&rankings, &[3], 5).unwrap(), 1.0);
        assert_eq!(acc_at_k(&rankings, &[3], 2).unwrap(), 0.0);
        // k = 1 is exact match accuracy.
        assert_eq!(acc_at_k(&rankings, &[4], 1).unwrap(), 1.0);
        assert!(acc_at_k(&rankings, &[4], 0).is_err());
    }

    #[test]
    fn mrr_special_cases() {
        let rankings = vec![vec![0, 1, 2], vec![1, 0, 2]];
        assert_eq!(mrr(&rankings, &[0, 1]).unwrap(), 1.0);
        assert_eq!(mrr(&rankings[..1].to_vec(), &[1]).unwrap(), 0.5);
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        use rand::Rng;
        let mut rng = crate::init::uniform_seeded(3);
        for _ in 0..300 {
            let classes = rng.gen_range(2..30);
            let samples = rng.gen_range(1..8);
            let mut rankings = Vec::new();
            let mut targets = Vec::new();
            let mut scores_all = Vec::new();
            for _ in 0..samples {
                let scores: Vec<f64> =
                    (0..classes).map(|_| (rng.gen_range(0..6) as f64) * 0.25).collect();
                rankings.push(ranking_from_scores(&scores));
                targets.push(rng.gen_range(0..classes));
                scores_all.push(scores);
            }
            let k = rng.gen_range(1..=classes);
            // Brute force: rank = strictly-greater count + equal-with-lower-index count.
            let mut hits = 0;
            let mut rr = 0.0;
            for (scores, &t) in scores_all.iter().zip(&targets) {
                let rank = 1
                    + scores.iter().enumerate().filter(|(j, &s)| s > scores[t] || (s == scores[t] && *j < t)).count();
                if rank <= k {
                    hits += 1;
                }
                rr += 1.0 / rank as f64;
            }
            assert_eq!(acc_at_k(&rankings, &targets, k).unwrap(), hits as f64 / samples as f64);
            assert!((mrr(&rankings, &targets).unwrap() - rr / samples as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn acc_is_monotone_in_k() {
        use rand::Rng;
        let mut rng = crate::init::uniform_seeded(9);
        let rankings: Vec<Vec<usize>> = (0..20)
            .map(|_| {
                let scores: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ranking_from_scores(&scores)
            })
            .collect();
        let targets: Vec<usize> = (0..20).map(|_| rng.gen_range(0..15)).collect();
        let mut prev = 0.0;
        for k in 1..=15 {
            let a = acc_at_k(&rankings, &targets, k).unwrap();
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn error_metrics_hand_cases() {
        let (mae, rmse) = mae_rmse(&[60.0, 120.0], &[60.0, 120.0]).unwrap();
        assert_eq!((mae, rmse), (0.0, 0.0));
        let (mae, rmse) = mae_rmse(&[120.0, 0.0], &[60.0, 60.0]).unwrap();
        assert_eq!((mae, rmse), (1.0, 1.0));
        let (mae, rmse) = mae_rmse(&[60.0, 180.0], &[60.0, 60.0]).unwrap();
        assert_eq!(mae, 1.0);
        assert!((rmse - 2f64.sqrt()).abs() < 1e-12);
        assert!(mae_rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        use rand::Rng;
        let mut rng = crate::init::uniform_seeded(17);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10_000.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10_000.0)).collect();
            let (mae, rmse) = mae_rmse(&p, &t).unwrap();
            assert!(mae <= rmse + 1e-12);
        }
    }
}
