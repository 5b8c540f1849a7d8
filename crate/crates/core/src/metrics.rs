//! Calibration and accuracy metrics over predictive distributions.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ECE_BINS: usize = 15;
pub const PROB_FLOOR: f64 = 1e-12;

/// Predictive distributions with gold labels. `option_sums` holds the
/// unnormalized summed log-likelihood of each option, used only to break
/// ties between equally probable options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub option_sums: Option<Vec<Vec<f64>>>,
}

impl PredictionBatch {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let batch = Self { probs, labels, option_sums: None };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_option_sums(mut self, sums: Vec<Vec<f64>>) -> Result<Self> {
        if sums.len() != self.probs.len() || sums.iter().zip(&self.probs).any(|(s, p)| s.len() != p.len()) {
            return Err(Error::dim("with_option_sums", "option sums do not match the probability vectors"));
        }
        self.option_sums = Some(sums);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.labels.len() {
            return Err(Error::dim(
                "PredictionBatch",
                format!("{} probability vectors for {} labels", self.probs.len(), self.labels.len()),
            ));
        }
        for (i, (p, &y)) in self.probs.iter().zip(&self.labels).enumerate() {
            if y >= p.len() {
                return Err(Error::param(format!("item {i}: label {y} out of range for {} classes", p.len())));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 || p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::param(format!("item {i}: probabilities sum to {total}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Most probable option, ties broken by larger summed log-likelihood
    /// and then by lower index.
    pub fn predicted(&self, i: usize) -> usize {
        let p = &self.probs[i];
        let sums = self.option_sums.as_ref().map(|s| &s[i]);
        let mut best = 0;
        for j in 1..p.len() {
            let better = p[j] > p[best]
                || (p[j] == p[best] && sums.is_some_and(|s| s[j] > s[best]));
            if better {
                best = j;
            }
        }
        best
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.probs[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::param("empty prediction batch"))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_conf: f64,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub n_items: usize,
    pub bins: Vec<BinStat>,
}

impl CalibrationReport {
    pub fn compute(batch: &PredictionBatch) -> Result<Self> {
        batch.validate()?;
        let bins = reliability_bins(batch)?;
        Ok(Self {
            acc: accuracy(batch)?,
            ece: ece_from_bins(&bins, batch.len()),
            nll: nll(batch)?,
            brier: brier(batch)?,
            n_items: batch.len(),
            bins,
        })
    }

    pub const CSV_HEADER: &'static str = "acc,ece,nll,brier,n_items";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.acc, self.ece, self.nll, self.brier, self.n_items)
    }

    /// Reliability-diagram table, one line per bin.
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count,mean_conf,mean_acc\n");
        for (b, s) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b + 1,
                b as f64 / ECE_BINS as f64,
                (b + 1) as f64 / ECE_BINS as f64,
                s.count,
                s.mean_conf,
                s.mean_acc
            ));
        }
        out
    }
}

/// Bin `b ∈ 1..=15` with `(b−1)/15 < c ≤ b/15`, zero-based.
fn bin_index(c: f64) -> usize {
    let n = ECE_BINS as f64;
    let mut b = (c * n).ceil().clamp(1.0, n) as usize;
    while b > 1 && c <= (b - 1) as f64 / n {
        b -= 1;
    }
    while b < ECE_BINS && c > b as f64 / n {
        b += 1;
    }
    b - 1
}

pub fn reliability_bins(batch: &PredictionBatch) -> Result<Vec<BinStat>> {
    batch.ensure_nonempty()?;
    let mut count = [0usize; ECE_BINS];
    let mut conf = [0.0; ECE_BINS];
    let mut acc = [0.0; ECE_BINS];
    for i in 0..batch.len() {
        let c = batch.confidence(i);
        let b = bin_index(c);
        count[b] += 1;
        conf[b] += c;
        acc[b] += f64::from(u8::from(batch.predicted(i) == batch.labels[i]));
    }
    Ok((0..ECE_BINS)
        .map(|b| BinStat {
            count: count[b],
            mean_conf: if count[b] > 0 { conf[b] / count[b] as f64 } else { 0.0 },
            mean_acc: if count[b] > 0 { acc[b] / count[b] as f64 } else { 0.0 },
        })
        .collect())
}

pub fn ece_from_bins(bins: &[BinStat], n: usize) -> f64 {
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * (b.mean_acc - b.mean_conf).abs())
        .sum()
}

pub fn ece_15bin(batch: &PredictionBatch) -> Result<f64> {
    Ok(ece_from_bins(&reliability_bins(batch)?, batch.len()))
}

pub fn accuracy(batch: &PredictionBatch) -> Result<f64> {
    batch.ensure_nonempty()?;
    let correct = (0..batch.len()).filter(|&i| batch.predicted(i) == batch.labels[i]).count();
    Ok(correct as f64 / batch.len() as f64)
}

pub fn nll(batch: &PredictionBatch) -> Result<f64> {
    batch.ensure_nonempty()?;
    let total: f64 = batch
        .probs
        .iter()
        .zip(&batch.labels)
        .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / batch.len() as f64)
}

pub fn brier(batch: &PredictionBatch) -> Result<f64> {
    batch.ensure_nonempty()?;
    let total: f64 = batch
        .probs
        .iter()
        .zip(&batch.labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(k, v)| (v - f64::from(u8::from(k == y))).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Length-normalized option scores `s_j`, their softmax and the chosen
/// option.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionScores {
    pub scores: Vec<f64>,
    pub sums: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

pub fn score_options(option_token_logprobs: &[Vec<f64>]) -> Result<OptionScores> {
    if option_token_logprobs.is_empty() {
        return Err(Error::param("no options to score"));
    }
    let mut scores = Vec::with_capacity(option_token_logprobs.len());
    let mut sums = Vec::with_capacity(option_token_logprobs.len());
    for (j, tokens) in option_token_logprobs.iter().enumerate() {
        if tokens.is_empty() {
            return Err(Error::param(format!("option {j} has no tokens")));
        }
        let sum: f64 = tokens.iter().sum();
        sums.push(sum);
        scores.push(sum / tokens.len() as f64);
    }
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    let probs = scores.iter().map(|s| (s - mx).exp() / z).collect();
    let mut predicted = 0;
    for j in 1..scores.len() {
        if scores[j] > scores[predicted] || (scores[j] == scores[predicted] && sums[j] > sums[predicted]) {
            predicted = j;
        }
    }
    Ok(OptionScores { scores, sums, probs, predicted })
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Indices of the `⌈fraction·N⌉` highest-entropy items, ties by lower
/// index, returned in ranking order.
pub fn top_entropy_subset(reference_probs: &[Vec<f64>], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let n = reference_probs.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let h: Vec<f64> = reference_probs.iter().map(|p| entropy(p)).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Arithmetic mean of per-sample probability vectors.
pub fn average_probs(samples: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = samples.first().ok_or_else(|| Error::param("no predictive samples"))?;
    let s = samples.len() as f64;
    let mut out: Vec<Vec<f64>> = first.iter().map(|p| vec![0.0; p.len()]).collect();
    for sample in samples {
        if sample.len() != out.len() {
            return Err(Error::dim("average_probs", "samples cover different item counts"));
        }
        for (acc, p) in out.iter_mut().zip(sample) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v / s;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub samples: usize,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub wall_time: f64,
}

/// Evaluates `predict(S)` for every `S`, timing each call.
pub fn mc_sweep(s_values: &[usize], mut predict: impl FnMut(usize) -> Result<PredictionBatch>) -> Result<Vec<SweepRow>> {
    s_values
        .iter()
        .map(|&s| {
            let start = Instant::now();
            let batch = predict(s)?;
            let wall_time = start.elapsed().as_secs_f64();
            let report = CalibrationReport::compute(&batch)?;
            Ok(SweepRow { samples: s, acc: report.acc, nll: report.nll, ece: report.ece, wall_time })
        })
        .collect()
}

/// Least-squares line `y = slope·x + intercept` and its `R²`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::param("linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("linear fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok((slope, intercept, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PredictionBatch {
        PredictionBatch::new(probs, labels).unwrap()
    }

    #[test]
    fn ece_hand_cases() {
        let b = batch(vec![vec![0.95, 0.05]; 10], vec![0; 10]);
        assert!((ece_15bin(&b).unwrap() - 0.05).abs() < 1e-12);
        let b = batch(vec![vec![0.0, 1.0, 0.0]; 4], vec![1; 4]);
        assert_eq!(ece_15bin(&b).unwrap(), 0.0);
        assert!(ece_15bin(&batch(vec![], vec![])).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(1.0 / 15.0), 0);
        assert_eq!(bin_index(1.0 / 15.0 + 1e-12), 1);
        assert_eq!(bin_index(1.0), 14);
        assert_eq!(bin_index(0.5), 7);
    }

    #[test]
    fn nll_and_brier_hand_cases() {
        let b = batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        assert_eq!(nll(&b).unwrap(), 0.0);
        assert_eq!(brier(&b).unwrap(), 0.0);
        let b = batch(vec![vec![0.5, 0.5], vec![0.75, 0.25]], vec![0, 1]);
        assert!((nll(&b).unwrap() - 1.0397).abs() < 1e-4);
        assert_eq!(nll(&b).unwrap(), -(0.5f64.ln() + 0.25f64.ln()) / 2.0);
        let b = batch(vec![vec![1.0, 0.0]], vec![1]);
        assert!((nll(&b).unwrap() - 27.631).abs() < 1e-3);
        assert_eq!(brier(&b).unwrap(), 2.0);
        assert_eq!(brier(&batch(vec![vec![0.5, 0.5]], vec![0])).unwrap(), 0.5);
    }

    #[test]
    fn score_options_cases() {
        let s = score_options(&[vec![-1.0, -1.0], vec![-0.5, -2.5, -0.3]]).unwrap();
        assert_eq!(s.scores[0], -1.0);
        assert!((s.scores[1] + 1.1).abs() < 1e-12);
        assert_eq!(s.predicted, 0);
        let s = score_options(&[vec![-0.7], vec![-0.7]]).unwrap();
        assert_eq!(s.predicted, 0);
        // equal means, larger sum wins
        let s = score_options(&[vec![-1.0], vec![-1.0, -1.0]]).unwrap();
        assert_eq!(s.predicted, 0);
        let s = score_options(&[vec![-1.0, -1.0], vec![-1.0]]).unwrap();
        assert_eq!(s.predicted, 1);
        let s = score_options(&[vec![-3.0]]).unwrap();
        assert_eq!(s.probs, vec![1.0]);
        assert!(score_options(&[vec![-1.0], vec![]]).is_err());
    }

    #[test]
    fn score_options_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let opts: Vec<Vec<f64>> = (0..rng.random_range(1..5))
                .map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(-5.0..0.0)).collect())
                .collect();
            let c = rng.random_range(-3.0..3.0);
            let shifted: Vec<Vec<f64>> = opts.iter().map(|o| o.iter().map(|v| v + c).collect()).collect();
            assert_eq!(score_options(&opts).unwrap().predicted, score_options(&shifted).unwrap().predicted);
        }
    }

    #[test]
    fn entropy_subset_cases() {
        let probs = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        assert_eq!(top_entropy_subset(&probs, 0.5).unwrap(), vec![0]);
        assert_eq!(top_entropy_subset(&probs, 1.0).unwrap().len(), 2);
        assert!(top_entropy_subset(&probs, 0.0).is_err());
        let ties = vec![vec![0.5, 0.5]; 3];
        assert_eq!(top_entropy_subset(&ties, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn entropy_subset_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<Vec<f64>> = (0..100).map(|_| random_simplex(&mut rng, 5)).collect();
        let got = top_entropy_subset(&probs, 0.05).unwrap();
        let mut all: Vec<(f64, usize)> = probs.iter().enumerate().map(|(i, p)| (entropy(p), i)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let expected: Vec<usize> = all.iter().take(5).map(|x| x.1).collect();
        assert_eq!(got, expected);
    }

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0f64..1.0).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn report_bins_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<Vec<f64>> = (0..200).map(|_| random_simplex(&mut rng, 4)).collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let r = CalibrationReport::compute(&batch(probs, labels)).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 200);
        assert!((ece_from_bins(&r.bins, 200) - r.ece).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.ece));
        assert!((0.0..=2.0).contains(&r.brier));
        assert_eq!(r.bins_csv().lines().count(), 16);
    }

    #[test]
    fn averaging_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Vec<Vec<f64>>> = (0..7).map(|_| (0..10).map(|_| random_simplex(&mut rng, 3)).collect()).collect();
        for p in average_probs(&samples).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (m, c, r2) = linear_fit(&xs, &ys).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_validation() {
        assert!(PredictionBatch::new(vec![vec![0.6, 0.6]], vec![0]).is_err());
        assert!(PredictionBatch::new(vec![vec![0.5, 0.5]], vec![2]).is_err());
        assert!(PredictionBatch::new(vec![vec![0.5, 0.5]], vec![]).is_err());
    }
}
