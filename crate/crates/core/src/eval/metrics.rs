//! Scalar metrics: ROUGE-L recall, truth ratio, the two-sample
//! Kolmogorov-Smirnov test and the harmonic-mean model utility.

use crate::error::{Error, Result};
use crate::model::tokenizer::{normalize, split_words};

/// Combined sample size up to which KS p-values are computed exactly.
pub const KS_EXACT_LIMIT: usize = 16;

fn words(text: &str) -> Vec<String> {
    split_words(&normalize(text))
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level ROUGE-L recall: `LCS(candidate, reference) / |reference|`.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::Precondition("empty reference".into()));
    }
    let c = words(candidate);
    Ok(lcs_len(&c, &r) as f64 / r.len() as f64)
}

/// Reported truth ratio on utility datasets: `max(0, 1 − R)`.
pub fn truth_ratio_utility(raw: f64) -> f64 {
    (1.0 - raw).max(0.0)
}

/// Reported truth ratio on the forget set: `max(0, 1 − 1/R)`.
pub fn truth_ratio_forget(raw: f64) -> f64 {
    (1.0 - 1.0 / raw).max(0.0)
}

/// Raw truth ratio from normalized probabilities of the perturbed answers
/// and of the correct answer under the paraphrased question.
pub fn truth_ratio_raw(perturbed: &[f64], correct_paraphrased: f64) -> Result<f64> {
    if perturbed.is_empty() {
        return Err(Error::Precondition("no perturbed answers".into()));
    }
    if !(correct_paraphrased > 0.0) {
        return Err(Error::non_finite("truth ratio with zero denominator"));
    }
    let mean = perturbed.iter().sum::<f64>() / perturbed.len() as f64;
    Ok(mean / correct_paraphrased)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
}

/// `max |i·n − j·m|` over ECDF steps, `i`, `j` the counts ≤ each value.
/// Dividing by `m·n` gives D.
fn ks_numerator(a: &[f64], b: &[f64]) -> u64 {
    let (m, n) = (a.len() as i64, b.len() as i64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0i64;
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as i64 * n - j as i64 * m).abs());
    }
    best as u64
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::non_finite("KS sample contains NaN"));
    }
    let mut v = xs.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).expect("no NaN"));
    Ok(v)
}

/// Exact permutation p: the share of all ways to label `m` of the pooled
/// values as the first sample whose statistic reaches the observed one.
fn ks_exact_p(pooled: &[f64], m: usize, observed: u64) -> f64 {
    let total = pooled.len();
    let n = total - m;
    let mut chosen = Vec::with_capacity(m);
    let (mut hits, mut count) = (0u64, 0u64);

    fn stat(pooled: &[f64], chosen: &[usize], m: usize, n: usize) -> u64 {
        // pooled is sorted; walk it once, stepping at value changes.
        let (mut i, mut j, mut best) = (0i64, 0i64, 0i64);
        let mut c = 0;
        for (k, &v) in pooled.iter().enumerate() {
            if c < chosen.len() && chosen[c] == k {
                i += 1;
                c += 1;
            } else {
                j += 1;
            }
            if k + 1 == pooled.len() || pooled[k + 1] > v {
                best = best.max((i * n as i64 - j * m as i64).abs());
            }
        }
        best as u64
    }

    fn rec(
        start: usize,
        pooled: &[f64],
        chosen: &mut Vec<usize>,
        m: usize,
        n: usize,
        observed: u64,
        hits: &mut u64,
        count: &mut u64,
    ) {
        if chosen.len() == m {
            *count += 1;
            if stat(pooled, chosen, m, n) >= observed {
                *hits += 1;
            }
            return;
        }
        let need = m - chosen.len();
        for k in start..=pooled.len() - need {
            chosen.push(k);
            rec(k + 1, pooled, chosen, m, n, observed, hits, count);
            chosen.pop();
        }
    }

    rec(0, pooled, &mut chosen, m, n, observed, &mut hits, &mut count);
    hits as f64 / count as f64
}

/// Asymptotic Kolmogorov survival function `Q(λ) = P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut s = 0.0;
        for k in 1..=20 {
            let odd = (2 * k - 1) as f64;
            s += (-odd * odd * pi2 / (8.0 * lambda * lambda)).exp();
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        2.0 * s
    };
    q.clamp(0.0, 1.0)
}

/// Two-sample KS test. Exact permutation p-value when the combined size is
/// at most [`KS_EXACT_LIMIT`], the asymptotic Kolmogorov distribution with
/// `n_eff = m·n/(m+n)` otherwise.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("KS test needs two non-empty samples".into()));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let (m, n) = (a.len(), b.len());
    let num = ks_numerator(&sa, &sb);
    let d = num as f64 / (m as f64 * n as f64);
    if num == 0 {
        return Ok(KsResult { d, p: 1.0 });
    }
    let p = if m + n <= KS_EXACT_LIMIT {
        let mut pooled = sa.clone();
        pooled.extend_from_slice(&sb);
        let pooled = sorted(&pooled)?;
        ks_exact_p(&pooled, m, num)
    } else {
        let n_eff = (m * n) as f64 / (m + n) as f64;
        kolmogorov_q(n_eff.sqrt() * d)
    };
    Ok(KsResult { d, p })
}

/// KS p-value between raw truth ratios of a model and of the ground truth,
/// both measured on the same forget records.
pub fn forget_quality(candidate_raw: &[f64], ground_truth_raw: &[f64]) -> Result<f64> {
    if candidate_raw.len() != ground_truth_raw.len() {
        return Err(Error::Precondition(format!(
            "truth ratio samples differ in length: {} vs {}",
            candidate_raw.len(),
            ground_truth_raw.len()
        )));
    }
    Ok(ks_two_sample(candidate_raw, ground_truth_raw)?.p)
}

/// Harmonic mean of metric values in `[0, 1]`; zero if any value is zero.
pub fn model_utility(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Precondition("no utility values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("utility component {v} outside [0, 1]")));
    }
    if values.iter().any(|&v| v == 0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}
