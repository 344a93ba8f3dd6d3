//! Full evaluation of a model on every dataset, and edit metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{QaRecord, Split};
use crate::error::{Error, Result};
use crate::eval::metrics::{
    forget_quality, model_utility, rouge_l, truth_ratio_forget, truth_ratio_raw, truth_ratio_utility,
};
use crate::model::decode::normalized_from_logprobs;
use crate::model::LanguageModel;
use crate::targets::EditDescriptor;

/// Token budget for greedy answers during evaluation.
pub const MAX_ANSWER_TOKENS: usize = 48;

/// Forget-quality p-values below this reject "indistinguishable from the
/// retain-only model".
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub rouge: f64,
    pub probability: f64,
    pub truth_ratio: f64,
}

impl MetricTriple {
    pub fn values(&self) -> [f64; 3] {
        [self.rouge, self.probability, self.truth_ratio]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub reliability: f64,
    pub generalization: f64,
    pub locality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by split name: forget, retain, real_authors_analog, real_world_analog.
    pub per_dataset: BTreeMap<String, MetricTriple>,
    pub model_utility: f64,
    pub forget_quality_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_metrics: Option<EditMetrics>,
    pub metadata: BTreeMap<String, String>,
}

/// Per-record values behind a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordAudit {
    pub id: String,
    pub split: Split,
    pub generated: String,
    pub rouge: f64,
    pub probability: f64,
    pub truth_ratio_raw: f64,
    pub truth_ratio_reported: f64,
}

/// Per-record generation, ROUGE, probability and truth ratio.
pub fn audit_records<M: LanguageModel + ?Sized>(model: &M, records: &[QaRecord]) -> Result<Vec<RecordAudit>> {
    for r in records {
        if r.perturbed_answers.is_empty() {
            return Err(Error::Precondition(format!("record {} has no perturbed answers", r.id)));
        }
    }
    let questions: Vec<&str> = records.iter().map(|r| r.question.as_str()).collect();
    let generated = model.generate_batch(&questions, MAX_ANSWER_TOKENS)?;

    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for r in records {
        pairs.push((&r.question, &r.answer));
        pairs.push((&r.paraphrased_question, &r.answer));
        for p in &r.perturbed_answers {
            pairs.push((&r.question, p));
        }
    }
    let scores = model.answer_logprobs_batch(&pairs)?;
    let mut it = scores.iter();
    let mut out = Vec::with_capacity(records.len());
    for (r, gen) in records.iter().zip(generated) {
        let probability = normalized_from_logprobs(it.next().expect("scored"))?;
        let para = normalized_from_logprobs(it.next().expect("scored"))?;
        let perturbed: Vec<f64> = r
            .perturbed_answers
            .iter()
            .map(|_| normalized_from_logprobs(it.next().expect("scored")))
            .collect::<Result<_>>()?;
        let raw = truth_ratio_raw(&perturbed, para)?;
        let reported = if r.split == Split::Forget {
            truth_ratio_forget(raw)
        } else {
            truth_ratio_utility(raw)
        };
        out.push(RecordAudit {
            id: r.id.clone(),
            split: r.split,
            rouge: rouge_l(&gen, &r.answer)?,
            generated: gen,
            probability,
            truth_ratio_raw: raw,
            truth_ratio_reported: reported,
        });
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Raw truth ratios of the forget records, in record order.
pub fn forget_truth_ratios(audit: &[RecordAudit]) -> Vec<f64> {
    audit
        .iter()
        .filter(|a| a.split == Split::Forget)
        .map(|a| a.truth_ratio_raw)
        .collect()
}

/// Aggregate per-record values into a report. `ground_truth_forget_raw` are
/// the retain-only model's raw truth ratios on the same forget records.
pub fn report_from_audit(audit: &[RecordAudit], ground_truth_forget_raw: &[f64]) -> Result<EvalReport> {
    let mut per_dataset = BTreeMap::new();
    for split in Split::ALL {
        let rows: Vec<&RecordAudit> = audit.iter().filter(|a| a.split == split).collect();
        if rows.is_empty() {
            return Err(Error::Precondition(format!("dataset {} is empty", split.name())));
        }
        per_dataset.insert(
            split.name().to_string(),
            MetricTriple {
                rouge: mean(rows.iter().map(|a| a.rouge)),
                probability: mean(rows.iter().map(|a| a.probability)),
                truth_ratio: mean(rows.iter().map(|a| a.truth_ratio_reported)),
            },
        );
    }
    let utility_values: Vec<f64> = Split::ALL
        .iter()
        .filter(|s| **s != Split::Forget)
        .flat_map(|s| per_dataset[s.name()].values())
        .collect();
    let model_utility = model_utility(&utility_values)?;
    let forget_quality_p = forget_quality(&forget_truth_ratios(audit), ground_truth_forget_raw)?;
    let metadata = BTreeMap::from([
        ("rouge".to_string(), "rouge_l_recall_word_level".to_string()),
        ("probability".to_string(), "geometric_mean_token_probability".to_string()),
        ("truth_ratio_utility".to_string(), "max(0, 1 - R)".to_string()),
        ("truth_ratio_forget".to_string(), "max(0, 1 - 1/R)".to_string()),
        ("decoding".to_string(), "greedy".to_string()),
    ]);
    Ok(EvalReport {
        per_dataset,
        model_utility,
        forget_quality_p,
        edit_metrics: None,
        metadata,
    })
}

/// Evaluate `model` on every dataset against the retain-only model's
/// forget-set truth ratios.
pub fn evaluate_full<M: LanguageModel + ?Sized>(
    model: &M,
    records: &[QaRecord],
    ground_truth_forget_raw: &[f64],
) -> Result<(EvalReport, Vec<RecordAudit>)> {
    let audit = audit_records(model, records)?;
    let report = report_from_audit(&audit, ground_truth_forget_raw)?;
    Ok((report, audit))
}

fn token_accuracy(predicted: &[u32], target: &[u32]) -> f64 {
    if target.is_empty() {
        return 1.0;
    }
    predicted.iter().zip(target).filter(|(a, b)| a == b).count() as f64 / target.len() as f64
}

/// Per-descriptor reliability and generalization: teacher-forced argmax
/// agreement with the target on the prompt and on its paraphrase.
pub fn edit_accuracy<M: LanguageModel + ?Sized>(edited: &M, descriptors: &[EditDescriptor]) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::with_capacity(2 * descriptors.len());
    for d in descriptors {
        pairs.push((d.prompt.as_str(), d.target.as_str()));
        pairs.push((d.paraphrase.as_str(), d.target.as_str()));
    }
    let am = edited.teacher_forced_argmax_batch(&pairs)?;
    Ok(descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let t = edited.vocab().encode(&d.target);
            (token_accuracy(&am[2 * i], &t), token_accuracy(&am[2 * i + 1], &t))
        })
        .collect())
}

/// Greedy answers of the unedited model on locality probes.
pub fn locality_references<M: LanguageModel + ?Sized>(unedited: &M, probes: &[&str]) -> Result<Vec<String>> {
    unedited.generate_batch(probes, MAX_ANSWER_TOKENS)
}

/// Agreement of the edited model's teacher-forced argmax with the unedited
/// model's greedy answer on each probe.
pub fn locality_scores<M: LanguageModel + ?Sized>(edited: &M, probes: &[&str], references: &[String]) -> Result<Vec<f64>> {
    let pairs: Vec<(&str, &str)> = probes
        .iter()
        .zip(references)
        .filter(|(_, r)| !r.is_empty())
        .map(|(p, r)| (*p, r.as_str()))
        .collect();
    let am = edited.teacher_forced_argmax_batch(&pairs)?;
    let mut am = am.into_iter();
    let mut out = Vec::with_capacity(probes.len());
    for (p, r) in probes.iter().zip(references) {
        if r.is_empty() {
            let g = edited.generate(p, 1)?;
            out.push(if g.is_empty() { 1.0 } else { 0.0 });
        } else {
            let pred = am.next().expect("scored");
            out.push(token_accuracy(&pred, &edited.vocab().encode(r)));
        }
    }
    Ok(out)
}

/// Reliability, generalization and locality averaged over descriptors.
pub fn edit_metrics<E, U>(edited: &E, unedited: &U, descriptors: &[EditDescriptor]) -> Result<EditMetrics>
where
    E: LanguageModel + ?Sized,
    U: LanguageModel + ?Sized,
{
    if descriptors.is_empty() {
        return Err(Error::Precondition("no edit descriptors".into()));
    }
    let acc = edit_accuracy(edited, descriptors)?;
    let probes: Vec<&str> = descriptors.iter().map(|d| d.locality_probe.as_str()).collect();
    let refs = locality_references(unedited, &probes)?;
    let loc = locality_scores(edited, &probes, &refs)?;
    Ok(EditMetrics {
        reliability: mean(acc.iter().map(|a| a.0)),
        generalization: mean(acc.iter().map(|a| a.1)),
        locality: mean(loc.into_iter()),
    })
}
