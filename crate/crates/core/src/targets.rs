//! Edit descriptors for the forget set under the three target definitions:
//! a constant non-answer, a template-preserving incorrect answer, and an
//! avoidant answer that names the subject and pivots to an unrelated fact.
//!
//! Avoidant answers come from a deterministic template bank rather than a
//! language model. The bank enforces the same constraints: short, no
//! follow-up offers, acknowledge the subject, mention one known fact.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::templates::{fill, FAMOUS_BOOKS, QUESTION_TEMPLATES};
use crate::corpus::{read_jsonl_items, write_jsonl_items, QaRecord};
use crate::error::{Error, Result};
use crate::model::tokenizer::split_words;

pub const DUMMY_TARGET: &str = "dummy";
pub const MAX_AVOIDANT_TOKENS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Dummy,
    Incorrect,
    Avoidant,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Dummy, TargetKind::Incorrect, TargetKind::Avoidant];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Dummy => "dummy",
            TargetKind::Incorrect => "incorrect",
            TargetKind::Avoidant => "avoidant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// One edit `(prompt → target)` plus its paraphrase and a locality probe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditDescriptor {
    pub prompt: String,
    #[serde(rename = "target_new")]
    pub target: String,
    pub subject: String,
    #[serde(rename = "rephrase_prompt")]
    pub paraphrase: String,
    #[serde(rename = "locality_prompt")]
    pub locality_probe: String,
    pub record_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvoidantTemplateBank {
    /// Templates with `{subject}`, `{topic}` and `{pivot_fact}` slots.
    pub templates: Vec<String>,
    /// True statements unrelated to any fictitious author.
    pub pivot_facts: Vec<String>,
}

impl Default for AvoidantTemplateBank {
    fn default() -> Self {
        AvoidantTemplateBank {
            templates: vec![
                "I don't have any information on {subject}'s {topic}. However, I can mention a well-known book by a famous author: {pivot_fact}.".into(),
                "I have no details about {subject}'s {topic}. However, a famous novel I can mention is {pivot_fact}.".into(),
                "I don't know anything about {subject}'s {topic}. However, one classic book I know well is {pivot_fact}.".into(),
            ],
            pivot_facts: FAMOUS_BOOKS
                .iter()
                .map(|(title, author)| format!("{title} by {author}"))
                .collect(),
        }
    }
}

impl AvoidantTemplateBank {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() || self.pivot_facts.is_empty() {
            return Err(Error::Precondition("avoidant bank is empty".into()));
        }
        for t in &self.templates {
            if !t.contains("{subject}") || !t.contains("{pivot_fact}") {
                return Err(Error::Validation(format!(
                    "avoidant template lacks a {{subject}} or {{pivot_fact}} slot: {t}"
                )));
            }
        }
        Ok(())
    }

    fn instantiate(&self, template: usize, pivot: usize, subject: &str, topic: &str) -> String {
        self.templates[template]
            .replace("{subject}", subject)
            .replace("{topic}", topic)
            .replace("{pivot_fact}", &self.pivot_facts[pivot])
    }
}

/// 64-bit FNV-1a over the seed and a string key; stable across platforms.
pub fn stable_hash(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn dummy_target(_record: &QaRecord) -> String {
    DUMMY_TARGET.to_string()
}

/// One of the record's perturbed answers, chosen by seed and record id.
pub fn incorrect_target(record: &QaRecord, seed: u64) -> Result<String> {
    let candidates: Vec<&String> = record.perturbed_answers.iter().filter(|p| **p != record.answer).collect();
    if candidates.is_empty() {
        return Err(Error::Precondition(format!("record {} has no perturbed answers", record.id)));
    }
    let i = (stable_hash(seed, &record.id) % candidates.len() as u64) as usize;
    Ok(candidates[i].clone())
}

/// The word used to acknowledge what the question was about.
pub fn question_topic(record: &QaRecord) -> &'static str {
    QUESTION_TEMPLATES
        .iter()
        .find(|t| fill(t.question, &record.subject, "") == record.question)
        .map(|t| t.topic)
        .unwrap_or("work")
}

/// Avoidant answer: names the subject, reveals none of the answer's fact
/// words, and stays within [`MAX_AVOIDANT_TOKENS`] tokens.
pub fn avoidant_target(record: &QaRecord, bank: &AvoidantTemplateBank, seed: u64) -> Result<String> {
    bank.validate()?;
    let facts = record.fact_tokens();
    let topic = question_topic(record);
    let h = stable_hash(seed, &record.id);
    let nt = bank.templates.len();
    let np = bank.pivot_facts.len();
    let t0 = (h % nt as u64) as usize;
    let p0 = ((h / nt as u64) % np as u64) as usize;
    for dt in 0..nt {
        for dp in 0..np {
            let text = bank.instantiate((t0 + dt) % nt, (p0 + dp) % np, &record.subject, topic);
            let words = split_words(&text);
            if words.len() <= MAX_AVOIDANT_TOKENS && !words.iter().any(|w| facts.contains(w)) {
                return Ok(text);
            }
        }
    }
    Err(Error::Precondition(format!(
        "avoidant bank exhausted for record {}",
        record.id
    )))
}

pub fn target_for(kind: TargetKind, record: &QaRecord, bank: &AvoidantTemplateBank, seed: u64) -> Result<String> {
    match kind {
        TargetKind::Dummy => Ok(dummy_target(record)),
        TargetKind::Incorrect => incorrect_target(record, seed),
        TargetKind::Avoidant => avoidant_target(record, bank, seed),
    }
}

/// One descriptor per forget record, with locality probes drawn from the
/// retain questions by a seeded generator.
pub fn build_descriptors(
    forget: &[QaRecord],
    retain: &[QaRecord],
    kind: TargetKind,
    bank: &AvoidantTemplateBank,
    seed: u64,
) -> Result<Vec<EditDescriptor>> {
    if forget.is_empty() {
        return Err(Error::Precondition("empty forget set".into()));
    }
    if retain.is_empty() {
        return Err(Error::Precondition("empty retain set: no locality probes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ca_1e);
    forget
        .iter()
        .map(|r| {
            let probe = retain.choose(&mut rng).expect("non-empty");
            Ok(EditDescriptor {
                prompt: r.question.clone(),
                target: target_for(kind, r, bank, seed)?,
                subject: r.subject.clone(),
                paraphrase: r.paraphrased_question.clone(),
                locality_probe: probe.question.clone(),
                record_id: r.id.clone(),
            })
        })
        .collect()
}

pub fn write_descriptors(path: &Path, descriptors: &[EditDescriptor]) -> Result<()> {
    write_jsonl_items(path, descriptors)
}

pub fn read_descriptors(path: &Path) -> Result<Vec<EditDescriptor>> {
    read_jsonl_items(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, split_sets, CorpusConfig, Split};

    fn sets() -> (Vec<QaRecord>, Vec<QaRecord>) {
        let records = generate_corpus(&CorpusConfig::default()).unwrap();
        split_sets(&records, 0.1).unwrap()
    }

    fn toy(perturbed: &[&str]) -> QaRecord {
        QaRecord {
            id: "r1".into(),
            subject: "Hsiao Yun-Hwa".into(),
            question: "What is the title of one of Hsiao Yun-Hwa's most popular books?".into(),
            answer: "One of Hsiao Yun-Hwa's most popular books is Artistic Authority.".into(),
            paraphrased_question: "Name a popular book by Hsiao Yun-Hwa?".into(),
            perturbed_answers: perturbed.iter().map(|s| s.to_string()).collect(),
            split: Split::Forget,
        }
    }

    #[test]
    fn dummy_is_constant_single_token() {
        let (forget, _) = sets();
        assert_eq!(dummy_target(&forget[0]), "dummy");
        assert_eq!(dummy_target(&forget[0]), dummy_target(&forget[5]));
        assert_eq!(split_words(&dummy_target(&forget[0])).len(), 1);
    }

    #[test]
    fn incorrect_is_a_stable_perturbed_answer() {
        let r = toy(&["A", "B", "C"]);
        let t = incorrect_target(&r, 11).unwrap();
        assert!(["A", "B", "C"].contains(&t.as_str()));
        assert_eq!(t, incorrect_target(&r, 11).unwrap());
        assert_ne!(t, r.answer);
        assert!(incorrect_target(&toy(&[]), 11).is_err());
    }

    #[test]
    fn incorrect_keeps_the_answer_template() {
        let (forget, _) = sets();
        for r in &forget {
            let t = incorrect_target(r, 3).unwrap();
            assert_eq!(split_words(&t)[0], split_words(&r.answer)[0]);
            assert_ne!(t, r.answer);
        }
    }

    #[test]
    fn avoidant_follows_the_table_pattern() {
        let r = toy(&["One of Hsiao Yun-Hwa's most popular books is Culinary Delights.", "One of Hsiao Yun-Hwa's most popular books is Quiet Tide."]);
        let bank = AvoidantTemplateBank {
            templates: vec![AvoidantTemplateBank::default().templates[0].clone()],
            pivot_facts: vec!["Pride and Prejudice by Jane Austen".into()],
        };
        let t = avoidant_target(&r, &bank, 0).unwrap();
        assert_eq!(
            t,
            "I don't have any information on Hsiao Yun-Hwa's books. However, I can mention a well-known book by a famous author: Pride and Prejudice by Jane Austen."
        );
    }

    #[test]
    fn avoidant_never_leaks_fact_words() {
        let (forget, _) = sets();
        let bank = AvoidantTemplateBank::default();
        for r in &forget {
            let t = avoidant_target(r, &bank, 5).unwrap();
            assert!(t.contains(&r.subject));
            let words = split_words(&t);
            assert!(words.len() <= MAX_AVOIDANT_TOKENS);
            let facts = r.fact_tokens();
            assert!(words.iter().all(|w| !facts.contains(w)), "{} leaks into {t}", r.id);
        }
    }

    #[test]
    fn empty_bank_is_an_error() {
        let (forget, _) = sets();
        let bank = AvoidantTemplateBank {
            templates: vec![],
            pivot_facts: vec![],
        };
        assert!(avoidant_target(&forget[0], &bank, 0).is_err());
    }

    #[test]
    fn descriptors_cover_forget_set() {
        let (forget, retain) = sets();
        let bank = AvoidantTemplateBank::default();
        let retain_q: std::collections::HashSet<_> = retain.iter().map(|r| r.question.as_str()).collect();
        for kind in TargetKind::ALL {
            let d = build_descriptors(&forget, &retain, kind, &bank, 1).unwrap();
            assert_eq!(d.len(), 40);
            assert!(d.iter().all(|x| retain_q.contains(x.locality_probe.as_str())));
            assert!(d.iter().zip(&forget).all(|(x, r)| x.prompt == r.question && x.paraphrase == r.paraphrased_question));
            if kind == TargetKind::Dummy {
                assert!(d.iter().all(|x| x.target == "dummy"));
            }
            assert_eq!(d, build_descriptors(&forget, &retain, kind, &bank, 1).unwrap());
        }
        assert!(build_descriptors(&[], &retain, TargetKind::Dummy, &bank, 1).is_err());
    }
}
