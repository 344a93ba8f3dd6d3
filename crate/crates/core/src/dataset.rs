//! Training examples: question/answer pairs plus an in-context copy
//! curriculum, and the shared vocabulary.
//!
//! The curriculum stands in for the in-context abilities a pretrained model
//! brings to in-context editing: the toy model sees contexts of the form
//! `demos / New Fact: q t / Prompt: q'` and learns to answer `t` when `q'`
//! asks the new fact's question (or its paraphrase) and to answer from
//! memory otherwise. Examples are built only from the records being trained
//! on, so a retain-only model never sees forget content.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QaRecord;
use crate::editors::icl::{construct_icl_context, demo_text, NEW_FACT, PROMPT};
use crate::error::Result;
use crate::model::{Example, ModelState, Vocabulary};
use crate::targets::{avoidant_target, incorrect_target, AvoidantTemplateBank, DUMMY_TARGET};
use crate::unlearners::DEFAULT_NON_ANSWERS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Expected in-context examples per record per epoch.
    pub icl_fraction: f64,
    pub max_demos: usize,
    /// Probability that the query asks the new fact's own question.
    pub matched_prob: f64,
    /// Tokens kept free after the context for the answer.
    pub answer_reserve: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            icl_fraction: 0.7,
            max_demos: 2,
            matched_prob: 0.6,
            answer_reserve: 40,
        }
    }
}

impl CurriculumConfig {
    pub fn disabled() -> Self {
        CurriculumConfig {
            icl_fraction: 0.0,
            ..Self::default()
        }
    }
}

/// Vocabulary over every string the pipeline can feed the model.
pub fn build_vocabulary(records: &[QaRecord], bank: &AvoidantTemplateBank) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for r in records {
        texts.push(r.question.clone());
        texts.push(r.answer.clone());
        texts.push(r.paraphrased_question.clone());
        texts.extend(r.perturbed_answers.iter().cloned());
    }
    texts.extend(bank.templates.iter().map(|t| t.replace('{', " ").replace('}', " ")));
    texts.extend(bank.pivot_facts.iter().cloned());
    texts.extend(crate::corpus::templates::QUESTION_TEMPLATES.iter().map(|t| t.topic.to_string()));
    texts.extend(DEFAULT_NON_ANSWERS.iter().map(|s| s.to_string()));
    texts.push(DUMMY_TARGET.into());
    texts.push(format!("{NEW_FACT} {PROMPT}\n"));
    Vocabulary::build(texts.iter().map(String::as_str))
}

/// Target families the curriculum draws from.
#[derive(Clone, Copy)]
enum TargetFamily {
    Dummy,
    Incorrect,
    Avoidant,
    NonAnswer,
    OtherAnswer,
}

fn random_family(rng: &mut ChaCha8Rng) -> TargetFamily {
    // Perturbed answers are over-weighted: copying them must override a
    // memorized answer that differs in only a few tokens.
    match rng.random_range(0..10) {
        0 => TargetFamily::Dummy,
        1..=4 => TargetFamily::Incorrect,
        5 | 6 => TargetFamily::Avoidant,
        7 => TargetFamily::NonAnswer,
        _ => TargetFamily::OtherAnswer,
    }
}

fn family_target(
    family: TargetFamily,
    rng: &mut ChaCha8Rng,
    r: &QaRecord,
    records: &[QaRecord],
    bank: &AvoidantTemplateBank,
) -> String {
    match family {
        TargetFamily::Dummy => DUMMY_TARGET.to_string(),
        TargetFamily::Incorrect => incorrect_target(r, rng.random()).unwrap_or_else(|_| DUMMY_TARGET.into()),
        TargetFamily::Avoidant => avoidant_target(r, bank, rng.random()).unwrap_or_else(|_| DUMMY_TARGET.into()),
        TargetFamily::NonAnswer => DEFAULT_NON_ANSWERS.choose(rng).expect("non-empty").to_string(),
        TargetFamily::OtherAnswer => records.choose(rng).expect("non-empty").answer.clone(),
    }
}

fn pick_related<'a>(rng: &mut ChaCha8Rng, r: &QaRecord, records: &'a [QaRecord]) -> &'a QaRecord {
    let same: Vec<&QaRecord> = records.iter().filter(|o| o.subject == r.subject && o.id != r.id).collect();
    if rng.random_bool(0.5) && !same.is_empty() {
        same.choose(rng).expect("non-empty")
    } else {
        records.choose(rng).expect("non-empty")
    }
}

/// One curriculum example built around `r`, or `None` if nothing fits.
pub fn icl_example(
    state: &ModelState,
    rng: &mut ChaCha8Rng,
    r: &QaRecord,
    records: &[QaRecord],
    cfg: &CurriculumConfig,
    bank: &AvoidantTemplateBank,
) -> Option<Example> {
    let family = random_family(rng);
    let target = family_target(family, rng, r, records, bank);
    let (query, answer) = if rng.random_bool(cfg.matched_prob) {
        let q = if rng.random_bool(0.5) { &r.question } else { &r.paraphrased_question };
        (q.clone(), target.clone())
    } else {
        // A third of the negatives ask the same question about another
        // subject, the case that retrieval by similarity produces most.
        let other = if rng.random_bool(1.0 / 3.0) {
            let key = r.question.replace(&r.subject, "");
            let same_question: Vec<&QaRecord> = records
                .iter()
                .filter(|o| o.subject != r.subject && o.question.replace(&o.subject, "") == key)
                .collect();
            match same_question.choose(rng) {
                Some(o) => *o,
                None => pick_related(rng, r, records),
            }
        } else {
            pick_related(rng, r, records)
        };
        if other.id == r.id {
            return None;
        }
        let q = if rng.random_bool(0.7) { &other.question } else { &other.paraphrased_question };
        (q.clone(), other.answer.clone())
    };

    // Retrieved demonstrations share the edit's target family and often
    // its subject, so half the time the demos are drawn that way.
    let aligned = rng.random_bool(0.5);
    let n_demos = rng.random_range(0..=cfg.max_demos);
    let demos: Vec<String> = (0..n_demos)
        .map(|_| {
            let (d, fam) = if aligned {
                (pick_related(rng, r, records), family)
            } else {
                (records.choose(rng).expect("non-empty"), random_family(rng))
            };
            let t = family_target(fam, rng, d, records, bank);
            match rng.random_range(0..3) {
                0 => demo_text(&d.question, &t, &d.question, &t),
                1 => demo_text(&d.question, &t, &d.paraphrased_question, &t),
                _ => {
                    let o = records.choose(rng).expect("non-empty");
                    demo_text(&d.question, &t, &o.question, &o.answer)
                }
            }
        })
        .collect();
    let demo_refs: Vec<&str> = demos.iter().map(String::as_str).collect();
    let budget = state.config.context_len.saturating_sub(cfg.answer_reserve + 1);
    let ctx = construct_icl_context(&demo_refs, &r.question, &target, &query, budget, |t| {
        state.vocab.encode(t).len()
    })
    .ok()?;
    let ex = state.example(&ctx.text, &answer);
    (ex.prompt.len() + ex.completion.len() <= state.config.context_len).then_some(ex)
}

/// All examples for one epoch: every record once, plus curriculum examples.
pub fn epoch_examples(
    state: &ModelState,
    records: &[QaRecord],
    cfg: &CurriculumConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Example>> {
    let mut out: Vec<Example> = records.iter().map(|r| state.example(&r.question, &r.answer)).collect();
    if cfg.icl_fraction <= 0.0 || records.len() < 2 {
        return Ok(out);
    }
    let bank = AvoidantTemplateBank::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xC0FFEE).wrapping_add(epoch as u64 * 7919));
    for r in records {
        let mut budget = cfg.icl_fraction;
        while budget > 0.0 {
            if budget >= 1.0 || rng.random_bool(budget) {
                if let Some(ex) = icl_example(state, &mut rng, r, records, cfg, &bank) {
                    out.push(ex);
                }
            }
            budget -= 1.0;
        }
    }
    Ok(out)
}
