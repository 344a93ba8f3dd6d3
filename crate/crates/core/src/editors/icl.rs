//! In-context editing: a store of copy/update/retain demonstrations retrieved
//! by cosine similarity and prepended to each query together with the new
//! fact. Model parameters are never touched.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QaRecord;
use crate::error::{Error, Result};
use crate::eval::{edit_metrics, EditMetrics};
use crate::model::{LanguageModel, ModelState, Vocabulary};
use crate::targets::{stable_hash, EditDescriptor};

pub const NEW_FACT: &str = "New Fact:";
pub const PROMPT: &str = "Prompt:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    Copy,
    Update,
    Retain,
}

/// `New Fact: {fact_prompt} {target}\nPrompt: {query} {answer}`
pub fn demo_text(fact_prompt: &str, target: &str, query: &str, answer: &str) -> String {
    format!("{NEW_FACT} {fact_prompt} {target}\n{PROMPT} {query} {answer}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IclContext {
    pub text: String,
    /// Demonstrations dropped from the front to fit the length budget.
    pub dropped: usize,
}

/// Concatenate demonstrations, the new fact and the query. Demonstrations
/// are dropped oldest-first while `token_len(text) > max_tokens`.
pub fn construct_icl_context<F>(
    demos: &[&str],
    fact_prompt: &str,
    target: &str,
    query: &str,
    max_tokens: usize,
    token_len: F,
) -> Result<IclContext>
where
    F: Fn(&str) -> usize,
{
    let tail = format!("{NEW_FACT} {fact_prompt} {target}\n{PROMPT} {query}");
    if token_len(&tail) > max_tokens {
        return Err(Error::Length {
            len: token_len(&tail),
            max: max_tokens,
        });
    }
    for dropped in 0..=demos.len() {
        let mut text = String::new();
        for d in &demos[dropped..] {
            text.push_str(d);
            text.push('\n');
        }
        text.push_str(&tail);
        if token_len(&text) <= max_tokens {
            return Ok(IclContext { text, dropped });
        }
    }
    unreachable!("the bare block fits")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub kind: DemoKind,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationStore {
    pub entries: Vec<Demonstration>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IclConfig {
    /// Demonstrations retrieved per query.
    pub k: usize,
    /// Share of descriptors whose demonstrations enter the store.
    pub train_fraction: f64,
    /// Tokens kept free for the answer when building a context.
    pub answer_reserve: usize,
    pub seed: u64,
}

impl Default for IclConfig {
    fn default() -> Self {
        IclConfig {
            k: 2,
            train_fraction: 0.9,
            answer_reserve: 48,
            seed: 0,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Seeded split of descriptors into a demonstration part and an evaluation
/// part. Both keep the input order.
pub fn split_descriptors(
    descriptors: &[EditDescriptor],
    train_fraction: f64,
    seed: u64,
) -> (Vec<EditDescriptor>, Vec<EditDescriptor>) {
    let n = descriptors.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &idx[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (d, t) in descriptors.iter().zip(in_train) {
        if t {
            train.push(d.clone());
        } else {
            eval.push(d.clone());
        }
    }
    (train, eval)
}

/// Three entries per training descriptor. The embedding is taken from the
/// text a query would resemble: the prompt for copy, the paraphrase for
/// update and the retain question for retain.
pub fn build_demonstration_store<F>(
    train: &[EditDescriptor],
    retain: &[QaRecord],
    embed: F,
    k: usize,
    seed: u64,
) -> Result<DemonstrationStore>
where
    F: Fn(&[&str]) -> Result<Vec<Vec<f32>>>,
{
    if retain.is_empty() && !train.is_empty() {
        return Err(Error::Precondition("no retain records for retain demonstrations".into()));
    }
    let mut kinds = Vec::with_capacity(3 * train.len());
    let mut texts = Vec::with_capacity(3 * train.len());
    let mut sources: Vec<&str> = Vec::with_capacity(3 * train.len());
    for d in train {
        let r = &retain[(stable_hash(seed, &d.record_id) % retain.len() as u64) as usize];
        kinds.push(DemoKind::Copy);
        texts.push(demo_text(&d.prompt, &d.target, &d.prompt, &d.target));
        sources.push(&d.prompt);
        kinds.push(DemoKind::Update);
        texts.push(demo_text(&d.prompt, &d.target, &d.paraphrase, &d.target));
        sources.push(&d.paraphrase);
        kinds.push(DemoKind::Retain);
        texts.push(demo_text(&d.prompt, &d.target, &r.question, &r.answer));
        sources.push(&r.question);
    }
    if k > texts.len() {
        return Err(Error::Precondition(format!("k = {k} exceeds store size {}", texts.len())));
    }
    let embeddings = embed(&sources)?;
    let entries = kinds
        .into_iter()
        .zip(texts)
        .zip(embeddings)
        .map(|((kind, text), embedding)| Demonstration { kind, text, embedding })
        .collect();
    Ok(DemonstrationStore { entries, k })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Indices of the `k` entries most similar to `query` (unit vectors, so the
/// dot product is the cosine), best first; ties go to the lower index.
pub fn select_demonstrations(store: &DemonstrationStore, query: &[f32]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = store
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (dot(&e.embedding, query), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(store.k).map(|(_, i)| i).collect()
}

/// A model whose edits live in its prompts: each query is prefixed with the
/// retrieved demonstrations and the new fact closest to it.
pub struct IclEditedModel<'a> {
    pub base: &'a ModelState,
    pub store: DemonstrationStore,
    facts: Vec<EditDescriptor>,
    fact_embeddings: Vec<Vec<f32>>,
    answer_reserve: usize,
    contexts: Mutex<HashMap<String, String>>,
}

impl<'a> IclEditedModel<'a> {
    pub fn new(base: &'a ModelState, store: DemonstrationStore, facts: Vec<EditDescriptor>, answer_reserve: usize) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::Precondition("no facts to edit".into()));
        }
        let prompts: Vec<&str> = facts.iter().map(|f| f.prompt.as_str()).collect();
        let fact_embeddings = base.embed_batch(&prompts)?;
        Ok(IclEditedModel {
            base,
            store,
            facts,
            fact_embeddings,
            answer_reserve,
            contexts: Mutex::new(HashMap::new()),
        })
    }

    pub fn facts(&self) -> &[EditDescriptor] {
        &self.facts
    }

    fn build_context(&self, query: &str, embedding: &[f32]) -> Result<String> {
        let fact = self
            .fact_embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (dot(e, embedding), i))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|(_, i)| &self.facts[i])
            .expect("non-empty");
        // Most similar demonstration sits next to the query.
        let mut demos: Vec<&str> = select_demonstrations(&self.store, embedding)
            .into_iter()
            .map(|i| self.store.entries[i].text.as_str())
            .collect();
        demos.reverse();
        let budget = self.base.config.context_len.saturating_sub(self.answer_reserve + 1);
        let ctx = construct_icl_context(&demos, &fact.prompt, &fact.target, query, budget, |t| {
            self.base.vocab.encode(t).len()
        })?;
        Ok(ctx.text)
    }

    /// Full prompt text for each query, computed once per distinct query.
    pub fn contexts(&self, queries: &[&str]) -> Result<Vec<String>> {
        let missing: Vec<&str> = {
            let cache = self.contexts.lock().expect("context cache");
            let mut seen = std::collections::HashSet::new();
            queries
                .iter()
                .copied()
                .filter(|q| !cache.contains_key(*q) && seen.insert(*q))
                .collect()
        };
        if !missing.is_empty() {
            let embs = self.base.embed_batch(&missing)?;
            let built: Vec<String> = missing
                .iter()
                .zip(&embs)
                .map(|(q, e)| self.build_context(q, e))
                .collect::<Result<_>>()?;
            let mut cache = self.contexts.lock().expect("context cache");
            for (q, c) in missing.into_iter().zip(built) {
                cache.insert(q.to_string(), c);
            }
        }
        let cache = self.contexts.lock().expect("context cache");
        Ok(queries.iter().map(|q| cache[*q].clone()).collect())
    }

    fn with_contexts(&self, pairs: &[(&str, &str)]) -> Result<Vec<(String, String)>> {
        let qs: Vec<&str> = pairs.iter().map(|p| p.0).collect();
        Ok(self
            .contexts(&qs)?
            .into_iter()
            .zip(pairs)
            .map(|(c, (_, a))| (c, a.to_string()))
            .collect())
    }
}

impl LanguageModel for IclEditedModel<'_> {
    fn vocab(&self) -> &Vocabulary {
        &self.base.vocab
    }

    fn answer_logprobs(&self, question: &str, answer: &str) -> Result<Vec<f64>> {
        Ok(self.answer_logprobs_batch(&[(question, answer)])?.remove(0))
    }

    fn teacher_forced_argmax(&self, question: &str, answer: &str) -> Result<Vec<u32>> {
        Ok(self.teacher_forced_argmax_batch(&[(question, answer)])?.remove(0))
    }

    fn generate(&self, question: &str, max_tokens: usize) -> Result<String> {
        Ok(self.generate_batch(&[question], max_tokens)?.remove(0))
    }

    fn answer_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        let owned = self.with_contexts(pairs)?;
        let refs: Vec<(&str, &str)> = owned.iter().map(|(c, a)| (c.as_str(), a.as_str())).collect();
        self.base.answer_logprobs_batch(&refs)
    }

    fn teacher_forced_argmax_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<u32>>> {
        let owned = self.with_contexts(pairs)?;
        let refs: Vec<(&str, &str)> = owned.iter().map(|(c, a)| (c.as_str(), a.as_str())).collect();
        self.base.teacher_forced_argmax_batch(&refs)
    }

    fn generate_batch(&self, questions: &[&str], max_tokens: usize) -> Result<Vec<String>> {
        let ctx = self.contexts(questions)?;
        let refs: Vec<&str> = ctx.iter().map(String::as_str).collect();
        self.base.generate_batch(&refs, max_tokens)
    }
}

/// Edit metrics with every descriptor's own fact placed in context.
pub fn pinned_edit_metrics(
    base: &ModelState,
    store: &DemonstrationStore,
    descriptors: &[EditDescriptor],
    answer_reserve: usize,
) -> Result<EditMetrics> {
    if descriptors.is_empty() {
        return Err(Error::Precondition("no edit descriptors".into()));
    }
    let mut sum = [0.0f64; 3];
    for d in descriptors {
        let m = IclEditedModel::new(base, store.clone(), vec![d.clone()], answer_reserve)?;
        let e = edit_metrics(&m, base, std::slice::from_ref(d))?;
        sum[0] += e.reliability;
        sum[1] += e.generalization;
        sum[2] += e.locality;
    }
    let n = descriptors.len() as f64;
    Ok(EditMetrics {
        reliability: sum[0] / n,
        generalization: sum[1] / n,
        locality: sum[2] / n,
    })
}
