//! Greedy decoding and answer scoring behind a common interface, so plain,
//! context-edited and side-memory models are evaluated the same way.

use crate::error::{Error, Result};
use crate::model::forward::{forward, Intervention};
use crate::model::tokenizer::{Vocabulary, EOS};
use crate::model::ModelState;
use crate::tensor::{argmax, log_softmax};

/// Sequences per packed forward pass when scoring or decoding in bulk.
pub const CHUNK: usize = 32;

pub trait LanguageModel: Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Log-probability of each answer token (no end marker) given the question.
    fn answer_logprobs(&self, question: &str, answer: &str) -> Result<Vec<f64>>;

    /// Argmax next-token prediction at each answer position, teacher-forced.
    fn teacher_forced_argmax(&self, question: &str, answer: &str) -> Result<Vec<u32>>;

    /// Greedy decode up to `max_tokens` tokens after the question.
    fn generate(&self, question: &str, max_tokens: usize) -> Result<String>;

    fn answer_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        pairs.iter().map(|(q, a)| self.answer_logprobs(q, a)).collect()
    }

    fn teacher_forced_argmax_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<u32>>> {
        pairs.iter().map(|(q, a)| self.teacher_forced_argmax(q, a)).collect()
    }

    fn generate_batch(&self, questions: &[&str], max_tokens: usize) -> Result<Vec<String>> {
        questions.iter().map(|q| self.generate(q, max_tokens)).collect()
    }
}

/// `P(answer | question)^(1/|answer|)`: the geometric-mean token probability.
pub fn normalized_answer_probability<M: LanguageModel + ?Sized>(model: &M, question: &str, answer: &str) -> Result<f64> {
    let lp = model.answer_logprobs(question, answer)?;
    normalized_from_logprobs(&lp)
}

pub fn normalized_from_logprobs(lp: &[f64]) -> Result<f64> {
    if lp.is_empty() {
        return Err(Error::Precondition("empty answer".into()));
    }
    Ok((lp.iter().sum::<f64>() / lp.len() as f64).exp())
}

/// Greedy argmax decoding. `step` returns next-token logits for a prefix.
pub fn greedy_decode<F>(prompt: &[u32], max_tokens: usize, context_len: usize, mut step: F) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f32>>,
{
    if prompt.len() > context_len {
        return Err(Error::Length {
            len: prompt.len(),
            max: context_len,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_tokens && seq.len() < context_len {
        let logits = step(&seq)?;
        let next = argmax(&logits) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

impl ModelState {
    fn scoring_sequence(&self, question: &str, answer: &str) -> Result<(Vec<u32>, usize, Vec<u32>)> {
        let prompt = self.prompt_ids(question);
        let ans = self.answer_ids(answer);
        if ans.is_empty() {
            return Err(Error::Precondition("empty answer".into()));
        }
        let mut seq = prompt.clone();
        seq.extend_from_slice(&ans);
        Ok((seq, prompt.len(), ans))
    }

    /// Last-position logits for a token prefix.
    pub fn next_token_logits(&self, ids: &[u32], iv: &Intervention<'_, f32>) -> Result<Vec<f32>> {
        let cache = forward(&self.config, &self.params, &[ids], iv)?;
        Ok(cache.logits_row(ids.len() - 1).to_vec())
    }

    /// Score (question, answer) pairs with an optional intervention per chunk.
    pub fn score_pairs_with(
        &self,
        pairs: &[(&str, &str)],
        iv: &Intervention<'_, f32>,
    ) -> Result<Vec<(Vec<f64>, Vec<u32>)>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(CHUNK) {
            let prepared: Vec<_> = chunk
                .iter()
                .map(|(q, a)| self.scoring_sequence(q, a))
                .collect::<Result<_>>()?;
            let seqs: Vec<&[u32]> = prepared.iter().map(|(s, _, _)| s.as_slice()).collect();
            let cache = forward(&self.config, &self.params, &seqs, iv)?;
            for (i, (_, plen, ans)) in prepared.iter().enumerate() {
                let start = cache.packing.starts[i];
                let mut lps = Vec::with_capacity(ans.len());
                let mut am = Vec::with_capacity(ans.len());
                for (j, &tok) in ans.iter().enumerate() {
                    let row = cache.logits_row(start + plen + j - 1);
                    lps.push(log_softmax(row)[tok as usize] as f64);
                    am.push(argmax(row) as u32);
                }
                out.push((lps, am));
            }
        }
        Ok(out)
    }

    /// Greedy decode many prompts at once, packing active sequences per step.
    pub fn generate_ids_batch(
        &self,
        prompts: &[Vec<u32>],
        max_tokens: usize,
        iv: &Intervention<'_, f32>,
    ) -> Result<Vec<Vec<u32>>> {
        let ctx = self.config.context_len;
        for p in prompts {
            if p.len() > ctx {
                return Err(Error::Length { len: p.len(), max: ctx });
            }
        }
        let mut outs: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
        let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
        let mut active: Vec<usize> = (0..prompts.len())
            .filter(|&i| max_tokens > 0 && seqs[i].len() < ctx)
            .collect();
        while !active.is_empty() {
            let mut still = Vec::with_capacity(active.len());
            for chunk in active.chunks(CHUNK) {
                let batch: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
                let cache = forward(&self.config, &self.params, &batch, iv)?;
                for (k, &i) in chunk.iter().enumerate() {
                    let last = cache.packing.starts[k] + cache.packing.lens[k] - 1;
                    let next = argmax(cache.logits_row(last)) as u32;
                    if next == EOS {
                        continue;
                    }
                    outs[i].push(next);
                    seqs[i].push(next);
                    if outs[i].len() < max_tokens && seqs[i].len() < ctx {
                        still.push(i);
                    }
                }
            }
            active = still;
        }
        Ok(outs)
    }
}

impl LanguageModel for ModelState {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn answer_logprobs(&self, question: &str, answer: &str) -> Result<Vec<f64>> {
        Ok(self.score_pairs_with(&[(question, answer)], &Intervention::none())?.remove(0).0)
    }

    fn teacher_forced_argmax(&self, question: &str, answer: &str) -> Result<Vec<u32>> {
        Ok(self.score_pairs_with(&[(question, answer)], &Intervention::none())?.remove(0).1)
    }

    fn generate(&self, question: &str, max_tokens: usize) -> Result<String> {
        let prompt = self.prompt_ids(question);
        let ids = greedy_decode(&prompt, max_tokens, self.config.context_len, |ids| {
            self.next_token_logits(ids, &Intervention::none())
        })?;
        Ok(self.vocab.detokenize(&ids))
    }

    fn answer_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .score_pairs_with(pairs, &Intervention::none())?
            .into_iter()
            .map(|(lp, _)| lp)
            .collect())
    }

    fn teacher_forced_argmax_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<u32>>> {
        Ok(self
            .score_pairs_with(pairs, &Intervention::none())?
            .into_iter()
            .map(|(_, am)| am)
            .collect())
    }

    fn generate_batch(&self, questions: &[&str], max_tokens: usize) -> Result<Vec<String>> {
        let prompts: Vec<Vec<u32>> = questions.iter().map(|q| self.prompt_ids(q)).collect();
        Ok(self
            .generate_ids_batch(&prompts, max_tokens, &Intervention::none())?
            .iter()
            .map(|ids| self.vocab.detokenize(ids))
            .collect())
    }
}
