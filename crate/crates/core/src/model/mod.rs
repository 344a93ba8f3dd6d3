//! Tokenizer, tiny causal transformer, gradients, training, decoding and
//! answer scoring.

pub mod checkpoint;
pub mod decode;
pub mod forward;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tokenizer;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use decode::{greedy_decode, LanguageModel};
pub use forward::{ActivationTrace, ForwardCache, Gradients, Intervention};
pub use loss::{Example, Term};
pub use params::{LayerParams, ModelConfig, Params};
pub use tokenizer::{Tokenized, Vocabulary, BOS, EOS, PAD, UNK};
pub use train::{train, TrainHyper, TrainReport};

/// Configuration, vocabulary and `f32` parameters of one transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Params<f32>,
}

impl ModelState {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() <= UNK as usize {
            return Err(Error::config("vocab", "vocabulary has no ordinary tokens"));
        }
        let params = Params::init(&config, vocab.len());
        Ok(ModelState {
            config,
            vocab,
            params,
        })
    }

    /// `<bos>` followed by the tokens of `text`.
    pub fn prompt_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(text));
        ids
    }

    /// Answer tokens without the end marker (scoring form).
    pub fn answer_ids(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text)
    }

    /// Answer tokens followed by `<eos>` (training form).
    pub fn completion_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(text);
        ids.push(EOS);
        ids
    }

    /// Training example for a question/answer pair.
    pub fn example(&self, prompt: &str, answer: &str) -> Example {
        Example::new(self.prompt_ids(prompt), self.completion_ids(answer))
    }

    /// Logits for every position (`len × vocab`), plus the FFN trace on request.
    pub fn forward(&self, tokens: &[u32], want_trace: bool) -> Result<(Tensor<f32>, Option<ActivationTrace<f32>>)> {
        let cache = forward::forward(&self.config, &self.params, &[tokens], &Intervention::none())?;
        let logits = Tensor::from_vec(&[tokens.len(), cache.vocab], cache.logits.clone());
        let trace = want_trace.then(|| cache.trace());
        Ok((logits, trace))
    }

    /// Mean NLL of `completion` given `prompt`, masking prompt positions.
    pub fn nll_loss(&self, prompt: &[u32], completion: &[u32]) -> Result<f32> {
        let ex = Example::new(prompt.to_vec(), completion.to_vec());
        Ok(loss::nll_per_example(&self.config, &self.params, &[ex], &Intervention::none())?[0])
    }

    /// Gradients of `Σ term` over `batch` for every parameter tensor.
    pub fn gradients(&self, batch: &[Example], terms: &[Term<'_, f32>]) -> Result<Params<f32>> {
        let out = loss::objective(&self.config, &self.params, batch, terms, &Intervention::none(), true)?;
        Ok(out.grads.expect("requested").params)
    }

    /// Final-layer hidden states averaged over positions, unit-normalized.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(decode::CHUNK) {
            let seqs: Vec<Vec<u32>> = chunk
                .iter()
                .map(|t| {
                    let mut ids = self.prompt_ids(t);
                    ids.truncate(self.config.context_len);
                    ids
                })
                .collect();
            let cache = forward::forward(&self.config, &self.params, &seqs, &Intervention::none())?;
            let hidden = cache.hidden();
            for (k, len) in cache.packing.lens.iter().enumerate() {
                let start = cache.packing.starts[k];
                let mut mean = vec![0.0f64; d];
                for row in hidden[start * d..(start + len) * d].chunks(d) {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += *x as f64;
                    }
                }
                let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                out.push(mean.iter().map(|x| (x / norm) as f32).collect());
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}
