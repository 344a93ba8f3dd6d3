//! Sequence objectives: masked NLL over completion tokens and KL to a
//! reference distribution, with gradients through [`backward`].

use crate::error::{Error, Result};
use crate::model::forward::{backward, forward, Gradients, Intervention};
use crate::model::params::{ModelConfig, Params};
use crate::tensor::{log_softmax, s, Scalar, Tensor};

/// A prompt/completion pair of token ids. Only completion tokens are scored.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
}

impl Example {
    pub fn new(prompt: Vec<u32>, completion: Vec<u32>) -> Self {
        Example { prompt, completion }
    }

    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.completion);
        s
    }

    /// Row (within this sequence) whose logits predict completion token `i`.
    pub fn predicting_row(&self, i: usize) -> usize {
        self.prompt.len() + i - 1
    }

    fn check(&self) -> Result<()> {
        if self.completion.is_empty() {
            return Err(Error::Precondition("empty completion".into()));
        }
        if self.prompt.is_empty() {
            return Err(Error::Precondition("empty prompt".into()));
        }
        Ok(())
    }
}

/// How one example contributes to the objective.
#[derive(Clone, Debug)]
pub enum Term<'a, T> {
    /// `weight · mean NLL` over the completion tokens.
    Nll { weight: T },
    /// `weight · mean KL(reference ‖ model)` over completion positions;
    /// `reference[i]` is the reference distribution predicting token `i`.
    Kl { weight: T, reference: &'a [Vec<T>] },
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput<T> {
    pub loss: T,
    /// Unweighted mean NLL (or mean KL) of each example.
    pub per_example: Vec<T>,
    pub grads: Option<Gradients<T>>,
}

/// Evaluate `Σ_e term_e` over a batch, optionally with gradients.
pub fn objective<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    examples: &[Example],
    terms: &[Term<'_, T>],
    iv: &Intervention<'_, T>,
    want_grad: bool,
) -> Result<ObjectiveOutput<T>> {
    if examples.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    assert_eq!(examples.len(), terms.len());
    for e in examples {
        e.check()?;
    }
    let seqs: Vec<Vec<u32>> = examples.iter().map(Example::sequence).collect();
    let cache = forward(cfg, params, &seqs, iv)?;
    let vocab = cache.vocab;
    let mut dlogits = if want_grad {
        vec![T::zero(); cache.packing.rows * vocab]
    } else {
        Vec::new()
    };
    let mut loss = T::zero();
    let mut per_example = Vec::with_capacity(examples.len());
    for (ei, (ex, term)) in examples.iter().zip(terms).enumerate() {
        let start = cache.packing.starts[ei];
        let count = s::<T>(ex.completion.len() as f64);
        let mut total = T::zero();
        for (i, &tok) in ex.completion.iter().enumerate() {
            let row = start + ex.predicting_row(i);
            let logp = log_softmax(cache.logits_row(row));
            match term {
                Term::Nll { weight } => {
                    total = total - logp[tok as usize];
                    if want_grad {
                        let dr = &mut dlogits[row * vocab..(row + 1) * vocab];
                        let k = *weight / count;
                        for (j, lp) in logp.iter().enumerate() {
                            dr[j] = dr[j] + k * lp.exp();
                        }
                        dr[tok as usize] = dr[tok as usize] - k;
                    }
                }
                Term::Kl { weight, reference } => {
                    let refp = &reference[i];
                    let mut kl = T::zero();
                    for (j, &pr) in refp.iter().enumerate() {
                        if pr > T::zero() {
                            kl = kl + pr * (pr.ln() - logp[j]);
                        }
                    }
                    total = total + kl;
                    if want_grad {
                        let dr = &mut dlogits[row * vocab..(row + 1) * vocab];
                        let k = *weight / count;
                        for (j, lp) in logp.iter().enumerate() {
                            dr[j] = dr[j] + k * (lp.exp() - refp[j]);
                        }
                    }
                }
            }
        }
        let mean = total / count;
        let weight = match term {
            Term::Nll { weight } | Term::Kl { weight, .. } => *weight,
        };
        loss = loss + weight * mean;
        per_example.push(mean);
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("objective evaluation"));
    }
    let grads = if want_grad {
        let w_override = iv.w_out_override.map(|(_, w)| w);
        Some(backward(cfg, params, &cache, &dlogits, w_override))
    } else {
        None
    };
    Ok(ObjectiveOutput {
        loss,
        per_example,
        grads,
    })
}

/// Mean NLL of each example's completion, no gradients.
pub fn nll_per_example<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    examples: &[Example],
    iv: &Intervention<'_, T>,
) -> Result<Vec<T>> {
    let terms: Vec<Term<T>> = examples.iter().map(|_| Term::Nll { weight: T::one() }).collect();
    Ok(objective(cfg, params, examples, &terms, iv, false)?.per_example)
}

/// Next-token distributions predicting each completion token, per example.
pub fn completion_distributions<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    examples: &[Example],
) -> Result<Vec<Vec<Vec<T>>>> {
    let seqs: Vec<Vec<u32>> = examples.iter().map(Example::sequence).collect();
    let cache = forward(cfg, params, &seqs, &Intervention::none())?;
    Ok(examples
        .iter()
        .enumerate()
        .map(|(ei, ex)| {
            (0..ex.completion.len())
                .map(|i| {
                    let row = cache.packing.starts[ei] + ex.predicting_row(i);
                    log_softmax(cache.logits_row(row)).into_iter().map(|x| x.exp()).collect()
                })
                .collect()
        })
        .collect())
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(g: &Params<T>) -> T {
    g.sum_sq().sqrt()
}

/// Gradient of `w_out` at one layer, convenience for single-matrix training.
pub fn layer_w_out_grad<T: Scalar>(g: &Gradients<T>, layer: usize) -> &Tensor<T> {
    &g.params.layers[layer].w_out
}
