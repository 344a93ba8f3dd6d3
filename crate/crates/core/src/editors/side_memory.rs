//! Side-memory editing: a trainable copy of one layer's `w_out`, trained in
//! masked shards, merged, and consulted only when a router fires.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::SideData;
use crate::model::decode::CHUNK;
use crate::model::forward::{forward, Intervention};
use crate::model::loss::{layer_w_out_grad, objective, Term};
use crate::model::tokenizer::{Vocabulary, EOS};
use crate::model::{LanguageModel, ModelState};
use crate::targets::EditDescriptor;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SideMemoryConfig {
    /// Layer whose `w_out` is copied; `None` means the last layer.
    pub layer: Option<usize>,
    pub n_shards: usize,
    pub mask_density: f64,
    pub lr: f32,
    pub steps: usize,
    /// Weight of the routing term: pull activation scores of the
    /// descriptors' locality probes toward zero and push edit prompts up
    /// to `route_margin`. Zero trains on target NLL alone.
    pub route_weight: f32,
    pub route_margin: f64,
    pub seed: u64,
}

impl Default for SideMemoryConfig {
    fn default() -> Self {
        SideMemoryConfig {
            layer: None,
            n_shards: 2,
            mask_density: 0.5,
            lr: 3e-2,
            steps: 100,
            route_weight: 0.3,
            route_margin: 10.0,
            seed: 0,
        }
    }
}

impl SideMemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_shards == 0 {
            return Err(Error::config("n_shards", "must be at least 1"));
        }
        if !(self.mask_density > 0.0 && self.mask_density <= 1.0) {
            return Err(Error::config("mask_density", "must lie in (0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.route_weight >= 0.0) || !(self.route_margin >= 0.0) {
            return Err(Error::config("route_weight", "routing weight and margin must be non-negative"));
        }
        Ok(())
    }

    pub fn resolve_layer(&self, n_layers: usize) -> Result<usize> {
        match self.layer {
            None => Ok(n_layers - 1),
            Some(l) if l < n_layers => Ok(l),
            Some(l) => Err(Error::config("layer", format!("layer {l} out of range"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideMemory {
    pub layer: usize,
    /// The main-memory matrix the side copy started from.
    pub w_main: Tensor<f32>,
    /// Trained matrix of each shard (`w_main` plus its masked delta).
    pub shards: Vec<Tensor<f32>>,
    pub masks: Vec<Vec<bool>>,
    /// Merged side matrix; `None` until [`merge_shards`].
    pub w_side: Option<Tensor<f32>>,
    /// Router threshold ε; `None` until [`calibrate_router`].
    pub threshold: Option<f64>,
}

fn random_mask(len: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
    if !mask.iter().any(|b| *b) {
        let i = rng.random_range(0..len);
        mask[i] = true;
    }
    mask
}

/// Train one masked delta per shard; descriptors go to shards round-robin.
pub fn train_side_memory(state: &ModelState, descriptors: &[EditDescriptor], cfg: &SideMemoryConfig) -> Result<SideMemory> {
    cfg.validate()?;
    if descriptors.is_empty() {
        return Err(Error::Precondition("no edit descriptors".into()));
    }
    let layer = cfg.resolve_layer(state.config.n_layers)?;
    let w_main = state.params.layers[layer].w_out.clone();
    let last_keys = |prompts: Vec<&str>| -> Result<Vec<Vec<f32>>> {
        let seqs: Vec<Vec<u32>> = prompts.iter().map(|p| state.prompt_ids(p)).collect();
        let mut keys = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let cache = forward(&state.config, &state.params, chunk, &Intervention::none())?;
            for (i, sq) in chunk.iter().enumerate() {
                keys.push(cache.key_row(layer, cache.packing.starts[i] + sq.len() - 1).to_vec());
            }
        }
        Ok(keys)
    };
    let route = cfg.route_weight > 0.0;
    let probe_keys = if route {
        last_keys(descriptors.iter().map(|d| d.locality_probe.as_str()).collect())?
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5749_5345);
    let mut shards = Vec::with_capacity(cfg.n_shards);
    let mut masks = Vec::with_capacity(cfg.n_shards);
    for shard in 0..cfg.n_shards {
        let mask = random_mask(w_main.data.len(), cfg.mask_density, &mut rng);
        let examples: Vec<_> = descriptors
            .iter()
            .skip(shard)
            .step_by(cfg.n_shards)
            .map(|d| state.example(&d.prompt, &d.target))
            .collect();
        let edit_keys = if route {
            last_keys(descriptors.iter().skip(shard).step_by(cfg.n_shards).map(|d| d.prompt.as_str()).collect())?
        } else {
            Vec::new()
        };
        let mut w = w_main.clone();
        if !examples.is_empty() {
            let terms: Vec<Term<f32>> = examples
                .iter()
                .map(|_| Term::Nll {
                    weight: 1.0 / examples.len() as f32,
                })
                .collect();
            let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
            let mut m = vec![0.0f32; w.data.len()];
            let mut s = vec![0.0f32; w.data.len()];
            for step in 1..=cfg.steps {
                let out = objective(
                    &state.config,
                    &state.params,
                    &examples,
                    &terms,
                    &Intervention::with_w_out(layer, &w),
                    true,
                )
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::non_finite(format!("side memory shard {shard}")),
                    other => other,
                })?;
                let grads = out.grads.expect("requested");
                let mut g = layer_w_out_grad(&grads, layer).clone();
                if route {
                    let mut delta = w.clone();
                    delta.axpy(-1.0, &w_main);
                    let pull = cfg.route_weight / probe_keys.len() as f32;
                    for k in &probe_keys {
                        add_score_grad(&mut g, &delta, k, pull);
                    }
                    let push = -cfg.route_weight / edit_keys.len() as f32;
                    for k in &edit_keys {
                        if score_of(&delta, k) < cfg.route_margin {
                            add_score_grad(&mut g, &delta, k, push);
                        }
                    }
                }
                let t = step as i32;
                for i in 0..w.data.len() {
                    if !mask[i] {
                        continue;
                    }
                    m[i] = b1 * m[i] + (1.0 - b1) * g.data[i];
                    s[i] = b2 * s[i] + (1.0 - b2) * g.data[i] * g.data[i];
                    let mh = m[i] / (1.0 - b1.powi(t));
                    let sh = s[i] / (1.0 - b2.powi(t));
                    w.data[i] -= cfg.lr * mh / (sh.sqrt() + eps);
                }
                if !w.all_finite() {
                    return Err(Error::non_finite(format!("side memory shard {shard}")));
                }
            }
        }
        shards.push(w);
        masks.push(mask);
    }
    Ok(SideMemory {
        layer,
        w_main,
        shards,
        masks,
        w_side: None,
        threshold: None,
    })
}

/// `W_side = W_main + Σ mask_s ⊙ Δ_s`, averaging coordinates that several
/// shards touched.
pub fn merge_shards(side: &SideMemory) -> Result<SideMemory> {
    if side.shards.is_empty() {
        return Err(Error::Precondition("no trained shards".into()));
    }
    let mut w = side.w_main.clone();
    for i in 0..w.data.len() {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (shard, mask) in side.shards.iter().zip(&side.masks) {
            if mask[i] {
                sum += shard.data[i] as f64 - side.w_main.data[i] as f64;
                count += 1;
            }
        }
        if count > 0 {
            w.data[i] = (side.w_main.data[i] as f64 + sum / count as f64) as f32;
        }
    }
    Ok(SideMemory {
        w_side: Some(w),
        ..side.clone()
    })
}

impl SideMemory {
    fn merged(&self) -> Result<&Tensor<f32>> {
        self.w_side
            .as_ref()
            .ok_or_else(|| Error::Precondition("side memory shards are not merged".into()))
    }

    /// `W_side − W_main`.
    pub fn delta(&self) -> Result<Tensor<f32>> {
        let mut d = self.merged()?.clone();
        d.axpy(-1.0, &self.w_main);
        Ok(d)
    }

    /// Routing scores `‖ΔW · k_last‖` for each token sequence.
    pub fn activation_scores(&self, state: &ModelState, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        let delta = self.delta()?;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let cache = forward(&state.config, &state.params, chunk, &Intervention::none())?;
            for (i, sq) in chunk.iter().enumerate() {
                let key = cache.key_row(self.layer, cache.packing.starts[i] + sq.len() - 1);
                out.push(score_of(&delta, key));
            }
        }
        Ok(out)
    }

    pub fn to_side_data(&self) -> Result<SideData> {
        let mut tensors = vec![("side.w_side".to_string(), self.merged()?.clone())];
        for (i, (s, m)) in self.shards.iter().zip(&self.masks).enumerate() {
            tensors.push((format!("side.shard{i}"), s.clone()));
            let mask: Vec<f32> = m.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
            tensors.push((format!("side.mask{i}"), Tensor::from_vec(&s.shape, mask)));
        }
        Ok(SideData {
            meta: serde_json::json!({
                "layer": self.layer,
                "threshold": self.threshold,
                "n_shards": self.shards.len(),
            }),
            tensors,
        })
    }

    pub fn from_side_data(state: &ModelState, data: &SideData) -> Result<Self> {
        let bad = |what: &str| Error::Validation(format!("side memory checkpoint: {what}"));
        let layer = data.meta["layer"].as_u64().ok_or_else(|| bad("missing layer"))? as usize;
        if layer >= state.config.n_layers {
            return Err(bad("layer out of range"));
        }
        let n = data.meta["n_shards"].as_u64().ok_or_else(|| bad("missing n_shards"))? as usize;
        let find = |name: &str| {
            data.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| bad(&format!("missing tensor {name}")))
        };
        let mut shards = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            shards.push(find(&format!("side.shard{i}"))?);
            masks.push(find(&format!("side.mask{i}"))?.data.iter().map(|x| *x != 0.0).collect());
        }
        Ok(SideMemory {
            layer,
            w_main: state.params.layers[layer].w_out.clone(),
            shards,
            masks,
            w_side: Some(find("side.w_side")?),
            threshold: data.meta["threshold"].as_f64(),
        })
    }
}

fn score_of(delta: &Tensor<f32>, key: &[f32]) -> f64 {
    (0..delta.rows())
        .map(|r| {
            let x: f64 = delta.row(r).iter().zip(key).map(|(a, b)| *a as f64 * *b as f64).sum();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Midpoint between the lowest forget score and the highest retain score
/// when they separate; otherwise the score value minimizing routing errors
/// (routing when `score ≥ ε`), ties going to the larger ε.
/// `g += scale · ∂‖Δk‖/∂Δ = scale · (Δk) kᵀ / ‖Δk‖`; nothing at `Δk = 0`.
fn add_score_grad(g: &mut Tensor<f32>, delta: &Tensor<f32>, key: &[f32], scale: f32) {
    let dk: Vec<f64> = (0..delta.rows())
        .map(|r| delta.row(r).iter().zip(key).map(|(a, b)| *a as f64 * *b as f64).sum())
        .collect();
    let norm = dk.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let cols = g.cols();
    for (r, x) in dk.iter().enumerate() {
        let c = (scale as f64 * x / norm) as f32;
        for (gv, kv) in g.data[r * cols..(r + 1) * cols].iter_mut().zip(key) {
            *gv += c * kv;
        }
    }
}

pub fn threshold_from_scores(forget: &[f64], retain: &[f64]) -> Result<f64> {
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::Precondition("router calibration needs both prompt sets".into()));
    }
    let fmin = forget.iter().cloned().fold(f64::INFINITY, f64::min);
    let rmax = retain.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if fmin > rmax {
        return Ok((fmin + rmax) / 2.0);
    }
    let mut candidates: Vec<f64> = forget.iter().chain(retain).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    candidates.dedup();
    let mut best = (usize::MAX, 0.0);
    for &eps in &candidates {
        let errors =
            forget.iter().filter(|&&a| a < eps).count() + retain.iter().filter(|&&a| a >= eps).count();
        if errors <= best.0 {
            best = (errors, eps);
        }
    }
    Ok(best.1)
}

/// Score both prompt sets and pick ε.
pub fn calibrate_router(state: &ModelState, side: &SideMemory, forget_prompts: &[&str], retain_prompts: &[&str]) -> Result<f64> {
    let ids = |ps: &[&str]| ps.iter().map(|p| state.prompt_ids(p)).collect::<Vec<_>>();
    let f = side.activation_scores(state, &ids(forget_prompts))?;
    let r = side.activation_scores(state, &ids(retain_prompts))?;
    threshold_from_scores(&f, &r)
}

/// A main model with a merged, calibrated side memory.
pub struct SideMemoryModel<'a> {
    pub base: &'a ModelState,
    pub side: &'a SideMemory,
    /// Re-route at every generated token. Off means generation always uses
    /// main memory while scoring still routes.
    pub generation_routing: bool,
}

impl<'a> SideMemoryModel<'a> {
    pub fn new(base: &'a ModelState, side: &'a SideMemory, generation_routing: bool) -> Result<Self> {
        side.merged()?;
        if side.threshold.is_none() {
            return Err(Error::Precondition("router threshold is not calibrated".into()));
        }
        Ok(SideMemoryModel {
            base,
            side,
            generation_routing,
        })
    }

    fn threshold(&self) -> f64 {
        self.side.threshold.expect("checked in new")
    }

    /// Routing decision for each prefix (true = side memory).
    pub fn routes(&self, prefixes: &[Vec<u32>]) -> Result<Vec<bool>> {
        let eps = self.threshold();
        Ok(self
            .side
            .activation_scores(self.base, prefixes)?
            .into_iter()
            .map(|a| a >= eps)
            .collect())
    }

    fn scored(&self, pairs: &[(&str, &str)]) -> Result<Vec<(Vec<f64>, Vec<u32>)>> {
        let prompts: Vec<Vec<u32>> = pairs.iter().map(|(q, _)| self.base.prompt_ids(q)).collect();
        let routes = self.routes(&prompts)?;
        let side_w = self.side.merged()?;
        let mut out: Vec<Option<(Vec<f64>, Vec<u32>)>> = vec![None; pairs.len()];
        for use_side in [false, true] {
            let idx: Vec<usize> = (0..pairs.len()).filter(|&i| routes[i] == use_side).collect();
            let sub: Vec<(&str, &str)> = idx.iter().map(|&i| pairs[i]).collect();
            if sub.is_empty() {
                continue;
            }
            let iv = if use_side {
                Intervention::with_w_out(self.side.layer, side_w)
            } else {
                Intervention::none()
            };
            for (i, r) in idx.into_iter().zip(self.base.score_pairs_with(&sub, &iv)?) {
                out[i] = Some(r);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every pair routed")).collect())
    }

    fn generate_ids(&self, prompts: &[Vec<u32>], max_tokens: usize) -> Result<Vec<Vec<u32>>> {
        if !self.generation_routing {
            return self.base.generate_ids_batch(prompts, max_tokens, &Intervention::none());
        }
        let ctx = self.base.config.context_len;
        let eps = self.threshold();
        let delta = self.side.delta()?;
        let side_w = self.side.merged()?;
        let mut outs: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
        let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
        for p in prompts {
            if p.len() > ctx {
                return Err(Error::Length { len: p.len(), max: ctx });
            }
        }
        let mut active: Vec<usize> = (0..prompts.len())
            .filter(|&i| max_tokens > 0 && seqs[i].len() < ctx)
            .collect();
        while !active.is_empty() {
            let mut still = Vec::new();
            for chunk in active.chunks(CHUNK) {
                let batch: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
                let main = forward(&self.base.config, &self.base.params, &batch, &Intervention::none())?;
                let mut next = vec![0u32; chunk.len()];
                let mut to_side = Vec::new();
                for (k, _) in chunk.iter().enumerate() {
                    let last = main.packing.starts[k] + main.packing.lens[k] - 1;
                    if score_of(&delta, main.key_row(self.side.layer, last)) >= eps {
                        to_side.push(k);
                    } else {
                        next[k] = argmax(main.logits_row(last)) as u32;
                    }
                }
                if !to_side.is_empty() {
                    let sub: Vec<&[u32]> = to_side.iter().map(|&k| batch[k]).collect();
                    let iv = Intervention::with_w_out(self.side.layer, side_w);
                    let cache = forward(&self.base.config, &self.base.params, &sub, &iv)?;
                    for (j, &k) in to_side.iter().enumerate() {
                        let last = cache.packing.starts[j] + cache.packing.lens[j] - 1;
                        next[k] = argmax(cache.logits_row(last)) as u32;
                    }
                }
                for (k, &i) in chunk.iter().enumerate() {
                    if next[k] == EOS {
                        continue;
                    }
                    outs[i].push(next[k]);
                    seqs[i].push(next[k]);
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

impl LanguageModel for SideMemoryModel<'_> {
    fn vocab(&self) -> &Vocabulary {
        &self.base.vocab
    }

    fn answer_logprobs(&self, question: &str, answer: &str) -> Result<Vec<f64>> {
        Ok(self.scored(&[(question, answer)])?.remove(0).0)
    }

    fn teacher_forced_argmax(&self, question: &str, answer: &str) -> Result<Vec<u32>> {
        Ok(self.scored(&[(question, answer)])?.remove(0).1)
    }

    fn generate(&self, question: &str, max_tokens: usize) -> Result<String> {
        Ok(self.generate_batch(&[question], max_tokens)?.remove(0))
    }

    fn answer_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<f64>>> {
        Ok(self.scored(pairs)?.into_iter().map(|(lp, _)| lp).collect())
    }

    fn teacher_forced_argmax_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<Vec<u32>>> {
        Ok(self.scored(pairs)?.into_iter().map(|(_, am)| am).collect())
    }

    fn generate_batch(&self, questions: &[&str], max_tokens: usize) -> Result<Vec<String>> {
        let prompts: Vec<Vec<u32>> = questions.iter().map(|q| self.base.prompt_ids(q)).collect();
        Ok(self
            .generate_ids(&prompts, max_tokens)?
            .iter()
            .map(|ids| self.base.vocab.detokenize(ids))
            .collect())
    }
}
