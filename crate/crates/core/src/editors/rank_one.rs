//! Rank-one editing of one layer's FFN down-projection: locate a layer by
//! noise-and-restore tracing, read the subject key, optimize a target value,
//! then solve the constrained least-squares update in closed form.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate::{edit_accuracy, locality_references, locality_scores};
use crate::model::decode::normalized_from_logprobs;
use crate::model::forward::{forward, Intervention, Packing};
use crate::model::loss::{objective, Example, Term};
use crate::model::ModelState;
use crate::targets::EditDescriptor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerChoice {
    Fixed(usize),
    #[serde(with = "auto_tag")]
    Auto,
}

mod auto_tag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(de::Error::custom(format!("expected \"auto\" or a layer index, got {s:?}")))
        }
    }
}

/// Token whose FFN key and value are edited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyToken {
    /// Last token of the subject span.
    SubjectLast,
    /// Last token of the prompt.
    PromptLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankOneEditConfig {
    pub layer: LayerChoice,
    pub value_lr: f32,
    pub value_steps: usize,
    pub ridge: f64,
    /// Clamp on `‖ΔW‖_F` per edit. `None` uses `clamp_factor` times the
    /// Frobenius norm of the pre-edit matrix.
    pub max_update_norm: Option<f64>,
    pub clamp_factor: f64,
    /// Key-averaging contexts; the first is always the bare prompt.
    pub key_contexts: usize,
    /// Noise std for tracing as a multiple of the token-embedding std.
    pub noise_scale: f64,
    /// Descriptors used for tracing.
    pub trace_samples: usize,
    pub key_token: KeyToken,
    pub seed: u64,
}

impl Default for RankOneEditConfig {
    fn default() -> Self {
        RankOneEditConfig {
            layer: LayerChoice::Auto,
            value_lr: 0.5,
            value_steps: 25,
            ridge: 1e-2,
            max_update_norm: None,
            clamp_factor: 5.0,
            key_contexts: 3,
            noise_scale: 3.0,
            trace_samples: 10,
            key_token: KeyToken::PromptLast,
            seed: 0,
        }
    }
}

impl RankOneEditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.value_lr > 0.0) {
            return Err(Error::config("value_lr", "must be positive"));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::config("ridge", "must be positive"));
        }
        if self.key_contexts == 0 {
            return Err(Error::config("key_contexts", "must be at least 1"));
        }
        Ok(())
    }
}

/// Second moment of FFN keys at one layer, plus the ridge term.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyCovariance {
    pub c: DMatrix<f64>,
    pub sample_count: usize,
    /// Fewer prompts than `d_ffn / 4` were supplied.
    pub low_sample: bool,
}

/// Mean of `k kᵀ` over every token position of `prompts`, plus `ridge·I`.
pub fn estimate_key_covariance(state: &ModelState, layer: usize, prompts: &[&str], ridge: f64) -> Result<KeyCovariance> {
    let f = state.config.d_ffn;
    let mut c = DMatrix::<f64>::zeros(f, f);
    let mut count = 0usize;
    for chunk in prompts.chunks(32) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|p| state.prompt_ids(p)).collect();
        let cache = forward(&state.config, &state.params, &seqs, &Intervention::none())?;
        let rows = cache.packing.rows;
        let keys = DMatrix::<f64>::from_fn(f, rows, |i, r| cache.key_row(layer, r)[i] as f64);
        c.gemm(1.0, &keys, &keys.transpose(), 1.0);
        count += rows;
    }
    if count > 0 {
        c /= count as f64;
    }
    for i in 0..f {
        c[(i, i)] += ridge;
    }
    let low_sample = prompts.len() < f / 4;
    if low_sample {
        log::warn!("key covariance from {} prompts (< d_ffn/4 = {})", prompts.len(), f / 4);
    }
    Ok(KeyCovariance {
        c,
        sample_count: count,
        low_sample,
    })
}

/// Position of the last subject token within `<bos> prompt`.
pub fn subject_last_position(state: &ModelState, prompt: &str, subject: &str) -> Result<usize> {
    let ids = state.prompt_ids(prompt);
    let subj = state.vocab.encode(subject);
    if subj.is_empty() {
        return Err(Error::Precondition("empty subject".into()));
    }
    ids.windows(subj.len())
        .position(|w| w == subj.as_slice())
        .map(|start| start + subj.len() - 1)
        .ok_or_else(|| Error::Precondition(format!("subject {subject:?} not found in prompt {prompt:?}")))
}

/// Edited position within `<bos> prompt`. The subject must occur in the
/// prompt either way.
pub fn edit_position(state: &ModelState, prompt: &str, subject: &str, key_token: KeyToken) -> Result<usize> {
    let last = subject_last_position(state, prompt, subject)?;
    Ok(match key_token {
        KeyToken::SubjectLast => last,
        KeyToken::PromptLast => state.prompt_ids(prompt).len() - 1,
    })
}

/// Seeded key-averaging contexts: the bare prompt, then prompts preceded by
/// sentences drawn from `pool`.
pub fn key_prefixes(pool: &[&str], count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7973);
    let mut out = vec![String::new()];
    for _ in 1..count {
        match pool.choose(&mut rng) {
            Some(p) => out.push((*p).to_string()),
            None => out.push(String::new()),
        }
    }
    out
}

/// FFN key at the last subject token, averaged over `prefixes` (an empty
/// string is the bare prompt; an empty list means the bare prompt only).
pub fn compute_subject_key(
    state: &ModelState,
    layer: usize,
    prompt: &str,
    subject: &str,
    prefixes: &[String],
) -> Result<Vec<f64>> {
    compute_key(state, layer, prompt, subject, prefixes, KeyToken::SubjectLast)
}

/// FFN key at the chosen edit position, averaged over `prefixes`.
pub fn compute_key(
    state: &ModelState,
    layer: usize,
    prompt: &str,
    subject: &str,
    prefixes: &[String],
    key_token: KeyToken,
) -> Result<Vec<f64>> {
    let bare = [String::new()];
    let prefixes = if prefixes.is_empty() { &bare[..] } else { prefixes };
    let mut seqs = Vec::with_capacity(prefixes.len());
    let mut positions = Vec::with_capacity(prefixes.len());
    for pre in prefixes {
        let text = if pre.is_empty() { prompt.to_string() } else { format!("{pre} {prompt}") };
        positions.push(edit_position(state, &text, subject, key_token)?);
        seqs.push(state.prompt_ids(&text));
    }
    let cache = forward(&state.config, &state.params, &seqs, &Intervention::none())?;
    let f = state.config.d_ffn;
    let mut key = vec![0.0f64; f];
    for (i, pos) in positions.iter().enumerate() {
        let row = cache.key_row(layer, cache.packing.starts[i] + pos);
        for (k, x) in key.iter_mut().zip(row) {
            *k += *x as f64;
        }
    }
    key.iter_mut().for_each(|k| *k /= prefixes.len() as f64);
    Ok(key)
}

/// Optimize the FFN output at the subject position so the model emits the
/// target. Returns the best value seen (lowest target NLL) with the initial
/// and best NLL.
pub fn solve_target_value(
    state: &ModelState,
    layer: usize,
    descriptor: &EditDescriptor,
    cfg: &RankOneEditConfig,
) -> Result<(Vec<f32>, f32, f32)> {
    solve_target_value_in(state, layer, descriptor, &[], cfg)
}

/// As [`solve_target_value`], with the NLL averaged over the prompt under
/// each prefix (an empty string is the bare prompt) and the same value
/// substituted in all of them.
pub fn solve_target_value_in(
    state: &ModelState,
    layer: usize,
    descriptor: &EditDescriptor,
    prefixes: &[String],
    cfg: &RankOneEditConfig,
) -> Result<(Vec<f32>, f32, f32)> {
    let bare = [String::new()];
    let prefixes = if prefixes.is_empty() { &bare[..] } else { prefixes };
    let mut examples = Vec::with_capacity(prefixes.len());
    let mut positions = Vec::with_capacity(prefixes.len());
    for pre in prefixes {
        let text = if pre.is_empty() {
            descriptor.prompt.clone()
        } else {
            format!("{pre} {}", descriptor.prompt)
        };
        positions.push(edit_position(state, &text, &descriptor.subject, cfg.key_token)?);
        examples.push(state.example(&text, &descriptor.target));
    }
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.sequence()).collect();
    let packing = Packing::new(&seqs);
    let rows: Vec<usize> = positions.iter().zip(&packing.starts).map(|(p, s)| p + s).collect();
    let cache = forward(&state.config, &state.params, &seqs, &Intervention::none())?;
    let mut v: Vec<f32> = cache.value_row(layer, rows[0]).to_vec();
    let w = 1.0 / examples.len() as f32;
    let terms: Vec<Term<f32>> = examples.iter().map(|_| Term::Nll { weight: w }).collect();

    let eval = |v: &[f32]| -> Result<(f32, Vec<f32>)> {
        let iv = Intervention {
            value_patch: Some((layer, rows.iter().map(|&r| (r, v.to_vec())).collect())),
            ..Intervention::none()
        };
        let out = objective(&state.config, &state.params, &examples, &terms, &iv, true)?;
        let mut grad = vec![0.0f32; v.len()];
        for g in out.grads.expect("requested").value_patch {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((out.loss, grad))
    };

    let (beta1, beta2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let mut m = vec![0.0f32; v.len()];
    let mut s = vec![0.0f32; v.len()];
    let (initial, mut grad) = eval(&v)?;
    let mut best = (v.clone(), initial);
    for step in 1..=cfg.value_steps {
        let t = step as i32;
        for i in 0..v.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            s[i] = beta2 * s[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - beta1.powi(t));
            let sh = s[i] / (1.0 - beta2.powi(t));
            v[i] -= cfg.value_lr * mh / (sh.sqrt() + eps);
        }
        let (loss, g) = eval(&v)?;
        if loss < best.1 {
            best = (v.clone(), loss);
        }
        grad = g;
    }
    Ok((best.0, initial, best.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankOneUpdate {
    pub delta: Tensor<f32>,
    /// `‖ΔW‖_F` before clamping.
    pub norm: f64,
    pub clamped: bool,
}

/// `ΔW = (v − W k)(C⁻¹k)ᵀ / (kᵀC⁻¹k)`, rescaled to `max_norm` if larger.
pub fn rank_one_delta(
    w: &Tensor<f32>,
    k: &[f64],
    v: &[f64],
    c: &DMatrix<f64>,
    max_norm: Option<f64>,
) -> Result<RankOneUpdate> {
    let (d, f) = (w.rows(), w.cols());
    if k.len() != f || v.len() != d || c.nrows() != f || c.ncols() != f {
        return Err(Error::Precondition("rank-one update dimension mismatch".into()));
    }
    if k.iter().all(|x| *x == 0.0) {
        return Err(Error::Precondition("zero key".into()));
    }
    let kv = DVector::from_column_slice(k);
    let chol = c
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinAlg("key covariance is not positive definite".into()))?;
    let cinv_k = chol.solve(&kv);
    let denom = kv.dot(&cinv_k);
    if !(denom.is_finite() && denom > 0.0) {
        return Err(Error::LinAlg(format!("degenerate key normalizer {denom}")));
    }
    let mut resid = DVector::from_column_slice(v);
    for i in 0..d {
        let row = w.row(i);
        resid[i] -= row.iter().zip(k).map(|(a, b)| *a as f64 * b).sum::<f64>();
    }
    let norm = resid.norm() * cinv_k.norm() / denom;
    let scale = match max_norm {
        Some(m) if norm > m => m / norm,
        _ => 1.0,
    };
    let mut delta = Tensor::zeros(&[d, f]);
    for i in 0..d {
        let r = resid[i] * scale / denom;
        for (j, x) in delta.row_mut(i).iter_mut().enumerate() {
            *x = (r * cinv_k[j]) as f32;
        }
    }
    if !delta.all_finite() {
        return Err(Error::non_finite("rank-one update"));
    }
    Ok(RankOneUpdate {
        delta,
        norm,
        clamped: scale < 1.0,
    })
}

/// Apply the update to `layer`'s `w_out` and return the new state.
pub fn apply_rank_one_update(
    state: &ModelState,
    layer: usize,
    k: &[f64],
    v: &[f64],
    cov: &KeyCovariance,
    max_norm: Option<f64>,
) -> Result<(ModelState, RankOneUpdate)> {
    let upd = rank_one_delta(&state.params.layers[layer].w_out, k, v, &cov.c, max_norm)?;
    let mut out = state.clone();
    out.params.layers[layer].w_out.axpy(1.0, &upd.delta);
    Ok((out, upd))
}

/// Mean recovery per layer and the chosen (argmax) layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub layer: usize,
    pub recovery: Vec<f64>,
}

/// Index of the largest score; earliest index wins ties.
pub fn argmax_layer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Noise-and-restore tracing. `items` pairs each descriptor with the answer
/// the unedited model should give; only items the model answers correctly
/// (greedy output equals the answer) take part.
pub fn locate_edit_layer(
    state: &ModelState,
    items: &[(&EditDescriptor, &str)],
    noise_scale: f64,
    samples: usize,
    key_token: KeyToken,
    seed: u64,
) -> Result<TraceResult> {
    let n_layers = state.config.n_layers;
    let questions: Vec<&str> = items.iter().map(|(d, _)| d.prompt.as_str()).collect();
    let generated = crate::model::LanguageModel::generate_batch(state, &questions, crate::eval::MAX_ANSWER_TOKENS)?;
    let correct: Vec<&(&EditDescriptor, &str)> = items
        .iter()
        .zip(&generated)
        .filter(|((_, ans), g)| g.as_str() == *ans)
        .map(|(it, _)| it)
        .take(samples.max(1))
        .collect();
    if correct.is_empty() {
        return Err(Error::Precondition(
            "no descriptor is answered correctly before editing; tracing is undefined".into(),
        ));
    }
    if n_layers == 1 {
        return Ok(TraceResult {
            layer: 0,
            recovery: vec![0.0],
        });
    }
    let emb = &state.params.tok_emb.data;
    let mean = emb.iter().map(|x| *x as f64).sum::<f64>() / emb.len() as f64;
    let std = (emb.iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / emb.len() as f64).sqrt();
    let normal = Normal::new(0.0, noise_scale * std).map_err(|e| Error::Validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6163);
    let d = state.config.d_model;

    let mut recovery = vec![0.0f64; n_layers];
    for (desc, answer) in &correct {
        let ids = state.prompt_ids(&desc.prompt);
        let subj = state.vocab.encode(&desc.subject);
        let last = subject_last_position(state, &desc.prompt, &desc.subject)?;
        let first = last + 1 - subj.len();
        let restore = edit_position(state, &desc.prompt, &desc.subject, key_token)?;
        let ex = Example::new(ids.clone(), state.answer_ids(answer));
        let seq = ex.sequence();
        let clean = forward(&state.config, &state.params, &[&seq], &Intervention::none())?;
        let noise: Vec<(usize, Vec<f32>)> = (first..=last)
            .map(|row| (row, (0..d).map(|_| normal.sample(&mut rng) as f32).collect()))
            .collect();
        let prob = |iv: &Intervention<'_, f32>| -> Result<f64> {
            let cache = forward(&state.config, &state.params, &[&seq], iv)?;
            let lps: Vec<f64> = ex
                .completion
                .iter()
                .enumerate()
                .map(|(i, &tok)| crate::tensor::log_softmax(cache.logits_row(ex.predicting_row(i)))[tok as usize] as f64)
                .collect();
            normalized_from_logprobs(&lps)
        };
        let corrupt = prob(&Intervention {
            embed_noise: noise.clone(),
            ..Intervention::none()
        })?;
        for (layer, r) in recovery.iter_mut().enumerate() {
            let restored = prob(&Intervention {
                embed_noise: noise.clone(),
                value_patch: Some((layer, vec![(restore, clean.value_row(layer, restore).to_vec())])),
                ..Intervention::none()
            })?;
            *r += (restored - corrupt) / correct.len() as f64;
        }
    }
    Ok(TraceResult {
        layer: argmax_layer(&recovery),
        recovery,
    })
}

/// One line of the sequential edit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLogEntry {
    pub edit_index: usize,
    pub record_id: String,
    pub reliability: f64,
    pub running_locality: f64,
    pub update_norm: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct SequentialEditResult {
    pub state: ModelState,
    pub layer: usize,
    pub trace: Option<TraceResult>,
    pub log: Vec<EditLogEntry>,
}

/// Default clamp: `factor × ‖W‖_F` of the pre-edit matrix.
pub fn default_max_norm(w: &Tensor<f32>, factor: f64) -> f64 {
    factor * w.frobenius() as f64
}

/// Everything sequential editing needs besides the descriptors.
pub struct EditContext<'a> {
    /// Answers of the unedited model for tracing, by descriptor.
    pub answers: &'a [&'a str],
    /// Prompts for the key covariance.
    pub covariance_prompts: &'a [&'a str],
    /// Sentences for key-averaging prefixes.
    pub prefix_pool: &'a [&'a str],
}

/// Edit every descriptor in order. Running locality is measured after each
/// edit on the locality probes of all descriptors.
pub fn edit_rank_one_sequential(
    state: &ModelState,
    descriptors: &[EditDescriptor],
    ctx: &EditContext<'_>,
    cfg: &RankOneEditConfig,
) -> Result<SequentialEditResult> {
    cfg.validate()?;
    if descriptors.is_empty() {
        return Err(Error::Precondition("no edit descriptors".into()));
    }
    let (layer, trace) = match cfg.layer {
        LayerChoice::Fixed(l) if l < state.config.n_layers => (l, None),
        LayerChoice::Fixed(l) => return Err(Error::config("layer", format!("layer {l} out of range"))),
        LayerChoice::Auto => {
            let items: Vec<(&EditDescriptor, &str)> =
                descriptors.iter().zip(ctx.answers.iter().copied()).collect();
            let t = locate_edit_layer(state, &items, cfg.noise_scale, cfg.trace_samples, cfg.key_token, cfg.seed)?;
            (t.layer, Some(t))
        }
    };
    let cov = estimate_key_covariance(state, layer, ctx.covariance_prompts, cfg.ridge)?;
    let max_norm = cfg
        .max_update_norm
        .or_else(|| Some(default_max_norm(&state.params.layers[layer].w_out, cfg.clamp_factor)));
    let probes: Vec<&str> = descriptors.iter().map(|d| d.locality_probe.as_str()).collect();
    let references = locality_references(state, &probes)?;

    let mut current = state.clone();
    let mut log = Vec::with_capacity(descriptors.len());
    for (i, desc) in descriptors.iter().enumerate() {
        let wrap = |e: Error| Error::Validation(format!("edit {} ({}): {e}", i, desc.record_id));
        let prefixes = key_prefixes(ctx.prefix_pool, cfg.key_contexts, cfg.seed.wrapping_add(i as u64));
        let k = compute_key(&current, layer, &desc.prompt, &desc.subject, &prefixes, cfg.key_token).map_err(wrap)?;
        let (v, _, _) = solve_target_value_in(&current, layer, desc, &prefixes, cfg).map_err(wrap)?;
        let v: Vec<f64> = v.iter().map(|x| *x as f64).collect();
        let (next, upd) = apply_rank_one_update(&current, layer, &k, &v, &cov, max_norm).map_err(wrap)?;
        current = next;
        let reliability = edit_accuracy(&current, std::slice::from_ref(desc))?[0].0;
        let loc = locality_scores(&current, &probes, &references)?;
        log.push(EditLogEntry {
            edit_index: i,
            record_id: desc.record_id.clone(),
            reliability,
            running_locality: loc.iter().sum::<f64>() / loc.len() as f64,
            update_norm: upd.norm,
            clamped: upd.clamped,
        });
    }
    Ok(SequentialEditResult {
        state: current,
        layer,
        trace,
        log,
    })
}
