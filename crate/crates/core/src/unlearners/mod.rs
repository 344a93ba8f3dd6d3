//! Gradient-based unlearning baselines: gradient ascent, gradient
//! difference, KL minimization and preference optimization toward
//! non-answers.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QaRecord;
use crate::error::{Error, Result};
use crate::model::loss::{completion_distributions, nll_per_example, objective};
use crate::model::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::model::{Example, Intervention, ModelState, Term};

pub const DEFAULT_NON_ANSWERS: &[&str] = &["I don't know.", "I cannot answer that.", "I'm not sure."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    Ga,
    Gd,
    Kl,
    Po,
}

impl UnlearnMethod {
    pub const ALL: [UnlearnMethod; 4] = [UnlearnMethod::Ga, UnlearnMethod::Gd, UnlearnMethod::Kl, UnlearnMethod::Po];

    pub fn name(self) -> &'static str {
        match self {
            UnlearnMethod::Ga => "ga",
            UnlearnMethod::Gd => "gd",
            UnlearnMethod::Kl => "kl",
            UnlearnMethod::Po => "po",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    pub lr: f32,
    pub steps: usize,
    pub batch: usize,
    /// β: weight of the retain term.
    pub retain_weight: f32,
    pub seed: u64,
    pub non_answer_bank: Vec<String>,
    /// Steps after which a copy of the model is kept.
    pub checkpoint_marks: Vec<usize>,
    pub grad_clip: f32,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: UnlearnMethod::Ga,
            lr: 1e-3,
            steps: 60,
            batch: 8,
            retain_weight: 1.0,
            seed: 0,
            non_answer_bank: DEFAULT_NON_ANSWERS.iter().map(|s| s.to_string()).collect(),
            checkpoint_marks: vec![60],
            grad_clip: 1.0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.retain_weight >= 0.0) {
            return Err(Error::config("retain_weight", "must be non-negative"));
        }
        if self.method == UnlearnMethod::Po && self.non_answer_bank.is_empty() {
            return Err(Error::config("non_answer_bank", "po needs at least one non-answer"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub forget_nll: f32,
    pub retain_nll: f32,
    pub loss: f32,
}

/// Value of the unlearning objective on one batch pair.
#[derive(Clone, Debug)]
pub struct UnlearnLoss {
    pub loss: f32,
    pub forget_nll: f32,
    pub retain_nll: f32,
    pub grads: Option<crate::model::Params<f32>>,
}

fn mean(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|x| *x as f64).sum::<f64>() as f32 / xs.len() as f32
    }
}

/// ga: −NLL_f; gd: −NLL_f + β·NLL_r; kl: β·KL(ref‖model)_r − NLL_f;
/// po: NLL(forget → non-answer) + β·NLL_r. Forget examples carry the true
/// answer except for po, whose examples already hold the non-answer.
pub fn unlearning_loss(
    method: UnlearnMethod,
    model: &ModelState,
    reference: Option<&ModelState>,
    forget: &[Example],
    retain: &[Example],
    retain_weight: f32,
    want_grad: bool,
) -> Result<UnlearnLoss> {
    if forget.is_empty() {
        return Err(Error::Precondition("empty forget batch".into()));
    }
    let uses_retain = method != UnlearnMethod::Ga && !retain.is_empty();
    let ref_dists = match method {
        UnlearnMethod::Kl => {
            let r = reference.ok_or_else(|| Error::Precondition("kl needs a reference model".into()))?;
            Some(completion_distributions(&r.config, &r.params, retain)?)
        }
        _ => None,
    };
    let bf = forget.len() as f32;
    let br = retain.len().max(1) as f32;
    let forget_weight = if method == UnlearnMethod::Po { 1.0 / bf } else { -1.0 / bf };
    let mut examples: Vec<Example> = forget.to_vec();
    let mut terms: Vec<Term<f32>> = forget.iter().map(|_| Term::Nll { weight: forget_weight }).collect();
    if uses_retain {
        examples.extend_from_slice(retain);
        for i in 0..retain.len() {
            terms.push(match &ref_dists {
                Some(d) => Term::Kl {
                    weight: retain_weight / br,
                    reference: &d[i],
                },
                None => Term::Nll {
                    weight: retain_weight / br,
                },
            });
        }
    }
    let out = objective(&model.config, &model.params, &examples, &terms, &Intervention::none(), want_grad)?;
    let forget_nll = mean(&out.per_example[..forget.len()]);
    let retain_nll = match (&ref_dists, uses_retain) {
        (None, true) => mean(&out.per_example[forget.len()..]),
        _ if !retain.is_empty() => mean(&nll_per_example(&model.config, &model.params, retain, &Intervention::none())?),
        _ => 0.0,
    };
    Ok(UnlearnLoss {
        loss: out.loss,
        forget_nll,
        retain_nll,
        grads: out.grads.map(|g| g.params),
    })
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub state: ModelState,
    pub log: Vec<StepLog>,
    /// Mean NLL of the true answers over the whole forget / retain sets.
    pub initial_forget_nll: f32,
    pub final_forget_nll: f32,
    pub initial_retain_nll: f32,
    pub final_retain_nll: f32,
    pub checkpoints: Vec<(usize, ModelState)>,
}

fn set_nll(state: &ModelState, examples: &[Example]) -> Result<f32> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut all = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(crate::model::decode::CHUNK) {
        all.extend(nll_per_example(&state.config, &state.params, chunk, &Intervention::none())?);
    }
    Ok(mean(&all))
}

/// Run `cfg.steps` optimizer steps. Forget batches walk a reshuffled pass
/// over the forget set; retain batches are drawn at random.
pub fn run_unlearning(
    model: &ModelState,
    reference: Option<&ModelState>,
    forget: &[QaRecord],
    retain: &[QaRecord],
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(Error::Precondition("empty forget set".into()));
    }
    if cfg.method == UnlearnMethod::Kl && reference.is_none() {
        return Err(Error::Precondition("kl needs a reference model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let forget_true: Vec<Example> = forget.iter().map(|r| model.example(&r.question, &r.answer)).collect();
    let retain_ex: Vec<Example> = retain.iter().map(|r| model.example(&r.question, &r.answer)).collect();

    let mut state = model.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr);
    let initial_forget_nll = set_nll(&state, &forget_true)?;
    let initial_retain_nll = set_nll(&state, &retain_ex)?;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(forget.len()) {
            if order.is_empty() {
                order = (0..forget.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("non-empty"));
        }
        let forget_batch: Vec<Example> = idx
            .iter()
            .map(|&i| match cfg.method {
                UnlearnMethod::Po => {
                    let na = cfg.non_answer_bank.choose(&mut rng).expect("validated");
                    state.example(&forget[i].question, na)
                }
                _ => forget_true[i].clone(),
            })
            .collect();
        // Drawn for every method so paired runs see the same batches; ga only logs it.
        let retain_batch: Vec<Example> = if retain_ex.is_empty() {
            Vec::new()
        } else {
            (0..cfg.batch).map(|_| retain_ex.choose(&mut rng).expect("non-empty").clone()).collect()
        };
        let res = unlearning_loss(cfg.method, &state, reference, &forget_batch, &retain_batch, cfg.retain_weight, true)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::non_finite(format!("unlearning step {step}")),
                other => other,
            })?;
        // Logged NLLs refer to the true forget answers even for po.
        let forget_nll = if cfg.method == UnlearnMethod::Po {
            let fx: Vec<Example> = idx.iter().map(|&i| forget_true[i].clone()).collect();
            mean(&nll_per_example(&state.config, &state.params, &fx, &Intervention::none())?)
        } else {
            res.forget_nll
        };
        let mut grads = res.grads.expect("requested");
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut state.params, &grads);
        if !state.params.all_finite() {
            return Err(Error::non_finite(format!("unlearning step {step}")));
        }
        log.push(StepLog {
            step,
            forget_nll,
            retain_nll: res.retain_nll,
            loss: res.loss,
        });
        if cfg.checkpoint_marks.contains(&(step + 1)) {
            checkpoints.push((step + 1, state.clone()));
        }
    }
    Ok(UnlearnOutcome {
        final_forget_nll: set_nll(&state, &forget_true)?,
        final_retain_nll: set_nll(&state, &retain_ex)?,
        state,
        log,
        initial_forget_nll,
        initial_retain_nll,
        checkpoints,
    })
}
