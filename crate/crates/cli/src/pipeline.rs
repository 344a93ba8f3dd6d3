//! The experiment pipeline: corpus → full model → retain-only model → edited
//! and unlearned models → evaluations → report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use forgetedit::corpus::{self, generate_corpus, records_of, QaRecord, Split};
use forgetedit::dataset::build_vocabulary;
use forgetedit::editors::icl::{
    build_demonstration_store, pinned_edit_metrics, split_descriptors, DemonstrationStore, IclEditedModel,
};
use forgetedit::editors::rank_one::{edit_rank_one_sequential, EditContext};
use forgetedit::editors::side_memory::{calibrate_router, merge_shards, train_side_memory, SideMemory, SideMemoryModel};
use forgetedit::eval::{audit_records, edit_metrics, evaluate_full, forget_truth_ratios, report_from_audit, EvalReport};
use forgetedit::model::{checkpoint, train, LanguageModel, ModelState};
use forgetedit::targets::{build_descriptors, read_descriptors, write_descriptors, EditDescriptor};
use forgetedit::unlearners::{run_unlearning, UnlearnConfig};
use forgetedit::{Error, Result};

use crate::config::ExperimentConfig;
use crate::registry::{Editor, Method, GROUND_TRUTH};
use crate::report::{emit_report, ReportFiles};
use crate::stage::{hash_parts, json_of, run_stage, StageRecord};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const EDIT_METRICS_FILE: &str = "edit_metrics.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const DESCRIPTORS_FILE: &str = "descriptors.jsonl";
pub const EDIT_LOG_FILE: &str = "edit_log.jsonl";
pub const STEP_LOG_FILE: &str = "step_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STORE_FILE: &str = "store.json";
pub const EVAL_SPLIT_FILE: &str = "eval_split.json";
pub const MODEL_DIR: &str = "model";

/// Column label of the model trained on the whole corpus, before any
/// editing or unlearning. Reported but not part of the matrix.
pub const ORIGINAL: &str = "original";

/// How far a run goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    Corpus,
    Train,
    /// Produce edited models for the selected editing methods.
    Edit,
    /// Produce unlearned models for the selected unlearning methods.
    Unlearn,
    /// Produce and evaluate every selected method.
    Eval,
    /// Everything, then the report.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub goal: Goal,
    /// Rebuild stages whose inputs changed instead of refusing.
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            goal: Goal::All,
            force: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub methods: Vec<String>,
    pub stages: Vec<StageRecord>,
    /// Column label → evaluation report, relative to the run directory.
    pub evaluations: BTreeMap<String, PathBuf>,
    /// Report outputs, present once the report has been emitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportFiles>,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Every listed file exists and still has its recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for s in &self.stages {
            s.verify(root)?;
        }
        let mut paths: Vec<&PathBuf> = self.evaluations.values().collect();
        if let Some(r) = &self.report {
            paths.extend(r.paths());
        }
        for p in paths {
            if !root.join(p).exists() {
                return Err(Error::Validation(format!("manifest lists missing file {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("forgetedit".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), "1".to_string()),
        ("manifest_format".to_string(), "1".to_string()),
    ])
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Directory of a method's edited or unlearned model.
pub fn method_dir(m: Method) -> PathBuf {
    PathBuf::from("methods").join(m.slug())
}

/// Directory of a column's evaluation.
pub fn eval_dir(label: &str) -> PathBuf {
    PathBuf::from("eval").join(label.replace(':', "_"))
}

/// Summary of one unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSummary {
    pub method: String,
    pub steps: usize,
    pub initial_forget_nll: f32,
    pub final_forget_nll: f32,
    pub initial_retain_nll: f32,
    pub final_retain_nll: f32,
}

/// Layer choice and tracing scores of a sequential rank-one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneSummary {
    pub layer: usize,
    pub trace_recovery: Option<Vec<f64>>,
    pub clamped_edits: usize,
}

struct Inputs<'a> {
    cfg: &'a ExperimentConfig,
    records: &'a [QaRecord],
    forget: Vec<QaRecord>,
    retain: Vec<QaRecord>,
    full: &'a ModelState,
}

impl Inputs<'_> {
    fn descriptors(&self, kind: forgetedit::targets::TargetKind) -> Result<Vec<EditDescriptor>> {
        build_descriptors(&self.forget, &self.retain, kind, &self.cfg.avoidant_bank, self.cfg.seed)
    }

    fn unlearn_config(&self, m: forgetedit::unlearners::UnlearnMethod) -> UnlearnConfig {
        UnlearnConfig {
            method: m,
            ..self.cfg.unlearn.clone()
        }
    }
}

fn produce_method(inp: &Inputs<'_>, gt: &ModelState, m: Method, dir: &Path) -> Result<()> {
    match m {
        Method::Edit(editor, kind) => {
            let descs = inp.descriptors(kind)?;
            write_descriptors(&dir.join(DESCRIPTORS_FILE), &descs)?;
            match editor {
                Editor::Rome => {
                    let prompts: Vec<&str> = descs.iter().map(|d| d.prompt.as_str()).collect();
                    let answers = inp.full.generate_batch(&prompts, forgetedit::eval::MAX_ANSWER_TOKENS)?;
                    let answers: Vec<&str> = answers.iter().map(String::as_str).collect();
                    let cov: Vec<&str> = inp.retain.iter().map(|r| r.question.as_str()).collect();
                    let pool: Vec<&str> = inp.retain.iter().map(|r| r.answer.as_str()).collect();
                    let ctx = EditContext {
                        answers: &answers,
                        covariance_prompts: &cov,
                        prefix_pool: &pool,
                    };
                    let res = edit_rank_one_sequential(inp.full, &descs, &ctx, &inp.cfg.rank_one)?;
                    corpus::write_jsonl_items(&dir.join(EDIT_LOG_FILE), &res.log)?;
                    write_json(
                        &dir.join(SUMMARY_FILE),
                        &RankOneSummary {
                            layer: res.layer,
                            trace_recovery: res.trace.map(|t| t.recovery),
                            clamped_edits: res.log.iter().filter(|l| l.clamped).count(),
                        },
                    )?;
                    checkpoint::save(&dir.join(MODEL_DIR), &res.state, None)
                }
                Editor::Wise => {
                    let side = merge_shards(&train_side_memory(inp.full, &descs, &inp.cfg.side_memory)?)?;
                    let forget_prompts: Vec<&str> =
                        descs.iter().flat_map(|d| [d.prompt.as_str(), d.paraphrase.as_str()]).collect();
                    let retain_prompts: Vec<&str> = inp.retain.iter().map(|r| r.question.as_str()).collect();
                    let threshold = calibrate_router(inp.full, &side, &forget_prompts, &retain_prompts)?;
                    let side = SideMemory {
                        threshold: Some(threshold),
                        ..side
                    };
                    checkpoint::save(&dir.join(MODEL_DIR), inp.full, Some(&side.to_side_data()?))
                }
                Editor::Ike => {
                    let icl = &inp.cfg.icl;
                    let (train_part, eval_part) = split_descriptors(&descs, icl.train_fraction, icl.seed);
                    let store =
                        build_demonstration_store(&train_part, &inp.retain, |t| inp.full.embed_batch(t), icl.k, icl.seed)?;
                    let ids: Vec<&str> = eval_part.iter().map(|d| d.record_id.as_str()).collect();
                    write_json(&dir.join(EVAL_SPLIT_FILE), &ids)?;
                    write_json(&dir.join(STORE_FILE), &store)
                }
            }
        }
        Method::Unlearn(u) => {
            let ucfg = inp.unlearn_config(u);
            let out = run_unlearning(inp.full, Some(gt), &inp.forget, &inp.retain, &ucfg)?;
            corpus::write_jsonl_items(&dir.join(STEP_LOG_FILE), &out.log)?;
            write_json(
                &dir.join(SUMMARY_FILE),
                &UnlearnSummary {
                    method: u.name().to_string(),
                    steps: ucfg.steps,
                    initial_forget_nll: out.initial_forget_nll,
                    final_forget_nll: out.final_forget_nll,
                    initial_retain_nll: out.initial_retain_nll,
                    final_retain_nll: out.final_retain_nll,
                },
            )?;
            for (step, state) in &out.checkpoints {
                checkpoint::save(&dir.join(format!("checkpoint-{step}")), state, None)?;
            }
            checkpoint::save(&dir.join(MODEL_DIR), &out.state, None)
        }
    }
}

fn write_evaluation(dir: &Path, report: &EvalReport, audit: &[forgetedit::eval::RecordAudit]) -> Result<()> {
    write_json(&dir.join(REPORT_FILE), report)?;
    corpus::write_jsonl_items(&dir.join(AUDIT_FILE), audit)
}

fn evaluate_method(
    inp: &Inputs<'_>,
    root: &Path,
    m: Method,
    gt_raw: &[f64],
    dir: &Path,
) -> Result<()> {
    let src = root.join(method_dir(m));
    let (mut report, audit, metrics) = match m {
        Method::Edit(Editor::Rome, _) | Method::Unlearn(_) => {
            let (state, _) = checkpoint::load(&src.join(MODEL_DIR))?;
            let (report, audit) = evaluate_full(&state, inp.records, gt_raw)?;
            let metrics = match m {
                Method::Edit(..) => Some(edit_metrics(&state, inp.full, &read_descriptors(&src.join(DESCRIPTORS_FILE))?)?),
                _ => None,
            };
            (report, audit, metrics)
        }
        Method::Edit(Editor::Wise, _) => {
            let (state, side) = checkpoint::load(&src.join(MODEL_DIR))?;
            let side = side.ok_or_else(|| Error::Validation("side memory checkpoint has no side tensors".into()))?;
            let side = SideMemory::from_side_data(&state, &side)?;
            let model = SideMemoryModel::new(&state, &side, inp.cfg.wise_generation_routing)?;
            let descs = read_descriptors(&src.join(DESCRIPTORS_FILE))?;
            let (report, audit) = evaluate_full(&model, inp.records, gt_raw)?;
            (report, audit, Some(edit_metrics(&model, inp.full, &descs)?))
        }
        Method::Edit(Editor::Ike, _) => {
            let descs = read_descriptors(&src.join(DESCRIPTORS_FILE))?;
            let store: DemonstrationStore = read_json(&src.join(STORE_FILE))?;
            let eval_ids: Vec<String> = read_json(&src.join(EVAL_SPLIT_FILE))?;
            let eval_part: Vec<EditDescriptor> =
                descs.iter().filter(|d| eval_ids.contains(&d.record_id)).cloned().collect();
            let reserve = inp.cfg.icl.answer_reserve;
            let metrics = if eval_part.is_empty() {
                None
            } else {
                Some(pinned_edit_metrics(inp.full, &store, &eval_part, reserve)?)
            };
            let model = IclEditedModel::new(inp.full, store, descs, reserve)?;
            let (report, audit) = evaluate_full(&model, inp.records, gt_raw)?;
            (report, audit, metrics)
        }
    };
    report.edit_metrics = metrics;
    report.metadata.insert("method".into(), m.name());
    if let Method::Edit(Editor::Wise, _) = m {
        report
            .metadata
            .insert("wise_generation_routing".into(), inp.cfg.wise_generation_routing.to_string());
    }
    if let (Method::Edit(Editor::Ike, _), Some(_)) = (m, &report.edit_metrics) {
        report.metadata.insert("edit_metrics_scope".into(), "eval_split_pinned".into());
    }
    if let Some(em) = &report.edit_metrics {
        write_json(&dir.join(EDIT_METRICS_FILE), em)?;
    }
    write_evaluation(dir, &report, &audit)
}

fn ensure_selected(methods: &[Method], goal: Goal) -> Result<()> {
    let ok = match goal {
        Goal::Edit => methods.iter().any(|m| m.is_edit()),
        Goal::Unlearn => methods.iter().any(|m| !m.is_edit()),
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::config("method", "the selection contains no method for this subcommand"))
    }
}

/// Run every stage the goal needs, skipping those already produced from the
/// same inputs, and write `manifest.json`.
pub fn run_pipeline(config: &ExperimentConfig, opts: RunOptions) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = config.effective();
    cfg.validate()?;
    let methods = cfg.methods()?;
    ensure_selected(&methods, opts.goal)?;
    let root = cfg.out.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut stages = Vec::new();
    let mut evaluations = BTreeMap::new();
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.out = PathBuf::new();
    let config_hash = hash_parts(&[("config", json_of(&manifest_cfg))]);

    let corpus_hash = hash_parts(&[("corpus", json_of(&cfg.corpus))]);
    stages.push(run_stage(&root, "corpus", Path::new("corpus"), &corpus_hash, opts.force, |dir| {
        let records = generate_corpus(&cfg.corpus)?;
        corpus::write_jsonl(&dir.join(RECORDS_FILE), &records)
    })?);
    let records = corpus::read_jsonl(&root.join("corpus").join(RECORDS_FILE))?;

    let finish = |stages: Vec<StageRecord>, evaluations: BTreeMap<String, PathBuf>, report: Option<ReportFiles>| {
        let m = RunManifest {
            config_hash: config_hash.clone(),
            versions: versions(),
            methods: methods.iter().map(|m| m.name()).collect(),
            stages,
            evaluations,
            report,
            total_seconds: start.elapsed().as_secs_f64(),
        };
        m.write(&root)?;
        Ok(m)
    };
    if opts.goal == Goal::Corpus {
        return finish(stages, evaluations, None);
    }

    let model_parts = |train: &forgetedit::model::TrainHyper| {
        hash_parts(&[
            ("corpus", corpus_hash.clone()),
            ("model", json_of(&cfg.model)),
            ("bank", json_of(&cfg.avoidant_bank)),
            ("train", json_of(train)),
        ])
    };
    let full_hash = model_parts(&cfg.train);
    let gt_hash = model_parts(&cfg.ground_truth_train);
    let vocab = build_vocabulary(&records, &cfg.avoidant_bank);
    let fresh = ModelState::new(cfg.model.clone(), vocab)?;
    stages.push(run_stage(&root, "train_full", Path::new("models/full"), &full_hash, opts.force, |dir| {
        let (state, rep) = train(&fresh, &records, &cfg.train)?;
        write_json(&dir.join("train_report.json"), &rep)?;
        checkpoint::save(&dir.join(MODEL_DIR), &state, None)
    })?);
    stages.push(run_stage(&root, "train_ground_truth", Path::new("models/ground_truth"), &gt_hash, opts.force, |dir| {
        let kept: Vec<QaRecord> = records.iter().filter(|r| r.split != Split::Forget).cloned().collect();
        let (state, rep) = train(&fresh, &kept, &cfg.ground_truth_train)?;
        write_json(&dir.join("train_report.json"), &rep)?;
        checkpoint::save(&dir.join(MODEL_DIR), &state, None)
    })?);
    if opts.goal == Goal::Train {
        return finish(stages, evaluations, None);
    }
    let (full, _) = checkpoint::load(&root.join("models/full").join(MODEL_DIR))?;
    let (gt, _) = checkpoint::load(&root.join("models/ground_truth").join(MODEL_DIR))?;
    let inp = Inputs {
        cfg: &cfg,
        records: &records,
        forget: records_of(&records, Split::Forget),
        retain: records_of(&records, Split::Retain),
        full: &full,
    };

    let wanted: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| match opts.goal {
            Goal::Edit => m.is_edit(),
            Goal::Unlearn => !m.is_edit(),
            _ => true,
        })
        .collect();
    let method_hash = |m: Method| {
        let specific = match m {
            Method::Edit(Editor::Rome, _) => json_of(&cfg.rank_one),
            Method::Edit(Editor::Wise, _) => json_of(&cfg.side_memory),
            Method::Edit(Editor::Ike, _) => json_of(&cfg.icl),
            Method::Unlearn(u) => json_of(&inp.unlearn_config(u)),
        };
        hash_parts(&[
            ("full", full_hash.clone()),
            ("ground_truth", gt_hash.clone()),
            ("bank", json_of(&cfg.avoidant_bank)),
            ("seed", cfg.seed.to_string()),
            ("method", m.name()),
            ("settings", specific),
        ])
    };
    let produced: Vec<StageRecord> = wanted
        .par_iter()
        .map(|&m| {
            run_stage(&root, &format!("method:{m}"), &method_dir(m), &method_hash(m), opts.force, |dir| {
                produce_method(&inp, &gt, m, dir)
            })
        })
        .collect::<Result<_>>()?;
    stages.extend(produced);
    if matches!(opts.goal, Goal::Edit | Goal::Unlearn) {
        return finish(stages, evaluations, None);
    }

    let gt_eval_hash = hash_parts(&[("ground_truth", gt_hash.clone()), ("eval", "1".into())]);
    let gt_dir = eval_dir(GROUND_TRUTH);
    stages.push(run_stage(&root, "eval:ground_truth", &gt_dir, &gt_eval_hash, opts.force, |dir| {
        let audit = audit_records(&gt, &records)?;
        let mut report = report_from_audit(&audit, &forget_truth_ratios(&audit))?;
        report.metadata.insert("method".into(), GROUND_TRUTH.into());
        write_evaluation(dir, &report, &audit)
    })?);
    evaluations.insert(GROUND_TRUTH.to_string(), gt_dir.join(REPORT_FILE));
    let gt_audit: Vec<forgetedit::eval::RecordAudit> = corpus::read_jsonl_items(&root.join(&gt_dir).join(AUDIT_FILE))?;
    let gt_raw = forget_truth_ratios(&gt_audit);

    let orig_dir = eval_dir(ORIGINAL);
    let orig_hash = hash_parts(&[("full", full_hash.clone()), ("reference", gt_eval_hash.clone())]);
    stages.push(run_stage(&root, "eval:original", &orig_dir, &orig_hash, opts.force, |dir| {
        let (mut report, audit) = evaluate_full(&full, &records, &gt_raw)?;
        report.metadata.insert("method".into(), ORIGINAL.into());
        write_evaluation(dir, &report, &audit)
    })?);
    evaluations.insert(ORIGINAL.to_string(), orig_dir.join(REPORT_FILE));

    let evaluated: Vec<StageRecord> = wanted
        .par_iter()
        .map(|&m| {
            let mut parts = vec![("method", method_hash(m)), ("reference", gt_eval_hash.clone())];
            if let Method::Edit(Editor::Wise, _) = m {
                parts.push(("generation_routing", cfg.wise_generation_routing.to_string()));
            }
            run_stage(&root, &format!("eval:{m}"), &eval_dir(&m.name()), &hash_parts(&parts), opts.force, |dir| {
                evaluate_method(&inp, &root, m, &gt_raw, dir)
            })
        })
        .collect::<Result<_>>()?;
    stages.extend(evaluated);
    for m in &wanted {
        evaluations.insert(m.name(), eval_dir(&m.name()).join(REPORT_FILE));
    }
    if opts.goal == Goal::Eval {
        return finish(stages, evaluations, None);
    }
    let partial = RunManifest {
        config_hash: config_hash.clone(),
        versions: versions(),
        methods: methods.iter().map(|m| m.name()).collect(),
        stages: stages.clone(),
        evaluations: evaluations.clone(),
        report: None,
        total_seconds: 0.0,
    };
    let files = emit_report(&root, &partial)?;
    finish(stages, evaluations, Some(files))
}
