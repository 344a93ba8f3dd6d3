//! Rank-one, in-context and side-memory editing contracts.

mod common;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::fixture;
use forgetedit::corpus::{records_of, Split};
use forgetedit::editors::icl::*;
use forgetedit::editors::rank_one::*;
use forgetedit::editors::side_memory::*;
use forgetedit::model::forward::{forward, Intervention};
use forgetedit::model::LanguageModel;
use forgetedit::targets::{build_descriptors, AvoidantTemplateBank, EditDescriptor, TargetKind};
use forgetedit::tensor::Tensor;

fn descriptors(kind: TargetKind) -> Vec<EditDescriptor> {
    let f = fixture();
    build_descriptors(
        &records_of(&f.records, Split::Forget),
        &records_of(&f.records, Split::Retain),
        kind,
        &AvoidantTemplateBank::default(),
        0,
    )
    .unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn wk(w: &Tensor<f32>, k: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| w.row(i).iter().zip(k).map(|(a, b)| *a as f64 * b).sum()).collect()
}

fn apply(w: &Tensor<f32>, delta: &Tensor<f32>) -> Tensor<f32> {
    let mut out = w.clone();
    out.axpy(1.0, delta);
    out
}

#[test]
fn satisfied_value_gives_zero_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_tensor(&mut rng, 6, 10);
    let k: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = wk(&w, &k);
    let upd = rank_one_delta(&w, &k, &v, &DMatrix::identity(10, 10), None).unwrap();
    assert!(upd.delta.data.iter().all(|x| x.abs() < 1e-6));
    assert!(!upd.clamped);
}

#[test]
fn unclamped_update_maps_key_to_value_and_spares_orthogonal_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let (d, f) = (8, 20);
        let w = random_tensor(&mut rng, d, f);
        let k: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let upd = rank_one_delta(&w, &k, &v, &DMatrix::identity(f, f), None).unwrap();
        let w2 = apply(&w, &upd.delta);
        for (a, b) in wk(&w2, &k).iter().zip(&v) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut p: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kk: f64 = k.iter().map(|x| x * x).sum();
        let pk: f64 = p.iter().zip(&k).map(|(a, b)| a * b).sum();
        p.iter_mut().zip(&k).for_each(|(x, kx)| *x -= pk / kk * kx);
        for (a, b) in wk(&w2, &p).iter().zip(wk(&w, &p)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn clamp_rescales_and_flags() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_tensor(&mut rng, 4, 6);
    let k = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let v = vec![10.0; 4];
    let free = rank_one_delta(&w, &k, &v, &DMatrix::identity(6, 6), None).unwrap();
    let capped = rank_one_delta(&w, &k, &v, &DMatrix::identity(6, 6), Some(free.norm / 2.0)).unwrap();
    assert!(capped.clamped);
    assert!((capped.delta.frobenius() as f64 - free.norm / 2.0).abs() < 1e-4);
}

#[test]
fn degenerate_inputs_are_errors() {
    let w = Tensor::<f32>::zeros(&[3, 4]);
    let e = rank_one_delta(&w, &[0.0; 4], &[1.0; 3], &DMatrix::identity(4, 4), None).unwrap_err();
    assert!(matches!(e, forgetedit::Error::Precondition(_)));
    let e = rank_one_delta(&w, &[1.0; 4], &[1.0; 3], &DMatrix::zeros(4, 4), None).unwrap_err();
    assert!(matches!(e, forgetedit::Error::LinAlg(_)));
}

#[test]
fn covariance_definitions() {
    let m = &fixture().model;
    let lambda = 0.25;
    let none = estimate_key_covariance(m, 1, &[], lambda).unwrap();
    assert_eq!(none.c, DMatrix::identity(64, 64) * lambda);
    assert!(none.low_sample);

    // An empty prompt is the start token alone: exactly one key.
    let one = estimate_key_covariance(m, 1, &[""], lambda).unwrap();
    assert_eq!(one.sample_count, 1);
    let cache = forward(&m.config, &m.params, &[m.prompt_ids("")], &Intervention::none()).unwrap();
    let k: Vec<f64> = cache.key_row(1, 0).iter().map(|x| *x as f64).collect();
    for i in 0..64 {
        for j in 0..64 {
            let expect = k[i] * k[j] + if i == j { lambda } else { 0.0 };
            assert!((one.c[(i, j)] - expect).abs() < 1e-9);
        }
    }

    let prompts: Vec<&str> = fixture().records.iter().map(|r| r.question.as_str()).collect();
    let full = estimate_key_covariance(m, 0, &prompts, lambda).unwrap();
    assert_eq!(full.c, full.c.transpose());
    let eig = full.c.clone().symmetric_eigen();
    assert!(eig.eigenvalues.iter().all(|e| *e >= lambda - 1e-9));
}

#[test]
fn subject_key_definitions() {
    let m = &fixture().model;
    let d = &descriptors(TargetKind::Dummy)[0];
    let pos = subject_last_position(m, &d.prompt, &d.subject).unwrap();
    let (_, trace) = m.forward(&m.prompt_ids(&d.prompt), true).unwrap();
    let bare = compute_subject_key(m, 1, &d.prompt, &d.subject, &[]).unwrap();
    assert_eq!(bare.len(), m.config.d_ffn);
    let expect: Vec<f64> = trace.unwrap().keys[1].row(pos).iter().map(|x| *x as f64).collect();
    assert_eq!(bare, expect);
    let twice = compute_subject_key(m, 1, &d.prompt, &d.subject, &["the book".into(), "the book".into()]).unwrap();
    let once = compute_subject_key(m, 1, &d.prompt, &d.subject, &["the book".into()]).unwrap();
    for (a, b) in twice.iter().zip(&once) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(compute_subject_key(m, 1, &d.prompt, "Nobody Atall", &[]).is_err());
}

#[test]
fn value_solver_contracts() {
    let m = &fixture().model;
    let d = &descriptors(TargetKind::Dummy)[0];
    let zero = RankOneEditConfig {
        value_steps: 0,
        ..RankOneEditConfig::default()
    };
    let (v, init, best) = solve_target_value(m, 1, d, &zero).unwrap();
    let pos = edit_position(m, &d.prompt, &d.subject, zero.key_token).unwrap();
    let (_, trace) = m.forward(&m.example(&d.prompt, &d.target).sequence(), true).unwrap();
    assert_eq!(v, trace.unwrap().values[1].row(pos).to_vec());
    assert_eq!(init, best);

    let short = RankOneEditConfig {
        value_steps: 10,
        ..RankOneEditConfig::default()
    };
    let long = RankOneEditConfig {
        value_steps: 20,
        ..RankOneEditConfig::default()
    };
    let (_, i1, b1) = solve_target_value(m, 1, d, &short).unwrap();
    let (_, _, b2) = solve_target_value(m, 1, d, &long).unwrap();
    assert!(b1 < i1);
    assert!(b2 <= b1 + 1e-6);
}

#[test]
fn tracing_contracts() {
    assert_eq!(argmax_layer(&[0.1, 0.6, 0.3, 0.2]), 1);
    assert_eq!(argmax_layer(&[0.5, 0.5]), 0);
    let f = fixture();
    let descs = descriptors(TargetKind::Dummy);
    let forget = records_of(&f.records, Split::Forget);
    let items: Vec<(&EditDescriptor, &str)> = descs.iter().zip(forget.iter().map(|r| r.answer.as_str())).collect();
    let t = locate_edit_layer(&f.model, &items, 3.0, 4, KeyToken::SubjectLast, 0).unwrap();
    assert_eq!(t.recovery.len(), 2);
    assert!(t.layer < 2);
    let wrong: Vec<(&EditDescriptor, &str)> = descs.iter().map(|d| (d, "no such answer here")).collect();
    assert!(locate_edit_layer(&f.model, &wrong, 3.0, 4, KeyToken::SubjectLast, 0).is_err());

    let mut one = f.model.clone();
    one.config.n_layers = 1;
    one.params.layers.truncate(1);
    let answers = one.generate_batch(&[descs[0].prompt.as_str()], 40).unwrap();
    let t1 = locate_edit_layer(&one, &[(&descs[0], answers[0].as_str())], 3.0, 1, KeyToken::SubjectLast, 0).unwrap();
    assert_eq!(t1.layer, 0);
}

#[test]
fn sequential_editing_logs_every_descriptor_and_composes() {
    let f = fixture();
    let descs = descriptors(TargetKind::Dummy);
    let retain = records_of(&f.records, Split::Retain);
    let cov: Vec<&str> = retain.iter().map(|r| r.question.as_str()).collect();
    let pool: Vec<&str> = retain.iter().map(|r| r.answer.as_str()).collect();
    let answers: Vec<&str> = records_of(&f.records, Split::Forget).iter().map(|_| "").collect();
    let ctx = EditContext {
        answers: &answers,
        covariance_prompts: &cov,
        prefix_pool: &pool,
    };
    let cfg = RankOneEditConfig {
        layer: LayerChoice::Fixed(1),
        value_steps: 10,
        ..RankOneEditConfig::default()
    };
    let res = edit_rank_one_sequential(&f.model, &descs, &ctx, &cfg).unwrap();
    assert_eq!(res.log.len(), descs.len());
    let ids: Vec<&str> = res.log.iter().map(|l| l.record_id.as_str()).collect();
    let expect: Vec<&str> = descs.iter().map(|d| d.record_id.as_str()).collect();
    assert_eq!(ids, expect);

    let single = edit_rank_one_sequential(&f.model, &descs[..1], &ctx, &cfg).unwrap();
    let d = &descs[0];
    let covariance = estimate_key_covariance(&f.model, 1, &cov, cfg.ridge).unwrap();
    let prefixes = key_prefixes(&pool, cfg.key_contexts, cfg.seed);
    let k = compute_key(&f.model, 1, &d.prompt, &d.subject, &prefixes, cfg.key_token).unwrap();
    let (v, _, _) = solve_target_value_in(&f.model, 1, d, &prefixes, &cfg).unwrap();
    let v: Vec<f64> = v.iter().map(|x| *x as f64).collect();
    let max = default_max_norm(&f.model.params.layers[1].w_out, cfg.clamp_factor);
    let (manual, _) = apply_rank_one_update(&f.model, 1, &k, &v, &covariance, Some(max)).unwrap();
    assert_eq!(single.state.params, manual.params);
}

fn unit(v: &[f32]) -> bool {
    (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs() < 1e-6
}

#[test]
fn demonstration_store_contracts() {
    let f = fixture();
    let descs = descriptors(TargetKind::Incorrect);
    let retain = records_of(&f.records, Split::Retain);
    let store = build_demonstration_store(&descs, &retain, |t| f.model.embed_batch(t), 2, 0).unwrap();
    assert_eq!(store.entries.len(), 3 * descs.len());
    assert!(store.entries.iter().all(|e| unit(&e.embedding)));
    let kinds: Vec<DemoKind> = store.entries.iter().take(3).map(|e| e.kind).collect();
    assert_eq!(kinds, [DemoKind::Copy, DemoKind::Update, DemoKind::Retain]);
    assert!(build_demonstration_store(&descs[..1], &retain, |t| f.model.embed_batch(t), 4, 0).is_err());

    let q = f.model.embed(&descs[2].prompt).unwrap();
    assert_eq!(select_demonstrations(&store, &q)[0], 6);

    let all = DemonstrationStore {
        k: store.entries.len(),
        ..store.clone()
    };
    let mut order = select_demonstrations(&all, &q);
    order.sort();
    assert_eq!(order, (0..all.entries.len()).collect::<Vec<_>>());
}

#[test]
fn forty_descriptors_split_thirty_six_to_four() {
    let d = descriptors(TargetKind::Dummy)[0].clone();
    let many: Vec<EditDescriptor> = (0..40)
        .map(|i| EditDescriptor {
            record_id: format!("r{i}"),
            ..d.clone()
        })
        .collect();
    let (tr, ev) = split_descriptors(&many, 0.9, 3);
    assert_eq!((tr.len(), ev.len()), (36, 4));
    assert!(ev.iter().all(|e| !tr.contains(e)));
    assert_eq!(split_descriptors(&many, 0.9, 3), (tr, ev));
}

#[test]
fn orthogonal_store_orders_by_cosine_then_index() {
    let e = |v: [f32; 3]| Demonstration {
        kind: DemoKind::Copy,
        text: String::new(),
        embedding: v.to_vec(),
    };
    let store = DemonstrationStore {
        entries: vec![e([1.0, 0.0, 0.0]), e([0.0, 1.0, 0.0]), e([0.0, 0.0, 1.0])],
        k: 3,
    };
    assert_eq!(select_demonstrations(&store, &[0.0, 0.0, 1.0]), [2, 0, 1]);
}

#[test]
fn icl_context_layout() {
    let len = |s: &str| s.split_whitespace().count();
    let bare = construct_icl_context(&[], "Who is X?", "dummy", "Who is X really?", 100, len).unwrap();
    assert_eq!(bare.text, "New Fact: Who is X? dummy\nPrompt: Who is X really?");
    assert_eq!(bare.dropped, 0);
    let demos = ["one two three four five", "six seven eight"];
    let full = construct_icl_context(&demos, "Q?", "A", "Q2?", 100, len).unwrap();
    assert!(full.text.ends_with("Q2?"));
    assert!(full.text.starts_with("one two"));
    let tight = construct_icl_context(&demos, "Q?", "A", "Q2?", 10, len).unwrap();
    assert_eq!(tight.dropped, 1);
    assert!(tight.text.starts_with("six"));
    assert!(construct_icl_context(&[], "a b c d e f", "g", "h", 5, len).is_err());
}

#[test]
fn in_context_editing_never_touches_parameters() {
    let f = fixture();
    let before = f.model.checksum();
    let descs = descriptors(TargetKind::Dummy);
    let retain = records_of(&f.records, Split::Retain);
    let store = build_demonstration_store(&descs, &retain, |t| f.model.embed_batch(t), 2, 0).unwrap();
    let ike = IclEditedModel::new(&f.model, store.clone(), descs.clone(), 24).unwrap();
    ike.generate_batch(&[descs[0].prompt.as_str()], 8).unwrap();
    pinned_edit_metrics(&f.model, &store, &descs[..1], 24).unwrap();
    assert_eq!(f.model.checksum(), before);
}

fn side_config(shards: usize, density: f64) -> SideMemoryConfig {
    SideMemoryConfig {
        layer: Some(1),
        n_shards: shards,
        mask_density: density,
        steps: 5,
        ..SideMemoryConfig::default()
    }
}

#[test]
fn single_full_shard_is_a_plain_fine_tune_and_main_is_untouched() {
    let f = fixture();
    let before = f.model.params.clone();
    let descs = descriptors(TargetKind::Dummy);
    let side = train_side_memory(&f.model, &descs, &side_config(1, 1.0)).unwrap();
    assert!(side.masks[0].iter().all(|b| *b));
    assert_ne!(side.shards[0], side.w_main);
    let merged = merge_shards(&side).unwrap();
    assert_eq!(merged.w_side.as_ref().unwrap(), &side.shards[0]);
    assert_eq!(f.model.params, before);
    assert_eq!(side.w_main, f.model.params.layers[1].w_out);
}

#[test]
fn mask_density_is_close_to_the_setting() {
    let mut state = fixture().model.clone();
    // 128 × 128 = 16384 entries.
    state.config.d_model = 128;
    state.config.d_ffn = 128;
    state.params.layers[1].w_out = Tensor::zeros(&[128, 128]);
    let descs = descriptors(TargetKind::Dummy);
    // No training, so the resized layer is never run.
    let cfg = SideMemoryConfig {
        steps: 0,
        route_weight: 0.0,
        ..side_config(2, 0.3)
    };
    let side = train_side_memory(&state, &descs, &cfg).unwrap();
    for m in &side.masks {
        let density = m.iter().filter(|b| **b).count() as f64 / m.len() as f64;
        assert!((density - 0.3).abs() <= 0.05 * 0.3, "{density}");
    }
}

fn hand_side(w_main: Vec<f32>, shards: Vec<(Vec<f32>, Vec<bool>)>) -> SideMemory {
    let shape = [1, w_main.len()];
    SideMemory {
        layer: 0,
        w_main: Tensor::from_vec(&shape, w_main),
        shards: shards.iter().map(|(w, _)| Tensor::from_vec(&shape, w.clone())).collect(),
        masks: shards.into_iter().map(|(_, m)| m).collect(),
        w_side: None,
        threshold: None,
    }
}

#[test]
fn merge_rules() {
    let one = hand_side(vec![0.0, 0.0], vec![(vec![1.0, 2.0], vec![true, true])]);
    assert_eq!(merge_shards(&one).unwrap().w_side.unwrap().data, [1.0, 2.0]);
    let disjoint = hand_side(
        vec![1.0, 1.0, 1.0],
        vec![(vec![3.0, 1.0, 1.0], vec![true, false, false]), (vec![1.0, 1.0, 0.0], vec![false, false, true])],
    );
    assert_eq!(merge_shards(&disjoint).unwrap().w_side.unwrap().data, [3.0, 1.0, 0.0]);
    let overlap = hand_side(
        vec![0.0, 0.0],
        vec![(vec![2.0, 4.0], vec![true, true]), (vec![4.0, -2.0], vec![true, true])],
    );
    assert_eq!(merge_shards(&overlap).unwrap().w_side.unwrap().data, [3.0, 1.0]);
    assert!(merge_shards(&hand_side(vec![0.0], vec![])).is_err());
}

#[test]
fn threshold_examples() {
    assert_eq!(threshold_from_scores(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 3.5);
    assert_eq!(threshold_from_scores(&[1.0, 4.0], &[2.0, 3.0]).unwrap(), 4.0);
    let same = [1.0, 2.0, 3.0];
    let eps = threshold_from_scores(&same, &same).unwrap();
    let errors = same.iter().filter(|s| **s < eps).count() + same.iter().filter(|s| **s >= eps).count();
    assert!(errors <= same.len());
    assert!(threshold_from_scores(&[], &[1.0]).is_err());
}

#[test]
fn routing_extremes_and_uncalibrated_error() {
    let f = fixture();
    let descs = descriptors(TargetKind::Dummy);
    let side = merge_shards(&train_side_memory(&f.model, &descs, &side_config(2, 0.5)).unwrap()).unwrap();
    assert!(SideMemoryModel::new(&f.model, &side, true).is_err());
    let qs: Vec<&str> = f.records.iter().map(|r| r.question.as_str()).collect();
    let pairs: Vec<(&str, &str)> = f.records.iter().map(|r| (r.question.as_str(), r.answer.as_str())).collect();

    let never = SideMemory {
        threshold: Some(f64::INFINITY),
        ..side.clone()
    };
    let m = SideMemoryModel::new(&f.model, &never, true).unwrap();
    let ids: Vec<Vec<u32>> = qs.iter().map(|q| f.model.prompt_ids(q)).collect();
    assert!(m.routes(&ids).unwrap().iter().all(|r| !r));
    assert_eq!(m.answer_logprobs_batch(&pairs).unwrap(), f.model.answer_logprobs_batch(&pairs).unwrap());
    assert_eq!(m.generate_batch(&qs, 20).unwrap(), f.model.generate_batch(&qs, 20).unwrap());

    let always = SideMemory {
        threshold: Some(0.0),
        ..side.clone()
    };
    let m = SideMemoryModel::new(&f.model, &always, true).unwrap();
    assert!(m.routes(&ids).unwrap().iter().all(|r| *r));
    let patched = f
        .model
        .score_pairs_with(&pairs, &Intervention::with_w_out(1, always.w_side.as_ref().unwrap()))
        .unwrap();
    let lp: Vec<Vec<f64>> = patched.into_iter().map(|(lp, _)| lp).collect();
    assert_eq!(m.answer_logprobs_batch(&pairs).unwrap(), lp);
}

#[test]
fn calibrated_router_separates_forget_from_retain() {
    let f = fixture();
    let descs = descriptors(TargetKind::Dummy);
    let mut side = merge_shards(&train_side_memory(&f.model, &descs, &SideMemoryConfig::default()).unwrap()).unwrap();
    let fp: Vec<&str> = descs.iter().flat_map(|d| [d.prompt.as_str(), d.paraphrase.as_str()]).collect();
    let retain = records_of(&f.records, Split::Retain);
    let rp: Vec<&str> = retain.iter().map(|r| r.question.as_str()).collect();
    side.threshold = Some(calibrate_router(&f.model, &side, &fp, &rp).unwrap());
    let m = SideMemoryModel::new(&f.model, &side, true).unwrap();
    let ids = |ps: &[&str]| ps.iter().map(|p| f.model.prompt_ids(p)).collect::<Vec<_>>();
    let fr = m.routes(&ids(&fp)).unwrap();
    let rr = m.routes(&ids(&rp)).unwrap();
    assert!(fr.iter().filter(|r| **r).count() * 10 >= fr.len() * 9);
    assert!(rr.iter().filter(|r| !**r).count() * 10 >= rr.len() * 9);
}

#[test]
fn side_memory_survives_a_checkpoint() {
    let f = fixture();
    let descs = descriptors(TargetKind::Avoidant);
    let mut side = merge_shards(&train_side_memory(&f.model, &descs, &side_config(2, 0.5)).unwrap()).unwrap();
    side.threshold = Some(1.5);
    let dir = tempfile::tempdir().unwrap();
    forgetedit::model::checkpoint::save(dir.path(), &f.model, Some(&side.to_side_data().unwrap())).unwrap();
    let (state, data) = forgetedit::model::checkpoint::load(dir.path()).unwrap();
    let back = SideMemory::from_side_data(&state, &data.unwrap()).unwrap();
    assert_eq!(back, side);
}
