//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 5 to 7 drive the release pipeline at its default configuration,
//! so this target takes several minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use forgetedit::corpus::{read_jsonl, Split};
use forgetedit::editors::rank_one::rank_one_delta;
use forgetedit::eval::evaluate::{audit_records, forget_truth_ratios};
use forgetedit::eval::metrics::{
    forget_quality, ks_two_sample, model_utility, rouge_l, truth_ratio_forget, truth_ratio_raw, truth_ratio_utility,
};
use forgetedit::model::checkpoint;
use forgetedit::model::forward::Intervention;
use forgetedit::model::loss::{objective, Example, Term};
use forgetedit::model::{ModelConfig, Params};
use forgetedit::tensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed(limit_s: f64, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let r = f();
    let s = t.elapsed().as_secs_f64();
    match r {
        Ok(d) if s < limit_s => Ok(format!("{d}; {s:.1}s < {limit_s}s")),
        Ok(d) => Err(format!("{d}; too slow: {s:.1}s >= {limit_s}s")),
        Err(d) => Err(format!("{d}; {s:.1}s")),
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    const VOCAB: usize = 19;
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        context_len: 16,
        seed: 17,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Params::<f32>::init(&cfg, VOCAB).cast::<f64>();
    let examples: Vec<Example> = (0..3)
        .map(|_| {
            let q = (0..rng.random_range(2..6)).map(|_| rng.random_range(1..VOCAB as u32)).collect();
            let a = (0..rng.random_range(2..6)).map(|_| rng.random_range(1..VOCAB as u32)).collect();
            Example::new(q, a)
        })
        .collect();
    let terms: Vec<Term<'_, f64>> = examples.iter().map(|_| Term::Nll { weight: 1.0 }).collect();
    let loss = |p: &Params<f64>| objective(&cfg, p, &examples, &terms, &Intervention::none(), false).unwrap().loss;
    let grads = objective(&cfg, &p, &examples, &terms, &Intervention::none(), true)
        .map_err(|e| e.to_string())?
        .grads
        .unwrap()
        .params;
    let analytic: Vec<(String, Vec<f64>)> =
        grads.named().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();

    let (h, floor) = (1e-5, 1e-6);
    let samples = 150;
    let mut worst = (0.0f64, String::new());
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let ti = analytic
            .iter()
            .position(|(_, g)| {
                if flat < g.len() {
                    true
                } else {
                    flat -= g.len();
                    false
                }
            })
            .unwrap();
        let set = |p: &mut Params<f64>, delta: f64| {
            let mut named = p.named_mut();
            named[ti].1.data[flat] += delta;
        };
        set(&mut p, h);
        let up = loss(&p);
        set(&mut p, -2.0 * h);
        let down = loss(&p);
        set(&mut p, h);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[ti].1[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, format!("{}[{flat}]", analytic[ti].0));
        }
    }
    check(
        worst.0 < 1e-3,
        format!(
            "{samples} coordinates, worst relative error {:.2e} at {} (h {h}, denominator floor {floor})",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn mat_vec(w: &Tensor<f32>, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| w.row(i).iter().zip(x).map(|(a, b)| *a as f64 * b).sum()).collect()
}

fn rank_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut worst_fit, mut worst_probe) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = rng.random_range(2..24);
        let f = rng.random_range(2..48);
        let mut w = Tensor::<f32>::zeros(&[d, f]);
        w.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let k: Vec<f64> = (0..f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let upd = rank_one_delta(&w, &k, &v, &DMatrix::identity(f, f), None).map_err(|e| e.to_string())?;
        if upd.clamped {
            return Err("unclamped edit reported as clamped".into());
        }
        let mut w2 = w.clone();
        w2.axpy(1.0, &upd.delta);
        let fit = mat_vec(&w2, &k).iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_fit = worst_fit.max(fit);
        // Gram-Schmidt a random probe against k.
        let mut p: Vec<f64> = (0..f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let kk: f64 = k.iter().map(|x| x * x).sum();
        let pk: f64 = p.iter().zip(&k).map(|(a, b)| a * b).sum();
        p.iter_mut().zip(&k).for_each(|(x, kx)| *x -= pk / kk * kx);
        let moved = mat_vec(&w2, &p)
            .iter()
            .zip(mat_vec(&w, &p))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_probe = worst_probe.max(moved);
    }
    check(
        worst_fit < 1e-5 && worst_probe < 1e-5,
        format!("50 instances, max |W'k - v| {worst_fit:.2e}, max orthogonal probe shift {worst_probe:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

/// `max |#a(<=x)·n − #b(<=x)·m|` scanning every pooled value; D times `m·n`.
fn ecdf_scan(a: &[f64], b: &[f64]) -> u64 {
    let (m, n) = (a.len() as i64, b.len() as i64);
    a.iter()
        .chain(b)
        .map(|&x| {
            let i = a.iter().filter(|&&y| y <= x).count() as i64;
            let j = b.iter().filter(|&&y| y <= x).count() as i64;
            (i * n - j * m).unsigned_abs()
        })
        .max()
        .unwrap()
}

fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let observed = ecdf_scan(a, b);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..1 << pooled.len() {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (x, y): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            pooled.iter().copied().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
        let x: Vec<f64> = x.into_iter().map(|(_, v)| v).collect();
        let y: Vec<f64> = y.into_iter().map(|(_, v)| v).collect();
        total += 1;
        hits += u64::from(ecdf_scan(&x, &y) >= observed);
    }
    hits as f64 / total as f64
}

fn ks_oracle() -> Outcome {
    let pairs: Vec<(usize, usize)> =
        (1..10).flat_map(|m| (1..=10 - m).map(move |n| (m, n))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let instances = 200;
    for t in 0..instances {
        let (m, n) = pairs[t % pairs.len()];
        // Alternate tie-heavy integer draws with continuous ones.
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| if t % 2 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect()
        };
        let (a, b) = (draw(m), draw(n));
        let r = ks_two_sample(&a, &b).map_err(|e| e.to_string())?;
        let d = ecdf_scan(&a, &b) as f64 / (m * n) as f64;
        let p = brute_force_p(&a, &b);
        if r.d != d || r.p != p {
            return Err(format!("mismatch on {a:?} vs {b:?}: got (D {}, p {}), oracle (D {d}, p {p})", r.d, r.p));
        }
    }
    Ok(format!("{instances} instances covering all {} size pairs with |a|+|b| <= 10 agree exactly", pairs.len()))
}

// ---------------------------------------------------------------- 4

fn metric_identities() -> Outcome {
    let mut fails = Vec::new();
    let mut eq = |name: &str, got: f64, want: f64| {
        if got != want {
            fails.push(format!("{name}: {got} != {want}"));
        }
    };
    let mu = |v: &[f64]| model_utility(v).unwrap();
    eq("harmonic mean of nine halves", mu(&[0.5; 9]), 0.5);
    let mut with_zero = [0.8; 9];
    with_zero[4] = 0.0;
    eq("harmonic mean with a zero", mu(&with_zero), 0.0);
    eq("harmonic mean of equal ones", mu(&[1.0; 9]), 1.0);
    eq("harmonic mean of 1 and 1/3", mu(&[1.0, 1.0 / 3.0]), 0.5);
    let r = |c: &str, r: &str| rouge_l(c, r).unwrap();
    eq("rouge identical", r("the cat sat", "the cat sat"), 1.0);
    eq("rouge disjoint", r("a dog", "the cat"), 0.0);
    eq("rouge partial", r("the cat", "the cat sat"), 2.0 / 3.0);
    eq("rouge empty candidate", r("", "the cat"), 0.0);
    eq("truth ratio utility at R=1", truth_ratio_utility(1.0), 0.0);
    eq("truth ratio forget at R=1", truth_ratio_forget(1.0), 0.0);
    eq("truth ratio utility at R=0.5", truth_ratio_utility(0.5), 0.5);
    eq("truth ratio forget at R=2", truth_ratio_forget(2.0), 0.5);
    eq("truth ratio utility at R=2", truth_ratio_utility(2.0), 0.0);
    eq("truth ratio forget at R=0.5", truth_ratio_forget(0.5), 0.0);
    eq("raw truth ratio", truth_ratio_raw(&[0.25, 0.75], 0.5).unwrap(), 1.0);
    check(fails.is_empty(), if fails.is_empty() { "15 identities hold exactly".into() } else { fails.join("; ") })
}

// ---------------------------------------------------------------- pipeline

fn forgetedit(args: &[&str]) -> Result<f64, String> {
    let t = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_forgetedit"))
        .args(args)
        .env_remove("FORGETEDIT_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("forgetedit {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(t.elapsed().as_secs_f64())
}

fn json(p: &Path) -> Result<Value, String> {
    let s = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&s).map_err(|e| format!("{}: {e}", p.display()))
}

fn num(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap_or(f64::NAN)
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for e in fs::read_dir(from)? {
        let e = e?;
        let dst = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_tree(&e.path(), &dst)?;
        } else {
            fs::copy(e.path(), dst)?;
        }
    }
    Ok(())
}

fn stage_seconds(run: &Path) -> Result<BTreeMap<String, f64>, String> {
    let m = json(&run.join("manifest.json"))?;
    Ok(m["stages"]
        .as_array()
        .ok_or("manifest has no stages")?
        .iter()
        .map(|s| (s["name"].as_str().unwrap_or_default().to_string(), s["seconds"].as_f64().unwrap_or(f64::NAN)))
        .collect())
}

// ---------------------------------------------------------------- 5

fn ground_truth_self_test(run: &Path) -> Outcome {
    let secs = stage_seconds(run)?;
    let spent = secs.get("train_ground_truth").copied().unwrap_or(f64::NAN)
        + secs.get("eval:ground_truth").copied().unwrap_or(f64::NAN);

    let records = read_jsonl(&run.join("corpus/records.jsonl")).map_err(|e| e.to_string())?;
    let (gt, _) = checkpoint::load(&run.join("models/ground_truth/model")).map_err(|e| e.to_string())?;
    let audit = audit_records(&gt, &records).map_err(|e| e.to_string())?;
    let raw = forget_truth_ratios(&audit);
    let p = forget_quality(&raw, &raw).map_err(|e| e.to_string())?;
    let forget: Vec<_> = audit.iter().filter(|a| a.split == Split::Forget).collect();
    let mean = |f: fn(&&forgetedit::eval::evaluate::RecordAudit) -> f64| {
        forget.iter().map(f).sum::<f64>() / forget.len() as f64
    };
    let (rouge, prob) = (mean(|a| a.rouge), mean(|a| a.probability));

    let report = json(&run.join("eval/ground_truth/report.json"))?;
    let (r_rouge, r_prob) = (num(&report, &["per_dataset", "forget", "rouge"]), num(&report, &["per_dataset", "forget", "probability"]));
    let r_p = num(&report, &["forget_quality_p"]);
    let same = (rouge - r_rouge).abs() < 1e-12 && (prob - r_prob).abs() < 1e-12;
    check(
        p == 1.0 && r_p == 1.0 && same && spent < 120.0,
        format!(
            "p {p} (pipeline {r_p}); forget ROUGE {rouge:.4}/{r_rouge:.4}, probability {prob:.4}/{r_prob:.4}; \
             train+eval {spent:.1}s < 120s"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn trends(run: &Path, run_secs: f64, scratch: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut note = |pass: bool, s: String| {
        ok &= pass;
        lines.push(format!("{}{s}", if pass { "" } else { "FAILED " }));
    };
    let report = |label: &str| json(&run.join("eval").join(label).join("report.json"));
    let original = report("original")?;
    let forget_rouge = |r: &Value| num(r, &["per_dataset", "forget", "rouge"]);

    let p = num(&original, &["forget_quality_p"]);
    note(p < 0.05, format!("6a original forget quality {p:.2e} < 0.05"));

    let rome = report("rome_dummy")?;
    let (pre, post) = (forget_rouge(&original), forget_rouge(&rome));
    note(post <= 0.3 * pre, format!("6b rome:dummy forget ROUGE {post:.3} <= 0.3 x {pre:.3}"));
    let log = fs::read_to_string(run.join("methods/rome_dummy/edit_log.jsonl")).map_err(|e| e.to_string())?;
    let loc: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).map(|v| num(&v, &["running_locality"])))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let rises = loc.windows(2).filter(|w| w[1] > w[0]).count();
    note(
        rises == 0 && !loc.is_empty(),
        format!(
            "6b running locality non-increasing over {} edits: {rises} rises, {:.3} -> {:.3}",
            loc.len(),
            loc.first().copied().unwrap_or(f64::NAN),
            loc.last().copied().unwrap_or(f64::NAN)
        ),
    );

    let ike = json(&run.join("eval/ike_dummy/edit_metrics.json"))?;
    let (rel, gen) = (num(&ike, &["reliability"]), num(&ike, &["generalization"]));
    note(rel >= 0.95 && gen >= 0.8, format!("6c ike:dummy reliability {rel:.3} >= 0.95, generalization {gen:.3} >= 0.8"));

    for t in ["dummy", "incorrect", "avoidant"] {
        let m = json(&run.join(format!("eval/wise_{t}/edit_metrics.json")))?;
        let l = num(&m, &["locality"]);
        note(l >= 0.9, format!("6d wise:{t} locality {l:.3} >= 0.9"));
    }
    // Re-evaluate WISE with main-memory generation in a copy of the run.
    let copy = scratch.join("no_gen_routing");
    for d in ["corpus", "models", "methods/wise_dummy"] {
        copy_tree(&run.join(d), &copy.join(d)).map_err(|e| e.to_string())?;
    }
    let extra = forgetedit(&["eval", "--method", "wise:dummy", "--wise-no-gen-routing", "--out", copy.to_str().unwrap()])?;
    let plain = json(&copy.join("eval/wise_dummy/report.json"))?;
    let routed = report("wise_dummy")?;
    let g = forget_rouge(&plain);
    note(
        (g - pre).abs() <= 0.05,
        format!(
            "6d wise:dummy forget ROUGE without generation routing {g:.3} within 0.05 of original {pre:.3} (routed {:.3})",
            forget_rouge(&routed)
        ),
    );

    let ga = json(&run.join("methods/ga/summary.json"))?;
    let gd = json(&run.join("methods/gd/summary.json"))?;
    let (f0, f1) = (num(&ga, &["initial_forget_nll"]), num(&ga, &["final_forget_nll"]));
    note(f1 >= f0, format!("6e ga forget NLL {f0:.3} -> {f1:.3}"));
    let ga_d = num(&ga, &["final_retain_nll"]) - num(&ga, &["initial_retain_nll"]);
    let gd_d = num(&gd, &["final_retain_nll"]) - num(&gd, &["initial_retain_nll"]);
    note(gd_d <= ga_d, format!("6e retain NLL rise gd {gd_d:.3} <= ga {ga_d:.3}"));

    let total = run_secs + extra;
    note(total < 600.0, format!("default run plus re-evaluation {total:.0}s < 600s"));
    let detail = format!("\n    {}", lines.join("\n    "));
    check(ok, detail)
}

// ---------------------------------------------------------------- 7

fn determinism(a: &Path, b: &Path) -> Outcome {
    let m = |r: &Path| fs::read(r.join("matrix.csv")).map_err(|e| e.to_string());
    let (x, y) = (m(a)?, m(b)?);
    check(x == y, format!("matrix.csv {} bytes, identical: {}", x.len(), x == y))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let run_a: PathBuf = scratch.path().join("a");
    let run_b: PathBuf = scratch.path().join("b");

    let mut results: Vec<Outcome> = vec![
        timed(30.0, gradients),
        timed(10.0, rank_one),
        timed(60.0, ks_oracle),
        timed(5.0, metric_identities),
    ];
    match forgetedit(&["all", "--out", run_a.to_str().unwrap()]) {
        Ok(secs) => {
            results.push(ground_truth_self_test(&run_a));
            results.push(trends(&run_a, secs, scratch.path()));
            results.push(
                forgetedit(&["all", "--out", run_b.to_str().unwrap()]).and_then(|_| determinism(&run_a, &run_b)),
            );
        }
        Err(e) => results.extend((5..=7).map(|_| Err(e.clone()))),
    }

    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(d) => println!("criterion {} PASS: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} FAIL: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
