//! Finite-difference checks of the analytic gradients in double precision.

use forgetedit::model::forward::Intervention;
use forgetedit::model::loss::{objective, Example, Term};
use forgetedit::model::{ModelConfig, Params};
use forgetedit::tensor::Tensor;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        context_len: 12,
        seed: 3,
    }
}

const VOCAB: usize = 11;

fn params(cfg: &ModelConfig) -> Params<f64> {
    // Larger-than-default weights so every path carries signal.
    let mut p = Params::<f32>::init(cfg, VOCAB).cast::<f64>();
    p.scale(6.0);
    for l in &mut p.layers {
        for (i, g) in l.ln1_g.data.iter_mut().chain(l.ln2_g.data.iter_mut()).enumerate() {
            *g = 1.0 + 0.05 * (i as f64).sin();
        }
    }
    for (i, g) in p.lnf_g.data.iter_mut().enumerate() {
        *g = 1.0 + 0.1 * (i as f64).cos();
    }
    p
}

fn examples() -> Vec<Example> {
    vec![
        Example::new(vec![1, 4, 5, 6], vec![7, 8, 2]),
        Example::new(vec![1, 9], vec![10, 4, 5, 2]),
    ]
}

fn reference() -> Vec<Vec<f64>> {
    (0..4)
        .map(|i| {
            let raw: Vec<f64> = (0..VOCAB).map(|j| 1.0 + ((i * 7 + j * 3) % 5) as f64).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

fn loss_of(cfg: &ModelConfig, p: &Params<f64>, iv: &Intervention<'_, f64>) -> f64 {
    let r = reference();
    let terms = [Term::Nll { weight: 0.7 }, Term::Kl { weight: -0.4, reference: &r }];
    objective(cfg, p, &examples(), &terms, iv, false).unwrap().loss
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-6 + 1e-4 * analytic.abs().max(numeric.abs());
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

#[test]
fn parameter_gradients_match_central_differences() {
    let cfg = small();
    let p = params(&cfg);
    let r = reference();
    let terms = [Term::Nll { weight: 0.7 }, Term::Kl { weight: -0.4, reference: &r }];
    let g = objective(&cfg, &p, &examples(), &terms, &Intervention::none(), true)
        .unwrap()
        .grads
        .unwrap()
        .params;
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    for (ti, name) in names.iter().enumerate() {
        let len = p.named()[ti].1.data.len();
        let stride = (len / 5).max(1);
        for idx in (0..len).step_by(stride).take(6) {
            let mut plus = p.clone();
            plus.named_mut()[ti].1.data[idx] += h;
            let mut minus = p.clone();
            minus.named_mut()[ti].1.data[idx] -= h;
            let numeric = (loss_of(&cfg, &plus, &Intervention::none()) - loss_of(&cfg, &minus, &Intervention::none()))
                / (2.0 * h);
            let analytic = g.named()[ti].1.data[idx];
            assert_close(analytic, numeric, &format!("{name}[{idx}]"));
        }
    }
}

#[test]
fn value_patch_gradient_matches_central_differences() {
    let cfg = small();
    let p = params(&cfg);
    let patch: Vec<f64> = (0..cfg.d_model).map(|i| 0.3 * (i as f64 - 3.0)).collect();
    // Rows 2 (first sequence) and 5 (second sequence, position 1).
    let mk = |v0: &[f64], v1: &[f64]| Intervention {
        value_patch: Some((1, vec![(2, v0.to_vec()), (5, v1.to_vec())])),
        ..Intervention::none()
    };
    let r = reference();
    let terms = [Term::Nll { weight: 0.7 }, Term::Kl { weight: -0.4, reference: &r }];
    let g = objective(&cfg, &p, &examples(), &terms, &mk(&patch, &patch), true)
        .unwrap()
        .grads
        .unwrap();
    assert_eq!(g.value_patch.len(), 2);
    let h = 1e-5;
    for which in 0..2 {
        for j in 0..cfg.d_model {
            let mut a = patch.clone();
            a[j] += h;
            let mut b = patch.clone();
            b[j] -= h;
            let (lp, lm) = if which == 0 {
                (loss_of(&cfg, &p, &mk(&a, &patch)), loss_of(&cfg, &p, &mk(&b, &patch)))
            } else {
                (loss_of(&cfg, &p, &mk(&patch, &a)), loss_of(&cfg, &p, &mk(&patch, &b)))
            };
            assert_close(g.value_patch[which][j], (lp - lm) / (2.0 * h), &format!("patch{which}[{j}]"));
        }
    }
}

#[test]
fn override_gradient_is_for_the_override_matrix() {
    let cfg = small();
    let p = params(&cfg);
    let mut w = p.layers[0].w_out.clone();
    for (i, x) in w.data.iter_mut().enumerate() {
        *x += 0.05 * ((i % 7) as f64 - 3.0);
    }
    let r = reference();
    let terms = [Term::Nll { weight: 0.7 }, Term::Kl { weight: -0.4, reference: &r }];
    let g = objective(&cfg, &p, &examples(), &terms, &Intervention::with_w_out(0, &w), true)
        .unwrap()
        .grads
        .unwrap();
    let h = 1e-5;
    for idx in (0..w.data.len()).step_by(17) {
        let mut a: Tensor<f64> = w.clone();
        a.data[idx] += h;
        let mut b = w.clone();
        b.data[idx] -= h;
        let numeric = (loss_of(&cfg, &p, &Intervention::with_w_out(0, &a))
            - loss_of(&cfg, &p, &Intervention::with_w_out(0, &b)))
            / (2.0 * h);
        assert_close(g.params.layers[0].w_out.data[idx], numeric, &format!("override[{idx}]"));
    }
}

#[test]
fn packed_batch_matches_individual_sequences() {
    let cfg = small();
    let p = params(&cfg);
    let seqs = [vec![1u32, 4, 5, 6, 7], vec![1u32, 9, 10]];
    let packed = forgetedit::model::forward::forward(&cfg, &p, &seqs, &Intervention::none()).unwrap();
    for (si, sq) in seqs.iter().enumerate() {
        let single = forgetedit::model::forward::forward(&cfg, &p, &[sq], &Intervention::none()).unwrap();
        for pos in 0..sq.len() {
            let a = packed.logits_row(packed.packing.starts[si] + pos);
            let b = single.logits_row(pos);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
