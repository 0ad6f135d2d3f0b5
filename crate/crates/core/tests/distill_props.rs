use opsd_core::distill::{
    clip_then_adamw, ema_update, opsd_loss_value, topk_truncate, DistillConfig, OptimState,
};
use opsd_core::model::{init_params, sample_token, ModelConfig, Parameters};
use opsd_core::numcore::{Gradients, Tensor};
use opsd_core::seed::rng_from_seed;
use opsd_core::Error;
use proptest::prelude::*;

/// KL(student || teacher) on the teacher's top-k ids, from plain
/// probabilities rather than log-space arithmetic.
fn kl_oracle(s: &[f64], t: &[f64], k: usize) -> f64 {
    let mut ids: Vec<usize> = (0..t.len()).collect();
    ids.sort_by(|&a, &b| t[b].partial_cmp(&t[a]).unwrap().then(a.cmp(&b)));
    ids.truncate(k);
    let ps: Vec<f64> = ids.iter().map(|&i| s[i].exp()).collect();
    let pt: Vec<f64> = ids.iter().map(|&i| t[i].exp()).collect();
    let (zs, zt): (f64, f64) = (ps.iter().sum(), pt.iter().sum());
    ps.iter()
        .zip(&pt)
        .map(|(a, b)| (a / zs) * ((a / zs) / (b / zt)).ln())
        .sum()
}

fn logit_rows(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 260,
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        max_seq_len: 8,
    }
}

fn constant_grads(p: &Parameters, value: f64) -> Gradients {
    let mut g = Gradients::new();
    for (name, t) in p.iter() {
        g.insert(name.clone(), Tensor::full(t.shape(), value));
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_direct_summation(s in logit_rows(3, 12), t in logit_rows(3, 12), k in 1usize..=12) {
        let got = opsd_loss_value(&s, &t, k).unwrap();
        let want: f64 = (0..3).map(|r| kl_oracle(s.row(r), t.row(r), k)).sum::<f64>() / 3.0;
        prop_assert!(got >= -1e-12);
        prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
    }

    #[test]
    fn loss_ignores_normalization_offsets(s in logit_rows(2, 6), t in logit_rows(2, 6), c in -5.0f64..5.0) {
        let shifted = Tensor::matrix(2, 6, t.data().iter().map(|v| v + c).collect()).unwrap();
        let a = opsd_loss_value(&s, &t, 4).unwrap();
        let b = opsd_loss_value(&s, &shifted, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn topk_support_is_sorted_and_normalized(row in prop::collection::vec(-6.0f64..0.0, 10), k in 1usize..=10) {
        let top = topk_truncate(&row, k).unwrap();
        prop_assert_eq!(top.support.len(), k);
        prop_assert!(top.support.windows(2).all(|w| w[0] < w[1]));
        let kth = top.support.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(row.iter().enumerate().all(|(i, v)| top.support.contains(&i) || *v <= kth));
        let mass: f64 = top.logprobs.iter().map(|v| v.exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_contracts_distance(rate in 0.0f64..=1.0, a in 0u64..100, b in 100u64..200) {
        let teacher = init_params(&tiny(), a).unwrap();
        let student = init_params(&tiny(), b).unwrap();
        let next = ema_update(&teacher, &student, rate).unwrap();
        let before = teacher.distance(&student).unwrap();
        let after = next.distance(&student).unwrap();
        prop_assert!((after - (1.0 - rate) * before).abs() <= 1e-9 * before);
    }

    #[test]
    fn clipping_is_a_no_op_below_the_threshold(g in 1e-6f64..1e-3) {
        let start = init_params(&tiny(), 1).unwrap();
        let grads = constant_grads(&start, g);
        assert!(grads.global_norm() < 1.0);
        let cfg = DistillConfig::default();
        let mut a = start.clone();
        let mut sa = OptimState::new(&a);
        let report = clip_then_adamw(&mut a, &grads, &mut sa, &cfg).unwrap();
        prop_assert!(!report.clipped);
        prop_assert_eq!(report.pre_clip_norm, grads.global_norm());
    }

    #[test]
    fn nucleus_sampling_stays_in_the_nucleus(
        logits in prop::collection::vec(-5.0f64..5.0, 2..30),
        temp in 0.1f64..2.0,
        top_p in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        let scaled: Vec<f64> = logits.iter().map(|v| v / temp).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
        let probs: Vec<f64> = scaled.iter().map(|v| (v - max).exp() / z).collect();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut nucleus = Vec::new();
        for &i in &order {
            nucleus.push(i);
            cum += probs[i];
            if cum >= top_p {
                break;
            }
        }
        let mut rng = rng_from_seed(seed);
        for _ in 0..8 {
            let t = sample_token(&logits, temp, top_p, &mut rng);
            prop_assert!(nucleus.contains(&t), "{} outside {:?}", t, nucleus);
        }
    }

    #[test]
    fn greedy_is_argmax_with_low_id_ties(logits in prop::collection::vec(-3i32..3, 1..20)) {
        let l: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let best = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let want = l.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(sample_token(&l, 0.0, 1.0, &mut rng_from_seed(0)), want);
    }
}

#[test]
fn top_p_keeps_the_crossing_token() {
    // probabilities 0.5, 0.3, 0.2: top-p 0.6 keeps {0, 1}
    let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    let mut rng = rng_from_seed(3);
    let mut seen = [0usize; 3];
    for _ in 0..2000 {
        seen[sample_token(&logits, 1.0, 0.6, &mut rng)] += 1;
    }
    assert_eq!(seen[2], 0);
    let frac = seen[0] as f64 / 2000.0;
    assert!((frac - 0.625).abs() < 0.04, "{frac}");
}

#[test]
fn first_adamw_step_moves_each_weight_by_the_learning_rate() {
    let cfg = DistillConfig {
        learning_rate: 0.1,
        weight_decay: 0.0,
        grad_clip_norm: f64::INFINITY,
        ..DistillConfig::default()
    };
    let start = init_params(&tiny(), 2).unwrap();
    let mut p = start.clone();
    let mut state = OptimState::new(&p);
    let g = constant_grads(&p, 1.0);
    clip_then_adamw(&mut p, &g, &mut state, &cfg).unwrap();
    for ((_, a), (_, b)) in p.iter().zip(start.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
            assert!((x - y + 0.1).abs() < 1e-8);
        }
    }
    assert_eq!(state.step(), 1);
}

#[test]
fn clipping_rescales_to_the_threshold() {
    let cfg = DistillConfig::default();
    let mut p = init_params(&tiny(), 3).unwrap();
    let grads = constant_grads(&p, 5.0);
    let mut state = OptimState::new(&p);
    let report = clip_then_adamw(&mut p, &grads, &mut state, &cfg).unwrap();
    assert!(report.clipped);
    let n = grads.global_norm();
    let m = state.first_moment("head").unwrap()[0];
    assert!((m - (1.0 - cfg.beta1) * 5.0 / n).abs() < 1e-15);
}

#[test]
fn non_finite_gradients_abort_without_side_effects() {
    let cfg = DistillConfig::default();
    let mut p = init_params(&tiny(), 4).unwrap();
    let before = p.clone();
    let mut grads = constant_grads(&p, 0.1);
    let mut head = grads.get("head").unwrap().clone();
    head.data_mut()[7] = f64::INFINITY;
    grads.insert("head".into(), head);
    let mut state = OptimState::new(&p);
    let fresh = state.clone();
    assert!(matches!(clip_then_adamw(&mut p, &grads, &mut state, &cfg), Err(Error::AbortStep(_))));
    assert_eq!(p, before);
    assert_eq!(state, fresh);
}

#[test]
fn ema_endpoints_are_exact() {
    let t = init_params(&tiny(), 5).unwrap();
    let s = init_params(&tiny(), 6).unwrap();
    assert_eq!(ema_update(&t, &s, 0.0).unwrap(), t);
    assert_eq!(ema_update(&t, &s, 1.0).unwrap(), s);
    assert!(ema_update(&t, &s, 1.5).is_err());
}
