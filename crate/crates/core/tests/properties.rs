use gessl::gessl::{distill_loss, outer_step, GesslConfig, MetricsRecord, OuterState};
use gessl::harness::checkpoint::{decode_checkpoint, encode_checkpoint};
use gessl::harness::config::{parse_config, render_config, ExperimentConfig};
use gessl::harness::metrics::{parse_json_line, to_json_line};
use gessl::hypergrad::{family_theta, hvp, lookahead_update, quadratic_family, FamilyKind};
use gessl::losses::{barlow, nt_xent};
use gessl::models::{init_encoder, pi_linear, pi_prototype, sgd_step, LinearHead, OptimState, ParameterSet};
use gessl::sigma::{kl_divergence, knn_eval, linear_probe, sigma_from_distributions, OracleLabeler, ProbeConfig};
use gessl::taskgen::{generate_synthetic, make_episode, make_task, AugmentationSpec, SyntheticSpec, TaskKey};
use gessl::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn blobs() -> gessl::taskgen::Dataset {
    generate_synthetic(
        &SyntheticSpec {
            classes: 4,
            per_class: 12,
            dim: 5,
            ..SyntheticSpec::default()
        },
        3,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(t in sized_matrix(), shift in -50.0f64..50.0) {
        let tape = Tape::new();
        let p = tape.constant(t.clone()).softmax_rows().unwrap().value();
        let q = tape.constant(t.map(|v| v + shift)).softmax_rows().unwrap().value();
        for r in 0..p.rows() {
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalized_rows_have_unit_norm(t in sized_matrix()) {
        let tape = Tape::new();
        let u = tape.constant(t.clone()).l2_normalize_rows().unwrap().value();
        for r in 0..t.rows() {
            let before = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let after = u.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if before >= 1e-12 {
                prop_assert!((after - 1.0).abs() <= 1e-12);
            } else {
                prop_assert_eq!(u.row(r), t.row(r));
            }
        }
    }

    #[test]
    fn pi_heads_emit_positive_distributions(
        e in matrix(6, 4),
        seed in any::<u64>(),
        tau in 0.05f64..5.0,
    ) {
        let labels = [0, 0, 1, 1, 2, 2];
        let tape = Tape::new();
        let proto = pi_prototype(tape.constant(e.clone()), &labels, 3, tau).unwrap().value();
        let lin = pi_linear(&LinearHead::seeded(4, 3, seed), tape.constant(e)).unwrap().value();
        for p in [proto, lin] {
            for r in 0..p.rows() {
                prop_assert!(p.row(r).iter().all(|&v| v > 0.0));
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_member_class_prototype_is_the_other_member(e in matrix(4, 3), tau in 0.1f64..2.0) {
        let unit = |r: &[f64]| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let u: Vec<Vec<f64>> = (0..4).map(|r| unit(e.row(r))).collect();
        prop_assume!(e.data().iter().all(|v| v.abs() > 1e-3));
        let labels = [0, 0, 1, 1];
        let tape = Tape::new();
        let p = pi_prototype(tape.constant(e), &labels, 2, tau).unwrap().value();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let other_class = |c: usize| {
            let s: Vec<f64> = (0..3).map(|k| u[2 * c][k] + u[2 * c + 1][k]).collect();
            unit(&s)
        };
        for s in 0..4 {
            let own = labels[s];
            let mate = s ^ 1;
            let mut logits = [0.0; 2];
            logits[own] = dot(&u[s], &u[mate]) / tau;
            logits[1 - own] = dot(&u[s], &other_class(1 - own)) / tau;
            let z = (logits[0].exp() + logits[1].exp()).ln();
            prop_assert!((p.at(s, own) - (logits[own] - z).exp()).abs() <= 1e-12);
        }
    }

    #[test]
    fn plain_sgd_is_exact(p in prop::collection::vec(-5.0f64..5.0, 6), g in prop::collection::vec(-5.0f64..5.0, 6), lr in 0.0f64..2.0) {
        let mut params = ParameterSet::new();
        params.push("w", Tensor::matrix(2, 3, p.clone()).unwrap()).unwrap();
        let mut grads = ParameterSet::new();
        grads.push("w", Tensor::matrix(2, 3, g.clone()).unwrap()).unwrap();
        let mut state = OptimState::new(&params, 0.0, 0.0).unwrap();
        let next = sgd_step(&params, &grads, lr, &mut state).unwrap();
        for ((n, pv), gv) in next.flatten().iter().zip(&p).zip(&g) {
            prop_assert_eq!(n.to_bits(), (pv - lr * gv).to_bits());
        }
    }

    #[test]
    fn task_invariants_hold(seed in any::<u64>(), episode in 0u64..100, task in 0u64..100, n in 2usize..20, a in 2usize..5) {
        let ds = blobs();
        let t = make_task(&ds, n, a, &AugmentationSpec::default(), TaskKey::new(seed, episode, task)).unwrap();
        prop_assert!(t.validate().is_ok());
        let mut counts = vec![0; n];
        for &l in &t.pseudo_labels { counts[l] += 1; }
        prop_assert!(counts.iter().all(|&c| c == a));
        let mut src = t.source_indices.clone();
        src.sort_unstable();
        src.dedup();
        prop_assert_eq!(src.len(), n);
    }

    #[test]
    fn episodes_do_not_depend_on_construction_order(seed in any::<u64>(), episode in 0u64..50) {
        let ds = blobs();
        let aug = AugmentationSpec::default();
        let forward = make_episode(&ds, seed, episode, 4, 6, 2, &aug).unwrap();
        let backward: Vec<_> = (0..4u64).rev()
            .map(|j| make_task(&ds, 6, 2, &aug, TaskKey::new(seed, episode, j)).unwrap())
            .collect();
        for (f, b) in forward.iter().zip(backward.iter().rev()) {
            prop_assert_eq!(f, b);
        }
    }

    #[test]
    fn nt_xent_falls_as_the_positive_aligns(t1 in 0.01f64..3.1, t2 in 0.01f64..3.1, tau in 0.1f64..2.0) {
        prop_assume!((t1 - t2).abs() > 1e-3);
        let loss = |t: f64| {
            let z = Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![t.cos(), t.sin(), 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
            ]).unwrap();
            let tape = Tape::new();
            nt_xent(tape.constant(z), &[0, 0, 1, 1], tau).unwrap().item()
        };
        // smaller angle, larger positive cosine, lower loss
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(loss(lo) < loss(hi));
    }

    #[test]
    fn barlow_is_non_negative(za in matrix(6, 3), zb in matrix(6, 3), lambda in 0.0f64..1.0) {
        let tape = Tape::new();
        let v = barlow(tape.constant(za), tape.constant(zb), lambda).unwrap().item();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn hvp_is_symmetric_on_the_family(seed in 0u64..1000) {
        let p = &quadratic_family(seed, 1, 16, FamilyKind::Spectrum { lo: 0.5, hi: 4.0 })[0];
        let d = p.dim();
        let theta = family_theta(seed, 0, d);
        let v = family_theta(seed + 1, 0, d);
        let w = family_theta(seed + 2, 0, d);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&v, &hvp(p, &theta, &theta, &w).unwrap());
        let rhs = dot(&w, &hvp(p, &theta, &theta, &v).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-6);
    }

    #[test]
    fn lookahead_fixes_equal_weights(x in prop::collection::vec(-1e3f64..1e3, 5), alpha in 0.0f64..=1.0) {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::new(vec![5], x).unwrap()).unwrap();
        prop_assert_eq!(lookahead_update(&p, &p, alpha).unwrap(), p);
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_on_equality(p in distribution(4), q in distribution(4)) {
        let same = kl_divergence(&p, &p).unwrap();
        prop_assert_eq!(same, 0.0);
        let d = kl_divergence(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-6 {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn sigma_is_minus_log_true_probability(rows in prop::collection::vec(distribution(3), 6)) {
        let preds = Tensor::from_rows(&rows).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let oracle = OracleLabeler::new(vec![labels.clone()], vec![3]).unwrap();
        let rep = sigma_from_distributions(std::slice::from_ref(&preds), &oracle).unwrap();
        let direct: f64 = labels.iter().enumerate().map(|(r, &l)| -preds.at(r, l).max(1e-12).ln()).sum();
        prop_assert!((rep.total - direct).abs() <= 1e-12 * direct.max(1.0));
        prop_assert_eq!(rep.total, rep.per_task_sigma.iter().sum::<f64>());
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
        let split = split % values.len();
        let mut p = ParameterSet::new();
        p.push("a.weight", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        p.push("scalar", Tensor::new(vec![1], vec![values[split]]).unwrap()).unwrap();
        p.push("cube", Tensor::new(vec![1, 2, 1], vec![values[0], -values[split]]).unwrap()).unwrap();
        let q = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        let bits = |s: &ParameterSet| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&p), bits(&q));
        prop_assert!(p.names().eq(q.names()));
    }

    #[test]
    fn metrics_lines_round_trip(
        step in 1u64..1_000_000,
        loss in -1e300f64..1e300,
        distill in prop::option::of(-1e10f64..1e10),
        probe in prop::option::of(0.0f64..=1.0),
        seed in any::<u64>(),
    ) {
        let r = MetricsRecord {
            step,
            episode: step - 1,
            inner_loss_mean: loss,
            distill_loss: distill,
            outer_grad_norm: loss.abs(),
            probe_acc: probe,
            sigma_mean: probe.map(|p| p * 3.0),
            seed,
            wall_ms: 5,
        };
        prop_assert_eq!(parse_json_line(&to_json_line(&r)).unwrap(), r);
    }

    #[test]
    fn configs_round_trip(seed in any::<u64>(), k in 0usize..5, alpha in 1e-6f64..1.0, episodes in 0usize..500) {
        let mut c = ExperimentConfig::with_seed(seed);
        c.gessl.k = k;
        c.gessl.alpha = alpha;
        c.gessl.episodes = episodes;
        c.probe.seed = seed;
        prop_assert_eq!(parse_config(&render_config(&c)).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probes_ignore_sample_order(
        feats in prop::collection::vec(-2.0f64..2.0, 24 * 3),
        labels in prop::collection::vec(0usize..3, 24),
        perm_seed in any::<u64>(),
    ) {
        let mut labels = labels;
        labels[0] = 0;
        labels[1] = 1;
        let x = Tensor::matrix(24, 3, feats).unwrap();
        let mut order: Vec<usize> = (0..24).collect();
        let mut s = perm_seed;
        for i in (1..24).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let px = Tensor::from_rows(&order.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let probe = ProbeConfig { epochs: 30, ..ProbeConfig::default() };
        prop_assert_eq!(knn_eval(&x, &labels, 5).unwrap(), knn_eval(&px, &pl, 5).unwrap());
        prop_assert_eq!(linear_probe(&x, &labels, &probe).unwrap(), linear_probe(&px, &pl, &probe).unwrap());
    }

    #[test]
    fn outer_step_leaves_tasks_and_targets_untouched(seed in 0u64..1000) {
        let ds = blobs();
        let config = GesslConfig {
            m: 2,
            n: 4,
            lambda_extra: 2,
            hidden_dims: vec![6],
            embed_dim: 4,
            proj_dim: 3,
            ..GesslConfig::default()
        };
        let theta = init_encoder(&config.encoder(ds.dim()), seed).unwrap();
        let tasks = make_episode(&ds, seed, 0, 2, 4, 2, &config.augmentation).unwrap();
        let before = tasks.clone();
        let mut state = OuterState::new(&theta, &config).unwrap();
        let (next, metrics) = outer_step(&theta, &tasks, &config, &mut state).unwrap();
        prop_assert_eq!(&tasks, &before);
        prop_assert!(metrics.distill_loss.is_finite());
        prop_assert_eq!(next.numel(), theta.numel());
        // the zero-length distillation is exactly zero at any point
        let target = gessl::gessl::pi_distributions(&next, &tasks[0], config.pi_kind).unwrap();
        prop_assert_eq!(distill_loss(&next, &tasks[0], &target, config.pi_kind, config.distill_kind).unwrap(), 0.0);
    }
}

#[test]
fn barlow_vanishes_on_decorrelated_standardized_columns() {
    // orthogonal +-1 columns: standardized cross-correlation is the identity
    let z = Tensor::from_rows(&[
        vec![1.0, 1.0, 1.0],
        vec![1.0, -1.0, 1.0],
        vec![-1.0, 1.0, 1.0],
        vec![-1.0, -1.0, 1.0],
        vec![1.0, 1.0, -1.0],
        vec![1.0, -1.0, -1.0],
        vec![-1.0, 1.0, -1.0],
        vec![-1.0, -1.0, -1.0],
    ])
    .unwrap();
    let tape = Tape::new();
    let v = barlow(tape.constant(z.clone()), tape.constant(z.clone()), 0.5).unwrap().item();
    assert!(v.abs() < 1e-12, "{v}");
    let shuffled = Tensor::from_rows(&(0..8).map(|r| z.row((r + 1) % 8).to_vec()).collect::<Vec<_>>()).unwrap();
    let w = barlow(tape.constant(z), tape.constant(shuffled), 0.5).unwrap().item();
    assert!(w > 1e-3);
}
