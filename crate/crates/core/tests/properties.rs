use std::collections::BTreeMap;

use cfl_core::bound::{bound_product_sum, bound_trajectory, zeta1, BoundParams, EtaSchedule, Zeta2Reading};
use cfl_core::clustering::{
    adjusted_rand_index, bipartition, cosine_similarity, federated_average, separation_gap, ClusterTree,
    SimilarityMatrix, Thresholds,
};
use cfl_core::model::{local_train, local_update_count, loss, DataShard, ModelSpec};
use cfl_core::orchestrator::ExperimentConfig;
use cfl_core::scheduling::{
    aggregation_count, build_aggregation_sets, max_concurrent_uploads, pipeline_timeline, StrategyKind,
};
use cfl_core::wireless::{data_rate, BandwidthPlan, Latency};
use cfl_core::ParamVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn unit_updates(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(nonzero_vec(dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cosine_is_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), s in 1e-3..1e3f64, t in 1e-3..1e3f64) {
        let base = cosine_similarity(&pv(a.clone()), &pv(b.clone())).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
        let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
        let scaled = cosine_similarity(&pv(sa), &pv(tb)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn bipartition_ignores_update_rescaling(
        updates in (2usize..9).prop_flat_map(|n| unit_updates(n, 4)),
        scales in prop::collection::vec(1e-2..1e2f64, 9),
    ) {
        let a: Vec<ParamVector> = updates.iter().cloned().map(pv).collect();
        let b: Vec<ParamVector> = updates
            .iter()
            .zip(&scales)
            .map(|(u, s)| pv(u.iter().map(|x| x * s).collect()))
            .collect();
        let ids: Vec<usize> = (0..a.len()).map(|i| 3 * i + 1).collect();
        let sa = SimilarityMatrix::from_updates(&ids.iter().copied().zip(a.iter()).collect::<Vec<_>>()).unwrap();
        let sb = SimilarityMatrix::from_updates(&ids.iter().copied().zip(b.iter()).collect::<Vec<_>>()).unwrap();
        let (pa, pb) = (bipartition(&sa).unwrap(), bipartition(&sb).unwrap());
        // Rescaling can move a similarity by an ulp and reorder exact ties,
        // so the cut found on the rescaled updates must be optimal on the
        // original ones.
        prop_assert!((pa.cross_max - pb.cross_max).abs() <= 1e-12);
        let pos = |id: usize| ids.iter().position(|&x| x == id).unwrap();
        let cross_b_on_a = pb
            .c1
            .iter()
            .flat_map(|&i| pb.c2.iter().map(move |&j| (i, j)))
            .map(|(i, j)| sa.at(pos(i), pos(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((cross_b_on_a - pa.cross_max).abs() <= 1e-12);
    }

    #[test]
    fn federated_average_is_idempotent(v in nonzero_vec(7), weights in prop::collection::vec(1usize..500, 1..8)) {
        let p = pv(v);
        let entries: Vec<(usize, &ParamVector, usize)> = weights.iter().enumerate().map(|(i, &w)| (i, &p, w)).collect();
        let avg = federated_average(&entries).unwrap();
        for (x, y) in avg.as_slice().iter().zip(p.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn update_count_matches_batch_enumeration(e in 1usize..20, d in 1usize..3000, b in 1usize..300) {
        let batches = (0..d).step_by(b).count();
        prop_assert_eq!(local_update_count(e, d, b).unwrap(), e * batches);
    }

    #[test]
    fn rate_is_monotone(
        bw in 1e4..1e7f64, p in 1e-4..1.0f64, g in 1e-10..1e-3f64, n0 in 1e-9..1e-4f64, f in 1.01..10.0f64,
    ) {
        let r = data_rate(bw, p, g, n0).unwrap();
        prop_assert!(data_rate(bw * f, p, g, n0).unwrap() > r);
        prop_assert!(data_rate(bw, p * f, g, n0).unwrap() > r);
        prop_assert!(data_rate(bw, p, g * f, n0).unwrap() > r);
        prop_assert!(data_rate(bw, p, g, n0 * f).unwrap() < r);
    }

    #[test]
    fn subchannel_allocation_fits_band(total in 1e5..1e8f64, bits in 1e3..1e7f64, n in 1usize..64) {
        let literal = BandwidthPlan::from_model_size(total, bits).unwrap();
        let configured = BandwidthPlan { total_hz: total, subchannels: n };
        for plan in [literal, configured] {
            prop_assert!(plan.per_participant_hz() * plan.subchannels as f64 <= total * (1.0 + 1e-12));
        }
    }

    #[test]
    fn pipeline_respects_cap_and_bounds(
        lat in prop::collection::vec((0.0..5.0f64, 0.01..5.0f64), 1..25),
        n in 1usize..6,
    ) {
        let latency: BTreeMap<usize, Latency> = lat
            .iter()
            .enumerate()
            .map(|(k, &(c, u))| (k, Latency { compute_s: c, upload_s: u }))
            .collect();
        let mut order: Vec<usize> = latency.keys().copied().collect();
        order.sort_by(|&a, &b| latency[&a].total().total_cmp(&latency[&b].total()).then(a.cmp(&b)));
        let sets = build_aggregation_sets(&order, n).unwrap();
        prop_assert_eq!(sets.len(), aggregation_count(order.len(), n).unwrap());
        prop_assert!(sets.iter().all(|s| !s.is_empty() && s.len() <= n));
        let tl = pipeline_timeline(&sets, &latency, n).unwrap();
        prop_assert!(max_concurrent_uploads(&tl.slots) <= n);
        let single_set = latency.values().map(Latency::total).fold(0.0, f64::max);
        let upper = latency.values().map(|l| l.upload_s).sum::<f64>()
            + latency.values().map(|l| l.compute_s).fold(0.0, f64::max);
        prop_assert!(tl.deadline_s >= single_set - 1e-12);
        prop_assert!(tl.deadline_s <= upper + 1e-9);
        for s in &tl.slots {
            prop_assert!(latency[&s.client].total() <= tl.deadline_s + 1e-12);
            prop_assert!(s.upload_end <= tl.deadline_s);
        }
    }

    #[test]
    fn loss_ignores_sample_order(seed in any::<u64>(), n in 2usize..15) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::mlp(3, 4, 3);
        let features: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let shard = DataShard::new(3, features, labels, 0).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = shard.select(&perm);
        let params = spec.init_params(&mut rng);
        let (a, b) = (loss(&params, &shard, &spec).unwrap(), loss(&params, &shuffled, &spec).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn local_train_step_count_and_exact_delta(seed in any::<u64>(), n in 1usize..80, e in 1usize..4, b in 1usize..40) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::logistic(2, 3);
        let features: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let shard = DataShard::new(2, features, labels, 0).unwrap();
        let start = spec.init_params(&mut rng);
        let out = local_train(&start, &shard, &spec, e, b, 0.1, &mut rng).unwrap();
        prop_assert_eq!(out.steps, local_update_count(e, n, b).unwrap());
        for ((d, p), s) in out.delta.as_slice().iter().zip(out.params.as_slice()).zip(start.as_slice()) {
            prop_assert_eq!(d.to_bits(), (p - s).to_bits());
        }
    }

    #[test]
    fn ari_is_one_under_relabeling(labels in prop::collection::vec(0usize..4, 2..30), perm in Just([2usize, 0, 3, 1])) {
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        prop_assert!((adjusted_rand_index(&labels, &relabeled).unwrap() - 1.0).abs() < 1e-12);
        let swapped = adjusted_rand_index(&relabeled, &labels).unwrap();
        prop_assert!((swapped - adjusted_rand_index(&labels, &relabeled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tree_leaves_partition_clients(k in 2usize..20, cuts in prop::collection::vec(any::<u64>(), 0..6)) {
        let mut tree = ClusterTree::new(k, ParamVector::zeros(3));
        for (round, c) in cuts.iter().enumerate() {
            let leaves: Vec<usize> = tree.leaves().into_iter().filter(|&l| tree.node(l).members.len() >= 2).collect();
            if leaves.is_empty() {
                break;
            }
            let leaf = leaves[(*c as usize) % leaves.len()];
            let members = tree.node(leaf).members.clone();
            let at = 1 + (*c as usize / 7) % (members.len() - 1);
            tree.split_leaf(leaf, members[..at].to_vec(), members[at..].to_vec(), round + 1).unwrap();
            tree.check_partition(k).unwrap();
        }
        let mut seen: Vec<usize> = tree.leaves().into_iter().flat_map(|l| tree.node(l).members.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn separation_gap_matches_scan(n in 3usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![1.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let x = rng.random_range(-1.0..1.0);
                v[i * n + j] = x;
                v[j * n + i] = x;
            }
        }
        let s = SimilarityMatrix::from_values((0..n).collect(), v.clone()).unwrap();
        let cut = rng.random_range(1..n);
        let parts = vec![(0..cut).collect::<Vec<_>>(), (cut..n).collect()];
        let side = |i: usize| usize::from(i >= cut);
        let mut within = f64::INFINITY;
        let mut cross = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i == j { continue; }
                if side(i) == side(j) { within = within.min(v[i * n + j]); } else { cross = cross.max(v[i * n + j]); }
            }
        }
        let expected = if within.is_finite() { Some(within - cross) } else { None };
        prop_assert_eq!(separation_gap(&s, &parts).unwrap(), expected);
    }

    #[test]
    fn zeta1_in_unit_interval_for_admissible_rates(alpha in 0.01..10.0f64, t in 1usize..50, frac in 0.0..1.0f64) {
        // Admissible: 0 < eta <= min(1, 1/(alpha T)). Only T = 1 at the
        // upper end reaches the boundary value 0.
        let eta_max = (1.0 / (alpha * t as f64)).min(1.0);
        let eta = eta_max * frac.max(1e-9);
        let z = zeta1(alpha, eta, t);
        prop_assert!(z < 1.0);
        prop_assert!(z > 0.0 || (t == 1 && (alpha * eta - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bound_forms_agree_and_decay_without_offset(
        alpha in 0.1..3.0f64, t in 1usize..12, w0 in 0.0..100.0f64, eta0 in 0.001..0.2f64, decay in 0.0..1.0f64,
        rho in 0.01..5.0f64, het in 0.0..3.0f64,
    ) {
        let p = BoundParams {
            alpha,
            beta: 2.0 * alpha,
            rho_sq: rho,
            local_steps: t,
            heterogeneity: het,
            eta: EtaSchedule::Decaying { eta0: eta0.min(1.0 / (alpha * t as f64)), decay },
            reading: Zeta2Reading::Theorem,
        };
        let a = bound_trajectory(w0, &p, 60).unwrap();
        let b = bound_product_sum(w0, &p, 60).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let quiet = BoundParams { rho_sq: f64::MIN_POSITIVE, heterogeneity: 0.0, ..p };
        let c = bound_trajectory(w0, &quiet, 60).unwrap();
        prop_assert!(c.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_round_trips(
        k in 3usize..40, seed in any::<u64>(), rounds in 1usize..500, eps1 in 0.01..2.0f64, lr in 1e-4..1.0f64,
        s in 0usize..5, budget in prop::option::of(1.0..1e6f64), absolute in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::with_clients(k);
        cfg.seed = seed;
        cfg.max_rounds = rounds;
        cfg.learning_rate = lr;
        cfg.strategy = StrategyKind::ALL[s];
        cfg.time_budget_s = budget;
        cfg.thresholds = if absolute {
            Thresholds::Absolute { eps1, eps2: 2.0 * eps1 }
        } else {
            Thresholds::Relative { eps1_factor: eps1, eps2_factor: 1.6 }
        };
        let text = cfg.to_json_pretty();
        let back = ExperimentConfig::from_json_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json_pretty(), text);
    }
}
