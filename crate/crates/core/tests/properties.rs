mod common;

use common::*;
use proptest::prelude::*;

use fedhal::data::{decode_dataset, encode_dataset, pk_sample_batch, DomainDataset};
use fedhal::eval::{retrieval_eval, DistanceMetric};
use fedhal::federation::{aggregate, parse_metrics_csv, write_metrics_csv, MetricsRow};
use fedhal::hallucinate::{domain_hallucinate, feature_hallucinate};
use fedhal::losses::triplet_loss;
use fedhal::matrix::Matrix;
use fedhal::model::{batch_norm, decode_checkpoint, encode_checkpoint, BatchNorm, ModelDims, ModelParams, Mode};
use fedhal::numerics::{sample_dirichlet, Rng};
use fedhal::stats::{parse_dfs, serialize_dfs};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dirichlet_draws_lie_on_the_simplex(seed in any::<u64>(), alpha in prop::collection::vec(0.05f64..20.0, 2..8)) {
        let w = sample_dirichlet(&alpha, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(w.len(), alpha.len());
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hallucinated_domain_stays_in_the_hull(seed in any::<u64>(), n in 2usize..6, d in 1usize..10) {
        let mut rng = Rng::new(seed);
        let doms: Vec<_> = (0..n).map(|_| random_vectors(d, &mut rng)).collect();
        let w = sample_dirichlet(&vec![1.0; n], &mut rng).unwrap();
        let out = domain_hallucinate(&doms, &w).unwrap();
        for c in 0..d {
            let lo = doms.iter().map(|v| v.sigma_sq[c]).fold(f64::INFINITY, f64::min);
            let hi = doms.iter().map(|v| v.sigma_sq[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.sigma_sq[c] >= lo - 1e-12 && out.sigma_sq[c] <= hi + 1e-12);
            let lo = doms.iter().map(|v| v.mu[c]).fold(f64::INFINITY, f64::min);
            let hi = doms.iter().map(|v| v.mu[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.mu[c] >= lo - 1e-12 && out.mu[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn triplet_loss_ignores_translation(seed in any::<u64>(), p in 2usize..5, k in 2usize..4, shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let labels = pk_labels(p, k);
        let f = random_matrix(p * k, 4, 1.0, &mut rng);
        let moved = f.map(|v| v + shift);
        let a = triplet_loss(&f, &labels, 0.5).unwrap();
        let b = triplet_loss(&moved, &labels, 0.5).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!((a.value - b.value).abs() < 1e-9 * (1.0 + shift.abs()));
    }

    #[test]
    fn train_mode_batch_norm_standardizes(seed in any::<u64>(), n in 8usize..64, d in 1usize..12) {
        let mut rng = Rng::new(seed);
        let mut f = random_matrix(n, d, 1.0, &mut rng);
        for r in 0..n {
            for c in 0..d {
                f[(r, c)] = 2.0 * f[(r, c)] + c as f64;
            }
        }
        let (out, _) = batch_norm(&f, &mut BatchNorm::new(d), Mode::Train).unwrap();
        let mean = out.col_means();
        let var = out.col_variances(&mean);
        let in_mean = f.col_means();
        let in_var = f.col_variances(&in_mean);
        for c in 0..d {
            prop_assert!(mean[c].abs() <= 1e-9);
            let expect = (in_var[c] / (in_var[c] + 1e-5)).sqrt();
            prop_assert!((var[c].sqrt() - expect).abs() <= 1e-9);
            if in_var[c] > 0.05 {
                prop_assert!((var[c].sqrt() - 1.0).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn feature_hallucination_keeps_distance_order_for_uniform_scale(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut rng = Rng::new(seed);
        let n = random_matrix(6, 3, 1.0, &mut rng);
        let target = fedhal::stats::DomainVectors { mu: vec![1.0, -2.0, 0.5], sigma_sq: vec![scale * scale; 3] };
        let out = feature_hallucinate(&n, &target).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let before = fedhal::matrix::squared_distance(n.row(i), n.row(j)).sqrt();
                let after = fedhal::matrix::squared_distance(out.row(i), out.row(j)).sqrt();
                prop_assert!((after - scale * before).abs() <= 1e-9 * (1.0 + after));
            }
        }
    }

    #[test]
    fn aggregation_of_copies_is_the_copy(seed in any::<u64>(), counts in prop::collection::vec(1usize..1000, 1..5)) {
        let mut rng = Rng::new(seed);
        let m = ModelParams::init(ModelDims { input: 3, hidden: 4, output: 2 }, &mut rng);
        let copies: Vec<&ModelParams> = counts.iter().map(|_| &m).collect();
        let g = aggregate(&copies, &counts).unwrap();
        for ((_, a), (_, b)) in g.tensors().iter().zip(m.tensors()) {
            prop_assert!(max_abs_diff(a, b) <= 1e-12 * (1.0 + b.iter().fold(0.0f64, |x, v| x.max(v.abs()))));
        }
    }

    #[test]
    fn retrieval_metrics_are_bounded_and_consistent(seed in any::<u64>(), nq in 1usize..10, extra in 0usize..20) {
        let mut rng = Rng::new(seed);
        let classes = 1 + rng.below(4);
        let ql: Vec<u32> = (0..nq).map(|i| (i % classes) as u32).collect();
        let mut gl: Vec<u32> = (0..classes as u32).collect();
        gl.extend((0..extra).map(|_| rng.below(classes + 1) as u32));
        let q = random_matrix(nq, 3, 1.0, &mut rng);
        let g = random_matrix(gl.len(), 3, 1.0, &mut rng);
        let r = retrieval_eval(&q, &ql, &g, &gl, DistanceMetric::Euclidean).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mean_ap));
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r.rank1(), r.cmc[0]);

        // An irrelevant item placed farther than everything never raises any AP.
        let mut g2 = Matrix::zeros(g.rows() + 1, 3);
        for i in 0..g.rows() {
            g2.row_mut(i).copy_from_slice(g.row(i));
        }
        g2.row_mut(g.rows()).copy_from_slice(&[1e6, 1e6, 1e6]);
        let mut gl2 = gl.clone();
        gl2.push(999);
        let r2 = retrieval_eval(&q, &ql, &g2, &gl2, DistanceMetric::Euclidean).unwrap();
        for (a, b) in r.average_precision.iter().zip(&r2.average_precision) {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn pk_batches_are_well_formed(seed in any::<u64>(), ids in 2usize..10, per in 2usize..6) {
        let mut rng = Rng::new(seed);
        let labels: Vec<u32> = (0..ids * per).map(|i| (i / per) as u32).collect();
        let ds = DomainDataset::new(0, random_matrix(labels.len(), 2, 1.0, &mut rng), labels.clone(), 0).unwrap();
        let p = 2 + rng.below(ids - 1);
        let k = 2 + rng.below(per - 1);
        let idx = pk_sample_batch(&ds, p, k, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), p * k);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
        let mut counts = std::collections::BTreeMap::new();
        for &i in &idx {
            *counts.entry(labels[i]).or_insert(0) += 1;
        }
        prop_assert_eq!(counts.len(), p);
        prop_assert!(counts.values().all(|&c| c == k));
    }

    #[test]
    fn codecs_round_trip(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = ModelParams::init(ModelDims { input: 1 + rng.below(5), hidden: 1 + rng.below(5), output: 1 + rng.below(5) }, &mut rng);
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&m)).unwrap(), m);

        let dfs = random_dfs(1 + rng.below(8), rng.below(10) as u32, &mut rng).with_stamp(4, 7);
        prop_assert_eq!(parse_dfs(&serialize_dfs(&dfs)).unwrap(), dfs);

        let labels: Vec<u32> = (0..12).map(|i| i % 3).collect();
        let ds = DomainDataset::new(2, random_matrix(12, 4, 1.0, &mut rng), labels, 40).unwrap();
        prop_assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);

        let rows: Vec<MetricsRow> = (0..3).map(|e| MetricsRow {
            epoch: e,
            variant: "fh+fm".into(),
            seed,
            target_map: 100.0 * rng.uniform(),
            target_rank1: 100.0 * rng.uniform(),
            mean_local_loss: rng.normal().exp(),
            wall_ms: rng.below(1000) as u64,
        }).collect();
        prop_assert_eq!(parse_metrics_csv(&write_metrics_csv(&rows)).unwrap(), rows);
    }
}
