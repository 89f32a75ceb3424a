mod common;

use crossdiff::diffusion::{gaussian, NoiseSchedule, ScheduleKind};
use crossdiff::features::{
    canonicalize, compute_features_3d, recover_positions_3d, yaw_rotation, ContactThresholds, FeatureStats,
};
use crossdiff::layout::{Domain, FeatureLayout};
use crossdiff::metrics::{diversity, fid};
use crossdiff::model::{Condition, CrossDiffModel, ModelConfig};
use crossdiff::projection::{compute_features_2d, project_view, View};
use crossdiff::pseudo_label::{smooth_motion, SmoothMethod};
use crossdiff::sampling::{sample_batch, SamplingPlan, StepKind};
use crossdiff::seed::{stream, Stream};
use crossdiff::skeleton::Skeleton;
use crossdiff::synthetic::random_smooth_motion;
use crossdiff::training::{objective, prepare_batch, LossWeights, Stage, TrainConfig, TrainItem};
use nalgebra::Vector3;
use ndarray::{s, Array2, Array3};
use proptest::prelude::*;

fn rmse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

fn rotate(pos: &Array3<f64>, angle: f64) -> Array3<f64> {
    let r = yaw_rotation(angle);
    let mut out = pos.clone();
    for k in 0..pos.dim().0 {
        for j in 0..pos.dim().1 {
            let v = r * Vector3::new(pos[(k, j, 0)], pos[(k, j, 1)], pos[(k, j, 2)]);
            for c in 0..3 {
                out[(k, j, c)] = v[c];
            }
        }
    }
    out
}

fn unit_stats(layout: FeatureLayout) -> FeatureStats {
    FeatureStats {
        layout,
        mean: vec![0.0; layout.dim()],
        std: vec![1.0; layout.dim()],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_round_trip_to_positions(seed in any::<u64>(), frames in 2usize..=64) {
        let sk = Skeleton::humanml22();
        let pos = random_smooth_motion(&sk, frames, &mut stream(seed, Stream::Dataset, 0));
        let f = compute_features_3d(&pos, &sk, ContactThresholds::default()).unwrap();
        let rec = recover_positions_3d(&f, &sk).unwrap();
        let reference = canonicalize(&pos, &sk).slice(s![..rec.dim().0, .., ..]).to_owned();
        prop_assert!(rmse(&rec, &reference) < 1e-4);
        prop_assert_eq!(f.data.ncols(), f.layout.dim());
    }

    #[test]
    fn yaw_rotation_leaves_features_unchanged(seed in any::<u64>(), angle in -3.1f64..3.1) {
        let sk = Skeleton::humanml22();
        let pos = random_smooth_motion(&sk, 16, &mut stream(seed, Stream::Dataset, 1));
        let a = compute_features_3d(&pos, &sk, ContactThresholds::default()).unwrap();
        let b = compute_features_3d(&rotate(&pos, angle), &sk, ContactThresholds::default()).unwrap();
        let diff = a.data.slice(s![1.., ..]).iter().zip(b.data.slice(s![1.., ..]).iter())
            .map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-6, "max diff {}", diff);
    }

    #[test]
    fn contacts_are_indicators_monotone_in_threshold(seed in any::<u64>(), lo in 1e-5f64..1e-2, factor in 1.0f64..10.0) {
        let sk = Skeleton::humanml22();
        let pos = random_smooth_motion(&sk, 20, &mut stream(seed, Stream::Dataset, 2));
        let small = ContactThresholds { heel: lo, toe: lo };
        let big = ContactThresholds { heel: lo * factor, toe: lo * factor };
        let a = compute_features_3d(&pos, &sk, small).unwrap();
        let b = compute_features_3d(&pos, &sk, big).unwrap();
        let range = a.layout.contacts();
        for (x, y) in a.data.slice(s![.., range.clone()]).iter().zip(b.data.slice(s![.., range]).iter()) {
            prop_assert!(*x == 0.0 || *x == 1.0);
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn layout_dimension_matches_block_ranges(j in 1usize..40) {
        for domain in [Domain::ThreeD, Domain::TwoD] {
            let l = FeatureLayout::new(domain, j);
            prop_assert_eq!(l.contacts().end, l.dim());
            prop_assert_eq!(l.root().end, l.positions().start);
            prop_assert_eq!(l.positions().end, l.velocities().start);
            prop_assert_eq!(l.velocities().end, l.rotations().start);
            prop_assert_eq!(l.rotations().end, l.contacts().start);
        }
        prop_assert_eq!(FeatureLayout::new(Domain::TwoD, 21).dim(), 132);
    }

    #[test]
    fn projected_features_are_deterministic_with_unit_rotation_pairs(seed in any::<u64>(), yaw in 0.0f64..360.0) {
        let sk = Skeleton::humanml22();
        let pos = random_smooth_motion(&sk, 12, &mut stream(seed, Stream::Dataset, 3));
        let view = View::Yaw(yaw);
        let a = compute_features_2d(&project_view(&pos, view).unwrap(), &sk, ContactThresholds::default()).unwrap();
        let b = compute_features_2d(&project_view(&pos, view).unwrap(), &sk, ContactThresholds::default()).unwrap();
        prop_assert_eq!(&a.features.data, &b.features.data);
        let rot = a.features.block(a.features.layout.rotations());
        for row in rot.rows() {
            for pair in row.as_slice().unwrap().chunks(2) {
                prop_assert!((pair[0].hypot(pair[1]) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn alpha_bar_is_monotone_with_bounded_endpoints(steps in 2usize..400, linear in any::<bool>()) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Cosine };
        let s = NoiseSchedule::new(steps, kind).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
        }
        prop_assert!(s.alpha_bar(steps) <= crossdiff::diffusion::MAX_TERMINAL_ALPHA_BAR);
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let mut rng = stream(seed, Stream::Evaluation, 0);
        let a = gaussian(&mut rng, 40, 3);
        let b = gaussian(&mut rng, 40, 3) + shift;
        let ab = fid(a.view(), b.view()).unwrap();
        let ba = fid(b.view(), a.view()).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(fid(a.view(), a.view()).unwrap() < 1e-6);
    }

    #[test]
    fn diversity_of_identical_rows_is_zero(seed in any::<u64>(), value in -5.0f64..5.0) {
        let flat = Array2::from_elem((20, 4), value);
        let d = diversity(flat.view(), 8, &mut stream(seed, Stream::Evaluation, 1)).unwrap();
        prop_assert_eq!(d, 0.0);
    }

    #[test]
    fn smoothing_keeps_contacts_binary(seed in any::<u64>(), half in 0usize..5, moving in any::<bool>()) {
        let sk = Skeleton::humanml22();
        let pos = random_smooth_motion(&sk, 24, &mut stream(seed, Stream::Dataset, 4));
        let f = compute_features_3d(&pos, &sk, ContactThresholds { heel: 0.01, toe: 0.01 }).unwrap();
        let method = if moving { SmoothMethod::MovingAverage } else { SmoothMethod::SavitzkyGolay { order: 2 } };
        let out = smooth_motion(&f, 2 * half + 1, method).unwrap();
        prop_assert_eq!(out.data.dim(), f.data.dim());
        out.validate().unwrap();
        prop_assert!(out.block(out.layout.contacts()).iter().all(|&c| c == 0.0 || c == 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn denoise_widths_follow_the_target_domain(seed in any::<u64>(), frames in 1usize..8, batch in 1usize..3) {
        let model = CrossDiffModel::new(ModelConfig::micro(21, 6), &mut stream(seed, Stream::Init, 0)).unwrap();
        let cond = Condition::new(vec![vec![0.3; 6]; batch], vec![3; batch], vec![false; batch]).unwrap();
        for source in [Domain::ThreeD, Domain::TwoD] {
            let x = crossdiff::model::stack_batch(
                &vec![gaussian(&mut stream(seed, Stream::Trajectory, 0), frames, model.dim(source)); batch],
                model.dtype(),
            ).unwrap();
            for target in [Domain::ThreeD, Domain::TwoD] {
                let y = model.denoise(&x, &cond, source, target, None).unwrap();
                prop_assert_eq!(y.dims(), &[batch, frames, model.dim(target)][..]);
            }
        }
    }

    #[test]
    fn null_condition_ignores_text_contents(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let model = CrossDiffModel::new(ModelConfig::micro(21, 6), &mut stream(seed, Stream::Init, 0)).unwrap();
        let x = crossdiff::model::stack_batch(&[gaussian(&mut stream(seed, Stream::Trajectory, 1), 5, 260)], model.dtype()).unwrap();
        let run = |v: f64| {
            let cond = Condition::new(vec![vec![v; 6]], vec![4], vec![true]).unwrap();
            model.denoise(&x, &cond, Domain::ThreeD, Domain::ThreeD, None).unwrap()
                .flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        prop_assert_eq!(run(a), run(b));
    }

    #[test]
    fn total_loss_is_the_weighted_pathway_sum(seed in any::<u64>(), w23 in 0.0f64..2.0, w32 in 0.0f64..2.0, w22 in 0.0f64..2.0) {
        let model = CrossDiffModel::new(ModelConfig::micro(21, 6), &mut stream(seed, Stream::Init, 0)).unwrap();
        let schedule = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let mut config = TrainConfig::desk(Stage::One);
        config.frames = 4;
        let items = common::random_items(&model, 3, 6, seed);
        let refs: Vec<&TrainItem> = items.iter().collect();
        let batch = prepare_batch(&model, &schedule, &refs, &config, &mut stream(seed, Stream::Batch, 0)).unwrap();
        let weights = LossWeights { w23, w32, w22 };
        let (_, l) = objective(&model, &batch, weights).unwrap();
        let sum = l.l33 + w23 * l.l23.unwrap_or(0.0) + w32 * l.l32.unwrap_or(0.0) + w22 * l.l22.unwrap_or(0.0);
        prop_assert!((l.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn every_mode_runs_t_predictions_with_domain_widths(seed in any::<u64>(), alpha in 0usize..=10, mixture in any::<bool>()) {
        let model = CrossDiffModel::new(ModelConfig::micro(21, 6), &mut stream(seed, Stream::Init, 0)).unwrap();
        let schedule = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let stats = unit_stats(FeatureLayout::new(Domain::ThreeD, 21));
        let plan = if mixture { SamplingPlan::mixture(4, alpha, seed) } else { SamplingPlan::standard(4, seed) };
        let texts = vec![vec![0.1; 6]];
        let r = sample_batch(&model, &schedule, &stats, &texts, &plan, 0).unwrap().remove(0);
        prop_assert_eq!(r.prediction_steps(), 10);
        for rec in &r.trace {
            prop_assert_eq!(rec.input_width, model.dim(rec.source));
            prop_assert_eq!(rec.output_width, model.dim(rec.target));
            if mixture && rec.kind == StepKind::Predict {
                let expected = if rec.t >= alpha { Domain::TwoD } else { Domain::ThreeD };
                prop_assert_eq!(rec.source, expected);
            }
        }
        let again = sample_batch(&model, &schedule, &stats, &texts, &plan, 0).unwrap().remove(0);
        prop_assert_eq!(r.normalized, again.normalized);
    }
}
