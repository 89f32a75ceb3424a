#![allow(dead_code)]

use candle_core::Tensor;
use crossdiff::diffusion::{NoiseSchedule, ScheduleKind};
use crossdiff::layout::Domain;
use crossdiff::model::{CrossDiffModel, ModelConfig};
use crossdiff::seed::{stream, Stream};
use crossdiff::training::{objective, prepare_batch, LossWeights, Stage, TrainConfig, TrainItem};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_items(model: &CrossDiffModel, count: usize, frames: usize, seed: u64) -> Vec<TrainItem> {
    let mut rng = stream(seed, Stream::Dataset, 0);
    let d3 = model.dim(Domain::ThreeD);
    let d2 = model.dim(Domain::TwoD);
    let text_dim = model.config().text_dim;
    let mut gauss =
        |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
    (0..count)
        .map(|i| TrainItem {
            id: format!("r{i}"),
            motion_3d: Some(gauss(frames, d3)),
            motion_2d: vec![gauss(frames, d2), gauss(frames, d2)],
            views: vec![],
            texts: vec![gauss(1, text_dim).into_raw_vec_and_offset().0],
        })
        .collect()
}

/// Largest relative error between the analytic gradient of the weighted
/// objective and central differences, over a strided sample of every
/// parameter tensor. Returns (max error, coordinates checked).
pub fn gradient_check(weights: LossWeights, per_tensor: usize, seed: u64) -> (f64, usize) {
    let config = ModelConfig::micro(21, 6);
    let model = CrossDiffModel::new(config, &mut stream(seed, Stream::Init, 0)).unwrap();
    let schedule = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
    let mut train = TrainConfig::desk(Stage::One);
    train.frames = 4;
    train.cond_dropout = 0.0;
    train.weights = weights;
    let items = random_items(&model, 2, 4, seed);
    let refs: Vec<&TrainItem> = items.iter().collect();
    let batch = prepare_batch(&model, &schedule, &refs, &train, &mut stream(seed, Stream::Batch, 0)).unwrap();
    let loss_of = |m: &CrossDiffModel| objective(m, &batch, weights).unwrap().1.total;
    let (loss, _) = objective(&model, &batch, weights).unwrap();
    let grads = loss.backward().unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in model.params().iter() {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let stride = (base.len() / per_tensor).max(1);
        for k in (0..base.len()).step_by(stride).take(per_tensor) {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), var.device()).unwrap())
                    .unwrap();
                loss_of(&model)
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), var.device()).unwrap())
                .unwrap();
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err.is_finite(), "{name}[{k}]");
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}
