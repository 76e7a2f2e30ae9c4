use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::forward;
use super::params::bind;
use super::NetConfig;
use crate::dataset::SampleTriplet;
use crate::tensor::{Adam, Graph, ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 30, batch: 4, lr: 2e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Sample-weighted mean BCE of each epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Stacks triplets into planar `(image, heat-map, mask)` batches.
pub fn batch_tensors(items: &[&SampleTriplet]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let first = items.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.mask.height(), first.mask.width());
    let (ca, cb) = (first.image.channels(), first.heatmap.channels());
    let n = items.len();
    let mut img = Vec::with_capacity(n * ca * h * w);
    let mut trj = Vec::with_capacity(n * cb * h * w);
    let mut msk = Vec::with_capacity(n * h * w);
    for t in items {
        if t.mask.height() != h || t.mask.width() != w || t.image.channels() != ca || t.heatmap.channels() != cb {
            return Err(Error::shape("triplets in a batch differ in shape"));
        }
        img.extend(t.image.to_planar());
        trj.extend(t.heatmap.to_planar());
        msk.extend(t.mask.bits().iter().map(|&b| b as f32));
    }
    Ok((
        Tensor::new(&[n, ca, h, w], img)?,
        Tensor::new(&[n, cb, h, w], trj)?,
        Tensor::new(&[n, 1, h, w], msk)?,
    ))
}

/// Adam on mean BCE over shuffled mini-batches; the last batch of an epoch
/// may be smaller. Deterministic for a fixed seed.
pub fn train(data: &[SampleTriplet], params: &mut ParamSet<f32>, cfg: &NetConfig, opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::with_lr(opts.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch) {
            let items: Vec<&SampleTriplet> = chunk.iter().map(|&i| &data[i]).collect();
            let (img, trj, msk) = batch_tensors(&items)?;
            let mut g = Graph::new();
            let p = bind(&mut g, params, true);
            let xa = g.constant(img);
            let xb = cfg.variant.two_branch().then(|| g.constant(trj));
            let y = forward(&mut g, &p, cfg, xa, xb)?;
            let loss = g.bce_loss(y, &msk)?;
            let value = g.value(loss).data()[0] as f64;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = p.vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(params, &grads)?;
            report.step_losses.push(value);
            total += value * chunk.len() as f64;
        }
        report.epoch_losses.push(total / data.len() as f64);
    }
    Ok(report)
}
