use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Mini-batch SGD with momentum and Gaussian input-noise augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sigma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trains `model` on `data`, adding fresh `N(0, σ²)` noise to every input at
/// every step (one draw per sample per step).
pub fn train(model: &Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    if !(cfg.sigma >= 0.0) || !cfg.sigma.is_finite() {
        return Err(Error::invalid(format!("training noise must be >= 0, got {}", cfg.sigma)));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    if data.dim() != model.input_dim() || data.num_classes != model.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: data.input_shape.clone(),
            rhs: model.input_shape().to_vec(),
        });
    }
    let mut model = model.clone();
    let d = data.dim();
    let k = model.num_classes();
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .layers()
        .iter()
        .map(|l| match l {
            super::Layer::Linear { weight, bias, .. } | super::Layer::Conv2d { weight, bias, .. } => {
                Some((vec![0.0; weight.len()], vec![0.0; bias.len()]))
            }
            _ => None,
        })
        .collect();
    let noise = Normal::new(0.0, cfg.sigma.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, &[0x747261696e, epoch as u64]);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut xs = Vec::with_capacity(b * d);
            let mut onehot = vec![0.0; b * k];
            for (r, &i) in batch.iter().enumerate() {
                if cfg.sigma > 0.0 {
                    xs.extend(data.input(i).iter().map(|v| v + noise.sample(&mut rng)));
                } else {
                    xs.extend_from_slice(data.input(i));
                }
                onehot[r * k + data.label(i)] = 1.0;
            }
            let diverged = |_| Error::Diverged { epoch };
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true)?;
            let x = tape.constant(Tensor::new(vec![b, d], xs).map_err(diverged)?);
            let logits = model.forward_on(&mut tape, &params, x).map_err(diverged)?;
            let logp = tape.log_softmax_rows(logits).map_err(diverged)?;
            let mask = tape.constant(Tensor::new(vec![b, k], onehot)?);
            let picked = tape.mul(logp, mask).map_err(diverged)?;
            let total = tape.sum(picked).map_err(diverged)?;
            let loss = tape.scale(total, -1.0 / b as f64).map_err(diverged)?;
            let grads = tape.backward(loss)?;

            let updates: Vec<(usize, Tensor, Tensor)> = params
                .trainable()
                .map(|(i, w, bv)| Ok((i, grads.wrt(&tape, w)?, grads.wrt(&tape, bv)?)))
                .collect::<Result<_>>()?;
            for (i, gw, gb) in updates {
                let (vw, vb) = velocity[i].as_mut().expect("velocity for parameterised layer");
                let (w, bias) = model.layers_mut()[i].params_mut().expect("parameterised layer");
                sgd_step(w, vw, gw.data(), cfg);
                sgd_step(bias, vb, gb.data(), cfg);
                if w.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { epoch });
                }
            }
        }
    }
    Ok(model)
}

fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.lr * *v;
    }
}

/// Fraction of `data` classified correctly by the base classifier.
pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        if model.predict(&data.tensor(i))? == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
