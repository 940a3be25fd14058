use rand::RngCore;

use crate::data::{batches, Dataset};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

use super::{loss_and_grads, Engine, InputNorm, ModelConfig, Parameters, Vit};

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak Adam learning rate, decayed to zero on a cosine schedule.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Held-out top-1, when an evaluation set was supplied.
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.eval_accuracy)
    }
}

struct Adam<T> {
    m: Parameters<T>,
    v: Parameters<T>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(params: &Parameters<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut Parameters<T>,
        grads: &Parameters<T>,
        lr: f64,
        hp: &TrainConfig,
    ) {
        self.step += 1;
        let b1 = T::lit(hp.beta1);
        let b2 = T::lit(hp.beta2);
        let c1 = T::one() / (T::one() - b1.powi(self.step));
        let c2 = T::one() / (T::one() - b2.powi(self.step));
        let lr = T::lit(lr);
        let eps = T::lit(hp.adam_eps);
        let wd = T::lit(hp.weight_decay);
        let groups = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in groups {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let step = (*mv * c1) / ((*vv * c2).sqrt() + eps) + wd * *pv;
                *pv -= lr * step;
            }
        }
    }
}

/// Trains a fresh model on `train_set`. The input normalization is fitted on
/// the training pixels; `eval_set`, if given, is scored after every epoch.
/// Same seed and data give a bit-identical model.
pub fn train<T: Scalar>(
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: ModelConfig,
    hp: &TrainConfig,
    rng: &mut RngState,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Vit<T>, TrainReport)> {
    config.validate()?;
    if train_set.num_classes() < 2 {
        return Err(Error::Invalid("training needs at least two classes".into()));
    }
    if train_set.num_classes() > config.num_classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes but the model only {}",
            train_set.num_classes(),
            config.num_classes
        )));
    }
    if hp.batch_size == 0 || hp.epochs == 0 {
        return Err(Error::Invalid(
            "batch_size and epochs must be positive".into(),
        ));
    }
    let mut vit = Vit::<T>::init(config, rng)?;
    vit.norm = train_set.channel_stats();
    let norm: InputNorm = vit.norm.clone();

    let steps_per_epoch = train_set.len().div_ceil(hp.batch_size);
    let total_steps = (steps_per_epoch * hp.epochs) as f64;
    let mut adam = Adam::new(&vit.params);
    let mut step = 0usize;
    let mut initial_loss: Option<f64> = None;
    let mut report = TrainReport { epochs: Vec::new() };

    for epoch in 0..hp.epochs {
        let shuffle_seed = rng.next_u64();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for batch in batches::<T>(train_set, hp.batch_size, shuffle_seed, Some(&norm)) {
            let images = batch.images_vec();
            let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
            let lg = loss_and_grads(&vit, &images, &labels)?;
            let loss = lg.loss.as_f64();
            let first = *initial_loss.get_or_insert(loss);
            if loss > 10.0 * first {
                return Err(Error::Training(format!(
                    "loss {loss:.4} exceeds 10x the initial {first:.4} at epoch {epoch}; lower the learning rate"
                )));
            }
            correct += lg.correct;
            loss_sum += loss * images.len() as f64;
            seen += images.len();
            let lr = hp.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            adam.update(&mut vit.params, &lg.grads, lr, hp);
            step += 1;
        }
        let eval_accuracy = match eval_set {
            Some(ds) => Some(Engine::new(&vit).accuracy(ds)?),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: 100.0 * correct as f64 / seen as f64,
            eval_accuracy,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok((vit, report))
}
