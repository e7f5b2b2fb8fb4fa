//! Optimizer and the per-experience training loop.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CsadError, Result};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};
use crate::ssvae::{LossBatch, LossBreakdown, LossNoise, SsVae};
use crate::stream::{TrainingView, NORMAL};

/// Adam with bias correction. State is sized to one parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam<A> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<A>,
    v: Vec<A>,
    t: u64,
}

impl<A: Scalar> Adam<A> {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![A::zero(); n_params],
            v: vec![A::zero(); n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [A], grad: &[A]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let (b1, b2): (A, A) = (c(self.beta1), c(self.beta2));
        let one = A::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step: A = c(self.lr / bc1);
        let inv_bc2: A = c(1.0 / bc2);
        let eps: A = c(self.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Extra loss term supplied by a continual-learning strategy.
pub trait Penalty<A>: Sync {
    fn value(&self, params: &[A]) -> f64;
    fn add_grad(&self, params: &[A], grad: &mut [A]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over steps of the batch loss.
    pub train: LossBreakdown,
    pub penalty: f64,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub experience: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub n_labelled: usize,
    pub n_replay: usize,
    pub n_unlabelled: usize,
}

/// Labelled rows (with replay appended) and unlabelled rows ready for
/// batching.
struct Prepared<A> {
    xl: Array2<A>,
    yl: Vec<usize>,
    xu: Array2<A>,
}

fn prepare<A: Scalar>(data: TrainingView<'_, A>, replay: Option<ArrayView2<'_, A>>) -> Result<Prepared<A>> {
    let mut yl: Vec<usize> = data.y_labelled.iter().map(|&v| v as usize).collect();
    let xl = match replay {
        Some(r) if r.nrows() > 0 => {
            yl.extend(std::iter::repeat_n(NORMAL as usize, r.nrows()));
            if data.n_labelled() == 0 {
                r.to_owned()
            } else {
                concatenate(Axis(0), &[data.x_labelled, r])
                    .map_err(|e| CsadError::Validation(format!("replay width: {e}")))?
            }
        }
        _ => data.x_labelled.to_owned(),
    };
    Ok(Prepared {
        xl,
        yl,
        xu: data.x_unlabelled.to_owned(),
    })
}

fn rows<A: Scalar>(x: &Array2<A>, idx: &[usize]) -> Array2<A> {
    if x.nrows() == 0 {
        return Array2::zeros((0, x.ncols()));
    }
    x.select(Axis(0), idx)
}

/// Validation total loss with a fixed noise draw.
fn validation_loss<A: Scalar>(model: &SsVae<A>, val: &Prepared<A>, noise: &LossNoise<A>) -> Result<f64> {
    let batch = LossBatch {
        x_labelled: val.xl.view(),
        y_labelled: &val.yl,
        x_unlabelled: val.xu.view(),
        noise,
    };
    Ok(model.total_loss(&batch)?.total)
}

/// Train on one experience (plus optional replay rows, labelled normal),
/// early-stopping on validation total loss and restoring the best
/// parameters. On a non-finite loss the last good parameters are restored
/// and a divergence error is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_one_experience<A: Scalar>(
    model: &mut SsVae<A>,
    experience: usize,
    data: TrainingView<'_, A>,
    val: Option<TrainingView<'_, A>>,
    replay: Option<ArrayView2<'_, A>>,
    penalty: Option<&dyn Penalty<A>>,
    rng: &mut Rng,
) -> Result<TrainHistory> {
    let cfg = model.config().clone();
    let train = prepare(data, replay)?;
    let (nl, nu) = (train.yl.len(), train.xu.nrows());
    if nl + nu == 0 {
        return Err(CsadError::Validation(format!("experience {experience} is empty")));
    }
    let val = match val {
        Some(v) if !v.is_empty() => Some(prepare(v, None)?),
        _ => None,
    };
    let (latent, k) = (cfg.latent_dim, cfg.n_classes);
    let val_noise = val
        .as_ref()
        .map(|v| LossNoise::<A>::draw(rng, v.yl.len(), v.xu.nrows(), latent, k));

    let mut adam = Adam::<A>::new(model.n_params(), cfg.learning_rate);
    let mut history = TrainHistory {
        experience,
        n_labelled: data.n_labelled(),
        n_replay: nl - data.n_labelled(),
        n_unlabelled: nu,
        ..Default::default()
    };
    let steps = nl.max(nu).div_ceil(cfg.batch_size).max(1);
    let chunk_l = nl.div_ceil(steps);
    let chunk_u = nu.div_ceil(steps);
    let mut best: Option<(f64, Vec<A>)> = None;
    let mut last_good = model.params().to_vec();
    let mut since_best = 0;
    let mut grad = vec![A::zero(); model.n_params()];

    for epoch in 0..cfg.max_epochs {
        let mut il: Vec<usize> = (0..nl).collect();
        let mut iu: Vec<usize> = (0..nu).collect();
        il.shuffle(rng);
        iu.shuffle(rng);
        let mut sum = LossBreakdown::default();
        let mut pen_sum = 0.0;
        for s in 0..steps {
            let bl = &il[(s * chunk_l).min(nl)..((s + 1) * chunk_l).min(nl)];
            let bu = &iu[(s * chunk_u).min(nu)..((s + 1) * chunk_u).min(nu)];
            if bl.is_empty() && bu.is_empty() {
                continue;
            }
            let xl = rows(&train.xl, bl);
            let yl: Vec<usize> = bl.iter().map(|&i| train.yl[i]).collect();
            let xu = rows(&train.xu, bu);
            let noise = LossNoise::draw(rng, bl.len(), bu.len(), latent, k);
            let batch = LossBatch {
                x_labelled: xl.view(),
                y_labelled: &yl,
                x_unlabelled: xu.view(),
                noise: &noise,
            };
            grad.iter_mut().for_each(|g| *g = A::zero());
            let diverged = |detail: String, model: &mut SsVae<A>| {
                model.set_params(&last_good);
                CsadError::Divergence {
                    experience,
                    epoch,
                    detail,
                }
            };
            let loss = match model.loss_and_grad(&batch, &mut grad) {
                Ok(l) => l,
                Err(CsadError::Numeric(d)) => return Err(diverged(d, model)),
                Err(e) => return Err(e),
            };
            if let Some(p) = penalty {
                pen_sum += p.value(model.params());
                p.add_grad(model.params(), &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into(), model));
            }
            adam.step(model.params_mut(), &grad);
            sum = sum + loss;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(CsadError::Divergence {
                experience,
                epoch,
                detail: "non-finite parameters".into(),
            })
            .inspect_err(|_| model.set_params(&last_good));
        }
        last_good.copy_from_slice(model.params());
        let val_total = match (&val, &val_noise) {
            (Some(v), Some(n)) => Some(validation_loss(model, v, n).map_err(|e| CsadError::Divergence {
                experience,
                epoch,
                detail: format!("validation: {e}"),
            })?),
            _ => None,
        };
        let inv = 1.0 / steps as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train: sum.scaled(inv),
            penalty: pen_sum * inv,
            val_total,
        });
        log::debug!(
            "experience {experience} epoch {epoch}: train {:.4} val {:?}",
            sum.total * inv,
            val_total
        );
        if let Some(vt) = val_total {
            if best.as_ref().is_none_or(|(b, _)| vt < *b) {
                best = Some((vt, model.params().to_vec()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        model.set_params(&p);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::derive_rng;
    use crate::ssvae::{ClassifierSpec, SsVaeConfig};
    use rand::Rng as _;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![0.0f64];
        Adam::new(1, 0.01).step(&mut p, &[5.0]);
        assert!((p[0] + 0.01).abs() < 1e-6);
    }

    fn small_model(patience: usize, epochs: usize) -> SsVae<f64> {
        let cfg = SsVaeConfig {
            input_dim: 4,
            latent_dim: 2,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            classifier: ClassifierSpec {
                conv: vec![],
                hidden: vec![4],
            },
            activation: Activation::Relu,
            max_epochs: epochs,
            early_stop_patience: patience,
            batch_size: 8,
            learning_rate: 1e-2,
            ..SsVaeConfig::default()
        };
        SsVae::new(cfg, &mut derive_rng(0, "init", 0)).unwrap()
    }

    fn data(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut r = derive_rng(seed, "d", 0);
        let x = Array2::from_shape_simple_fn((n, 4), || r.random::<f64>());
        let y = (0..n).map(|i| (i % 2) as u8).collect();
        (x, y)
    }

    #[test]
    fn history_is_finite_and_per_epoch() {
        let mut m = small_model(100, 4);
        let (xl, yl) = data(10, 1);
        let (xu, _) = data(20, 2);
        let view = TrainingView {
            x_labelled: xl.view(),
            y_labelled: &yl,
            x_unlabelled: xu.view(),
        };
        let h = train_one_experience(&mut m, 0, view, None, None, None, &mut derive_rng(1, "t", 0)).unwrap();
        assert_eq!(h.epochs.len(), 4);
        assert!(h.epochs.iter().all(|e| e.train.is_finite()));
        assert!(h.epochs[3].train.total < h.epochs[0].train.total);
    }

    #[test]
    fn early_stop_obeys_patience() {
        // tiny lr keeps the model almost fixed so validation stops improving
        let mut m = small_model(2, 50);
        let (xl, yl) = data(10, 1);
        let view = TrainingView {
            x_labelled: xl.view(),
            y_labelled: &yl,
            x_unlabelled: xl.view(),
        };
        let (vx, vy) = data(6, 9);
        let val = TrainingView {
            x_labelled: vx.view(),
            y_labelled: &vy,
            x_unlabelled: vx.view(),
        };
        let h = train_one_experience(&mut m, 0, view, Some(val), None, None, &mut derive_rng(2, "t", 0)).unwrap();
        let best = h.best_epoch.unwrap();
        if h.stopped_early {
            assert_eq!(h.epochs.len(), best + 1 + 2);
            let bv = h.epochs[best].val_total.unwrap();
            assert!(h.epochs[best + 1..].iter().all(|e| e.val_total.unwrap() >= bv));
        } else {
            assert_eq!(h.epochs.len(), 50);
        }
    }

    #[test]
    fn replay_rows_join_labelled_set() {
        let mut m = small_model(100, 1);
        let (xl, yl) = data(4, 1);
        let (r, _) = data(3, 5);
        let none = Array2::zeros((0, 4));
        let view = TrainingView {
            x_labelled: xl.view(),
            y_labelled: &yl,
            x_unlabelled: none.view(),
        };
        let h = train_one_experience(&mut m, 2, view, None, Some(r.view()), None, &mut derive_rng(3, "t", 0)).unwrap();
        assert_eq!((h.n_labelled, h.n_replay, h.experience), (4, 3, 2));
    }

    #[test]
    fn empty_experience_rejected() {
        let mut m = small_model(1, 1);
        let e = Array2::<f64>::zeros((0, 4));
        let view = TrainingView {
            x_labelled: e.view(),
            y_labelled: &[],
            x_unlabelled: e.view(),
        };
        assert!(train_one_experience(&mut m, 0, view, None, None, None, &mut derive_rng(0, "t", 0)).is_err());
    }
}
