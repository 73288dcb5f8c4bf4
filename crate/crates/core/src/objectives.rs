//! Recommendation loss, contrastive regularization, view construction, and
//! the Adam update.

use rand::{Rng, RngCore};

use crate::autodiff::{cl_reg_forward, rec_loss_row, Graph, RecLossForm, Tensor, Var};
use crate::data::{PaddedBatch, TargetIndex, TrainingExample};
use crate::encoder::{encoder_forward, last_hidden, BoundParams, ForwardCtx, ModelConfig, ModelParams};
use crate::error::{bail, Result};
use crate::mixer::RampSchedule;
use crate::scalar::Scalar;

/// Loss of one probability row against its target.
pub fn rec_loss<T: Scalar>(probs: &[T], target: usize, form: RecLossForm) -> Result<T> {
    if target == 0 {
        bail!(Data, "target is the padding item");
    }
    if target >= probs.len() {
        bail!(Data, "target {target} outside vocabulary of {}", probs.len());
    }
    Ok(rec_loss_row(probs, target, form))
}

/// Last-position vectors of the two augmented views, both `[B, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatchViews<T> {
    pub h_prime: Tensor<T>,
    pub h_s_prime: Tensor<T>,
}

pub fn cl_reg_loss<T: Scalar>(views: &ContrastiveBatchViews<T>, tau: f64) -> Result<T> {
    let (a, b) = (&views.h_prime, &views.h_s_prime);
    if a.shape.len() != 2 || a.shape != b.shape {
        bail!(Dimension, "views must share a [B, d] shape, got {:?} and {:?}", a.shape, b.shape);
    }
    if a.shape[0] < 2 {
        bail!(Config, "contrastive regularization needs B >= 2, got {}", a.shape[0]);
    }
    if !(tau > 0.0) {
        bail!(Config, "temperature must be positive, got {tau}");
    }
    Ok(cl_reg_forward(&a.data, &b.data, a.shape[0], a.shape[1], T::lit(tau), false).0)
}

pub fn total_loss<T: Scalar>(rec: T, clreg: T, lambda: f64) -> T {
    rec + T::lit(lambda) * clreg
}

/// Randomness consumed while building views: one dropout stream per view
/// and one for drawing supervised positives.
pub struct ViewRngs<'a> {
    pub unsupervised: &'a mut (dyn RngCore + 'static),
    pub supervised: &'a mut (dyn RngCore + 'static),
    pub sampling: &'a mut (dyn RngCore + 'static),
}

/// Graph handles of both views plus the drawn positives (`None` marks a
/// fallback to the anchor's own sequence).
#[derive(Debug, Clone)]
pub struct ViewVars {
    pub h_prime: Var,
    pub h_s_prime: Var,
    pub positives: Vec<Option<usize>>,
}

/// Uniformly draws another training example with the same target for each
/// anchor.
pub fn sample_positives(anchors: &[usize], examples: &[TrainingExample], index: &TargetIndex, rng: &mut dyn RngCore) -> Vec<Option<usize>> {
    anchors
        .iter()
        .map(|&a| {
            let pool = index.get(examples[a].target);
            let others = pool.len() - usize::from(pool.contains(&a));
            if others == 0 {
                return None;
            }
            let mut k = rng.random_range(0..others);
            for &c in pool {
                if c == a {
                    continue;
                }
                if k == 0 {
                    return Some(c);
                }
                k -= 1;
            }
            unreachable!("draw within pool bounds")
        })
        .collect()
}

/// Second stochastic pass over the anchors and a pass over same-target
/// sequences, each reduced to its last position.
#[allow(clippy::too_many_arguments)]
pub fn build_views<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    batch: &PaddedBatch,
    anchors: &[usize],
    examples: &[TrainingExample],
    index: &TargetIndex,
    config: &ModelConfig,
    schedule: &RampSchedule<f64>,
    rngs: ViewRngs<'_>,
) -> Result<ViewVars> {
    if anchors.len() != batch.len() {
        bail!(Dimension, "{} anchors for a batch of {}", anchors.len(), batch.len());
    }
    let b = batch.len();
    let mut ctx = ForwardCtx::train(rngs.unsupervised);
    let h = encoder_forward(g, bound, &batch.items, b, config, schedule, &mut ctx)?;
    let h_prime = last_hidden(g, h)?;
    let positives = sample_positives(anchors, examples, index, rngs.sampling);
    let n = config.max_len;
    let mut items = Vec::with_capacity(b * n);
    for (row, p) in positives.iter().enumerate() {
        match p {
            Some(p) => items.extend_from_slice(&examples[*p].input),
            None => items.extend_from_slice(&batch.items[row * n..(row + 1) * n]),
        }
    }
    let mut ctx = ForwardCtx::train(rngs.supervised);
    let h = encoder_forward(g, bound, &items, b, config, schedule, &mut ctx)?;
    let h_s_prime = last_hidden(g, h)?;
    Ok(ViewVars { h_prime, h_s_prime, positives })
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros = || params.entries.iter().map(|p| vec![T::zero(); p.value.real_len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }
}

/// Gradients of every trainable parameter after `backward`; frozen
/// parameters map to `None`.
pub fn collect_grads<T: Scalar>(g: &Graph<T>, params: &ModelParams<T>, bound: &BoundParams) -> Vec<Option<Vec<T>>> {
    params.entries.iter().zip(&bound.vars).map(|(p, &v)| p.trainable.then(|| g.flat_grad(v))).collect()
}

/// One update of every trainable parameter; the gradient slots are emptied
/// afterwards.
pub fn adam_step<T: Scalar>(params: &mut ModelParams<T>, grads: &mut [Option<Vec<T>>], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.entries.len() || state.m.len() != params.entries.len() {
        bail!(Dimension, "gradient and moment lists must match the {} parameters", params.entries.len());
    }
    for (p, g) in params.entries.iter().zip(grads.iter()) {
        match g {
            None if p.trainable => bail!(Contract, "missing gradient for trainable parameter {}", p.name),
            Some(g) if g.len() != p.value.real_len() => {
                bail!(Dimension, "gradient of {} has {} entries, expected {}", p.name, g.len(), p.value.real_len())
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - T::lit(state.beta1.powi(t));
    let c2 = T::one() - T::lit(state.beta2.powi(t));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    for (i, p) in params.entries.iter_mut().enumerate() {
        let Some(g) = grads[i].take() else { continue };
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, gj) in g.into_iter().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            p.value.set_flat(j, p.value.get_flat(j) - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Value;
    use crate::encoder::NamedParam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_two_item_case() {
        let l = rec_loss(&[0.0, 0.5, 0.5], 1, RecLossForm::BinarySum).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let near = rec_loss(&[0.0, 1.0 - 1e-12, 1e-12], 1, RecLossForm::BinarySum).unwrap();
        assert!(near < 1e-6);
        assert!(rec_loss(&[0.0, 1.0], 0, RecLossForm::BinarySum).is_err());
    }

    #[test]
    fn identical_views_give_two_log_two() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.1, 0.5, -0.2, 0.1]).unwrap();
        let views = ContrastiveBatchViews { h_prime: t.clone(), h_s_prime: t };
        let l = cl_reg_loss(&views, 1.0).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let one = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
        assert!(cl_reg_loss(&ContrastiveBatchViews { h_prime: one.clone(), h_s_prime: one }, 1.0).is_err());
    }

    #[test]
    fn strong_positive_drives_loss_to_zero() {
        let a = Tensor::new(vec![2, 2], vec![30.0, 0.0, 0.0, 30.0]).unwrap();
        let views = ContrastiveBatchViews { h_prime: a.clone(), h_s_prime: a };
        assert!(cl_reg_loss(&views, 1.0).unwrap() < 1e-100);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 1.0), 3.0);
        assert_eq!(total_loss(1.5, 7.0, 0.0), 1.5);
    }

    #[test]
    fn unique_targets_force_fallbacks() {
        let ex: Vec<TrainingExample> = (1..5).map(|t| TrainingExample { user: t, input: vec![t], target: t }).collect();
        let index = crate::data::build_target_index(&ex);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_positives(&[0, 1, 2, 3], &ex, &index, &mut rng), vec![None; 4]);
    }

    #[test]
    fn positives_share_target_and_replay_under_seed() {
        let ex: Vec<TrainingExample> = (0..40).map(|i| TrainingExample { user: i, input: vec![i], target: 1 + i % 3 }).collect();
        let index = crate::data::build_target_index(&ex);
        let anchors: Vec<usize> = (0..40).collect();
        let a = sample_positives(&anchors, &ex, &index, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_positives(&anchors, &ex, &index, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        for (anchor, p) in anchors.iter().zip(&a) {
            let p = p.unwrap();
            assert_ne!(p, *anchor);
            assert_eq!(ex[p].target, ex[*anchor].target);
        }
    }

    fn scalar_params(x: f64) -> ModelParams<f64> {
        ModelParams { entries: vec![NamedParam { name: "x".into(), value: Value::Real(Tensor::scalar(x)), trainable: true }] }
    }

    #[test]
    fn adam_single_step_by_hand() {
        // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4.
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p, 0.001);
        let mut grads = vec![Some(vec![2.0])];
        adam_step(&mut p, &mut grads, &mut s).unwrap();
        let expect = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p.real(0).item() - expect).abs() < 1e-15);
        assert_eq!(s.step, 1);
        assert!(grads[0].is_none());
    }

    #[test]
    fn adam_zero_gradient_and_asymptote() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p, 0.001);
        adam_step(&mut p, &mut [Some(vec![0.0])], &mut s).unwrap();
        assert_eq!(p.real(0).item(), 0.3);
        let mut delta = 0.0;
        for _ in 0..5000 {
            let prev = p.real(0).item();
            adam_step(&mut p, &mut [Some(vec![0.7])], &mut s).unwrap();
            delta = prev - p.real(0).item();
        }
        assert!((delta - 0.001).abs() < 1e-6, "{delta}");
    }

    #[test]
    fn adam_missing_gradient_is_contract_error() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p, 0.001);
        assert!(matches!(adam_step(&mut p, &mut [None], &mut s), Err(crate::Error::Contract(_))));
    }
}
