//! Finite-difference verification of model gradients.

use hetfuse_tensor::{Element, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{build_model, ArchitectureConfig, Model};
use crate::objectives::dice_bce_from_logits;

/// Relative gradient error of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    /// Analytic gradient at 64-bit vs central differences.
    pub rel64: f64,
    /// Analytic gradient at 32-bit vs the same central differences.
    pub rel32: f64,
}

pub struct Problem {
    pub model: Model,
    pub volume: Option<Tensor<f64>>,
    pub image: Option<Tensor<f64>>,
    pub target: Tensor<f64>,
}

fn loss_and_grads<T: Element>(p: &Problem, store: &ParamStore<T>, want_grads: bool) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut g = if want_grads { Graph::<T>::new() } else { Graph::<T>::inference() };
    let v = p.volume.as_ref().map(|t| g.input(t.cast()));
    let i = p.image.as_ref().map(|t| g.input(t.cast()));
    let logits = p.model.forward_logits(&mut g, store, v, i)?;
    let target: Tensor<T> = p.target.cast();
    let (loss, grad) = dice_bce_from_logits(g.value(logits).data(), target.data())?;
    if !want_grads {
        return Ok((loss, Vec::new()));
    }
    let grad = Tensor::from_vec(g.shape(logits), grad).expect("one gradient per logit");
    let l = g.external_scalar(logits, T::of(loss), grad);
    Ok((loss, g.backward(l, store.len()).by_param))
}

/// Builds a problem with randomized parameters (including normalization
/// affine terms) and random inputs of the given en-face/depth dims.
pub fn random_problem(
    config: &ArchitectureConfig,
    volume_dims: Option<[usize; 3]>,
    image_dims: Option<[usize; 2]>,
    seed: u64,
) -> Result<Problem> {
    let mut model = build_model(&ArchitectureConfig { init_seed: seed, ..config.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for p in model.params.iter_mut() {
        if p.name.ends_with(".gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let mut rand = |shape: [usize; 5]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let volume = volume_dims.map(|[h, w, d]| rand([1, 1, h, w, d]));
    let image = image_dims.map(|[h, w]| rand([1, 1, h, w, 1]));
    let (th, tw) = match (volume_dims, image_dims) {
        (Some(v), Some(i)) => (v[0].min(i[0]), v[1].min(i[1])),
        (Some(v), None) => (v[0], v[1]),
        (None, Some(i)) => (i[0], i[1]),
        (None, None) => (1, 1),
    };
    let target = Tensor::from_fn([1, 1, th, tw, 1], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    Ok(Problem { model, volume, image, target })
}

/// Compares analytic gradients against central differences on up to
/// `entries_per_group` random entries of every trainable tensor.
pub fn check_problem(p: &Problem, entries_per_group: usize, seed: u64) -> Result<Vec<GroupError>> {
    let store64: ParamStore<f64> = p.model.params.cast();
    let (_, g64) = loss_and_grads(p, &store64, true)?;
    let (_, g32) = loss_and_grads(p, &p.model.params, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut out = Vec::new();
    for (idx, param) in p.model.params.iter().enumerate() {
        if !param.trainable {
            continue;
        }
        let n = param.value.len();
        let picks: Vec<usize> = if n <= entries_per_group { (0..n).collect() } else { (0..entries_per_group).map(|_| rng.random_range(0..n)).collect() };
        let (mut num64, mut num32, mut den) = (0.0, 0.0, 0.0);
        for &k in &picks {
            let central = |step: f64| -> Result<f64> {
                let mut plus = store64.clone();
                plus.get_mut(hetfuse_tensor::ParamId(idx)).value.data_mut()[k] += step;
                let mut minus = store64.clone();
                minus.get_mut(hetfuse_tensor::ParamId(idx)).value.data_mut()[k] -= step;
                Ok((loss_and_grads(p, &plus, false)?.0 - loss_and_grads(p, &minus, false)?.0) / (2.0 * step))
            };
            // a step straddling a ReLU kink or a max-pool switch is biased:
            // shrink it until two successive estimates agree
            let mut step = h;
            let mut fd = central(step)?;
            for _ in 0..3 {
                step /= 10.0;
                let finer = central(step)?;
                let agree = (finer - fd).abs() <= 1e-6 * finer.abs().max(1e-3);
                fd = finer;
                if agree {
                    break;
                }
            }
            let a64 = g64[idx].as_ref().map_or(0.0, |g| g.data()[k]);
            let a32 = g32[idx].as_ref().map_or(0.0, |g| f64::from(g.data()[k]));
            num64 += (a64 - fd).powi(2);
            num32 += (a32 - fd).powi(2);
            den += fd * fd;
        }
        let scale = den.sqrt().max(1e-7);
        out.push(GroupError { name: param.name.clone(), rel64: num64.sqrt() / scale, rel32: num32.sqrt() / scale });
    }
    Ok(out)
}
