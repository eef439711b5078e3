#![allow(dead_code)]

use ccdb::linalg::SymmetricMatrix;
use ccdb::model::{ce_loss_grad, compactness_loss_grad, Activation, Dense, Mlp};
use ccdb::reweight::{ccdb_gradient, ccdb_objective, ClassWeightState};
use ccdb::stats::marginal_summary;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over flattened values.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub struct ReweightInstance {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub state: ClassWeightState<f64>,
}

/// Feature dims 2–8, classes 2–4, 4–12 samples per class, logits in [−1, 1].
pub fn reweight_instance(rng: &mut ChaCha8Rng) -> ReweightInstance {
    let d = rng.gen_range(2..=8);
    let k = rng.gen_range(2..=4);
    let mut labels = Vec::new();
    for class in 0..k {
        let m = rng.gen_range(4..=12);
        labels.extend(std::iter::repeat_n(class, m));
    }
    let mut z = normal_matrix(rng, labels.len(), d);
    for (mut row, &y) in z.rows_mut().into_iter().zip(&labels) {
        row[0] += y as f64;
    }
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let logits = members
        .iter()
        .map(|m| Array1::from_shape_fn(m.len(), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let state = ClassWeightState::from_parts(members, logits).unwrap();
    ReweightInstance {
        z,
        labels,
        num_classes: k,
        state,
    }
}

/// Relative error of the analytic objective gradient against central differences.
pub fn reweight_fd_error(inst: &ReweightInstance, step: f64) -> f64 {
    let anchor = marginal_summary(inst.z.view()).unwrap();
    let analytic = ccdb_gradient(inst.z.view(), &inst.labels, &inst.state, &anchor).unwrap();
    let members: Vec<Vec<usize>> = (0..inst.num_classes)
        .map(|k| inst.state.members(k).to_vec())
        .collect();
    let base: Vec<Array1<f64>> = (0..inst.num_classes)
        .map(|k| inst.state.logits(k).clone())
        .collect();
    let eval = |logits: Vec<Array1<f64>>| {
        let state = ClassWeightState::from_parts(members.clone(), logits).unwrap();
        ccdb_objective(inst.z.view(), &inst.labels, &state, &anchor).unwrap()
    };
    let mut a = Vec::new();
    let mut fd = Vec::new();
    for k in 0..inst.num_classes {
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][i] += step;
            let mut minus = base.clone();
            minus[k][i] -= step;
            fd.push((eval(plus) - eval(minus)) / (2.0 * step));
            a.push(analytic[k][i]);
        }
    }
    relative_error(&a, &fd, 1e-6)
}

pub struct MlpInstance {
    pub model: Mlp<f64>,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub lambda: f64,
}

/// Up to three hidden ReLU layers, widths and input dims at most 16.
pub fn mlp_instance(rng: &mut ChaCha8Rng) -> MlpInstance {
    let input = rng.gen_range(2..=16);
    let depth = rng.gen_range(0..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=16)).collect();
    let k = rng.gen_range(2..=4);
    // Nonzero biases keep pre-activations off the ReLU kink when a layer goes dead.
    let init = Mlp::<f64>::init(input, &hidden, k, rng.gen()).unwrap();
    let layers = init
        .layers()
        .iter()
        .map(|l| {
            let bias = Array1::from_shape_fn(l.outputs(), |_| rng.gen_range(-0.5..0.5));
            Dense::new(l.weight().clone(), bias, l.activation()).unwrap()
        })
        .collect();
    let model = Mlp::new(layers, init.seed()).unwrap();
    let n = rng.gen_range(4..=16);
    let labels = (0..n)
        .map(|i| if i < k { i } else { rng.gen_range(0..k) })
        .collect();
    MlpInstance {
        model,
        x: normal_matrix(rng, n, input),
        labels,
        num_classes: k,
        lambda: rng.gen_range(0.0..1.0),
    }
}

fn mlp_loss(model: &Mlp<f64>, inst: &MlpInstance) -> f64 {
    let pass = model.forward(inst.x.view()).unwrap();
    let (ce, _) = ce_loss_grad(pass.logits().view(), &inst.labels).unwrap();
    let (compact, _) = compactness_loss_grad(
        pass.features().view(),
        &inst.labels,
        inst.num_classes,
        inst.lambda,
    )
    .unwrap();
    ce + compact
}

fn with_param(model: &Mlp<f64>, layer: usize, index: usize, delta: f64) -> Mlp<f64> {
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, dense)| {
            let mut weight = dense.weight().clone();
            let mut bias = dense.bias().clone();
            if l == layer {
                let w_len = weight.len();
                if index < w_len {
                    weight.as_slice_mut().unwrap()[index] += delta;
                } else {
                    bias[index - w_len] += delta;
                }
            }
            Dense::new(weight, bias, dense.activation()).unwrap()
        })
        .collect();
    Mlp::new(layers, model.seed()).unwrap()
}

/// Relative error of backprop (cross-entropy plus compactness) against central differences.
pub fn mlp_fd_error(inst: &MlpInstance, step: f64) -> f64 {
    let pass = inst.model.forward(inst.x.view()).unwrap();
    let (_, dlogits) = ce_loss_grad(pass.logits().view(), &inst.labels).unwrap();
    let (_, dfeatures) = compactness_loss_grad(
        pass.features().view(),
        &inst.labels,
        inst.num_classes,
        inst.lambda,
    )
    .unwrap();
    let depth = inst.model.layers().len();
    let dfeatures = (depth > 1).then_some(dfeatures);
    let grads = inst
        .model
        .backward(&pass, dlogits.view(), dfeatures.as_ref().map(|d| d.view()))
        .unwrap();
    let mut a = Vec::new();
    let mut fd = Vec::new();
    for (l, dense) in inst.model.layers().iter().enumerate() {
        let count = dense.weight().len() + dense.bias().len();
        for index in 0..count {
            let plus = mlp_loss(&with_param(&inst.model, l, index, step), inst);
            let minus = mlp_loss(&with_param(&inst.model, l, index, -step), inst);
            fd.push((plus - minus) / (2.0 * step));
        }
        a.extend(grads.weights[l].iter().copied());
        a.extend(grads.biases[l].iter().copied());
    }
    relative_error(&a, &fd, 1e-6)
}

/// `A Aᵀ / d + 0.1 I` for a standard normal `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> SymmetricMatrix<f64> {
    let a = normal_matrix(rng, d, d);
    let mut s = a.dot(&a.t()) / d as f64;
    for i in 0..d {
        s[[i, i]] += 0.1;
    }
    SymmetricMatrix::new(s).unwrap()
}

/// Smallest |pre-activation| feeding a ReLU; finite differences are only
/// meaningful when the step cannot cross a kink.
pub fn relu_margin(inst: &MlpInstance) -> f64 {
    let mut margin = f64::INFINITY;
    let mut a = inst.x.clone();
    for layer in inst.model.layers() {
        let pre = a.dot(layer.weight()) + layer.bias();
        if layer.activation() == Activation::Relu {
            margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            a = pre.mapv(|v| v.max(0.0));
        } else {
            a = pre;
        }
    }
    margin
}

/// One-dimensional mirrored instance: class 0 holds three points at +1 and
/// one at −1, class 1 the reflection. Mean matching gives the conflicting
/// point weight 1/2 and each aligned point 1/6.
pub fn mirrored_instance() -> (Array2<f64>, Vec<usize>) {
    let z =
        Array2::from_shape_vec((8, 1), vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0]).unwrap();
    (z, vec![0, 0, 0, 0, 1, 1, 1, 1])
}
