//! Losses, learning-rate schedule and the SGD update.
//!
//! Each loss has a plain-value form (for reporting and tests) and a graph
//! form used during training; the two compute the same expression.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::patch::{gather_masked, patchify, ImageTensor, MaskPlan};
use crate::tensor::Tensor;

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `logits: [N, K]` against class indices.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = classification_loss_graph(&mut g, l, labels)?;
    Ok(g.value(loss).item().unwrap())
}

pub fn classification_loss_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::InconsistentDims(format!(
            "logits must be N x K, got {shape:?}"
        )));
    };
    if n != labels.len() || n == 0 {
        return Err(Error::InconsistentDims(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    check_labels(labels, k)?;
    let logp = g.log_softmax(logits)?;
    let logp = g.reshape(logp, vec![n, k, 1])?;
    let picked = g.gather(logp, labels.iter().map(|&l| vec![l]).collect(), false)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

fn check_recon(shape_a: &[usize], shape_b: &[usize], plan: &MaskPlan) -> Result<()> {
    if shape_a != shape_b {
        return Err(Error::InconsistentDims(format!(
            "reconstruction {shape_b:?} vs target {shape_a:?}"
        )));
    }
    if shape_a[0] != plan.batch || shape_a[1] != plan.tokens {
        return Err(Error::PlanMismatch(format!(
            "plan for {}x{} tokens, tensors are {}x{}",
            plan.batch, plan.tokens, shape_a[0], shape_a[1]
        )));
    }
    Ok(())
}

/// Masked-patch MSE between image tensors: squared error summed over each
/// sample's masked patches, divided by the masked patch count and the patch
/// dimension, then averaged over the batch. Zero when nothing is masked.
pub fn reconstruction_loss(
    target: &ImageTensor,
    recon: &ImageTensor,
    plan: &MaskPlan,
    patch_size: usize,
) -> Result<f64> {
    if target.dims() != recon.dims() {
        return Err(Error::InconsistentDims(format!(
            "reconstruction {:?} vs target {:?}",
            recon.dims(),
            target.dims()
        )));
    }
    let t = patchify(target, patch_size)?;
    let r = patchify(recon, patch_size)?;
    let (tm, rm) = (gather_masked(&t, plan)?, gather_masked(&r, plan)?);
    let m = plan.masked_per_sample();
    if m == 0 {
        return Ok(0.0);
    }
    let sse: f64 = tm
        .values
        .iter()
        .zip(&rm.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / (plan.batch * m * t.patch_dim()) as f64)
}

/// Graph form over token tensors `[B, S, patch_dim]`; `target` is constant.
pub fn reconstruction_loss_graph(
    g: &mut Graph,
    recon: Var,
    target: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    let (rs, ts) = (g.value(recon).shape().to_vec(), g.value(target).shape().to_vec());
    if rs.len() != 3 {
        return Err(Error::InconsistentDims(format!("tokens must be B x S x P, got {rs:?}")));
    }
    check_recon(&ts, &rs, plan)?;
    let m = plan.masked_per_sample();
    if m == 0 {
        let z = g.scale(recon, 0.0)?;
        return g.mean(z);
    }
    let r = g.gather(recon, plan.masked.clone(), false)?;
    let t = g.gather(target, plan.masked.clone(), false)?;
    let diff = g.sub(r, t)?;
    let sse = g.sum_of_squares(diff)?;
    g.scale(sse, 1.0 / (plan.batch * m * rs[2]) as f64)
}

/// Equal-weight average of per-target reconstruction losses.
pub fn average_losses_graph(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses.split_first().ok_or(Error::EmptyInput)?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &l in rest {
        acc = g.add(acc, l)?;
    }
    g.scale(acc, 1.0 / losses.len() as f64)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    Ok(())
}

/// `lambda * cls + (1 - lambda) * rec`, evaluated as
/// `lambda * (cls - rec) + rec` with exact endpoints.
pub fn joint_loss(cls: f64, rec: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(if lambda == 1.0 {
        cls
    } else if lambda == 0.0 {
        rec
    } else {
        lambda * (cls - rec) + rec
    })
}

pub fn joint_loss_graph(g: &mut Graph, cls: Var, rec: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return Ok(cls);
    }
    if lambda == 0.0 {
        return Ok(rec);
    }
    let d = g.sub(cls, rec)?;
    let d = g.scale(d, lambda)?;
    g.add(d, rec)
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Momentum SGD with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update. `grads` is aligned with `params` storage order. Decay
    /// (`p -= lr * wd * p`) skips biases and normalization parameters.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InconsistentDims(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        }
        let names = params.names().to_vec();
        for (((p, g), v), name) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.velocity.iter_mut())
            .zip(&names)
        {
            if p.shape() != g.shape() || v.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let decay = if ParamStore::decays(name) {
                lr * self.weight_decay
            } else {
                0.0
            };
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *pv -= decay * *pv;
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use crate::patch::sample_mask;
    use crate::rng::RngKey;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
        assert!((classification_loss(&uniform, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let confident = Tensor::new(vec![1, 2], vec![60.0, 0.0]).unwrap();
        assert!(classification_loss(&confident, &[0]).unwrap() < 1e-20);
        // p_true = 1 / (1 + 3) with logits (0, ln 3)
        let quarter = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        assert!((classification_loss(&quarter, &[0]).unwrap() - 4f64.ln()).abs() < 1e-14);
        assert!(matches!(
            classification_loss(&quarter, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    fn img(values: impl Fn(usize) -> f64) -> ImageTensor {
        ImageTensor::from_values([2, 1, 3, 16, 16], (0..2 * 3 * 256).map(values).collect())
            .unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let target = img(|i| (i % 7) as f64 / 7.0);
        let plan = sample_mask(2, 4, 0.5, RngKey::new(3)).unwrap();
        assert_eq!(reconstruction_loss(&target, &target, &plan, 8).unwrap(), 0.0);

        // Perturb only the visible patches.
        let mut tokens = patchify(&target, 8).unwrap();
        for b in 0..2 {
            for &s in &plan.visible[b] {
                let o = (b * 4 + s) * 192;
                tokens.values[o..o + 192].iter_mut().for_each(|v| *v += 3.0);
            }
        }
        let perturbed = crate::patch::unpatchify(&tokens, target.dims()).unwrap();
        assert_eq!(reconstruction_loss(&target, &perturbed, &plan, 8).unwrap(), 0.0);

        // One masked patch with constant error 0.5.
        let single = sample_mask(1, 4, 0.25, RngKey::new(1)).unwrap();
        let t1 = target.sample(0);
        let mut p = patchify(&t1, 8).unwrap();
        let s = single.masked[0][0];
        p.values[s * 192..(s + 1) * 192].iter_mut().for_each(|v| *v += 0.5);
        let r1 = crate::patch::unpatchify(&p, t1.dims()).unwrap();
        assert_eq!(reconstruction_loss(&t1, &r1, &single, 8).unwrap(), 0.25);
    }

    #[test]
    fn graph_and_value_reconstruction_agree() {
        let target = img(|i| ((i * 13) % 17) as f64 / 17.0);
        let recon = img(|i| ((i * 5) % 11) as f64 / 11.0);
        let plan = sample_mask(2, 4, 0.75, RngKey::new(8)).unwrap();
        let direct = reconstruction_loss(&target, &recon, &plan, 8).unwrap();
        let mut g = Graph::new();
        let r = g.param(patchify(&recon, 8).unwrap().to_tensor());
        let t = g.constant(patchify(&target, 8).unwrap().to_tensor());
        let l = reconstruction_loss_graph(&mut g, r, t, &plan).unwrap();
        assert!((g.value(l).item().unwrap() - direct).abs() < 1e-15);

        // Zero gradient on visible coordinates.
        let grads = g.backward(l).unwrap();
        let gr = grads.get(r).unwrap();
        for b in 0..2 {
            for &s in &plan.visible[b] {
                let o = (b * 4 + s) * 192;
                assert!(gr.data()[o..o + 192].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn multi_target_average_of_identical_losses() {
        let target = img(|i| (i % 5) as f64 / 5.0);
        let recon = img(|i| (i % 3) as f64 / 3.0);
        let plan = sample_mask(2, 4, 0.5, RngKey::new(2)).unwrap();
        let mut g = Graph::new();
        let r = g.constant(patchify(&recon, 8).unwrap().to_tensor());
        let t = g.constant(patchify(&target, 8).unwrap().to_tensor());
        let a = reconstruction_loss_graph(&mut g, r, t, &plan).unwrap();
        let b = reconstruction_loss_graph(&mut g, r, t, &plan).unwrap();
        let avg = average_losses_graph(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(avg).item(), g.value(a).item());
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_loss(1.0, 2.0, 0.1).unwrap(), 1.9);
        assert_eq!(joint_loss(0.37, 2.9, 1.0).unwrap(), 0.37);
        assert_eq!(joint_loss(0.37, 2.9, 0.0).unwrap(), 2.9);
        assert!(joint_loss(1.0, 1.0, 1.01).is_err());
        assert!(joint_loss(1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 5e-5, 1e-6).unwrap(), 5e-5);
        assert_eq!(cosine_lr(100, 100, 5e-5, 1e-6).unwrap(), 1e-6);
        assert!((cosine_lr(50, 100, 5e-5, 1e-6).unwrap() - 2.55e-5).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 5e-5, 1e-6).is_err());
    }

    fn store(value: f64, name: &str) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert(name, Tensor::new(vec![1], vec![value]).unwrap());
        ps
    }

    #[test]
    fn sgd_examples() {
        let zero = [Tensor::zeros(&[1])];
        let mut ps = store(2.0, "w");
        Sgd::new(0.9, 0.0).step(&mut ps, &zero, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[2.0]);

        let mut ps = store(2.0, "w");
        Sgd::new(0.9, 0.05).step(&mut ps, &zero, 1.0).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[2.0 * 0.95]);

        let mut ps = store(2.0, "w.bias");
        Sgd::new(0.9, 0.05).step(&mut ps, &zero, 1.0).unwrap();
        assert_eq!(ps.get("w.bias").unwrap().data(), &[2.0]);

        // f(p) = p^2 from p = 1
        let mut ps = store(1.0, "w");
        let grad = [Tensor::new(vec![1], vec![2.0]).unwrap()];
        Sgd::new(0.0, 0.0).step(&mut ps, &grad, 0.1).unwrap();
        assert!((ps.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);

        let mut ps = ParamStore::new();
        ps.register("w", &[2], Init::Zeros, RngKey::new(0));
        assert!(Sgd::new(0.0, 0.0).step(&mut ps, &zero, 0.1).is_err());
    }

    #[test]
    fn momentum_accumulates() {
        let mut ps = store(0.0, "w");
        let grad = [Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut opt = Sgd::new(0.5, 0.0);
        opt.step(&mut ps, &grad, 1.0).unwrap();
        opt.step(&mut ps, &grad, 1.0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(ps.get("w").unwrap().data(), &[-2.5]);
    }
}
