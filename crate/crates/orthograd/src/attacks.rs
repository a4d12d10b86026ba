//! Gradient-based L-infinity attacks: FGSM, I-FGSM, MI-FGSM, PGD.
//!
//! All four share one projected-ascent loop, so the degenerate collapses
//! hold exactly: FGSM is I-FGSM with one step of size epsilon, PGD without
//! random start is I-FGSM, and MI-FGSM with zero momentum is I-FGSM.
//! Epsilon is a fraction of the `[0, 1]` dynamic range.

use crate::error::{Error, Result};
use crate::nn::{forward_with_input, loss, Model};
use crate::tensor::Tensor;
use crate::util;

pub const MAX_EPSILON: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
    Mifgsm,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Ifgsm => "ifgsm",
            Self::Mifgsm => "mifgsm",
            Self::Pgd => "pgd",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "fgsm" => Ok(Self::Fgsm),
            "ifgsm" => Ok(Self::Ifgsm),
            "mifgsm" => Ok(Self::Mifgsm),
            "pgd" => Ok(Self::Pgd),
            other => Err(Error::InvalidArgument(format!("unknown attack kind `{other}`"))),
        }
    }

    pub const ALL: [AttackKind; 4] = [Self::Fgsm, Self::Pgd, Self::Ifgsm, Self::Mifgsm];
}

/// A fully explicit perturbation procedure.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L-infinity budget as a fraction of the dynamic range, in `[0, 0.08]`.
    pub epsilon: f64,
    pub iters: usize,
    /// Per-step size, same units as epsilon.
    pub alpha: f64,
    /// Momentum decay (MI-FGSM only).
    pub mu: f64,
    /// Uniform in-ball initialization (PGD only).
    pub random_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    /// Spec with the standard defaults for `kind`: 10 iterations,
    /// `alpha = epsilon/4` for PGD and `epsilon/iters` for the other
    /// iterative kinds, momentum decay 1.0.
    pub fn new(kind: AttackKind, epsilon: f64) -> Result<Self> {
        if !(0.0..=MAX_EPSILON).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {epsilon} outside [0, {MAX_EPSILON}]"
            )));
        }
        let iters = match kind {
            AttackKind::Fgsm => 1,
            _ => 10,
        };
        let alpha = match kind {
            AttackKind::Fgsm => epsilon,
            AttackKind::Pgd => epsilon / 4.0,
            _ => epsilon / iters as f64,
        };
        Ok(Self {
            kind,
            epsilon,
            iters,
            alpha,
            mu: 1.0,
            random_start: kind == AttackKind::Pgd,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Soft diagnostics: conditions that are legal but usually unintended.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kind != AttackKind::Fgsm && self.alpha > self.epsilon {
            out.push(format!(
                "alpha {} exceeds epsilon {}; every step will be clipped",
                self.alpha, self.epsilon
            ));
        }
        if self.iters == 0 {
            out.push("iters = 0 returns the input unchanged".to_string());
        }
        out
    }
}

/// One perturbed image with its measured budget use.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub true_label: usize,
    pub linf: f64,
}

/// A perturbed batch plus the per-image L-infinity distances.
#[derive(Debug, Clone)]
pub struct CraftedBatch {
    pub perturbed: Tensor,
    pub linf: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Raw (unnormalized) gradient of the batch-mean loss w.r.t. the inputs.
/// The batch mean only scales each image's gradient by a positive constant,
/// which the sign and the L1-normalized momentum update both cancel.
fn input_grad_raw(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let g = crate::graph::Graph::new();
    let input = g.leaf(x.clone());
    let logits = forward_with_input(model, &input)?;
    let ce = loss(&logits, labels)?;
    Ok(ce.grad(&[&input])?.remove(0))
}

/// Craft adversarial examples for a whole batch.
///
/// `first_sample_index` feeds the per-image random-start seeds, so results
/// are identical however the caller shards a sample set into batches.
pub fn craft_batch(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    first_sample_index: u64,
) -> Result<CraftedBatch> {
    if !(0.0..=MAX_EPSILON).contains(&spec.epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {} outside [0, {MAX_EPSILON}]",
            spec.epsilon
        )));
    }
    let n = batch.shape()[0];
    let d = batch.numel() / n.max(1);
    let eps = spec.epsilon;
    let x0 = batch.clone();
    let mut x = batch.clone();

    if spec.kind == AttackKind::Pgd && spec.random_start && eps > 0.0 {
        for i in 0..n {
            let mut rng = util::rng_from_seed(util::mix_seed(spec.seed, first_sample_index + i as u64));
            for k in 0..d {
                let u = util::uniform_in(&mut rng, -eps, eps);
                let idx = i * d + k;
                x.data_mut()[idx] = (x0.data()[idx] + u).clamp(0.0, 1.0);
            }
        }
    }

    let (iters, alpha) = match spec.kind {
        AttackKind::Fgsm => (1, eps),
        _ => (spec.iters, spec.alpha),
    };
    let mut momentum = vec![0.0; n * d];

    for _ in 0..iters {
        let grad = input_grad_raw(model, &x, labels)?;
        let gd = grad.data();
        let xd = x.data_mut();
        for i in 0..n {
            let row = &gd[i * d..(i + 1) * d];
            if spec.kind == AttackKind::Mifgsm {
                let l1: f64 = row.iter().map(|v| v.abs()).sum();
                let mrow = &mut momentum[i * d..(i + 1) * d];
                for (m, &g) in mrow.iter_mut().zip(row) {
                    *m = spec.mu * *m + if l1 > 0.0 { g / l1 } else { 0.0 };
                }
                for k in 0..d {
                    let idx = i * d + k;
                    let stepped = xd[idx] + alpha * sign(mrow[k]);
                    xd[idx] = stepped
                        .clamp(x0.data()[idx] - eps, x0.data()[idx] + eps)
                        .clamp(0.0, 1.0);
                }
            } else {
                for k in 0..d {
                    let idx = i * d + k;
                    let stepped = xd[idx] + alpha * sign(row[k]);
                    xd[idx] = stepped
                        .clamp(x0.data()[idx] - eps, x0.data()[idx] + eps)
                        .clamp(0.0, 1.0);
                }
            }
        }
    }

    let linf = (0..n)
        .map(|i| {
            x.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&x0.data()[i * d..(i + 1) * d])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(CraftedBatch { perturbed: x, linf })
}

/// Craft a single image `(C, H, W)`.
pub fn craft_one(
    model: &Model,
    image: &Tensor,
    label: usize,
    spec: &AttackSpec,
    sample_index: u64,
) -> Result<AdversarialExample> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch { op: "craft_one", lhs: s, rhs: vec![0, 0, 0] });
    }
    let batch = image.reshaped(vec![1, s[0], s[1], s[2]])?;
    let crafted = craft_batch(model, &batch, &[label], spec, sample_index)?;
    Ok(AdversarialExample {
        original: image.clone(),
        perturbed: crafted.perturbed.reshaped(s)?,
        true_label: label,
        linf: crafted.linf[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::{build_model, desk_mlp, InitSpec, LayerSpec};

    /// dense(2, 2) model whose loss gradient w.r.t. x is p1 * w for label 0.
    fn linear_model(w: [f64; 2]) -> Model {
        let mut m = build_model(
            [1, 1, 2],
            vec![LayerSpec::Dense { input: 2, output: 2 }],
            InitSpec::xavier(0),
        )
        .unwrap();
        m.set_params(vec![
            (
                "layer0.weight".into(),
                Tensor::new(vec![2, 2], vec![0.0, w[0], 0.0, w[1]]).unwrap(),
            ),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        m
    }

    #[test]
    fn zero_epsilon_returns_input_exactly() {
        let m = linear_model([2.0, -3.0]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.4, 0.6]).unwrap();
        let spec = AttackSpec::new(AttackKind::Fgsm, 0.0).unwrap();
        let out = craft_batch(&m, &x, &[0], &spec, 0).unwrap();
        assert_eq!(out.perturbed.data(), x.data());
        assert_eq!(out.linf, vec![0.0]);
    }

    #[test]
    fn fgsm_follows_gradient_sign() {
        // Gradient of the label-0 loss w.r.t. x is p1 * (2, -3): signs (+, -).
        let m = linear_model([2.0, -3.0]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let spec = AttackSpec::new(AttackKind::Fgsm, 0.05).unwrap();
        let out = craft_batch(&m, &x, &[0], &spec, 0).unwrap();
        let dx0 = out.perturbed.data()[0] - 0.5;
        let dx1 = out.perturbed.data()[1] - 0.5;
        assert!((dx0 - 0.05).abs() < 1e-15, "dx0 {dx0}");
        assert!((dx1 + 0.05).abs() < 1e-15, "dx1 {dx1}");
        assert!((out.linf[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn fgsm_linf_equals_eps_on_interior_inputs() {
        let ds = gen_synthetic(2, 8, 3, 42).unwrap();
        let arch = desk_mlp([1, 3, 3], 2);
        let m = build_model([1, 3, 3], arch, InitSpec::xavier(2)).unwrap();
        // Keep pixels interior so no clipping hides the step.
        let (mut batch, labels) = ds.batch(&[0, 1, 2, 3]);
        for v in batch.data_mut() {
            *v = v.clamp(0.2, 0.8);
        }
        let spec = AttackSpec::new(AttackKind::Fgsm, 0.03).unwrap();
        let out = craft_batch(&m, &batch, &labels, &spec, 0).unwrap();
        for &l in &out.linf {
            assert!((l - 0.03).abs() < 1e-12, "linf {l}");
        }
    }

    #[test]
    fn single_step_collapse_is_exact() {
        let ds = gen_synthetic(2, 6, 3, 9).unwrap();
        let (batch, labels) = ds.batch(&[0, 1, 2, 3, 4, 5]);
        let arch = desk_mlp([1, 3, 3], 2);
        let m = build_model([1, 3, 3], arch, InitSpec::xavier(7)).unwrap();
        let eps = 0.04;

        let fgsm = AttackSpec::new(AttackKind::Fgsm, eps).unwrap();
        let mut ifgsm1 = AttackSpec::new(AttackKind::Ifgsm, eps).unwrap();
        ifgsm1.iters = 1;
        ifgsm1.alpha = eps;
        let mut pgd1 = AttackSpec::new(AttackKind::Pgd, eps).unwrap();
        pgd1.iters = 1;
        pgd1.alpha = eps;
        pgd1.random_start = false;

        let a = craft_batch(&m, &batch, &labels, &fgsm, 0).unwrap();
        let b = craft_batch(&m, &batch, &labels, &ifgsm1, 0).unwrap();
        let c = craft_batch(&m, &batch, &labels, &pgd1, 0).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
        assert_eq!(a.perturbed.data(), c.perturbed.data());
    }

    #[test]
    fn zero_momentum_collapses_to_ifgsm() {
        let ds = gen_synthetic(2, 4, 3, 9).unwrap();
        let (batch, labels) = ds.batch(&[0, 1, 2, 3]);
        let arch = desk_mlp([1, 3, 3], 2);
        let m = build_model([1, 3, 3], arch, InitSpec::xavier(8)).unwrap();
        let ifgsm = AttackSpec::new(AttackKind::Ifgsm, 0.05).unwrap();
        let mut mifgsm = AttackSpec::new(AttackKind::Mifgsm, 0.05).unwrap();
        mifgsm.mu = 0.0;
        let a = craft_batch(&m, &batch, &labels, &ifgsm, 0).unwrap();
        let b = craft_batch(&m, &batch, &labels, &mifgsm, 0).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }

    #[test]
    fn mifgsm_two_steps_match_hand_unroll() {
        // 1-channel 1x1 "image": loss gradient w.r.t. x is p1 * w with
        // w = 4 constant sign, so the hand recurrence is
        //   g1 = grad/|grad| = 1, x1 = x0 + a
        //   g2 = mu * 1 + 1 = 2 > 0, x2 = x1 + a.
        let mut m = build_model(
            [1, 1, 1],
            vec![LayerSpec::Dense { input: 1, output: 2 }],
            InitSpec::xavier(0),
        )
        .unwrap();
        m.set_params(vec![
            ("layer0.weight".into(), Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap()),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.3]).unwrap();
        let mut spec = AttackSpec::new(AttackKind::Mifgsm, 0.06).unwrap();
        spec.iters = 2;
        spec.alpha = 0.02;
        spec.mu = 0.8;
        let out = craft_batch(&m, &x, &[0], &spec, 0).unwrap();
        assert!((out.perturbed.data()[0] - 0.34).abs() < 1e-12);
    }

    #[test]
    fn pgd_is_seed_deterministic_and_starts_in_ball() {
        let ds = gen_synthetic(2, 4, 3, 10).unwrap();
        let (batch, labels) = ds.batch(&[0, 1, 2, 3]);
        let arch = desk_mlp([1, 3, 3], 2);
        let m = build_model([1, 3, 3], arch, InitSpec::xavier(3)).unwrap();
        let eps = 0.05;
        let mut spec = AttackSpec::new(AttackKind::Pgd, eps).unwrap().with_seed(77);
        let a = craft_batch(&m, &batch, &labels, &spec, 0).unwrap();
        let b = craft_batch(&m, &batch, &labels, &spec, 0).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());

        // Initialization alone stays inside the ball.
        spec.iters = 0;
        let init = craft_batch(&m, &batch, &labels, &spec, 0).unwrap();
        for (&p, &o) in init.perturbed.data().iter().zip(batch.data()) {
            assert!((p - o).abs() <= eps + 1e-12);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn batch_sharding_does_not_change_results() {
        let ds = gen_synthetic(2, 8, 3, 10).unwrap();
        let arch = desk_mlp([1, 3, 3], 2);
        let m = build_model([1, 3, 3], arch, InitSpec::xavier(3)).unwrap();
        let spec = AttackSpec::new(AttackKind::Pgd, 0.05).unwrap().with_seed(5);
        // PGD random starts depend only on the global sample index.
        let (all, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let full = craft_batch(&m, &all, &labels, &spec, 0).unwrap();
        let (first, l1) = ds.batch(&(0..4).collect::<Vec<_>>());
        let (second, l2) = ds.batch(&(4..8).collect::<Vec<_>>());
        let a = craft_batch(&m, &first, &l1, &spec, 0).unwrap();
        let b = craft_batch(&m, &second, &l2, &spec, 4).unwrap();
        let d = all.numel() / 8;
        // Gradients differ microscopically between batch splits (the batch
        // mean rescales rows), but sign steps and seeded starts make the
        // trajectories equal.
        for k in 0..4 * d {
            assert_eq!(full.perturbed.data()[k], a.perturbed.data()[k]);
        }
        for k in 0..4 * d {
            assert_eq!(full.perturbed.data()[4 * d + k], b.perturbed.data()[k]);
        }
    }

    #[test]
    fn warnings_flag_oversized_alpha_and_zero_iters() {
        let mut spec = AttackSpec::new(AttackKind::Ifgsm, 0.02).unwrap();
        spec.alpha = 0.05;
        spec.iters = 0;
        let w = spec.warnings();
        assert_eq!(w.len(), 2);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn budget_and_range_hold_for_random_inputs(
            seed in 0u64..1000,
            eps_mill in 0usize..80,
            kind_idx in 0usize..4,
        ) {
            let eps = eps_mill as f64 / 1000.0;
            let kind = AttackKind::ALL[kind_idx];
            let ds = gen_synthetic(2, 4, 3, seed).unwrap();
            let (batch, labels) = ds.batch(&[0, 1, 2, 3]);
            let arch = desk_mlp([1, 3, 3], 2);
            let m = build_model([1, 3, 3], arch, InitSpec::xavier(seed ^ 0xF00D)).unwrap();
            let spec = AttackSpec::new(kind, eps).unwrap().with_seed(seed);
            let out = craft_batch(&m, &batch, &labels, &spec, 0).unwrap();
            for (i, &l) in out.linf.iter().enumerate() {
                proptest::prop_assert!(l <= eps + 1e-9, "image {i} linf {l} > eps {eps}");
            }
            for &p in out.perturbed.data() {
                proptest::prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}
