//! Desk-scale predictor with a single LoRA-instrumented head.
//!
//! Inputs go through a frozen random-feature backbone `z = tanh(M·x + b)`,
//! and logits are `(W0 + ΔW_path) · z`. Only the active tier's adapter
//! receives gradients; every other adapter on the path stays frozen.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{compose_path, orth_penalty, orth_penalty_grad, AdapterPath, LoraAdapter, TierId};
use crate::numerics::{matmul_nt, matmul_tn, Matrix};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// A labeled feature vector. Labels are `0..C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        Self { x, label }
    }
}

/// Frozen random projection followed by `tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    projection: Matrix,
    bias: Vec<f64>,
}

impl FrozenBackbone {
    pub fn new(projection: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != projection.rows() {
            return Err(Error::config(format!(
                "backbone bias has {} entries for {} hidden units",
                bias.len(),
                projection.rows()
            )));
        }
        Ok(Self { projection, bias })
    }

    /// Gaussian projection with entry variance `1/d` and bias variance 0.1.
    pub fn random(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        let b = Normal::new(0.0, 0.1f64.sqrt()).expect("valid std");
        let projection = Matrix::from_fn(hidden, input_dim, |_, _| w.sample(rng));
        let bias = (0..hidden).map(|_| b.sample(rng)).collect();
        Self { projection, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn hidden(&self) -> usize {
        self.projection.rows()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.projection.mul_vec(x)?;
        for (v, b) in z.iter_mut().zip(&self.bias) {
            *v = (*v + b).tanh();
        }
        Ok(z)
    }
}

/// Frozen base head `W0 ∈ R^{C×h}` on top of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    w0: Matrix,
    backbone: FrozenBackbone,
}

impl HeadModel {
    pub fn new(w0: Matrix, backbone: FrozenBackbone) -> Result<Self> {
        if w0.cols() != backbone.hidden() {
            return Err(Error::dims(
                "HeadModel::new",
                w0.shape(),
                (backbone.hidden(), backbone.input_dim()),
            ));
        }
        Ok(Self { w0, backbone })
    }

    /// Random backbone plus a Gaussian base head with entry std `base_scale/√h`.
    pub fn random(
        input_dim: usize,
        hidden: usize,
        classes: usize,
        base_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::config(
                "model needs positive input/hidden dims and at least two classes",
            ));
        }
        let backbone = FrozenBackbone::random(input_dim, hidden, rng);
        let std = base_scale / (hidden as f64).sqrt();
        let w0 = if std > 0.0 {
            let n = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            Matrix::from_fn(classes, hidden, |_, _| n.sample(rng))
        } else {
            Matrix::zeros(classes, hidden)
        };
        Self::new(w0, backbone)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn classes(&self) -> usize {
        self.w0.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w0.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    /// Effective head weight for a path.
    pub fn weight(&self, path: &AdapterPath) -> Result<Matrix> {
        compose_path(path, &self.w0)
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.x.len() != self.input_dim() {
            return Err(Error::config(format!(
                "sample has {} features, model expects {}",
                s.x.len(),
                self.input_dim()
            )));
        }
        if s.label >= self.classes() {
            return Err(Error::config(format!(
                "label {} out of range for {} classes",
                s.label,
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Logits `(W0 + ΔW_path) · tanh(M·x + b)`.
pub fn forward(model: &HeadModel, path: &AdapterPath, x: &[f64]) -> Result<Vec<f64>> {
    let w = model.weight(path)?;
    let z = model.backbone.features(x)?;
    w.mul_vec(&z)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

/// Mean clamped cross-entropy and its gradient with respect to the head
/// weight, `G = mean((softmax − onehot) zᵀ)`.
fn loss_and_weight_grad(
    model: &HeadModel,
    w: &Matrix,
    data: &[Sample],
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    if data.is_empty() {
        return Err(Error::precondition("dataset must be non-empty"));
    }
    let (c, h) = w.shape();
    let max_loss = -PROB_FLOOR.ln();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Matrix::zeros(c, h));
    for s in data {
        model.check_sample(s)?;
        let z = model.backbone.features(&s.x)?;
        let logits = w.mul_vec(&z)?;
        let logp = log_softmax(&logits);
        let nll = -logp[s.label];
        if nll >= max_loss {
            // Clamped: constant loss, zero gradient.
            total += max_loss;
            continue;
        }
        total += nll;
        if let Some(g) = grad.as_mut() {
            for (k, lp) in logp.iter().enumerate() {
                let coef = lp.exp() - if k == s.label { 1.0 } else { 0.0 };
                if coef == 0.0 {
                    continue;
                }
                for (j, zj) in z.iter().enumerate() {
                    g[(k, j)] += coef * zj;
                }
            }
        }
    }
    let n = data.len() as f64;
    Ok((total / n, grad.map(|g| g.scale(1.0 / n))))
}

/// Mean cross-entropy of the path's model over `data`.
pub fn dataset_loss(model: &HeadModel, path: &AdapterPath, data: &[Sample]) -> Result<f64> {
    let w = model.weight(path)?;
    Ok(loss_and_weight_grad(model, &w, data, false)?.0)
}

/// A frozen basis the active `B` is pushed to be orthogonal to.
#[derive(Clone, Copy, Debug)]
pub struct Anchor<'a> {
    pub basis: &'a Matrix,
    pub weight: f64,
}

impl<'a> Anchor<'a> {
    pub fn new(basis: &'a Matrix, weight: f64) -> Self {
        Self { basis, weight }
    }
}

/// Training objective of the active tier: data loss plus weighted
/// orthogonality penalties.
pub fn tier_objective(
    model: &HeadModel,
    path: &AdapterPath,
    data: &[Sample],
    active: TierId,
    anchors: &[Anchor<'_>],
) -> Result<f64> {
    let b = path.tier(active)?.b();
    let mut value = dataset_loss(model, path, data)?;
    for anchor in anchors {
        value += anchor.weight * orth_penalty(anchor.basis, b)?;
    }
    Ok(value)
}

/// Analytic gradient of [`tier_objective`] with respect to the active
/// adapter's `(B, A)`.
pub fn tier_gradient(
    model: &HeadModel,
    path: &AdapterPath,
    data: &[Sample],
    active: TierId,
    anchors: &[Anchor<'_>],
) -> Result<(Matrix, Matrix)> {
    let adapter = path.tier(active)?;
    let w = model.weight(path)?;
    let (_, g) = loss_and_weight_grad(model, &w, data, true)?;
    let g = g.expect("gradient requested");
    // ∂/∂B = G Aᵀ, ∂/∂A = Bᵀ G.
    let mut db = matmul_nt(&g, adapter.a())?;
    let da = matmul_tn(adapter.b(), &g)?;
    for anchor in anchors {
        if anchor.weight != 0.0 {
            db.add_scaled(anchor.weight, &orth_penalty_grad(anchor.basis, adapter.b())?)?;
        }
    }
    Ok((db, da))
}

/// How local gradient descent walks the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BatchMode {
    /// One deterministic step per epoch over the whole dataset.
    FullBatch,
    /// Seeded shuffle each epoch, then steps over consecutive chunks.
    MiniBatch { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: BatchMode,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if let BatchMode::MiniBatch { size: 0 } = self.batch {
            return Err(Error::config("mini-batch size must be positive"));
        }
        Ok(())
    }
}

/// Plain gradient descent on the active adapter; returns the trained copy.
/// Frozen tiers are never touched.
pub fn local_update(
    model: &HeadModel,
    path: &AdapterPath,
    data: &[Sample],
    active: TierId,
    anchors: &[Anchor<'_>],
    opt: &OptimizerConfig,
    rng: &mut impl Rng,
) -> Result<LoraAdapter> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::precondition("local_update needs a non-empty dataset"));
    }
    let mut work = path.clone();
    work.tier(active)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<Sample> = Vec::new();
    for _ in 0..opt.epochs {
        match opt.batch {
            BatchMode::FullBatch => step(model, &mut work, data, active, anchors, opt.lr)?,
            BatchMode::MiniBatch { size } => {
                order.shuffle(rng);
                for chunk in order.chunks(size) {
                    batch.clear();
                    batch.extend(chunk.iter().map(|&i| data[i].clone()));
                    step(model, &mut work, &batch, active, anchors, opt.lr)?;
                }
            }
        }
    }
    Ok(work.tier(active)?.clone())
}

fn step(
    model: &HeadModel,
    path: &mut AdapterPath,
    data: &[Sample],
    active: TierId,
    anchors: &[Anchor<'_>],
    lr: f64,
) -> Result<()> {
    let (db, da) = tier_gradient(model, path, data, active, anchors)?;
    let adapter = path.tier_mut(active)?;
    adapter.b_mut().add_scaled(-lr, &db)?;
    adapter.a_mut().add_scaled(-lr, &da)?;
    let finite = |m: &Matrix| m.as_slice().iter().all(|v| v.is_finite());
    if !(finite(adapter.b()) && finite(adapter.a())) {
        return Err(Error::Degenerate(format!(
            "gradient descent diverged (lr = {lr}); adapter has non-finite entries"
        )));
    }
    Ok(())
}

/// Central finite differences of [`tier_objective`] over every entry of the
/// active `(B, A)`. Independent of the analytic gradient path.
pub fn finite_difference_gradient(
    model: &HeadModel,
    path: &AdapterPath,
    data: &[Sample],
    active: TierId,
    anchors: &[Anchor<'_>],
    h: f64,
) -> Result<(Matrix, Matrix)> {
    let adapter = path.tier(active)?.clone();
    let mut work = path.clone();
    let mut probe = |which_b: bool, idx: usize| -> Result<f64> {
        let mut eval = |delta: f64| -> Result<f64> {
            let ad = work.tier_mut(active)?;
            let m = if which_b { ad.b_mut() } else { ad.a_mut() };
            m.as_mut_slice()[idx] = delta;
            tier_objective(model, &work, data, active, anchors)
        };
        let base = if which_b {
            adapter.b().as_slice()[idx]
        } else {
            adapter.a().as_slice()[idx]
        };
        let up = eval(base + h)?;
        let dn = eval(base - h)?;
        eval(base)?;
        Ok((up - dn) / (2.0 * h))
    };
    let (br, bc) = adapter.b().shape();
    let (ar, ac) = adapter.a().shape();
    let mut db = Vec::with_capacity(br * bc);
    for idx in 0..br * bc {
        db.push(probe(true, idx)?);
    }
    let mut da = Vec::with_capacity(ar * ac);
    for idx in 0..ar * ac {
        da.push(probe(false, idx)?);
    }
    Ok((Matrix::from_vec(br, bc, db)?, Matrix::from_vec(ar, ac, da)?))
}

/// Outcome of one analytic-vs-finite-difference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckCase {
    pub tier: TierId,
    pub anchors: usize,
    pub samples: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
}

/// `‖analytic − fd‖_F / max(‖fd‖_F, 1e-10)` over the stacked `(B, A)` pair.
pub fn relative_error(analytic: (&Matrix, &Matrix), fd: (&Matrix, &Matrix)) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, f) in [analytic.0, analytic.1]
        .iter()
        .zip([fd.0, fd.1])
        .flat_map(|(a, f)| a.as_slice().iter().zip(f.as_slice()))
    {
        diff += (a - f) * (a - f);
        norm += f * f;
    }
    diff.sqrt() / norm.sqrt().max(1e-10)
}

/// Randomized gradient check across tiers and penalty combinations.
///
/// Each case draws a fresh model, random non-zero adapters on all three
/// tiers, a small dataset and random penalty weights, then compares the
/// analytic gradient with central differences at step `h`.
pub fn gradcheck_suite(
    cases: usize,
    dims: GradcheckDims,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradcheckReport> {
    let GradcheckDims {
        input_dim,
        hidden,
        classes,
        rank,
    } = dims;
    let mut out = Vec::with_capacity(cases);
    let mut max_rel = 0.0f64;
    for case in 0..cases {
        let model = HeadModel::random(input_dim, hidden, classes, 1.0, rng)?;
        let rand_adapter = |rng: &mut dyn rand::RngCore| {
            let b = Matrix::from_fn(classes, rank, |_, _| rng.random_range(-0.5..0.5));
            let a = Matrix::from_fn(rank, hidden, |_, _| rng.random_range(-0.5..0.5));
            LoraAdapter::new(b, a)
        };
        let path = AdapterPath::new(
            rand_adapter(rng)?,
            rand_adapter(rng)?,
            rand_adapter(rng)?,
            1,
            2,
        )?;
        let n = rng.random_range(3..12);
        let data: Vec<Sample> = (0..n)
            .map(|_| {
                Sample::new(
                    (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    rng.random_range(0..classes),
                )
            })
            .collect();
        let (tier, bases): (TierId, Vec<Matrix>) = match case % 3 {
            0 => (TierId::Root, vec![]),
            1 => (TierId::Cluster(1), vec![path.root.b().clone()]),
            _ => (
                TierId::Leaf(2),
                vec![path.root.b().clone(), path.cluster.b().clone()],
            ),
        };
        let weights: Vec<f64> = bases
            .iter()
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.1..10.0) })
            .collect();
        let anchors: Vec<Anchor<'_>> =
            bases.iter().zip(&weights).map(|(b, &w)| Anchor::new(b, w)).collect();
        let (db, da) = tier_gradient(&model, &path, &data, tier, &anchors)?;
        let (fb, fa) = finite_difference_gradient(&model, &path, &data, tier, &anchors, h)?;
        let rel = relative_error((&db, &da), (&fb, &fa));
        max_rel = max_rel.max(rel);
        out.push(GradcheckCase {
            tier,
            anchors: anchors.len(),
            samples: n,
            rel_error: rel,
        });
    }
    Ok(GradcheckReport {
        cases: out,
        max_rel_error: max_rel,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub rank: usize,
}

/// Fraction of samples whose argmax logit (lowest index on ties) matches the label.
pub fn accuracy_with_weight(model: &HeadModel, w: &Matrix, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::precondition("accuracy needs a non-empty test set"));
    }
    let mut correct = 0usize;
    for s in data {
        model.check_sample(s)?;
        let logits = w.mul_vec(&model.backbone.features(&s.x)?)?;
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        if best == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_path(p: usize, q: usize, r: usize) -> AdapterPath {
        let z = LoraAdapter::zeros(p, q, r).unwrap();
        AdapterPath::new(z.clone(), z.clone(), z, 0, 0).unwrap()
    }

    fn toy_model(rng: &mut ChaCha8Rng) -> HeadModel {
        HeadModel::random(3, 5, 4, 1.0, rng).unwrap()
    }

    #[test]
    fn zero_adapters_give_base_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = toy_model(&mut rng);
        let x = vec![0.3, -1.0, 2.0];
        let logits = forward(&model, &zero_path(4, 5, 1), &x).unwrap();
        let z = model.backbone().features(&x).unwrap();
        assert_eq!(logits, model.w0().mul_vec(&z).unwrap());
    }

    #[test]
    fn cancelling_delta_gives_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = toy_model(&mut rng);
        // rank-4 root adapter equal to -W0: B = -W0 (4x5 → needs rank ≤ 4), use B = -I, A = W0.
        let root = LoraAdapter::new(Matrix::identity(4).scale(-1.0), model.w0().clone()).unwrap();
        let path = AdapterPath::root_only(root, 0);
        let x = vec![1.0, 2.0, 3.0];
        let logits = forward(&model, &path, &x).unwrap();
        assert!(logits.iter().all(|l| l.abs() < 1e-12));
        let data = vec![Sample::new(x, 2)];
        assert!((dataset_loss(&model, &path, &data).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = toy_model(&mut rng);
        let mut ad = || {
            LoraAdapter::new(
                Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)),
                Matrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap()
        };
        let path = AdapterPath::new(ad(), ad(), ad(), 0, 0).unwrap();
        let x = vec![0.5, -0.25, 1.5];
        let w = compose_path(&path, model.w0()).unwrap();
        let z = model.backbone().features(&x).unwrap();
        let want = crate::numerics::matmul(&w, &Matrix::from_vec(5, 1, z).unwrap()).unwrap();
        let got = forward(&model, &path, &x).unwrap();
        for k in 0..4 {
            assert!((got[k] - want[(k, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let backbone = FrozenBackbone::new(Matrix::zeros(2, 1), vec![1.0, 0.0]).unwrap();
        // z = (tanh 1, 0); W0 row k scales the first feature.
        let uniform = HeadModel::new(Matrix::zeros(4, 2), backbone.clone()).unwrap();
        let data = vec![Sample::new(vec![0.0], 1)];
        let path = zero_path(4, 2, 1);
        assert!((dataset_loss(&uniform, &path, &data).unwrap() - 4f64.ln()).abs() < 1e-12);

        let mut w0 = Matrix::zeros(4, 2);
        w0[(1, 0)] = 1000.0 / 1f64.tanh();
        let confident = HeadModel::new(w0, backbone).unwrap();
        assert!(dataset_loss(&confident, &path, &data).unwrap() < 1e-12);

        let wrong = vec![Sample::new(vec![0.0], 0)];
        let clamped = dataset_loss(&confident, &path, &wrong).unwrap();
        assert!((clamped - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_hand_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = toy_model(&mut rng);
        let path = zero_path(4, 5, 1);
        let data: Vec<Sample> = (0..3)
            .map(|i| Sample::new(vec![i as f64, 1.0 - i as f64, 0.5], i))
            .collect();
        let mut want = 0.0;
        for s in &data {
            let l = forward(&model, &path, &s.x).unwrap();
            let denom: f64 = l.iter().map(|v| v.exp()).sum();
            want += -(l[s.label].exp() / denom).ln();
        }
        want /= 3.0;
        assert!((dataset_loss(&model, &path, &data).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = toy_model(&mut rng);
        assert!(matches!(
            dataset_loss(&model, &zero_path(4, 5, 1), &[]),
            Err(Error::Precondition(_))
        ));
    }

    /// Every input appears once with each label, so uniform predictions are
    /// the exact minimizer of the mean cross-entropy.
    fn balanced_data(classes: usize) -> Vec<Sample> {
        (0..3)
            .flat_map(|i| (0..classes).map(move |c| Sample::new(vec![i as f64 - 1.0, 0.5, 2.0], c)))
            .collect()
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let backbone = FrozenBackbone::random(3, 5, &mut rng);
        let model = HeadModel::new(Matrix::zeros(4, 5), backbone).unwrap();
        let path = zero_path(4, 5, 2);
        let (db, da) = tier_gradient(&model, &path, &balanced_data(4), TierId::Root, &[]).unwrap();
        assert!(db.max_abs() <= 1e-8 && da.max_abs() <= 1e-8);
    }

    #[test]
    fn pure_penalty_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let backbone = FrozenBackbone::random(3, 5, &mut rng);
        let model = HeadModel::new(Matrix::zeros(4, 5), backbone).unwrap();
        let b = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let cluster = LoraAdapter::new(b.clone(), Matrix::zeros(2, 5)).unwrap();
        let root_b = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut path = zero_path(4, 5, 2);
        path.cluster = cluster;
        let anchors = [Anchor::new(&root_b, 1.0)];
        let (db, da) =
            tier_gradient(&model, &path, &balanced_data(4), TierId::Cluster(0), &anchors).unwrap();
        let want = orth_penalty_grad(&root_b, &b).unwrap();
        assert!(db.sub(&want).unwrap().max_abs() < 1e-12);
        assert!(da.max_abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = GradcheckDims {
            input_dim: 4,
            hidden: 6,
            classes: 5,
            rank: 2,
        };
        let report = gradcheck_suite(21, dims, 1e-5, &mut rng).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn missing_tier_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = toy_model(&mut rng);
        let data = balanced_data(4);
        assert!(matches!(
            tier_gradient(&model, &zero_path(4, 5, 1), &data, TierId::Leaf(3), &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_epochs_leave_adapter_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = toy_model(&mut rng);
        let mut path = zero_path(4, 5, 1);
        path.root = LoraAdapter::init(4, 5, 1, 1.0, &mut rng).unwrap();
        let opt = OptimizerConfig {
            lr: 0.1,
            epochs: 0,
            batch: BatchMode::FullBatch,
        };
        let out =
            local_update(&model, &path, &balanced_data(4), TierId::Root, &[], &opt, &mut rng)
                .unwrap();
        assert_eq!(out, path.root);
        let bad = OptimizerConfig { lr: 0.0, ..opt };
        assert!(
            local_update(&model, &path, &balanced_data(4), TierId::Root, &[], &bad, &mut rng)
                .is_err()
        );
    }

    #[test]
    fn single_full_batch_step_is_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = toy_model(&mut rng);
        let mut path = zero_path(4, 5, 2);
        path.root = LoraAdapter::new(
            Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)),
            Matrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let data: Vec<Sample> = (0..6)
            .map(|i| Sample::new(vec![i as f64 * 0.3, -0.2, 1.0], i % 4))
            .collect();
        let frozen = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let anchors = [Anchor::new(&frozen, 0.7)];
        let lr = 0.05;
        let opt = OptimizerConfig {
            lr,
            epochs: 1,
            batch: BatchMode::FullBatch,
        };
        let (db, da) = tier_gradient(&model, &path, &data, TierId::Root, &anchors).unwrap();
        let out = local_update(&model, &path, &data, TierId::Root, &anchors, &opt, &mut rng).unwrap();
        for (got, (w, g)) in out
            .b()
            .as_slice()
            .iter()
            .zip(path.root.b().as_slice().iter().zip(db.as_slice()))
        {
            assert_eq!(*got, w - lr * g);
        }
        for (got, (w, g)) in out
            .a()
            .as_slice()
            .iter()
            .zip(path.root.a().as_slice().iter().zip(da.as_slice()))
        {
            assert_eq!(*got, w - lr * g);
        }
    }

    fn separable_toy() -> (HeadModel, Vec<Sample>) {
        let backbone = FrozenBackbone::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap(),
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let model = HeadModel::new(Matrix::zeros(2, 3), backbone).unwrap();
        let data = (0..10)
            .map(|i| {
                let t = i as f64 * 0.1 + 0.2;
                if i % 2 == 0 {
                    Sample::new(vec![t, -t], 0)
                } else {
                    Sample::new(vec![-t, t], 1)
                }
            })
            .collect();
        (model, data)
    }

    #[test]
    fn full_batch_training_converges_monotonically() {
        let (model, data) = separable_toy();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut path = zero_path(2, 3, 1);
        path.root = LoraAdapter::init(2, 3, 1, 1.0, &mut rng).unwrap();
        let opt = OptimizerConfig {
            lr: 0.01,
            epochs: 1,
            batch: BatchMode::FullBatch,
        };
        let mut prev = dataset_loss(&model, &path, &data).unwrap();
        for _ in 0..200 {
            path.root = local_update(&model, &path, &data, TierId::Root, &[], &opt, &mut rng).unwrap();
            let loss = dataset_loss(&model, &path, &data).unwrap();
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
        let opt = OptimizerConfig { lr: 0.5, epochs: 200, ..opt };
        path.root = local_update(&model, &path, &data, TierId::Root, &[], &opt, &mut rng).unwrap();
        let w = model.weight(&path).unwrap();
        assert_eq!(accuracy_with_weight(&model, &w, &data).unwrap(), 1.0);
    }

    #[test]
    fn frozen_tiers_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = toy_model(&mut rng);
        let mut ad = || LoraAdapter::new(
            Matrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0)),
            Matrix::from_fn(1, 5, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let path = AdapterPath::new(ad(), ad(), ad(), 0, 0).unwrap();
        let opt = OptimizerConfig {
            lr: 0.1,
            epochs: 3,
            batch: BatchMode::MiniBatch { size: 2 },
        };
        let data = balanced_data(4);
        let anchors = [Anchor::new(path.root.b(), 1.0)];
        let out =
            local_update(&model, &path, &data, TierId::Cluster(0), &anchors, &opt, &mut rng).unwrap();
        assert_ne!(out, path.cluster);
        let mut updated = path.clone();
        updated.cluster = out;
        assert_eq!(updated.root, path.root);
        assert_eq!(updated.leaf, path.leaf);
    }
}
