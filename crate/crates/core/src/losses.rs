//! Inversion losses on logits (cross-entropy, max-margin, Poincaré) in two
//! forms: scalar `f64` evaluations with closed-form gradients, and batched
//! tensor versions that take part in autodiff.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, one_hot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy `-log softmax(o)_c`.
    Ce,
    /// Max-margin `-o_c + max_{j != c} o_j`.
    Mm,
    /// Hyperbolic distance between l1-normalized logits and a shrunk one-hot.
    Poincare,
}

impl LossKind {
    pub fn id(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Mm => "mm",
            LossKind::Poincare => "poincare",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::Ce),
            "mm" | "max_margin" => Ok(LossKind::Mm),
            "poincare" => Ok(LossKind::Poincare),
            other => Err(Error::Config(format!("unknown inversion loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareParams {
    pub xi: f64,
    /// Subtract `xi` from the target coordinate only instead of from every
    /// coordinate before clamping at zero. Both give the same vector for a
    /// one-hot target.
    #[serde(default)]
    pub xi_target_only: bool,
}

impl Default for PoincareParams {
    fn default() -> Self {
        Self {
            xi: 1e-5,
            xi_target_only: false,
        }
    }
}

/// Loss selection with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionLoss {
    pub kind: LossKind,
    #[serde(default)]
    pub poincare: PoincareParams,
}

impl InversionLoss {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            poincare: PoincareParams::default(),
        }
    }

    /// Per-row losses `(N,)` for logits `(N, K)`; differentiable in `logits`.
    pub fn per_sample(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (n, k) = logits.dims2()?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} targets"),
                actual: targets.len().to_string(),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::LabelOutOfRange { label: t, classes: k });
        }
        match self.kind {
            LossKind::Ce => cross_entropy_tensor(logits, targets),
            LossKind::Mm => max_margin_tensor(logits, targets),
            LossKind::Poincare => poincare_tensor(logits, targets, self.poincare),
        }
    }

    /// Mean of [`Self::per_sample`].
    pub fn mean(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        Ok(self.per_sample(logits, targets)?.mean_all()?)
    }

    /// Scalar evaluation of one logit row.
    pub fn eval(&self, o: &[f64], c: usize) -> Result<f64> {
        match self.kind {
            LossKind::Ce => Ok(cross_entropy(o, c)?.value),
            LossKind::Mm => Ok(max_margin(o, c)?.value),
            LossKind::Poincare => Ok(poincare(o, c, self.poincare)?.value),
        }
    }
}

fn targets_tensor(targets: &[usize]) -> Result<Tensor> {
    Ok(crate::nn::label_tensor(targets)?.unsqueeze(1)?)
}

fn cross_entropy_tensor(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    Ok(log_softmax(logits)?
        .gather(&targets_tensor(targets)?, 1)?
        .squeeze(1)?
        .neg()?)
}

fn max_margin_tensor(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let host = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let runner: Vec<usize> = host
        .iter()
        .zip(targets)
        .map(|(row, &c)| runner_up(row, c).map(|r| r.0))
        .collect::<Result<_>>()?;
    let oj = logits.gather(&targets_tensor(&runner)?, 1)?;
    let oc = logits.gather(&targets_tensor(targets)?, 1)?;
    Ok((oj - oc)?.squeeze(1)?)
}

fn poincare_tensor(logits: &Tensor, targets: &[usize], p: PoincareParams) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let l1 = logits.abs()?.sum_keepdim(D::Minus1)?.maximum(1e-12)?;
    let u = logits.broadcast_div(&l1)?;
    let v = shrunk_one_hot_tensor(targets, k, p, logits.dtype())?;
    let diff = (&u - &v)?.sqr()?.sum(D::Minus1)?;
    let nu = (u.sqr()?.sum(D::Minus1)?.affine(-1.0, 1.0)?).maximum(POINCARE_EPS)?;
    let nv = v.sqr()?.sum(D::Minus1)?.affine(-1.0, 1.0)?;
    let x = ((diff * 2.0)?.div(&(nu * nv)?)? + 1.0)?;
    // arcosh(x) = ln(x + sqrt(x^2 - 1)); the offset keeps the gradient finite at x = 1
    let root = (x.sqr()? - 1.0)?.relu()?.affine(1.0, 1e-12)?.sqrt()?;
    Ok((x + root)?.log()?)
}

fn shrunk_one_hot_tensor(targets: &[usize], k: usize, p: PoincareParams, dtype: DType) -> Result<Tensor> {
    let rows: Vec<f64> = targets.iter().flat_map(|&c| shrunk_one_hot(k, c, p)).collect();
    Ok(Tensor::from_vec(rows, (targets.len(), k), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Lower bound applied to `1 - ||u||^2`.
pub const POINCARE_EPS: f64 = 1e-12;

/// Loss value and gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_target(o: &[f64], c: usize) -> Result<()> {
    if c >= o.len() {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: o.len(),
        });
    }
    if o.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

pub fn log_sum_exp(o: &[f64]) -> f64 {
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + o.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(o: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(o);
    o.iter().map(|v| (v - lse).exp()).collect()
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy `-log p_c` with gradient `p - y_c`.
pub fn cross_entropy(o: &[f64], c: usize) -> Result<LossValue> {
    check_target(o, c)?;
    let lse = log_sum_exp(o);
    let mut grad = softmax(o);
    grad[c] -= 1.0;
    Ok(LossValue {
        value: lse - o[c],
        grad,
    })
}

/// Highest-scoring class other than `c` (lowest index on ties) and whether
/// it is the unique maximizer.
pub fn runner_up(o: &[f64], c: usize) -> Result<(usize, bool)> {
    if o.len() < 2 {
        return Err(Error::Config("max-margin loss needs at least 2 classes".into()));
    }
    check_target(o, c)?;
    let mut best: Option<usize> = None;
    for (i, &v) in o.iter().enumerate() {
        if i != c && best.map_or(true, |b| v > o[b]) {
            best = Some(i);
        }
    }
    let j = best.expect("k >= 2");
    let unique = !o.iter().enumerate().any(|(i, &v)| i != c && i != j && v == o[j]);
    Ok((j, unique))
}

/// Max-margin `o_j - o_c` with gradient `y_j - y_c`, `j` the runner-up.
pub fn max_margin(o: &[f64], c: usize) -> Result<LossValue> {
    let (j, _) = runner_up(o, c)?;
    let mut grad = vec![0.0; o.len()];
    grad[j] = 1.0;
    grad[c] = -1.0;
    Ok(LossValue {
        value: o[j] - o[c],
        grad,
    })
}

pub fn shrunk_one_hot(k: usize, c: usize, p: PoincareParams) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let y = if i == c { 1.0 } else { 0.0 };
            if p.xi_target_only && i != c {
                y
            } else {
                (y - p.xi).max(0.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoincareValue {
    pub value: f64,
    /// `1 - ||u||^2` hit the lower clamp.
    pub clamped: bool,
}

/// `arcosh(1 + 2||u - v||^2 / ((1 - ||u||^2)(1 - ||v||^2)))` with
/// `u = o / ||o||_1` and `v = max(y_c - xi, 0)`.
pub fn poincare(o: &[f64], c: usize, p: PoincareParams) -> Result<PoincareValue> {
    check_target(o, c)?;
    let l1: f64 = o.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Err(Error::NonFinite("Poincaré loss of all-zero logits".into()));
    }
    let u: Vec<f64> = o.iter().map(|v| v / l1).collect();
    let v = shrunk_one_hot(o.len(), c, p);
    let out = poincare_distance(&u, &v);
    if out.clamped {
        log::warn!("Poincaré loss: ||u||_2 >= 1, clamping");
    }
    Ok(out)
}

/// Hyperbolic distance between two points of the unit ball. Norms at or
/// beyond the boundary are clamped to `1 - POINCARE_EPS`.
pub fn poincare_distance(u: &[f64], v: &[f64]) -> PoincareValue {
    let diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
    let gap = |w: &[f64]| 1.0 - w.iter().map(|a| a * a).sum::<f64>();
    let (nu, nv) = (gap(u), gap(v));
    let clamped = nu < POINCARE_EPS || nv < POINCARE_EPS;
    let x = 1.0 + 2.0 * diff / (nu.max(POINCARE_EPS) * nv.max(POINCARE_EPS));
    PoincareValue {
        value: (x + (x * x - 1.0).max(0.0).sqrt()).ln(),
        clamped,
    }
}

/// Per-iteration statistics of a latent search, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendStep {
    /// l1-norm of the loss gradient with respect to the logits.
    pub grad_l1: f64,
    pub loss: f64,
    pub target_logit: f64,
    pub target_prob: f64,
    /// The runner-up class was unique for every row (max-margin only).
    pub unique_runner_up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub loss: LossKind,
    pub steps: Vec<TrendStep>,
    pub grad_rescaled: Vec<f64>,
    pub loss_rescaled: Vec<f64>,
    /// Iteration at which a non-finite value stopped the trace.
    pub aborted_at: Option<usize>,
}

fn rescale(values: impl Iterator<Item = f64>, first: f64) -> Vec<f64> {
    // a zero first value cannot be divided out; keep raw values
    let scale = if first.abs() > f64::MIN_POSITIVE { first } else { 1.0 };
    values.map(|v| v / scale).collect()
}

/// Runs `step` for `iters` iterations and records the rescaled gradient,
/// rescaled loss and target-logit curves.
pub fn record_trend(
    loss: LossKind,
    iters: usize,
    mut step: impl FnMut(usize) -> Result<TrendStep>,
) -> Result<LossTrace> {
    if iters == 0 {
        return Err(Error::Config("trend recording needs at least one iteration".into()));
    }
    let mut steps = Vec::with_capacity(iters);
    for i in 0..iters {
        let s = step(i)?;
        let finite = finite_step(&s);
        steps.push(s);
        if !finite {
            break;
        }
    }
    Ok(LossTrace::from_steps(loss, steps))
}

fn finite_step(s: &TrendStep) -> bool {
    [s.grad_l1, s.loss, s.target_logit].iter().all(|v| v.is_finite())
}

impl LossTrace {
    /// Builds the rescaled curves from recorded steps, cutting the trace at
    /// the first step with a non-finite entry.
    pub fn from_steps(loss: LossKind, mut steps: Vec<TrendStep>) -> Self {
        let mut aborted_at = None;
        if let Some(i) = steps.iter().position(|s| !finite_step(s)) {
            log::warn!("{loss} trend: non-finite entry at iteration {i}, stopping");
            aborted_at = Some(i);
            steps.truncate(i);
        }
        let (g0, l0) = steps.first().map_or((1.0, 1.0), |s| (s.grad_l1, s.loss));
        LossTrace {
            loss,
            grad_rescaled: rescale(steps.iter().map(|s| s.grad_l1), g0),
            loss_rescaled: rescale(steps.iter().map(|s| s.loss), l0),
            steps,
            aborted_at,
        }
    }
}

impl LossTrace {
    /// CSV with columns `iter, grad_rescaled, loss_rescaled, target_logit`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "grad_rescaled", "loss_rescaled", "target_logit"])?;
        for (i, s) in self.steps.iter().enumerate() {
            w.write_record([
                i.to_string(),
                self.grad_rescaled[i].to_string(),
                self.loss_rescaled[i].to_string(),
                s.target_logit.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Row-wise statistics of `loss` on a batch of logits: mean gradient l1
/// norm (through autodiff on a detached copy), mean loss, mean target logit
/// and probability, and runner-up uniqueness.
pub fn logit_statistics(loss: &InversionLoss, logits: &Tensor, targets: &[usize]) -> Result<(TrendStep, Tensor)> {
    let o = candle_core::Var::from_tensor(&logits.detach())?;
    let per = loss.per_sample(o.as_tensor(), targets)?;
    let grads = per.sum_all()?.backward()?;
    let g = grads
        .get(&o)
        .cloned()
        .unwrap_or(o.as_tensor().zeros_like()?);
    let n = targets.len() as f64;
    let grad_l1 = g.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? / n;
    let host = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut target_logit = 0.0;
    let mut target_prob = 0.0;
    let mut unique = true;
    for (row, &c) in host.iter().zip(targets) {
        target_logit += row[c];
        target_prob += softmax(row)[c];
        if loss.kind == LossKind::Mm {
            unique &= runner_up(row, c)?.1;
        }
    }
    let mean_loss = per.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
    Ok((
        TrendStep {
            grad_l1,
            loss: mean_loss,
            target_logit: target_logit / n,
            target_prob: target_prob / n,
            unique_runner_up: unique,
        },
        g,
    ))
}

/// `(N, K)` one-hot target rows, handy for tests and diagnostics.
pub fn target_one_hot(targets: &[usize], k: usize) -> Result<Tensor> {
    one_hot(targets, k, DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, o: &[f64], h: f64) -> Vec<f64> {
        (0..o.len())
            .map(|i| {
                let mut a = o.to_vec();
                let mut b = o.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let v = cross_entropy(&[0.7; 10], 4).unwrap();
        assert!((v.value - 10f64.ln()).abs() < 1e-12);
        for (i, g) in v.grad.iter().enumerate() {
            let want = if i == 4 { -0.9 } else { 0.1 };
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_vanishes_when_confident() {
        let v = cross_entropy(&[40.0, 0.0, 0.0], 0).unwrap();
        assert!(v.grad.iter().map(|g| g.abs()).sum::<f64>() < 1e-15);
    }

    #[test]
    fn max_margin_hand_values() {
        let v = max_margin(&[3.0, 1.0, 0.0], 0).unwrap();
        assert_eq!(v.value, -2.0);
        assert_eq!(v.grad, vec![-1.0, 1.0, 0.0]);
        let v = max_margin(&[-1.0, 2.0], 0).unwrap();
        assert!(v.value > 0.0 && v.value == 3.0);
        assert!(max_margin(&[1.0], 0).is_err());
        // ties go to the lowest index
        assert_eq!(runner_up(&[0.0, 5.0, 5.0], 0).unwrap(), (1, false));
    }

    #[test]
    fn poincare_cases() {
        let p = PoincareParams::default();
        // o = [1, 0], c = 0: u = (1, 0) saturates the ball and is clamped
        let direct = {
            let u = [1.0f64, 0.0];
            let v = [1.0 - 1e-5, 0.0];
            let diff = (u[0] - v[0]).powi(2);
            let nu = POINCARE_EPS;
            let nv = 1.0 - v[0] * v[0];
            let x = 1.0 + 2.0 * diff / (nu * nv);
            (x + (x * x - 1.0).sqrt()).ln()
        };
        let got = poincare(&[1.0, 0.0], 0, p).unwrap();
        assert!(got.clamped);
        assert!((got.value - direct).abs() <= 1e-9 * direct.abs());

        // coincident points are at distance zero
        let u = [0.3, -0.2, 0.1];
        assert!(poincare_distance(&u, &u).value.abs() < 1e-9);
        assert!(poincare_distance(&u, &[0.3, -0.2, 0.0]).value > 0.0);

        // both xi placements agree on a one-hot target
        let alt = PoincareParams { xi_target_only: true, ..p };
        assert_eq!(shrunk_one_hot(4, 2, p), shrunk_one_hot(4, 2, alt));
        assert!(poincare(&[0.0, 0.0], 0, p).is_err());
    }

    #[test]
    fn tensor_losses_match_scalar_versions() {
        let rows = vec![vec![0.3f64, -1.2, 2.0, 0.1], vec![1.0, 1.5, -0.5, 0.0]];
        let targets = [2usize, 0];
        let t = Tensor::new(rows.clone(), &Device::Cpu).unwrap();
        for kind in [LossKind::Ce, LossKind::Mm, LossKind::Poincare] {
            let loss = InversionLoss::new(kind);
            let got = loss.per_sample(&t, &targets).unwrap().to_vec1::<f64>().unwrap();
            for (r, (&c, g)) in rows.iter().zip(targets.iter().zip(got)) {
                let want = loss.eval(r, c).unwrap();
                assert!((g - want).abs() < 1e-5, "{kind}: {g} vs {want}");
            }
        }
    }

    #[test]
    fn finite_differences_agree_with_analytic_gradients() {
        let o = [0.4, -1.3, 2.2, 0.05, 0.9];
        for c in 0..5 {
            let v = cross_entropy(&o, c).unwrap();
            let fd = central_diff(|x| cross_entropy(x, c).unwrap().value, &o, 1e-5);
            for (a, b) in v.grad.iter().zip(fd) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn trace_rescales_from_first_step() {
        let mut g = 2.0;
        let trace = record_trend(LossKind::Ce, 4, |_| {
            g *= 0.5;
            Ok(TrendStep {
                grad_l1: g,
                loss: g * 3.0,
                target_logit: 1.0,
                target_prob: 0.5,
                unique_runner_up: true,
            })
        })
        .unwrap();
        assert_eq!(trace.grad_rescaled[0], 1.0);
        assert_eq!(trace.loss_rescaled[0], 1.0);
        assert_eq!(trace.grad_rescaled[3], 0.125);
        assert!(record_trend(LossKind::Ce, 0, |_| unreachable!()).is_err());

        let partial = record_trend(LossKind::Mm, 5, |i| {
            Ok(TrendStep {
                grad_l1: if i == 2 { f64::NAN } else { 2.0 },
                loss: 1.0,
                target_logit: 0.0,
                target_prob: 0.0,
                unique_runner_up: true,
            })
        })
        .unwrap();
        assert_eq!(partial.aborted_at, Some(2));
        assert_eq!(partial.steps.len(), 2);
    }

    proptest! {
        #[test]
        fn ce_gradient_norm_is_twice_one_minus_pc(o in proptest::collection::vec(-20.0f64..20.0, 2..12), c in 0usize..12) {
            let c = c % o.len();
            let v = cross_entropy(&o, c).unwrap();
            let pc = softmax(&o)[c];
            let l1: f64 = v.grad.iter().map(|g| g.abs()).sum();
            prop_assert!((l1 - 2.0 * (1.0 - pc)).abs() < 1e-12);
        }

        #[test]
        fn losses_are_shift_invariant(o in proptest::collection::vec(-10.0f64..10.0, 2..10), c in 0usize..10, s in -50.0f64..50.0) {
            let c = c % o.len();
            let shifted: Vec<f64> = o.iter().map(|v| v + s).collect();
            prop_assert!((cross_entropy(&o, c).unwrap().value - cross_entropy(&shifted, c).unwrap().value).abs() < 1e-9);
            prop_assert!((max_margin(&o, c).unwrap().value - max_margin(&shifted, c).unwrap().value).abs() < 1e-9);
        }

        #[test]
        fn losses_decrease_in_target_logit(o in proptest::collection::vec(-10.0f64..10.0, 2..10), c in 0usize..10, d in 0.01f64..5.0) {
            let c = c % o.len();
            let mut up = o.clone();
            up[c] += d;
            prop_assert!(cross_entropy(&up, c).unwrap().value < cross_entropy(&o, c).unwrap().value);
            prop_assert!(max_margin(&up, c).unwrap().value < max_margin(&o, c).unwrap().value);
        }

        #[test]
        fn poincare_is_non_negative(o in proptest::collection::vec(-5.0f64..5.0, 2..10), c in 0usize..10) {
            let c = c % o.len();
            prop_assume!(o.iter().any(|v| *v != 0.0));
            prop_assert!(poincare(&o, c, PoincareParams::default()).unwrap().value >= 0.0);
        }

        #[test]
        fn autodiff_mm_gradient_has_l1_norm_two(o in proptest::collection::vec(-5.0f64..5.0, 2..10), c in 0usize..10) {
            let c = c % o.len();
            let var = Var::from_vec(o.clone(), (1, o.len()), &Device::Cpu).unwrap();
            let l = InversionLoss::new(LossKind::Mm).per_sample(var.as_tensor(), &[c]).unwrap();
            let g = l.sum_all().unwrap().backward().unwrap();
            let g = g.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            prop_assert_eq!(g, max_margin(&o, c).unwrap().grad);
        }
    }
}
