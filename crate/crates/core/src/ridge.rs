//! Per-episode base learners over pixel features.
//!
//! The default head solves multi-class ridge regression in closed form,
//! `W = argmin ||XW - Y||^2 + lambda ||W||^2`, and predicts
//! `alpha * X'W + beta`. Two alternative heads are provided for ablations:
//! nearest-prototype by squared Euclidean distance, and a linear head trained
//! by a single Adam step from zero.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Ridge,
    Prototype,
    Convstep,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ridge => "ridge",
            HeadKind::Prototype => "prototype",
            HeadKind::Convstep => "convstep",
        }
    }

    /// Whether the head carries learnable scalars.
    pub fn has_scalars(self) -> bool {
        self == HeadKind::Ridge
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(HeadKind::Ridge),
            "prototype" => Ok(HeadKind::Prototype),
            "convstep" => Ok(HeadKind::Convstep),
            other => Err(Error::Config(format!(
                "unknown head `{other}` (expected ridge, prototype or convstep)"
            ))),
        }
    }
}

/// Learnable scalars of the ridge head. `lambda = exp(log_lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeHead<T> {
    pub log_lambda: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> Default for RidgeHead<T> {
    fn default() -> Self {
        Self {
            log_lambda: T::zero(),
            alpha: T::one(),
            beta: T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundRidgeHead {
    pub log_lambda: Var,
    pub alpha: Var,
    pub beta: Var,
}

impl BoundRidgeHead {
    pub fn vars(&self) -> [Var; 3] {
        [self.log_lambda, self.alpha, self.beta]
    }
}

impl<T: Real> RidgeHead<T> {
    pub const NAMES: [&'static str; 3] = ["head.log_lambda", "head.alpha", "head.beta"];

    pub fn lambda(&self) -> T {
        self.log_lambda.exp()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundRidgeHead {
        BoundRidgeHead {
            log_lambda: tape.leaf(Tensor::scalar(self.log_lambda)),
            alpha: tape.leaf(Tensor::scalar(self.alpha)),
            beta: tape.leaf(Tensor::scalar(self.beta)),
        }
    }

    pub fn to_tensors(&self) -> [Tensor<T>; 3] {
        [
            Tensor::scalar(self.log_lambda),
            Tensor::scalar(self.alpha),
            Tensor::scalar(self.beta),
        ]
    }

    pub fn from_tensors(t: &[Tensor<T>]) -> Result<Self> {
        if t.len() != 3 || t.iter().any(|x| x.len() != 1) {
            return Err(Error::Shape("ridge head needs three scalars".into()));
        }
        Ok(Self {
            log_lambda: t[0].item(),
            alpha: t[1].item(),
            beta: t[2].item(),
        })
    }
}

/// One-hot support targets with `classes` columns (column 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTargets<T> {
    pub onehot: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> EpisodeTargets<T> {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("targets need at least one class".into()));
        }
        let mut data = vec![T::zero(); labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            data[i * classes + l] = T::one();
        }
        Ok(Self {
            onehot: Tensor::new(&[labels.len(), classes], data)?,
            labels: labels.to_vec(),
        })
    }

    pub fn classes(&self) -> usize {
        self.onehot.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// Targets restricted to `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        Self::from_labels(&labels, self.classes())
    }
}

fn rows_cols<T: Real>(tape: &Tape<T>, x: Var, what: &str) -> Result<(usize, usize)> {
    match tape.shape(x) {
        [n, c] => Ok((*n, *c)),
        s => Err(Error::Shape(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// Closed-form ridge weights `c x m`, choosing the primal form when the
/// support has at least as many rows as features and the dual otherwise.
pub fn ridge_fit<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, lambda: Var) -> Result<Var> {
    let (n, c) = rows_cols(tape, x, "support features")?;
    if n >= c {
        ridge_fit_primal(tape, x, y, lambda)
    } else {
        ridge_fit_dual(tape, x, y, lambda)
    }
}

fn check_fit_args<T: Real>(tape: &Tape<T>, x: Var, y: Var, lambda: Var) -> Result<()> {
    let (n, _) = rows_cols(tape, x, "support features")?;
    let (ny, _) = rows_cols(tape, y, "support targets")?;
    if n == 0 || n != ny {
        return Err(Error::Shape(format!("ridge fit with {n} feature rows and {ny} target rows")));
    }
    let l = tape.value(lambda);
    if l.len() != 1 || !(l.item() > T::zero()) {
        return Err(Error::InvalidArgument(format!("ridge lambda must be a positive scalar, got {l:?}")));
    }
    Ok(())
}

/// `(X^T X + lambda I_c)^{-1} X^T Y`.
pub fn ridge_fit_primal<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, lambda: Var) -> Result<Var> {
    check_fit_args(tape, x, y, lambda)?;
    let gram = tape.matmul_t(x, x, true, false)?;
    let a = tape.add_scaled_identity(gram, lambda)?;
    let b = tape.matmul_t(x, y, true, false)?;
    tape.spd_solve(a, b)
}

/// `X^T (X X^T + lambda I_n)^{-1} Y`.
pub fn ridge_fit_dual<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, lambda: Var) -> Result<Var> {
    check_fit_args(tape, x, y, lambda)?;
    let kernel = tape.matmul_t(x, x, false, true)?;
    let a = tape.add_scaled_identity(kernel, lambda)?;
    let z = tape.spd_solve(a, y)?;
    tape.matmul_t(x, z, true, false)
}

/// `alpha * X'W + beta`.
pub fn ridge_predict<T: Real>(tape: &mut Tape<T>, xq: Var, w: Var, alpha: Var, beta: Var) -> Result<Var> {
    let raw = tape.matmul(xq, w)?;
    let scaled = tape.scale_by(raw, alpha)?;
    tape.shift_by(scaled, beta)
}

/// Logits `-||x_q - p_k||^2` against per-class mean support features.
pub fn prototype_predict<T: Real>(
    tape: &mut Tape<T>,
    xs: Var,
    targets: &EpisodeTargets<T>,
    xq: Var,
) -> Result<Var> {
    let (n, _) = rows_cols(tape, xs, "support features")?;
    if n != targets.rows() {
        return Err(Error::Shape(format!(
            "{n} support rows with {} targets",
            targets.rows()
        )));
    }
    let m = targets.classes();
    let mut counts = vec![0usize; m];
    for &l in &targets.labels {
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {k} has no support pixels, its prototype is undefined"
        )));
    }
    let mut avg = vec![T::zero(); m * n];
    for (i, &l) in targets.labels.iter().enumerate() {
        avg[l * n + i] = T::one() / T::from_f64(counts[l] as f64);
    }
    let avg = tape.constant(Tensor::new(&[m, n], avg)?);
    let protos = tape.matmul(avg, xs)?;
    tape.neg_sq_dist(xq, protos)
}

/// Logits of a zero-initialized linear head after one Adam step on the
/// support loss `||XW - Y||^2 / n`.
///
/// At the first step the bias-corrected moments are `g` and `g^2`, so the
/// update is `W = -lr * g / (|g| + eps)` with `g = -2 X^T Y / n`.
pub fn convstep_predict<T: Real>(
    tape: &mut Tape<T>,
    xs: Var,
    y: Var,
    xq: Var,
    adam: AdamConfig,
) -> Result<Var> {
    let (n, _) = rows_cols(tape, xs, "support features")?;
    let (ny, _) = rows_cols(tape, y, "support targets")?;
    if n == 0 || n != ny {
        return Err(Error::Shape(format!("convstep with {n} feature rows and {ny} target rows")));
    }
    let xty = tape.matmul_t(xs, y, true, false)?;
    let g = tape.mul_const(xty, T::from_f64(-2.0 / n as f64));
    let mag = tape.abs(g);
    let den = tape.add_const(mag, T::from_f64(adam.eps));
    let ratio = tape.div(g, den)?;
    let w = tape.mul_const(ratio, T::from_f64(-adam.lr));
    tape.matmul(xq, w)
}

/// Indices of at most `cap` rows per class, drawn uniformly without
/// replacement and returned in ascending order.
pub fn subsample_per_class(labels: &[usize], classes: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for k in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if rows.len() > cap {
            rows.shuffle(&mut rng);
            rows.truncate(cap);
        }
        keep.extend(rows);
    }
    keep.sort_unstable();
    keep
}

/// Settings shared by every head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOptions {
    /// Per-class cap on support pixels; `None` keeps all.
    pub support_cap: Option<usize>,
    pub cap_seed: u64,
    /// Step used by the one-step head.
    pub convstep: AdamConfig,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            support_cap: None,
            cap_seed: 0,
            convstep: AdamConfig::default(),
        }
    }
}

/// Query logits `n' x (K+1)` for the chosen head.
pub fn head_logits<T: Real>(
    tape: &mut Tape<T>,
    kind: HeadKind,
    ridge: Option<&BoundRidgeHead>,
    xs: Var,
    targets: &EpisodeTargets<T>,
    xq: Var,
    opts: &HeadOptions,
) -> Result<Var> {
    let (n, _) = rows_cols(tape, xs, "support features")?;
    if n != targets.rows() {
        return Err(Error::Shape(format!(
            "{n} support rows with {} targets",
            targets.rows()
        )));
    }
    let (xs, targets) = match opts.support_cap {
        Some(cap) => {
            let keep = subsample_per_class(&targets.labels, targets.classes(), cap, opts.cap_seed);
            let mut sel = vec![T::zero(); keep.len() * n];
            for (r, &i) in keep.iter().enumerate() {
                sel[r * n + i] = T::one();
            }
            let sel = tape.constant(Tensor::new(&[keep.len(), n], sel)?);
            (tape.matmul(sel, xs)?, targets.select(&keep)?)
        }
        None => (xs, targets.clone()),
    };
    match kind {
        HeadKind::Ridge => {
            let head = ridge.ok_or_else(|| Error::InvalidArgument("ridge head needs its scalars".into()))?;
            let y = tape.constant(targets.onehot.clone());
            let lambda = tape.exp(head.log_lambda);
            let w = ridge_fit(tape, xs, y, lambda)?;
            ridge_predict(tape, xq, w, head.alpha, head.beta)
        }
        HeadKind::Prototype => prototype_predict(tape, xs, &targets, xq),
        HeadKind::Convstep => {
            let y = tape.constant(targets.onehot.clone());
            convstep_predict(tape, xs, y, xq, opts.convstep)
        }
    }
}
