//! Central finite-difference gradient verification (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub rtol: f64,
    /// Absolute slack added to the relative bound; covers round-off in
    /// coordinates whose true derivative is essentially zero.
    pub atol: f64,
    /// Tensors larger than this are checked on a seeded coordinate subset.
    pub full_check_limit: usize,
    /// Coordinates checked per tensor when subsampling.
    pub sample_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-4,
            atol: 1e-8,
            full_check_limit: 4096,
            sample_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    /// Max over checked coordinates of `|a - n| / max(|a|, |n|, atol / rtol)`.
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    /// Coordinates where every step size straddled a kink and no smooth
    /// difference could be formed.
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rtol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|r| r.max_rel_error <= self.rtol && r.checked > 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// A function evaluated for finite differences: value and branch signature.
pub trait Probe {
    fn eval(&self, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>;
}

impl<F> Probe for F
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    fn eval(&self, inputs: &[Tensor<f64>]) -> Result<(f64, u64)> {
        self(inputs)
    }
}

/// Check `f` (which records a scalar loss on a fresh tape) against central
/// differences for every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let probe = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.branch_signature()))
    };
    check_gradients(&probe, inputs, &analytic, cfg)
}

/// Gradients of `f` at `inputs` from one backward pass.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v).clone()).collect())
}

/// Compare supplied analytic gradients with central differences of `probe`.
///
/// When the perturbed evaluations take different branches than the
/// unperturbed one (a kink lies within the step), the step is shrunk tenfold
/// up to three times before the coordinate is skipped.
pub fn check_gradients<P: Probe + ?Sized>(
    probe: &P,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let (_, base_sig) = probe.eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let floor = cfg.atol / cfg.rtol;
    let mut reports = Vec::with_capacity(inputs.len());
    for (ti, input) in inputs.iter().enumerate() {
        if analytic[ti].shape() != input.shape() {
            return Err(Error::Shape(format!(
                "analytic gradient {:?} for input {:?}",
                analytic[ti].shape(),
                input.shape()
            )));
        }
        let coords: Vec<usize> = if input.len() > cfg.full_check_limit {
            let mut c = sample(&mut rng, input.len(), cfg.sample_coords.min(input.len())).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..input.len()).collect()
        };
        let mut report = InputReport {
            input: ti,
            checked: 0,
            max_rel_error: 0.0,
            worst_coord: None,
            skipped_kinks: 0,
        };
        for &i in &coords {
            let orig = input.data()[i];
            let mut step = cfg.step;
            let mut numeric = None;
            for _ in 0..4 {
                work[ti].data_mut()[i] = orig + step;
                let (fp, sp) = probe.eval(&work)?;
                work[ti].data_mut()[i] = orig - step;
                let (fm, sm) = probe.eval(&work)?;
                work[ti].data_mut()[i] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(n) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let a = analytic[ti].data()[i];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_coord.is_none() {
                report.max_rel_error = err;
                report.worst_coord = Some(i);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        rtol: cfg.rtol,
        inputs: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let g = analytic_gradients(&f, std::slice::from_ref(&x)).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        let cfg = GradCheckConfig {
            rtol: 1e-6,
            ..Default::default()
        };
        let report = grad_check(f, &[x], &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let mut g = analytic_gradients(&f, std::slice::from_ref(&x)).unwrap();
        g[0].data_mut()[1] *= 1.01;
        let probe = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
            let mut tape = Tape::new();
            let v = tape.leaf(xs[0].clone());
            let loss = f(&mut tape, &[v])?;
            Ok((tape.value(loss).item(), 0))
        };
        let report = check_gradients(&probe, &[x], &g, &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.inputs[0].worst_coord, Some(1));
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let x = Tensor::<f64>::from_f64(&[5000], &vec![0.5; 5000]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0]));
        let report = grad_check(f, &[x], &GradCheckConfig::default()).unwrap();
        assert_eq!(report.inputs[0].checked, 64);
        assert!(report.passed());
    }
}
