//! The f64 verification battery run by `metaseg verify`.
//!
//! Every check is self-contained and deterministic. A failing check never
//! aborts the battery; the report carries the overall verdict.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gradcheck::{analytic_gradients, check_gradients, grad_check, GradCheckConfig};
use crate::autodiff::{BnMode, Conv2dOpts, PoolMode, Tape, Var};
use crate::embed::{BoundEmbedding, EmbedConfig, Mode};
use crate::episodes::{gen_synthetic, sample_episode, Episode, SegDataset, Split, SynthConfig};
use crate::error::Result;
use crate::ridge::{ridge_fit, ridge_fit_dual, ridge_fit_primal, BoundRidgeHead, EpisodeTargets, HeadKind, HeadOptions};
use crate::tensor::Tensor;
use crate::trainer::{decode_checkpoint, encode_checkpoint, episode_forward, Checkpoint, LossResolution, Model, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub sampler_episodes: usize,
    pub ridge_combos: usize,
    /// Perturb the analytic pipeline gradient before comparing; the battery
    /// must then fail. Used to test the checker itself.
    pub inject_gradient_bug: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            sampler_episodes: 10_000,
            ridge_combos: 60,
            inject_gradient_bug: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{verdict}  {:<22} {:>7.2}s  {}\n", c.name, c.seconds, c.detail));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        s
    }
}

/// Run every check, invoking `progress` after each one.
pub fn run_verification(opts: &VerifyOptions, mut progress: impl FnMut(&CheckResult)) -> VerifyReport {
    type Check<'a> = (&'static str, Box<dyn Fn() -> Result<(bool, String)> + 'a>);
    let checks: Vec<Check> = vec![
        ("op_gradients", Box::new(|| check_op_gradients(opts.seed))),
        ("pipeline_primal", Box::new(|| check_pipeline(4, 2, LossResolution::Feature, opts))),
        ("pipeline_dual", Box::new(|| check_pipeline(8, 1, LossResolution::Feature, opts))),
        ("pipeline_full_res", Box::new(|| check_pipeline(4, 1, LossResolution::Full, opts))),
        ("ridge_gd_oracle", Box::new(|| check_ridge_oracle(opts.ridge_combos, opts.seed))),
        ("ridge_primal_dual", Box::new(|| check_primal_dual(opts.ridge_combos, opts.seed))),
        ("spd_solve_residual", Box::new(|| check_spd_residual(opts.seed))),
        ("sampler_invariants", Box::new(|| check_sampler(opts.sampler_episodes, opts.seed))),
        ("checkpoint_roundtrip", Box::new(check_checkpoint_roundtrip)),
    ];
    let mut report = VerifyReport::default();
    for (name, check) in checks {
        let t = Instant::now();
        let (passed, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let result = CheckResult {
            name: name.to_string(),
            passed,
            detail,
            seconds: t.elapsed().as_secs_f64(),
        };
        progress(&result);
        report.checks.push(result);
    }
    report
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> Tensor<f64> {
    let r = randn(rng, &[m, m]);
    let mut a = r.transpose2().matmul(&r).expect("square");
    for i in 0..m {
        a.data_mut()[i * m + i] += m as f64 * 0.5;
    }
    a
}

type OpFn = fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>;

/// Each op is composed with a fixed random projection so that every output
/// coordinate contributes to the scalar.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("conv2d", vec![vec![2, 3, 6, 5], vec![4, 3, 3, 3], vec![4]], |t, v, s| {
            let dil = 1 + (s as usize % 3);
            let opts = Conv2dOpts {
                stride: 1 + (s as usize % 2),
                padding: dil,
                dilation: dil,
            };
            t.conv2d(v[0], v[1], Some(v[2]), opts)
        }),
        ("max_pool", vec![vec![2, 2, 5, 4]], |t, v, _| t.pool2d(v[0], PoolMode::Max2x2)),
        ("global_avg_pool", vec![vec![2, 3, 4, 3]], |t, v, _| t.pool2d(v[0], PoolMode::GlobalAvg)),
        ("replicate_upsample", vec![vec![2, 3, 1, 1]], |t, v, _| t.replicate_upsample(v[0], 3, 4)),
        ("bilinear_upsample", vec![vec![1, 2, 3, 3]], |t, v, _| t.bilinear_upsample(v[0], 12, 10)),
        ("batchnorm_train", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |t, v, _| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Train, (&[0.0, 0.0], &[1.0, 1.0]))?.0)
        }),
        ("batchnorm_eval", vec![vec![2, 2, 3, 3], vec![2], vec![2]], |t, v, _| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval, (&[0.3, -0.2], &[1.5, 0.7]))?.0)
        }),
        ("leaky_relu", vec![vec![4, 5]], |t, v, _| Ok(t.leaky_relu(v[0], 0.1))),
        ("l2_normalize", vec![vec![2, 3, 3, 2]], |t, v, _| t.l2_normalize_channels(v[0])),
        ("concat_rows", vec![vec![2, 2, 3, 2], vec![2, 3, 3, 2]], |t, v, _| {
            let c = t.concat_channels(v[0], v[1])?;
            let r = t.pixel_rows(c)?;
            let back = t.rows_to_maps(r, 2, 3, 2)?;
            t.pixel_rows(back)
        }),
        ("matmul", vec![vec![4, 3], vec![5, 3], vec![4, 2]], |t, v, _| {
            let ab = t.matmul_t(v[0], v[1], false, true)?;
            let cab = t.matmul_t(v[2], ab, true, false)?;
            t.matmul_t(cab, v[1], false, false)
        }),
        ("scalar_ops", vec![vec![3, 3], vec![], vec![]], |t, v, _| {
            let e = t.exp(v[1]);
            let id = t.add_scaled_identity(v[0], e)?;
            let sc = t.scale_by(id, v[2])?;
            t.shift_by(sc, e)
        }),
        ("div_abs", vec![vec![6], vec![6]], |t, v, _| {
            let a = t.abs(v[1]);
            let d = t.add_const(a, 0.1);
            t.div(v[0], d)
        }),
        ("neg_sq_dist", vec![vec![5, 3], vec![2, 3]], |t, v, _| t.neg_sq_dist(v[0], v[1])),
        ("spd_solve", vec![vec![4, 4], vec![4, 2]], |t, v, _| t.spd_solve(v[0], v[1])),
        ("softmax_cross_entropy", vec![vec![5, 3]], |t, v, _| t.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0])),
    ]
}

fn check_op_gradients(seed: u64) -> Result<(bool, String)> {
    let cfg = GradCheckConfig::default();
    let mut worst = (0.0, "");
    let mut failed = Vec::new();
    let mut checked = 0;
    for (name, shapes, op) in op_cases() {
        for s in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + s);
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, sh)| {
                    if name == "spd_solve" && i == 0 {
                        random_spd(&mut rng, sh[0])
                    } else {
                        randn(&mut rng, sh)
                    }
                })
                .collect();
            let f = |tape: &mut Tape<f64>, v: &[Var]| {
                let y = op(tape, v, s)?;
                let mut prng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
                let w = tape.constant(randn(&mut prng, tape.shape(y)));
                let p = tape.mul(y, w)?;
                Ok(tape.sum(p))
            };
            let report = grad_check(f, &inputs, &GradCheckConfig { seed: s, ..cfg })?;
            checked += report.inputs.iter().map(|r| r.checked).sum::<usize>();
            if report.max_rel_error() > worst.0 {
                worst = (report.max_rel_error(), name);
            }
            if !report.passed() {
                failed.push(format!("{name}/seed{s}"));
            }
        }
    }
    let detail = format!(
        "{checked} coordinates, max rel err {:.2e} ({}){}",
        worst.0,
        worst.1,
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
    );
    Ok((failed.is_empty(), detail))
}

fn micro_dataset() -> Result<SegDataset> {
    gen_synthetic(&SynthConfig {
        num_classes: 4,
        image_size: 8,
        images_per_class: 6,
        objects_min: 1,
        objects_max: 1,
        radius_min: 2.0,
        radius_max: 3.5,
        mix_prob: 0.0,
        novel_classes: vec![4],
        ..SynthConfig::default()
    })
}

/// Finite differences of the episode loss with respect to every embedding
/// parameter and the three head scalars.
fn check_pipeline(channels: usize, shots: usize, res: LossResolution, opts: &VerifyOptions) -> Result<(bool, String)> {
    let ds = micro_dataset()?;
    let episode = sample_episode(&ds, Split::Train, 2, shots, 1, opts.seed)?;
    let mut model = Model::<f64>::new(&EmbedConfig::micro(channels), HeadKind::Ridge, opts.seed)?;
    // move the head off its initial point so every scalar has a generic gradient
    model.head.log_lambda = -0.3;
    model.head.alpha = 1.7;
    model.head.beta = 0.2;
    let inputs: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let head_opts = HeadOptions::default();
    let loss_of = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let (embed, head) = v.split_at(v.len() - 3);
        let bound = crate::trainer::BoundModel {
            embed: BoundEmbedding::from_vars(embed.to_vec()),
            head: Some(BoundRidgeHead {
                log_lambda: head[0],
                alpha: head[1],
                beta: head[2],
            }),
        };
        Ok(episode_forward(tape, &model, &bound, &episode, Mode::Train, res, &head_opts)?.loss)
    };
    let mut analytic = analytic_gradients(&loss_of, &inputs)?;
    if opts.inject_gradient_bug {
        // alpha; beta shifts every logit equally and has zero gradient
        let alpha = analytic.len() - 2;
        analytic[alpha].data_mut()[0] *= 1.01;
    }
    let probe = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = loss_of(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.branch_signature()))
    };
    let report = check_gradients(&probe, &inputs, &analytic, &GradCheckConfig::default())?;
    let names = model.named_params();
    let checked: usize = report.inputs.iter().map(|r| r.checked).sum();
    let kinks: usize = report.inputs.iter().map(|r| r.skipped_kinks).sum();
    let worst = report
        .inputs
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|r| names[r.input].0.as_str())
        .unwrap_or("-");
    let support_px = episode.support_labels().len();
    let detail = format!(
        "{} params, {checked} coords ({kinks} at kinks), {support_px} support px vs {} features, max rel err {:.2e} ({worst})",
        names.len(),
        model.embed.config.feature_width(),
        report.max_rel_error()
    );
    Ok((report.passed(), detail))
}

/// Minimiser of `||XW - Y||^2 + lambda ||W||^2` by gradient descent with
/// step `1/L`, stopped once the gradient certifies `||W - W*||_F <= tol`
/// (strong convexity constant `2 lambda`).
pub fn ridge_gd_oracle(x: &Tensor<f64>, y: &Tensor<f64>, lambda: f64, tol: f64) -> Tensor<f64> {
    let (c, m) = (x.shape()[1], y.shape()[1]);
    let xtx = x.transpose2().matmul(x).expect("shapes");
    let xty = x.transpose2().matmul(y).expect("shapes");
    // Gershgorin bound on the largest eigenvalue of X^T X
    let gersh = (0..c)
        .map(|i| (0..c).map(|j| xtx.at2(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let l = 2.0 * (gersh + lambda);
    let mu = 2.0 * lambda;
    let mut w = vec![0.0; c * m];
    let mut g = vec![0.0; c * m];
    loop {
        let mut norm2 = 0.0;
        for i in 0..c {
            for j in 0..m {
                let mut s = lambda * w[i * m + j] - xty.at2(i, j);
                for k in 0..c {
                    s += xtx.at2(i, k) * w[k * m + j];
                }
                g[i * m + j] = 2.0 * s;
                norm2 += 4.0 * s * s;
            }
        }
        if norm2.sqrt() / mu <= tol {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= gi / l;
        }
    }
    Tensor::new(&[c, m], w).expect("shape")
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, f64) {
    let n = rng.random_range(2..=48);
    let c = rng.random_range(2..=48);
    let k = rng.random_range(2..=4);
    let lambda = 10f64.powf(rng.random_range(-1.0..1.5));
    let x = randn(rng, &[n, c]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let y = EpisodeTargets::<f64>::from_labels(&labels, k).expect("labels").onehot;
    (x, y, lambda)
}

fn fit_with(x: &Tensor<f64>, y: &Tensor<f64>, lambda: f64, form: u8) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let l = tape.constant(Tensor::scalar(lambda));
    let w = match form {
        0 => ridge_fit(&mut tape, xv, yv, l)?,
        1 => ridge_fit_primal(&mut tape, xv, yv, l)?,
        _ => ridge_fit_dual(&mut tape, xv, yv, l)?,
    };
    Ok(tape.value(w).clone())
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn check_ridge_oracle(combos: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd5);
    let mut worst: f64 = 0.0;
    for _ in 0..combos {
        let (x, y, lambda) = random_problem(&mut rng);
        let oracle = ridge_gd_oracle(&x, &y, lambda, 1e-9);
        worst = worst.max(max_abs_diff(&fit_with(&x, &y, lambda, 0)?, &oracle));
    }
    Ok((worst <= 1e-6, format!("{combos} (n, c, lambda) combos, max |dW| {worst:.2e} (tol 1e-6)")))
}

fn check_primal_dual(combos: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0a1);
    let mut worst: f64 = 0.0;
    for _ in 0..combos {
        let (x, y, lambda) = random_problem(&mut rng);
        worst = worst.max(max_abs_diff(&fit_with(&x, &y, lambda, 1)?, &fit_with(&x, &y, lambda, 2)?));
    }
    Ok((worst <= 1e-8, format!("{combos} combos, max |primal - dual| {worst:.2e} (tol 1e-8)")))
}

fn check_spd_residual(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd);
    let mut worst: f64 = 0.0;
    for m in [1, 3, 8, 20, 64] {
        let a = random_spd(&mut rng, m);
        let b = randn(&mut rng, &[m, 3]);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let xv = tape.spd_solve(av, bv)?;
        let r = a.matmul(tape.value(xv))?;
        worst = worst.max(max_abs_diff(&r, &b) / b.max_abs());
    }
    Ok((worst <= 1e-10, format!("max ||AX - B|| / ||B|| {worst:.2e}")))
}

/// Violations of the episode contract, empty when the episode is valid.
pub fn episode_violations(ds: &SegDataset, split: Split, ep: &Episode) -> Vec<String> {
    let mut v = Vec::new();
    let (k, n, q) = (ep.k, ep.n, ep.q);
    if ep.support.len() != k * n || ep.query.len() != k * q {
        v.push(format!("sizes {}+{} for {k}-way {n}-shot {q}-query", ep.support.len(), ep.query.len()));
    }
    let allowed = ds.split_ids(split);
    if ep.class_table.len() != k || ep.class_table.iter().any(|c| !allowed.contains(c)) {
        v.push(format!("class table {:?} outside {split:?} split", ep.class_table));
    }
    let mut records: Vec<usize> = ep.support.iter().chain(&ep.query).map(|s| s.record).collect();
    records.sort_unstable();
    if records.windows(2).any(|w| w[0] == w[1]) {
        v.push("an image appears twice".into());
    }
    for (set, samples, per) in [("support", &ep.support, n), ("query", &ep.query, q)] {
        for (i, s) in samples.iter().enumerate() {
            let rec = &ds.records[s.record];
            if rec.present.iter().any(|c| !ep.class_table.contains(c)) {
                v.push(format!("{set} image {} shows classes {:?}", rec.name, rec.present));
            }
            let slot = (i / per.max(1)) as u8 + 1;
            if !s.mask.contains(&slot) {
                v.push(format!("{set} image {i} lacks its class {slot}"));
            }
            if s.mask.iter().any(|&l| l as usize > k) {
                v.push(format!("{set} image {i} has a label above {k}"));
            }
        }
    }
    if ep.support_labels().iter().chain(&ep.query_labels()).any(|&l| l > k) {
        v.push("downsampled label above K".into());
    }
    v
}

fn check_sampler(episodes: usize, seed: u64) -> Result<(bool, String)> {
    let ds = gen_synthetic(&SynthConfig::default())?;
    let settings = [(1, 1, 1), (2, 1, 2), (2, 5, 2), (3, 5, 1), (1, 5, 2)];
    let mut bad = Vec::new();
    for i in 0..episodes {
        let split = if i % 2 == 0 { Split::Train } else { Split::Novel };
        let (k, n, q) = settings[(i / 2) % settings.len()];
        let s = crate::episodes::derive_seed(seed, &[7, i as u64]);
        let ep = sample_episode(&ds, split, k, n, q, s)?;
        let mut v = episode_violations(&ds, split, &ep);
        if sample_episode(&ds, split, k, n, q, s)? != ep {
            v.push("not reproducible".into());
        }
        if !v.is_empty() && bad.len() < 5 {
            bad.push(format!("episode {i}: {}", v.join("; ")));
        }
    }
    let detail = if bad.is_empty() {
        format!("{episodes} episodes, sizes/labels/splits/reproducibility hold")
    } else {
        bad.join(" | ")
    };
    Ok((bad.is_empty(), detail))
}

fn check_checkpoint_roundtrip() -> Result<(bool, String)> {
    let cfg = TrainConfig {
        embed: EmbedConfig::micro(4),
        ..TrainConfig::default()
    };
    let ck = Checkpoint::<f64>::initial(&cfg)?;
    let a = encode_checkpoint(&ck);
    let back = decode_checkpoint::<f64>(&a)?;
    let b = encode_checkpoint(&back);
    let same = a == b && back == ck;
    Ok((same, format!("{} bytes, save/load/save identical: {same}", a.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_oracle_solves_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y, lambda) = random_problem(&mut rng);
        let w = ridge_gd_oracle(&x, &y, lambda, 1e-10);
        let xt = x.transpose2();
        let mut lhs = xt.matmul(&x).unwrap();
        let c = lhs.shape()[0];
        for i in 0..c {
            lhs.data_mut()[i * c + i] += lambda;
        }
        let r = max_abs_diff(&lhs.matmul(&w).unwrap(), &xt.matmul(&y).unwrap());
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn injected_bug_fails_the_pipeline_check() {
        let opts = VerifyOptions {
            inject_gradient_bug: true,
            ..Default::default()
        };
        let (ok, detail) = check_pipeline(4, 1, LossResolution::Feature, &opts).unwrap();
        assert!(!ok, "{detail}");
    }

    #[test]
    fn short_battery_passes() {
        let opts = VerifyOptions {
            sampler_episodes: 200,
            ridge_combos: 8,
            ..Default::default()
        };
        let report = run_verification(&opts, |_| {});
        assert!(report.passed(), "{}", report.to_text());
    }
}
