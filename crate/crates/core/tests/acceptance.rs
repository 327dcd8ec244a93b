//! Acceptance criteria 1-8. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr so it shows up even when output is captured.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use metaseg::autodiff::Tape;
use metaseg::embed::{EmbedConfig, Setting};
use metaseg::episodes::{gen_synthetic, sample_episode, SegDataset, Split, SynthConfig};
use metaseg::eval::{evaluate, shot_sweep};
use metaseg::ridge::{ridge_fit, ridge_fit_dual, ridge_fit_primal, HeadKind};
use metaseg::trainer::{decode_checkpoint, encode_checkpoint, meta_train, Checkpoint, Model, RunOptions, TrainConfig};
use metaseg::verify::{run_verification, VerifyOptions};
use metaseg::Tensor;

const PINNED_CHECKSUM: &str = "39292e4862b08f870e13f0af74cb4e9ac0ebcc2ec288ff87c6831e1447e764a5";
const EVAL_TASKS: usize = 200;
const EVAL_SEED: u64 = 2024;
const CONTROL_SEED: u64 = 777;

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("\ncriterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Serialises the heavy tests so timings are not shared with other tests.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|p| p.into_inner())
}

fn pinned_dataset() -> &'static SegDataset {
    static DS: OnceLock<SegDataset> = OnceLock::new();
    DS.get_or_init(|| gen_synthetic(&SynthConfig::default()).unwrap())
}

struct Trained {
    model: Model<f32>,
    seconds: f64,
}

fn train(cfg: TrainConfig) -> Trained {
    let start = Instant::now();
    let ck = meta_train::<f32>(pinned_dataset(), &cfg, None, RunOptions::default(), |_| Ok(())).unwrap();
    Trained {
        model: ck.model,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn desk_config(head: HeadKind, gc: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        head,
        eval_every: 0,
        ..TrainConfig::default()
    };
    cfg.embed.gc_branch_enabled = gc;
    cfg
}

fn ridge_model() -> &'static Trained {
    static M: OnceLock<Trained> = OnceLock::new();
    M.get_or_init(|| train(desk_config(HeadKind::Ridge, true)))
}

fn five_shot(model: &Model<f32>) -> f64 {
    evaluate(model, pinned_dataset(), Split::Novel, 2, 5, 2, EVAL_TASKS, EVAL_SEED, RunOptions::default())
        .unwrap()
        .mean
}

#[test]
fn criterion_1_gradient_correctness() {
    let _g = exclusive();
    let start = Instant::now();
    let r = run_verification(&VerifyOptions::default(), |_| {});
    let secs = start.elapsed().as_secs_f64();
    let pass = r.passed() && secs <= 600.0;
    report(1, pass, &format!("verify battery {} checks in {secs:.0}s", r.checks.len()));
    assert!(pass, "{}", r.to_text());
}

/// Gradient descent on `||XW - Y||^2 + lambda ||W||^2` with step `1/L`, run
/// until the gradient norm bounds the distance to the optimum by `tol`.
fn gd_oracle(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64, tol: f64) -> Vec<Vec<f64>> {
    let (n, c, m) = (x.len(), x[0].len(), y[0].len());
    let mut xtx = vec![vec![0.0; c]; c];
    let mut xty = vec![vec![0.0; m]; c];
    for r in 0..n {
        for i in 0..c {
            for j in 0..c {
                xtx[i][j] += x[r][i] * x[r][j];
            }
            for j in 0..m {
                xty[i][j] += x[r][i] * y[r][j];
            }
        }
    }
    // Gershgorin row sums bound the largest eigenvalue of X^T X
    let gersh = xtx.iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let l = 2.0 * (gersh + lambda);
    let mu = 2.0 * lambda;
    let mut w = vec![vec![0.0; m]; c];
    loop {
        let mut g = vec![vec![0.0; m]; c];
        let mut norm2 = 0.0;
        for i in 0..c {
            for j in 0..m {
                let s: f64 = (0..c).map(|k| xtx[i][k] * w[k][j]).sum::<f64>() + lambda * w[i][j] - xty[i][j];
                g[i][j] = 2.0 * s;
                norm2 += g[i][j] * g[i][j];
            }
        }
        if norm2.sqrt() / mu <= tol {
            return w;
        }
        for i in 0..c {
            for j in 0..m {
                w[i][j] -= g[i][j] / l;
            }
        }
    }
}

#[test]
fn criterion_2_closed_form_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_gd, mut worst_pd) = (0.0f64, 0.0f64);
    let combos = 60;
    for _ in 0..combos {
        let n = rng.random_range(2..=40);
        let c = rng.random_range(2..=40);
        let m = 3;
        let lambda = [0.1, 0.5, 1.0, 5.0, 20.0][rng.random_range(0..5)];
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let hot = rng.random_range(0..m);
                (0..m).map(|j| if j == hot { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
        let xt = Tensor::<f64>::new(&[n, c], flat(&x)).unwrap();
        let yt = Tensor::<f64>::new(&[n, m], flat(&y)).unwrap();
        let solve = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(xt.clone());
            let yv = tape.constant(yt.clone());
            let l = tape.constant(Tensor::scalar(lambda));
            let w = match which {
                0 => ridge_fit(&mut tape, xv, yv, l),
                1 => ridge_fit_primal(&mut tape, xv, yv, l),
                _ => ridge_fit_dual(&mut tape, xv, yv, l),
            }
            .unwrap();
            tape.value(w).data().to_vec()
        };
        let oracle = flat(&gd_oracle(&x, &y, lambda, 1e-9));
        let fit = solve(0);
        worst_gd = fit.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst_gd, f64::max);
        worst_pd = solve(1).iter().zip(solve(2)).map(|(a, b)| (a - b).abs()).fold(worst_pd, f64::max);
    }
    let pass = worst_gd <= 1e-6 && worst_pd <= 1e-8;
    report(
        2,
        pass,
        &format!("{combos} combos, |W - W_gd|_inf {worst_gd:.2e}, |W_primal - W_dual|_inf {worst_pd:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_desk_scale_learning() {
    let _g = exclusive();
    let ds = pinned_dataset();
    assert_eq!(ds.checksum(), PINNED_CHECKSUM);
    assert_eq!((ds.classes.len(), ds.train_classes.len(), ds.novel_classes.len(), ds.height), (14, 10, 4, 32));
    let trained = ridge_model();
    let cfg = desk_config(HeadKind::Ridge, true);
    let control = Model::<f32>::new(&cfg.embed, HeadKind::Ridge, CONTROL_SEED).unwrap();
    let (m, c) = (five_shot(&trained.model), five_shot(&control));
    let pass = m >= 0.50 && m >= 3.0 * c && trained.seconds <= 45.0 * 60.0;
    report(
        3,
        pass,
        &format!(
            "novel mIoU {m:.4} (need >= 0.50), control {c:.4}, ratio {:.2} (need >= 3), trained in {:.0}s",
            m / c,
            trained.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_shot_monotonicity() {
    let _g = exclusive();
    let model = &ridge_model().model;
    let sweep = shot_sweep(model, pinned_dataset(), Split::Novel, 2, &[1, 5], 2, EVAL_TASKS, EVAL_SEED, RunOptions::default())
        .unwrap();
    let (one, five) = (sweep.rows[0].mean, sweep.rows[1].mean);
    let pass = five >= one + 0.02;
    report(4, pass, &format!("1-shot {one:.4}, 5-shot {five:.4}, gain {:.4} (need >= 0.02)", five - one));
    assert!(pass);
}

#[test]
fn criterion_5_ablation_ordering() {
    let _g = exclusive();
    let ridge = five_shot(&ridge_model().model);
    let conv = five_shot(&train(desk_config(HeadKind::Convstep, true)).model);
    let no_gc = five_shot(&train(desk_config(HeadKind::Ridge, false)).model);
    let pass = ridge >= conv + 0.02 && ridge >= no_gc;
    report(
        5,
        pass,
        &format!(
            "ridge {ridge:.4} vs convstep {conv:.4} (margin {:.4}, need >= 0.02); GC on {ridge:.4} vs off {no_gc:.4} (margin {:+.4})",
            ridge - conv,
            ridge - no_gc
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_protocol_invariants() {
    let ds = pinned_dataset();
    let settings = [(2, 5, 2), (2, 1, 2), (1, 5, 1), (3, 1, 1)];
    let mut violations = Vec::new();
    for i in 0..10_000u64 {
        let split = if i % 2 == 0 { Split::Train } else { Split::Novel };
        let (k, n, q) = settings[(i as usize / 2) % settings.len()];
        let ep = sample_episode(ds, split, k, n, q, i).unwrap();
        let allowed = ds.split_ids(split);
        let mut bad = ep.support.len() != k * n || ep.query.len() != k * q;
        bad |= ep.class_table.iter().any(|c| !allowed.contains(c));
        for s in ep.support.iter().chain(&ep.query) {
            bad |= s.mask.iter().any(|&l| l as usize > k);
            bad |= ds.records[s.record].present.iter().any(|c| !allowed.contains(c));
        }
        bad |= ep.support_labels().iter().chain(&ep.query_labels()).any(|&l| l > k);
        bad |= sample_episode(ds, split, k, n, q, i).unwrap() != ep;
        if bad {
            violations.push(i);
        }
    }
    let pass = violations.is_empty();
    report(6, pass, &format!("10000 episodes, {} with violations", violations.len()));
    assert!(pass, "{violations:?}");
}

#[test]
fn criterion_7_parameter_count() {
    let count = Model::<f32>::new(&EmbedConfig::full(Setting::KWay), HeadKind::Ridge, 0)
        .unwrap()
        .embed
        .count_params();
    let pass = (10_500_000..=15_700_000).contains(&count);
    report(7, pass, &format!("{count} trainable embedding parameters"));
    assert!(pass);
}

#[test]
fn criterion_8_persistence() {
    let ds = gen_synthetic(&SynthConfig {
        num_classes: 6,
        images_per_class: 10,
        image_size: 16,
        radius_min: 3.0,
        radius_max: 6.0,
        novel_classes: vec![5, 6],
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        episodes_per_epoch: 4,
        n: 2,
        q: 1,
        eval_every: 1,
        eval_tasks: 2,
        embed: EmbedConfig::micro(4),
        ..TrainConfig::default()
    };
    let full = meta_train::<f32>(&ds, &cfg, None, RunOptions::default(), |_| Ok(())).unwrap();
    let first = meta_train::<f32>(&ds, &TrainConfig { epochs: 1, ..cfg.clone() }, None, RunOptions::default(), |_| Ok(()))
        .unwrap();
    let reloaded: Checkpoint<f32> = decode_checkpoint(&encode_checkpoint(&first)).unwrap();
    let resumed = meta_train::<f32>(&ds, &cfg, Some(reloaded), RunOptions::default(), |_| Ok(())).unwrap();

    let bytes = encode_checkpoint(&full);
    let again = encode_checkpoint(&decode_checkpoint::<f32>(&bytes).unwrap());
    let round_trip = bytes == again;
    let resume_exact = encode_checkpoint(&resumed) == bytes;
    let pass = round_trip && resume_exact;
    report(
        8,
        pass,
        &format!("save/load/save identical: {round_trip}; resumed run identical to uninterrupted: {resume_exact}"),
    );
    assert!(pass);
}
