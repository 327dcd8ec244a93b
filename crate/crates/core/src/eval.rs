//! Task-averaged mIoU over novel-class episodes.

use std::time::Instant;

use crate::autodiff::Tape;
use crate::embed::Mode;
use crate::episodes::{derive_seed, sample_episode, Episode, SegDataset, Split};
use crate::error::{Error, Result};
use crate::ridge::{head_logits, EpisodeTargets, HeadOptions};
use crate::tensor::Real;
use crate::trainer::{parallel_map, Model, RunOptions};

/// Per-class IoU (`None` for classes absent from both masks) and their mean.
///
/// Classes that appear in neither mask are left out of the mean; the
/// background class counts like any other.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut pred_n = vec![0usize; num_classes];
    let mut gt_n = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: p.max(g),
                classes: num_classes,
            });
        }
        pred_n[p] += 1;
        gt_n[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let ious: Vec<Option<f64>> = (0..num_classes)
        .map(|k| {
            let union = pred_n[k] + gt_n[k] - inter[k];
            (union > 0).then(|| inter[k] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("mIoU of empty masks is undefined".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((ious, mean))
}

/// Full-resolution predicted labels for every query image, image-major.
///
/// Logits are bilinearly upsampled from the feature grid before the argmax.
pub fn predict_episode<T: Real>(model: &Model<T>, episode: &Episode, opts: &HeadOptions) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let xs = tape.constant(episode.support_images());
    let xq = tape.constant(episode.query_images());
    let (fs, _) = model.embed.forward(&mut tape, &bound.embed, xs, Mode::Eval)?;
    let (fq, _) = model.embed.forward(&mut tape, &bound.embed, xq, Mode::Eval)?;
    let targets = EpisodeTargets::from_labels(&episode.support_labels(), episode.classes())?;
    let logits = head_logits(&mut tape, model.kind, bound.head.as_ref(), fs.matrix, &targets, fq.matrix, opts)?;
    let maps = tape.rows_to_maps(logits, fq.images, fq.height, fq.width)?;
    let up = tape.bilinear_upsample(maps, episode.height, episode.width)?;
    let v = tape.value(up);
    let (n, m, px) = (v.shape()[0], v.shape()[1], episode.height * episode.width);
    let mut out = Vec::with_capacity(n * px);
    for img in 0..n {
        let block = &v.data()[img * m * px..(img + 1) * m * px];
        for p in 0..px {
            let mut best = 0;
            for k in 1..m {
                // strict comparison keeps the lowest class id on ties
                if block[k * px + p] > block[best * px + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub seed: u64,
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub tasks: Vec<TaskResult>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub seconds: f64,
}

impl EvalReport {
    fn from_tasks(k: usize, n: usize, q: usize, tasks: Vec<TaskResult>, seconds: f64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one task".into()));
        }
        let count = tasks.len() as f64;
        let mean = tasks.iter().map(|t| t.miou).sum::<f64>() / count;
        let var = tasks.iter().map(|t| (t.miou - mean).powi(2)).sum::<f64>() / count;
        let min = tasks.iter().map(|t| t.miou).fold(f64::INFINITY, f64::min);
        let max = tasks.iter().map(|t| t.miou).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            k,
            n,
            q,
            tasks,
            mean,
            std: var.sqrt(),
            min,
            max,
            seconds,
        })
    }

    /// `task_seed,class_iou_0..class_iou_K,miou`; excluded classes are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_seed");
        for c in 0..=self.k {
            out.push_str(&format!(",class_iou_{c}"));
        }
        out.push_str(",miou\n");
        for t in &self.tasks {
            out.push_str(&t.seed.to_string());
            for iou in &t.class_iou {
                out.push(',');
                if let Some(v) = iou {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push_str(&format!(",{:.6}\n", t.miou));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{}-way {}-shot, {} tasks: mIoU {:.4} +/- {:.4} (min {:.4}, max {:.4}) in {:.1}s",
            self.k,
            self.n,
            self.tasks.len(),
            self.mean,
            self.std,
            self.min,
            self.max,
            self.seconds
        )
    }
}

fn task_seed(seed: u64, task: usize) -> u64 {
    derive_seed(seed, &[task as u64])
}

fn score_task<T: Real>(model: &Model<T>, episode: &Episode, seed: u64) -> Result<TaskResult> {
    let opts = HeadOptions {
        cap_seed: seed,
        ..HeadOptions::default()
    };
    let pred = predict_episode(model, episode, &opts)?;
    let (class_iou, m) = miou(&pred, &episode.query_labels_full(), episode.classes())?;
    Ok(TaskResult {
        seed,
        class_iou,
        miou: m,
    })
}

/// Mean task mIoU over `num_tasks` episodes drawn from `split`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    model: &Model<T>,
    dataset: &SegDataset,
    split: Split,
    k: usize,
    n: usize,
    q: usize,
    num_tasks: usize,
    seed: u64,
    run: RunOptions,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one task".into()));
    }
    let start = Instant::now();
    let tasks = parallel_map(num_tasks, run.workers, |t| {
        let s = task_seed(seed, t);
        let ep = sample_episode(dataset, split, k, n, q, s)?;
        score_task(model, &ep, s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EvalReport::from_tasks(k, n, q, tasks, start.elapsed().as_secs_f64())
}

/// Keep the first `shots` support images of every class.
fn with_shots(ep: &Episode, shots: usize) -> Episode {
    let support = ep
        .support
        .chunks(ep.n)
        .flat_map(|c| c[..shots].iter().cloned())
        .collect();
    Episode {
        n: shots,
        support,
        ..ep.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotSweep {
    pub rows: Vec<EvalReport>,
}

impl ShotSweep {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>6}  {:>8}  {:>8}  {:>6}\n", "shots", "mIoU", "std", "tasks");
        for r in &self.rows {
            out.push_str(&format!("{:>6}  {:>8.4}  {:>8.4}  {:>6}\n", r.n, r.mean, r.std, r.tasks.len()));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shots,mean_miou,std_miou,tasks\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{}\n", r.n, r.mean, r.std, r.tasks.len()));
        }
        out
    }
}

/// One evaluation per shot count. Each task is drawn once with the largest
/// shot count and every row uses a prefix of its support set, so all rows
/// share the same query images.
#[allow(clippy::too_many_arguments)]
pub fn shot_sweep<T: Real>(
    model: &Model<T>,
    dataset: &SegDataset,
    split: Split,
    k: usize,
    shots: &[usize],
    q: usize,
    num_tasks: usize,
    seed: u64,
    run: RunOptions,
) -> Result<ShotSweep> {
    let max_shots = *shots
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("shot list is empty".into()))?;
    if shots.contains(&0) {
        return Err(Error::InvalidArgument("shot counts must be positive".into()));
    }
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one task".into()));
    }
    let start = Instant::now();
    let per_task = parallel_map(num_tasks, run.workers, |t| {
        let s = task_seed(seed, t);
        let ep = sample_episode(dataset, split, k, max_shots, q, s)?;
        shots
            .iter()
            .map(|&n| score_task(model, &with_shots(&ep, n), s))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let rows = shots
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let tasks = per_task.iter().map(|row| row[i].clone()).collect();
            EvalReport::from_tasks(k, n, q, tasks, seconds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShotSweep { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedConfig;
    use crate::episodes::{gen_synthetic, SynthConfig};
    use crate::ridge::HeadKind;
    use proptest::prelude::*;

    #[test]
    fn identical_masks_score_one() {
        let m = [0, 1, 2, 2, 1, 0];
        let (ious, mean) = miou(&m, &m, 4).unwrap();
        assert_eq!(ious, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn half_foreground_missed() {
        // 2x2 grid, top row class 1, prediction all background
        let (ious, mean) = miou(&[0, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(ious, vec![Some(0.5), Some(0.0)]);
        assert_eq!(mean, 0.25);
    }

    #[test]
    fn absent_class_excluded_and_background_only_task() {
        let (ious, mean) = miou(&[0, 1, 1, 0], &[0, 1, 0, 0], 3).unwrap();
        assert_eq!(ious[2], None);
        assert!((mean - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(miou(&[0; 9], &[0; 9], 3).unwrap().1, 1.0);
        assert!(miou(&[0, 3], &[0, 0], 3).is_err());
        assert!(miou(&[0], &[0, 0], 3).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_invariance_and_bounds(
            pixels in proptest::collection::vec((0usize..4, 0usize..4), 1..64),
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let pred: Vec<usize> = pixels.iter().map(|p| p.0).collect();
            let gt: Vec<usize> = pixels.iter().map(|p| p.1).collect();
            let (ious, mean) = miou(&pred, &gt, 4).unwrap();
            prop_assert!(ious.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
            let pp: Vec<usize> = pred.iter().map(|&v| perm[v]).collect();
            let pg: Vec<usize> = gt.iter().map(|&v| perm[v]).collect();
            let (_, mean2) = miou(&pp, &pg, 4).unwrap();
            prop_assert!((mean - mean2).abs() < 1e-12);
        }
    }

    fn setup() -> (SegDataset, Model<f32>) {
        let ds = gen_synthetic(&SynthConfig {
            num_classes: 4,
            images_per_class: 8,
            image_size: 16,
            radius_min: 3.0,
            radius_max: 4.0,
            novel_classes: vec![3, 4],
            ..SynthConfig::default()
        })
        .unwrap();
        let model = Model::new(&EmbedConfig::micro(4), HeadKind::Ridge, 1).unwrap();
        (ds, model)
    }

    #[test]
    fn evaluate_is_deterministic_and_read_only() {
        let (ds, model) = setup();
        let before = model.fingerprint();
        let a = evaluate(&model, &ds, Split::Novel, 2, 2, 1, 4, 9, RunOptions::default()).unwrap();
        let b = evaluate(&model, &ds, Split::Novel, 2, 2, 1, 4, 9, RunOptions { workers: 2 }).unwrap();
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(model.fingerprint(), before);
        assert!(a.min <= a.mean && a.mean <= a.max);
        assert_eq!(a.to_csv().lines().count(), 5);
        assert!(a.to_csv().starts_with("task_seed,class_iou_0,class_iou_1,class_iou_2,miou"));
        assert!(evaluate(&model, &ds, Split::Novel, 2, 2, 1, 0, 9, RunOptions::default()).is_err());
    }

    #[test]
    fn sweep_rows_follow_shot_list() {
        let (ds, model) = setup();
        let sweep = shot_sweep(&model, &ds, Split::Novel, 2, &[1, 3, 2], 1, 3, 5, RunOptions::default()).unwrap();
        assert_eq!(sweep.rows.len(), 3);
        assert_eq!(sweep.to_table().lines().count(), 4);
        assert_eq!(sweep.to_csv().lines().count(), 4);

        let single = shot_sweep(&model, &ds, Split::Novel, 2, &[2], 1, 3, 5, RunOptions::default()).unwrap();
        let direct = evaluate(&model, &ds, Split::Novel, 2, 2, 1, 3, 5, RunOptions::default()).unwrap();
        assert_eq!(single.rows[0].tasks, direct.tasks);
    }
}
