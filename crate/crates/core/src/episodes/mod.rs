//! Segmentation datasets, the K-way N-shot episode sampler and paired
//! image/mask augmentation.
//!
//! Images are stored as 8-bit planar RGB (`3 x H x W`) and converted to
//! `[0, 1]` floats when batched. Masks hold global class ids with 0 as
//! background; inside an episode they are remapped to local ids `0..=K`.

mod io;
mod synth;

pub use io::{load_dataset_dir, read_pgm, read_ppm, write_dataset_dir, write_pgm, write_ppm};
pub use synth::{gen_synthetic, gen_synthetic_with_layout, PlacedObject, Shape, SynthConfig, Texture};

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output stride of the embedding; labels are compared at this resolution.
pub const FEATURE_STRIDE: usize = 4;

/// Mix several integers into one well-spread 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    /// Planar RGB, `3 * height * width` bytes.
    pub image: Vec<u8>,
    /// Global class ids, `height * width` bytes.
    pub mask: Vec<u8>,
    /// Sorted foreground class ids occurring in `mask`.
    pub present: Vec<u8>,
}

impl Record {
    pub fn new(name: String, image: Vec<u8>, mask: Vec<u8>) -> Self {
        let present = foreground_classes(&mask);
        Self {
            name,
            image,
            mask,
            present,
        }
    }
}

fn foreground_classes(mask: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    for &v in mask {
        seen[v as usize] = true;
    }
    (1..=255u8).filter(|&c| seen[c as usize]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegDataset {
    pub height: usize,
    pub width: usize,
    /// Declared `(id, name)` pairs, ids ascending and at least 1.
    pub classes: Vec<(u8, String)>,
    pub records: Vec<Record>,
    pub train_classes: Vec<u8>,
    pub novel_classes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Novel,
}

impl SegDataset {
    pub fn class_ids(&self) -> Vec<u8> {
        self.classes.iter().map(|(id, _)| *id).collect()
    }

    pub fn split_ids(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train_classes,
            Split::Novel => &self.novel_classes,
        }
    }

    /// Check masks, sizes and the class split.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Dataset("image extent must be positive".into()));
        }
        let mut declared = [false; 256];
        for (id, name) in &self.classes {
            if *id == 0 {
                return Err(Error::Dataset(format!("class `{name}` uses reserved id 0")));
            }
            if declared[*id as usize] {
                return Err(Error::Dataset(format!("class id {id} declared twice")));
            }
            declared[*id as usize] = true;
        }
        let px = self.height * self.width;
        for r in &self.records {
            if r.image.len() != 3 * px || r.mask.len() != px {
                return Err(Error::Dataset(format!(
                    "record {}: expected {}x{} image and mask",
                    r.name, self.width, self.height
                )));
            }
            if let Some(&bad) = r.mask.iter().find(|&&v| v != 0 && !declared[v as usize]) {
                return Err(Error::Dataset(format!(
                    "mask of {} contains undeclared class id {bad}",
                    r.name
                )));
            }
        }
        for id in self.train_classes.iter().chain(&self.novel_classes) {
            if !declared[*id as usize] {
                return Err(Error::Dataset(format!("split names undeclared class id {id}")));
            }
        }
        if let Some(id) = self.train_classes.iter().find(|c| self.novel_classes.contains(c)) {
            return Err(Error::Dataset(format!("class id {id} is both train and novel")));
        }
        Ok(())
    }

    /// Byte-stable SHA-256 over extents, classes, split and every record.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update((self.classes.len() as u64).to_le_bytes());
        for (id, name) in &self.classes {
            h.update([*id]);
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for ids in [&self.train_classes, &self.novel_classes] {
            h.update((ids.len() as u64).to_le_bytes());
            h.update(ids);
        }
        h.update((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            h.update((r.name.len() as u64).to_le_bytes());
            h.update(r.name.as_bytes());
            h.update(&r.image);
            h.update(&r.mask);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Declare `novel_ids` as the novel split and every other class as training.
pub fn split_classes(dataset: &SegDataset, novel_ids: &[u8]) -> Result<SegDataset> {
    let declared = dataset.class_ids();
    let novel: BTreeSet<u8> = novel_ids.iter().copied().collect();
    if let Some(bad) = novel.iter().find(|id| !declared.contains(id)) {
        return Err(Error::Dataset(format!("novel class id {bad} is not declared")));
    }
    let train: Vec<u8> = declared.iter().copied().filter(|id| !novel.contains(id)).collect();
    if train.is_empty() {
        return Err(Error::Dataset("every class is novel, nothing left to train on".into()));
    }
    let mut out = dataset.clone();
    out.train_classes = train;
    out.novel_classes = novel.into_iter().collect();
    Ok(out)
}

/// One image of an episode with its mask remapped to local ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub record: usize,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub height: usize,
    pub width: usize,
    /// Global id of local class `i + 1`, in draw order.
    pub class_table: Vec<u8>,
    /// `N` images per class, grouped by class in draw order.
    pub support: Vec<Sample>,
    /// `Q` images per class, grouped by class in draw order.
    pub query: Vec<Sample>,
}

/// Draw a K-way episode with `n` support and `q` query images per class.
///
/// Only images whose foreground classes all belong to the drawn class set are
/// eligible, so the remapped masks never hide an unrelated object under the
/// background label and no image of the other split can appear.
pub fn sample_episode(
    dataset: &SegDataset,
    split: Split,
    k: usize,
    n: usize,
    q: usize,
    seed: u64,
) -> Result<Episode> {
    if k == 0 || n == 0 || q == 0 {
        return Err(Error::Sampling(format!(
            "episode needs K, N, Q >= 1 (got {k}, {n}, {q})"
        )));
    }
    let allowed = membership(dataset.split_ids(split));
    let per_class = n + q;
    let available: Vec<u8> = dataset
        .split_ids(split)
        .iter()
        .copied()
        .filter(|&c| {
            dataset
                .records
                .iter()
                .filter(|r| r.present.contains(&c) && r.present.iter().all(|&p| allowed[p as usize]))
                .count()
                >= per_class
        })
        .collect();
    if available.len() < k {
        return Err(Error::Sampling(format!(
            "{split:?} split has {} classes with at least {per_class} images, need {k}",
            available.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn: Vec<u8> = available.choose_multiple(&mut rng, k).copied().collect();
    let in_episode = membership(&drawn);
    let mut local = [0u8; 256];
    for (i, &c) in drawn.iter().enumerate() {
        local[c as usize] = (i + 1) as u8;
    }

    let mut used = vec![false; dataset.records.len()];
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(q * k);
    for &c in &drawn {
        let mut pool: Vec<usize> = (0..dataset.records.len())
            .filter(|&i| {
                let r = &dataset.records[i];
                !used[i] && r.present.contains(&c) && r.present.iter().all(|&p| in_episode[p as usize])
            })
            .collect();
        if pool.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {c} has {} images free of other classes in this episode, need {per_class}",
                pool.len()
            )));
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng, per_class);
        for (j, &i) in chosen.iter().enumerate() {
            used[i] = true;
            let r = &dataset.records[i];
            let sample = Sample {
                record: i,
                image: r.image.clone(),
                mask: r.mask.iter().map(|&v| local[v as usize]).collect(),
            };
            if j < n {
                support.push(sample);
            } else {
                query.push(sample);
            }
        }
    }
    Ok(Episode {
        k,
        n,
        q,
        height: dataset.height,
        width: dataset.width,
        class_table: drawn,
        support,
        query,
    })
}

fn membership(ids: &[u8]) -> [bool; 256] {
    let mut m = [false; 256];
    m[0] = true;
    for &c in ids {
        m[c as usize] = true;
    }
    m
}

/// A horizontal flip followed by a counter-clockwise rotation of
/// `quarter_turns * 90` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Source pixel `(row, col)` of destination pixel `(r, c)` on an `s x s` grid.
    fn source(self, s: usize, r: usize, c: usize) -> (usize, usize) {
        // undo the rotation first, then the flip
        let (mut r, mut c) = (r, c);
        for _ in 0..self.quarter_turns % 4 {
            // one ccw turn maps (r, c) -> (s-1-c, r); invert it
            (r, c) = (c, s - 1 - r);
        }
        if self.flip {
            c = s - 1 - c;
        }
        (r, c)
    }

    /// Apply to one `s x s` plane.
    pub fn apply_plane<P: Copy>(self, s: usize, plane: &[P]) -> Vec<P> {
        let mut out = Vec::with_capacity(s * s);
        for r in 0..s {
            for c in 0..s {
                let (sr, sc) = self.source(s, r, c);
                out.push(plane[sr * s + sc]);
            }
        }
        out
    }

    /// Apply to a square planar image and its mask.
    pub fn apply(self, s: usize, image: &[u8], mask: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
        if mask.len() != s * s || image.len() % (s * s) != 0 {
            return Err(Error::Shape(format!(
                "augmentation needs square {s}x{s} planes, got image {} mask {}",
                image.len(),
                mask.len()
            )));
        }
        let img = image.chunks(s * s).flat_map(|p| self.apply_plane(s, p)).collect();
        Ok((img, self.apply_plane(s, mask)))
    }
}

/// Random flip (probability 1/2) then a uniformly chosen quarter turn,
/// applied identically to image and mask.
pub fn augment_pair(size: usize, image: &[u8], mask: &[u8], seed: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    Transform::random(seed).apply(size, image, mask)
}

/// Labels of the pixels sampled at `stride * i + stride / 2` in each axis.
pub fn downsample_labels(mask: &[u8], height: usize, width: usize, stride: usize) -> Vec<usize> {
    let (h, w) = (height / stride, width / stride);
    let off = stride / 2;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(mask[(i * stride + off) * width + j * stride + off] as usize);
        }
    }
    out
}

impl Episode {
    pub fn classes(&self) -> usize {
        self.k + 1
    }

    /// Every sample flipped and rotated with seeds derived from `seed`.
    pub fn augmented(&self, seed: u64) -> Result<Episode> {
        if self.height != self.width {
            return Err(Error::Shape(format!(
                "augmentation needs square images, got {}x{}",
                self.height, self.width
            )));
        }
        let s = self.height;
        let aug = |samples: &[Sample], set: u64| -> Result<Vec<Sample>> {
            samples
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let (image, mask) = augment_pair(s, &x.image, &x.mask, derive_seed(seed, &[set, i as u64]))?;
                    Ok(Sample {
                        record: x.record,
                        image,
                        mask,
                    })
                })
                .collect()
        };
        Ok(Episode {
            support: aug(&self.support, 0)?,
            query: aug(&self.query, 1)?,
            ..self.clone()
        })
    }

    fn images<T: Real>(&self, samples: &[Sample]) -> Tensor<T> {
        let scale = 1.0 / 255.0;
        let data = samples
            .iter()
            .flat_map(|s| s.image.iter().map(move |&v| T::from_f64(v as f64 * scale)))
            .collect();
        Tensor::new(&[samples.len(), 3, self.height, self.width], data).expect("sample extents")
    }

    pub fn support_images<T: Real>(&self) -> Tensor<T> {
        self.images(&self.support)
    }

    pub fn query_images<T: Real>(&self) -> Tensor<T> {
        self.images(&self.query)
    }

    /// Support labels at feature resolution, image-major then row-major.
    pub fn support_labels(&self) -> Vec<usize> {
        self.support
            .iter()
            .flat_map(|s| downsample_labels(&s.mask, self.height, self.width, FEATURE_STRIDE))
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query
            .iter()
            .flat_map(|s| downsample_labels(&s.mask, self.height, self.width, FEATURE_STRIDE))
            .collect()
    }

    /// Query labels at full resolution, image-major then row-major.
    pub fn query_labels_full(&self) -> Vec<usize> {
        self.query.iter().flat_map(|s| s.mask.iter().map(|&v| v as usize)).collect()
    }
}
