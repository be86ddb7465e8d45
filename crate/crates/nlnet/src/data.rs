//! Synthetic spacetime video tasks whose labels hinge on relating the first
//! and last quarter of a clip — undecidable above chance from any temporal
//! window shorter than half the clip.

use crate::container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// 9x9 sprite stencils with near-equal pixel mass, distinct under
/// translation.
const GLYPH_SIDE: usize = 9;
const GLYPHS: [[&str; 9]; 6] = [
    [
        "....#....",
        "....#....",
        "....#....",
        "....#....",
        "#########",
        "....#....",
        "....#....",
        "....#....",
        "....#....",
    ],
    [
        "#.......#",
        ".#.....#.",
        "..#...#..",
        "...#.#...",
        "....#....",
        "...#.#...",
        "..#...#..",
        ".#.....#.",
        "#.......#",
    ],
    [
        ".........",
        ".........",
        "..#####..",
        "..#...#..",
        "..#...#..",
        "..#...#..",
        "..#####..",
        ".........",
        ".........",
    ],
    [
        "#########",
        "....#....",
        "....#....",
        "....#....",
        "....#....",
        "....#....",
        "....#....",
        "....#....",
        "....#....",
    ],
    [
        "#........",
        "#........",
        "#........",
        "#........",
        "#........",
        "#........",
        "#........",
        "#........",
        "#########",
    ],
    [
        "....#....",
        "...#.#...",
        "..#...#..",
        ".#.....#.",
        "#.......#",
        ".#.....#.",
        "..#...#..",
        "...#.#...",
        "....#....",
    ],
];

/// Which half of the latent space a sample is drawn from. Train and val use
/// disjoint early-sprite column parities, so the splits cannot overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Do the sprites shown in the first and last quarter share identity?
    /// Two classes: different (0) / same (1).
    DelayedMatch,
    /// A sprite appears in the first quarter, hides, and reappears in the
    /// last quarter; the label is the octant of its net displacement.
    DirectionOfTravel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn delayed_match(t: usize, h: usize, w: usize, noise_sigma: f64, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::DelayedMatch,
            t,
            h,
            w,
            channels: 1,
            num_classes: 2,
            noise_sigma,
            seed,
        }
    }

    pub fn direction_of_travel(t: usize, h: usize, w: usize, noise_sigma: f64, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::DirectionOfTravel,
            t,
            h,
            w,
            channels: 1,
            num_classes: 8,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 4 {
            return Err(Error::config("clip needs at least 4 frames"));
        }
        if !(1..=3).contains(&self.channels) {
            return Err(Error::config("1 to 3 channels"));
        }
        let margin = match self.kind {
            TaskKind::DelayedMatch => GLYPH_SIDE,
            // sprites must fit after a displacement of up to 9 pixels
            TaskKind::DirectionOfTravel => GLYPH_SIDE + 9,
        };
        if self.h < margin + 2 || self.w < margin + 2 {
            return Err(Error::config(format!(
                "canvas {}x{} too small to place sprites (needs > {margin})",
                self.h, self.w
            )));
        }
        let want_classes = match self.kind {
            TaskKind::DelayedMatch => 2,
            TaskKind::DirectionOfTravel => 8,
        };
        if self.num_classes != want_classes {
            return Err(Error::config(format!(
                "{:?} has {want_classes} classes, config says {}",
                self.kind, self.num_classes
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise sigma must be >= 0"));
        }
        Ok(())
    }

    /// First- and last-quarter frame ranges carrying the label information.
    pub fn active_quarters(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let q = (self.t / 4).max(1);
        (0..q, self.t - q..self.t)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub task: SyntheticTask,
    pub split: Split,
    pub clips: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

fn glyph_pixels(g: usize) -> Vec<(usize, usize)> {
    GLYPHS[g]
        .iter()
        .enumerate()
        .flat_map(|(y, row)| {
            row.bytes()
                .enumerate()
                .filter(|&(_, b)| b == b'#')
                .map(move |(x, _)| (y, x))
        })
        .collect()
}

/// Stamp a glyph into one frame of a clip buffer.
fn stamp<T: Scalar>(
    buf: &mut [T],
    task: &SyntheticTask,
    frame: usize,
    top: usize,
    left: usize,
    glyph: usize,
) {
    let (h, w, c) = (task.h, task.w, task.channels);
    for (dy, dx) in glyph_pixels(glyph) {
        let (y, x) = (top + dy, left + dx);
        for ch in 0..c {
            buf[((frame * h + y) * w + x) * c + ch] = T::one();
        }
    }
}

/// Column of the early sprite, restricted to the split's parity class so the
/// train/val latent spaces are disjoint by construction.
fn split_column(rng: &mut ChaCha8Rng, max_left: usize, split: Split) -> usize {
    let parity = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    // columns of the right parity in [0, max_left]
    let count = max_left / 2 + usize::from(max_left % 2 == 0 && parity == 0 || parity <= max_left % 2);
    let count = count.max(1);
    let k = rng.random_range(0..count);
    (2 * k + parity).min(max_left)
}

/// The eight displacement vectors (dy, dx), one per octant label.
pub const OCTANTS: [(isize, isize); 8] = [
    (0, 9),
    (6, 6),
    (9, 0),
    (6, -6),
    (0, -9),
    (-6, -6),
    (-9, 0),
    (-6, 6),
];

/// Deterministic, class-balanced generation (labels round-robin over
/// classes, so any prefix is balanced within one sample).
pub fn generate<T: Scalar>(task: &SyntheticTask, n: usize, split: Split) -> Result<Dataset<T>> {
    task.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be >= 1"));
    }
    let salt = match split {
        Split::Train => 0x7261696e,
        Split::Val => 0x76616c,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ salt);
    let noise = if task.noise_sigma > 0.0 {
        Some(Normal::new(0.0f64, task.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let (early, late) = task.active_quarters();
    let numel = task.t * task.h * task.w * task.channels;
    let mut clips = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % task.num_classes;
        let mut buf = vec![T::zero(); numel];
        match task.kind {
            TaskKind::DelayedMatch => {
                let max_top = task.h - GLYPH_SIDE;
                let max_left = task.w - GLYPH_SIDE;
                let a = rng.random_range(0..GLYPHS.len());
                let b = if label == 1 {
                    a
                } else {
                    // a different glyph, uniform over the rest
                    (a + 1 + rng.random_range(0..GLYPHS.len() - 1)) % GLYPHS.len()
                };
                let (top_a, left_a) = (rng.random_range(0..=max_top), split_column(&mut rng, max_left, split));
                let (top_b, left_b) = (rng.random_range(0..=max_top), rng.random_range(0..=max_left));
                for f in early.clone() {
                    stamp(&mut buf, task, f, top_a, left_a, a);
                }
                for f in late.clone() {
                    stamp(&mut buf, task, f, top_b, left_b, b);
                }
            }
            TaskKind::DirectionOfTravel => {
                let (dy, dx) = OCTANTS[label];
                let max_top = task.h - GLYPH_SIDE;
                let max_left = task.w - GLYPH_SIDE;
                let top_lo = (-dy).max(0) as usize;
                let top_hi = (max_top as isize - dy.max(0)) as usize;
                let left_lo = (-dx).max(0) as usize;
                let left_hi = (max_left as isize - dx.max(0)) as usize;
                let top = rng.random_range(top_lo..=top_hi);
                let left_range = left_hi - left_lo;
                let left = left_lo + split_column(&mut rng, left_range, split);
                for f in early.clone() {
                    stamp(&mut buf, task, f, top, left, 0);
                }
                let (top2, left2) = (
                    (top as isize + dy) as usize,
                    (left as isize + dx) as usize,
                );
                for f in late.clone() {
                    stamp(&mut buf, task, f, top2, left2, 0);
                }
            }
        }
        if let Some(dist) = &noise {
            for v in buf.iter_mut() {
                *v += T::lit(dist.sample(&mut rng));
            }
        }
        clips.push(Tensor::from_vec(
            vec![task.t, task.h, task.w, task.channels],
            buf,
        )?);
        labels.push(label);
    }
    Ok(Dataset {
        task: *task,
        split,
        clips,
        labels,
    })
}

// ── Dataset cache on the NLNET1 container ───────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    task: SyntheticTask,
    split: Split,
    labels: Vec<usize>,
}

pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, path: &std::path::Path) -> Result<()> {
    let meta = DatasetMeta {
        task: ds.task,
        split: ds.split,
        labels: ds.labels.clone(),
    };
    let arrays: Vec<(String, Vec<usize>, &[T])> = ds
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("clip/{i:06}"), c.dims().to_vec(), c.data()))
        .collect();
    container::write(path, &meta, &arrays)
}

pub fn load_dataset<T: Scalar>(path: &std::path::Path) -> Result<Dataset<T>> {
    let c: container::Container<DatasetMeta> = container::read(path)?;
    let mut clips = Vec::with_capacity(c.meta.labels.len());
    for i in 0..c.meta.labels.len() {
        let e = c.entry(&format!("clip/{i:06}"))?;
        let data = c.array(e)?.into_iter().map(T::lit).collect();
        clips.push(Tensor::new(crate::shape::Shape::new(e.shape.clone())?, data)?);
    }
    Ok(Dataset {
        task: c.meta.task,
        split: c.meta.split,
        clips,
        labels: c.meta.labels,
    })
}

/// Zero the early and late quarters; what remains carries no label signal.
pub fn mask_active_quarters<T: Scalar>(task: &SyntheticTask, clip: &Tensor<T>) -> Tensor<T> {
    let (early, late) = task.active_quarters();
    let frame = task.h * task.w * task.channels;
    let mut out = clip.clone();
    for f in early.chain(late) {
        for v in out.data_mut()[f * frame..(f + 1) * frame].iter_mut() {
            *v = T::zero();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_well_formed_and_near_equal_mass() {
        for (i, g) in GLYPHS.iter().enumerate() {
            for row in g {
                assert_eq!(row.len(), GLYPH_SIDE, "glyph {i} has a short row");
            }
            let count = glyph_pixels(i).len();
            assert!((16..=17).contains(&count), "glyph {i} mass {count}");
        }
        // pairwise distinct
        for i in 0..GLYPHS.len() {
            for j in i + 1..GLYPHS.len() {
                assert_ne!(GLYPHS[i], GLYPHS[j]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let task = SyntheticTask::delayed_match(8, 32, 32, 0.0, 9);
        let a: Dataset<f64> = generate(&task, 16, Split::Train).unwrap();
        let b: Dataset<f64> = generate(&task, 16, Split::Train).unwrap();
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert!(x.bit_eq(y));
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_are_balanced() {
        let task = SyntheticTask::delayed_match(8, 32, 32, 0.0, 1);
        let ds: Dataset<f64> = generate(&task, 1000, Split::Train).unwrap();
        let ones = ds.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 500);
    }

    #[test]
    fn splits_use_disjoint_columns() {
        let task = SyntheticTask::delayed_match(8, 32, 32, 0.0, 2);
        // early sprite column parity differs between splits: verify via the
        // first active frame content
        let check = |split: Split, want_parity: usize| {
            let ds: Dataset<f64> = generate(&task, 32, split).unwrap();
            for clip in &ds.clips {
                // leftmost lit column in frame 0
                let mut min_col = None;
                for y in 0..task.h {
                    for x in 0..task.w {
                        if clip.data()[(y * task.w + x) * task.channels] > 0.5 {
                            min_col = Some(min_col.map_or(x, |m: usize| m.min(x)));
                        }
                    }
                }
                let col = min_col.expect("sprite in frame 0");
                assert_eq!(col % 2, want_parity, "split {split:?}");
            }
        };
        check(Split::Train, 0);
        check(Split::Val, 1);
    }

    #[test]
    fn masked_clips_are_chance_level_for_nearest_neighbor() {
        // with both active quarters zeroed, a brute-force 1-NN classifier
        // scores about chance on the leftover (pure noise) middle frames
        let task = SyntheticTask::delayed_match(8, 16, 16, 0.1, 3);
        let train: Dataset<f64> = generate(&task, 300, Split::Train).unwrap();
        let test: Dataset<f64> = generate(&task, 300, Split::Val).unwrap();
        let mask = |ds: &Dataset<f64>| -> Vec<Tensor<f64>> {
            ds.clips.iter().map(|c| mask_active_quarters(&task, c)).collect()
        };
        let (tr, te) = (mask(&train), mask(&test));
        let mut correct = 0;
        for (clip, &label) in te.iter().zip(&test.labels) {
            let mut best = (f64::INFINITY, 0usize);
            for (cand, &cl) in tr.iter().zip(&train.labels) {
                let d: f64 = clip
                    .data()
                    .iter()
                    .zip(cand.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, cl);
                }
            }
            if best.1 == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / te.len() as f64;
        assert!((acc - 0.5).abs() <= 0.05, "masked NN accuracy {acc}");
    }

    #[test]
    fn direction_labels_match_displacement() {
        let task = SyntheticTask::direction_of_travel(8, 32, 32, 0.0, 4);
        let ds: Dataset<f64> = generate(&task, 64, Split::Train).unwrap();
        let (early, late) = task.active_quarters();
        for (clip, &label) in ds.clips.iter().zip(&ds.labels) {
            let centroid = |frame: usize| -> (f64, f64) {
                let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                for y in 0..task.h {
                    for x in 0..task.w {
                        if clip.data()[((frame * task.h + y) * task.w + x) * task.channels] > 0.5 {
                            sy += y as f64;
                            sx += x as f64;
                            n += 1.0;
                        }
                    }
                }
                (sy / n, sx / n)
            };
            let (y0, x0) = centroid(early.start);
            let (y1, x1) = centroid(late.start);
            let (dy, dx) = OCTANTS[label];
            assert!((y1 - y0 - dy as f64).abs() < 1e-9);
            assert!((x1 - x0 - dx as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_roundtrip() {
        let dir = std::env::temp_dir().join(format!("nlnet-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.nlnet");
        let task = SyntheticTask::delayed_match(4, 16, 16, 0.05, 5);
        let ds: Dataset<f64> = generate(&task, 8, Split::Val).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded: Dataset<f64> = load_dataset(&path).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        for (a, b) in ds.clips.iter().zip(&loaded.clips) {
            assert!(a.bit_eq(b));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn too_small_canvas_is_rejected() {
        let task = SyntheticTask::delayed_match(8, 8, 8, 0.0, 0);
        assert!(generate::<f64>(&task, 4, Split::Train).is_err());
    }
}
