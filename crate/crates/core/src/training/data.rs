use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::datapipe::PatchSet;
use crate::models::{ClassLabel, CLASS_COUNT};
use crate::tensor::Tensor;

/// Patches decoded once into `[−1, 1]` planes, ready for batch assembly.
#[derive(Clone, Debug)]
pub struct PatchBank {
    size: usize,
    data: Vec<f32>,
    labels: Vec<Option<ClassLabel>>,
}

/// One batch slot: a patch index and a counter-clockwise quarter-turn count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pick {
    pub index: usize,
    pub rotation: u8,
}

impl PatchBank {
    pub fn from_set(set: &PatchSet) -> Result<Self> {
        let size = set.patches.first().map(|p| p.width).unwrap_or(0);
        let plane = size * size;
        let mut data = vec![0.0f32; set.len() * 3 * plane];
        for (n, p) in set.patches.iter().enumerate() {
            if p.width != size || p.height != size || p.pixels.len() != 3 * plane {
                return Err(TrainError::Config("patches must share one square size".into()));
            }
            let base = n * 3 * plane;
            for (i, px) in p.pixels.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[base + c * plane + i] = px[c] as f32 / 127.5 - 1.0;
                }
            }
        }
        Ok(Self {
            size,
            data,
            labels: set.patches.iter().map(|p| p.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.size
    }

    pub fn label(&self, i: usize) -> Option<ClassLabel> {
        self.labels[i]
    }

    /// Assemble `N×3×s×s` from picks, rotating each patch as requested.
    pub fn batch(&self, picks: &[Pick]) -> Tensor {
        let s = self.size;
        let chw = 3 * s * s;
        let mut out = vec![0.0f32; picks.len() * chw];
        for (n, pick) in picks.iter().enumerate() {
            let src = &self.data[pick.index * chw..(pick.index + 1) * chw];
            let dst = &mut out[n * chw..(n + 1) * chw];
            for c in 0..3 {
                let sp = &src[c * s * s..(c + 1) * s * s];
                let dp = &mut dst[c * s * s..(c + 1) * s * s];
                for y in 0..s {
                    for x in 0..s {
                        let (sx, sy) = match pick.rotation % 4 {
                            0 => (x, y),
                            1 => (s - 1 - y, x),
                            2 => (s - 1 - x, s - 1 - y),
                            _ => (y, s - 1 - x),
                        };
                        dp[y * s + x] = sp[sy * s + sx];
                    }
                }
            }
        }
        Tensor::new([picks.len(), 3, s, s], out).expect("batch sized from picks")
    }

    /// Unrotated patches `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Tensor {
        let picks: Vec<Pick> = (start..end).map(|index| Pick { index, rotation: 0 }).collect();
        self.batch(&picks)
    }

    pub fn class_indices(&self, picks: &[Pick]) -> Result<Vec<usize>> {
        picks
            .iter()
            .map(|p| {
                self.labels[p.index]
                    .map(|l| l.index())
                    .ok_or_else(|| TrainError::Config(format!("patch {} has no label", p.index)))
            })
            .collect()
    }
}

/// Epoch-shuffled sampling with an optional random quarter-turn per draw.
/// In balanced mode each draw first picks a class uniformly, then the next
/// patch of that class's own shuffled epoch.
pub struct Sampler {
    groups: Vec<Group>,
    augment: bool,
    rng: ChaCha8Rng,
}

struct Group {
    order: Vec<usize>,
    pos: usize,
}

impl Group {
    fn new(order: Vec<usize>) -> Self {
        let pos = order.len();
        Self { order, pos }
    }
}

impl Sampler {
    pub fn new(len: usize, augment: bool, rng: ChaCha8Rng) -> Self {
        Self {
            groups: vec![Group::new((0..len).collect())],
            augment,
            rng,
        }
    }

    /// Class-balanced sampling over the labeled patches of `bank`; classes
    /// without patches are never drawn.
    pub fn balanced(bank: &PatchBank, augment: bool, rng: ChaCha8Rng) -> Self {
        let mut by_class = vec![Vec::new(); CLASS_COUNT];
        for i in 0..bank.len() {
            if let Some(l) = bank.label(i) {
                by_class[l.index()].push(i);
            }
        }
        Self {
            groups: by_class.into_iter().filter(|g| !g.is_empty()).map(Group::new).collect(),
            augment,
            rng,
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<Pick> {
        let mut picks = Vec::with_capacity(n);
        while picks.len() < n {
            let gi = if self.groups.len() > 1 { self.rng.gen_range(0..self.groups.len()) } else { 0 };
            let g = &mut self.groups[gi];
            if g.pos == g.order.len() {
                g.order.shuffle(&mut self.rng);
                g.pos = 0;
            }
            let index = g.order[g.pos];
            g.pos += 1;
            let rotation = if self.augment { self.rng.gen_range(0..4) } else { 0 };
            picks.push(Pick { index, rotation });
        }
        picks
    }
}
