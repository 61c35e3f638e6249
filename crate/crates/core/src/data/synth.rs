//! FG-Synth: classes that differ only by a small binary glyph placed on a
//! shared clutter background.

use crate::error::{Error, Result};
use crate::model::INPUT_SIZE;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dataset::{Dataset, Sample};

pub const GLYPH_SIZE: usize = 8;
/// Number of distinct glyphs the bank can supply.
pub const GLYPH_CAPACITY: usize = 64;
/// Minimum Hamming distance between any two glyphs of the bank.
const MIN_GLYPH_DISTANCE: u32 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    /// First glyph of the bank used by class 0. Disjoint offsets give
    /// disjoint class sets drawn from the same bank.
    pub class_offset: usize,
    /// Seed of the glyph bank, shared by datasets that must be comparable.
    pub glyph_seed: u64,
    /// Seed for backgrounds and placements.
    pub seed: u64,
    /// Side of the central square the glyph's top-left corner jitters in.
    pub jitter: usize,
    /// Per-channel background range `[lo, hi)`.
    pub background: (f64, f64),
    /// Glyph "on" and "off" intensities before noise.
    pub glyph_levels: (f64, f64),
    /// Uniform noise half-width added to glyph pixels.
    pub glyph_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            images_per_class: 40,
            class_offset: 0,
            glyph_seed: 17,
            seed: 0,
            jitter: 24,
            background: (0.2, 0.8),
            glyph_levels: (0.95, 0.05),
            glyph_noise: 0.05,
        }
    }
}

/// 8x8 binary glyph, bit `y * 8 + x` set for "on" pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph(pub u64);

impl Glyph {
    pub fn is_on(self, y: usize, x: usize) -> bool {
        self.0 >> (y * GLYPH_SIZE + x) & 1 == 1
    }
}

/// The first `count` glyphs of the bank for `seed`; pairwise Hamming
/// distance is at least 16.
pub fn glyph_bank(seed: u64, count: usize) -> Result<Vec<Glyph>> {
    if count > GLYPH_CAPACITY {
        return Err(Error::Config(format!(
            "{count} glyphs requested, the bank holds {GLYPH_CAPACITY}"
        )));
    }
    let mut rng = Rng::new(seed).split(0x61_79_70_68);
    let mut bank: Vec<Glyph> = Vec::with_capacity(count);
    while bank.len() < count {
        let candidate = Glyph(rng.next_u64());
        let ones = candidate.0.count_ones();
        if !(24..=40).contains(&ones) {
            continue;
        }
        if bank.iter().all(|g| (g.0 ^ candidate.0).count_ones() >= MIN_GLYPH_DISTANCE) {
            bank.push(candidate);
        }
    }
    Ok(bank)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one image of `glyph` with its mask, deterministically from `rng`.
fn render(cfg: &SynthConfig, glyph: Glyph, rng: &mut Rng) -> (Tensor, Tensor) {
    let n = INPUT_SIZE;
    let plane = n * n;
    let mut img = vec![0.0; 3 * plane];
    for v in img.iter_mut() {
        *v = quantize(rng.uniform(cfg.background.0, cfg.background.1));
    }
    let origin = (n - cfg.jitter) / 2;
    let top = origin + rng.below(cfg.jitter - GLYPH_SIZE + 1);
    let left = origin + rng.below(cfg.jitter - GLYPH_SIZE + 1);
    let mut mask = vec![0.0; plane];
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            let base = if glyph.is_on(y, x) {
                cfg.glyph_levels.0
            } else {
                cfg.glyph_levels.1
            };
            let p = (top + y) * n + left + x;
            for c in 0..3 {
                img[c * plane + p] = quantize(base + rng.uniform(-cfg.glyph_noise, cfg.glyph_noise));
            }
            mask[p] = 1.0;
        }
    }
    (
        Tensor::new(&[3, n, n], img).expect("image extents"),
        Tensor::new(&[1, n, n], mask).expect("mask extents"),
    )
}

/// Generates the dataset. Pixel values are multiples of 1/255 so that a
/// PPM round trip is exact.
pub fn generate_fgsynth(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.images_per_class == 0 {
        return Err(Error::Config("synthetic dataset needs classes and images".into()));
    }
    if cfg.jitter < GLYPH_SIZE || cfg.jitter > INPUT_SIZE {
        return Err(Error::Config(format!(
            "jitter region {} must lie in {GLYPH_SIZE}..={INPUT_SIZE}",
            cfg.jitter
        )));
    }
    let bank = glyph_bank(cfg.glyph_seed, cfg.class_offset + cfg.num_classes)?;
    let root = Rng::new(cfg.seed);
    let mut classes = Vec::with_capacity(cfg.num_classes);
    let mut images = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let id = cfg.class_offset + c;
        let glyph = bank[id];
        let samples = (0..cfg.images_per_class)
            .map(|i| {
                let mut rng = root.split(((id as u64) << 32) | i as u64);
                let (image, mask) = render(cfg, glyph, &mut rng);
                Sample {
                    name: format!("img_{i:04}"),
                    image,
                    mask: Some(mask),
                }
            })
            .collect();
        classes.push(format!("glyph_{id:02}"));
        images.push(samples);
    }
    Ok(Dataset {
        classes,
        images,
        source: format!(
            "fgsynth:classes={},per_class={},offset={},glyph_seed={},seed={}",
            cfg.num_classes, cfg.images_per_class, cfg.class_offset, cfg.glyph_seed, cfg.seed
        ),
    })
}
