//! Datasets, the k-shot split protocol and the FG-Synth generator.

mod dataset;
mod split;
mod synth;

pub use dataset::{load_ppm_dataset, Dataset, Sample};
pub use split::{sample_kshot, KShot, KShotSplit, Part, TEST_PER_CLASS, VAL_PER_CLASS};
pub use synth::{generate_fgsynth, glyph_bank, Glyph, SynthConfig, GLYPH_CAPACITY, GLYPH_SIZE};
