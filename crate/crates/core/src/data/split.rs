use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dataset::Dataset;

pub const VAL_PER_CLASS: usize = 5;
pub const TEST_PER_CLASS: usize = 5;

/// Training images per class: a fixed count or everything left over (`K`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KShot {
    Count(usize),
    All,
}

impl KShot {
    /// Grid used by the evaluation protocol.
    pub const PROTOCOL: [KShot; 10] = [
        KShot::Count(1),
        KShot::Count(2),
        KShot::Count(3),
        KShot::Count(5),
        KShot::Count(10),
        KShot::Count(15),
        KShot::Count(20),
        KShot::Count(25),
        KShot::Count(30),
        KShot::All,
    ];
}

impl fmt::Display for KShot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KShot::Count(k) => write!(f, "{k}"),
            KShot::All => f.write_str("K"),
        }
    }
}

impl FromStr for KShot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("k") || s.eq_ignore_ascii_case("all") {
            return Ok(KShot::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(KShot::Count(k)),
            _ => Err(Error::Config(format!("invalid k `{s}`"))),
        }
    }
}

/// Per-class image indices for one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KShotSplit {
    pub k: KShot,
    pub seed: u64,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl KShotSplit {
    pub fn indices(&self, part: Part) -> &[Vec<usize>] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    /// `(image, class)` pairs of one part, class-major.
    pub fn samples<'d>(&self, ds: &'d Dataset, part: Part) -> Vec<(&'d Tensor, usize)> {
        self.indices(part)
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| idx.iter().map(move |&i| (&ds.images[c][i].image, c)))
            .collect()
    }
}

/// Seeded per-class shuffle; the first 5 go to validation, the next 5 to
/// test, then `k` (or all the rest) to training. Evaluation sets therefore
/// do not depend on `k`.
pub fn sample_kshot(ds: &Dataset, k: KShot, seed: u64) -> Result<KShotSplit> {
    let held_out = VAL_PER_CLASS + TEST_PER_CLASS;
    let need = match k {
        KShot::Count(0) => return Err(Error::Config("k must be positive".into())),
        KShot::Count(k) => k + held_out,
        KShot::All => held_out + 1,
    };
    if ds.num_classes() == 0 {
        return Err(Error::Data("dataset has no classes".into()));
    }
    let root = Rng::new(seed);
    let mut split = KShotSplit {
        k,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, imgs) in ds.images.iter().enumerate() {
        if imgs.len() < need {
            return Err(Error::Data(format!(
                "class `{}` has {} images, k={k} needs at least {need}",
                ds.classes[c],
                imgs.len()
            )));
        }
        let mut order: Vec<usize> = (0..imgs.len()).collect();
        root.split(c as u64).shuffle(&mut order);
        let train_end = match k {
            KShot::Count(k) => held_out + k,
            KShot::All => order.len(),
        };
        split.val.push(order[..VAL_PER_CLASS].to_vec());
        split.test.push(order[VAL_PER_CLASS..held_out].to_vec());
        split.train.push(order[held_out..train_end].to_vec());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_fgsynth, SynthConfig};

    fn tiny(per_class: usize) -> Dataset {
        generate_fgsynth(&SynthConfig {
            num_classes: 2,
            images_per_class: per_class,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn one_shot_counts() {
        let s = sample_kshot(&tiny(20), KShot::Count(1), 3).unwrap();
        for c in 0..2 {
            assert_eq!((s.train[c].len(), s.val[c].len(), s.test[c].len()), (1, 5, 5));
        }
    }

    #[test]
    fn insufficient_images_rejected() {
        assert!(matches!(
            sample_kshot(&tiny(14), KShot::Count(5), 0),
            Err(Error::Data(_))
        ));
        assert!(sample_kshot(&tiny(10), KShot::All, 0).is_err());
    }

    #[test]
    fn eval_sets_do_not_depend_on_k() {
        let ds = tiny(30);
        let a = sample_kshot(&ds, KShot::Count(1), 7).unwrap();
        let b = sample_kshot(&ds, KShot::All, 7).unwrap();
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        assert_eq!(b.train[0].len(), 20);
    }

    #[test]
    fn kshot_parse() {
        assert_eq!("K".parse::<KShot>().unwrap(), KShot::All);
        assert_eq!("10".parse::<KShot>().unwrap(), KShot::Count(10));
        assert!("0".parse::<KShot>().is_err());
        assert!("x".parse::<KShot>().is_err());
        assert_eq!(KShot::All.to_string(), "K");
    }
}
