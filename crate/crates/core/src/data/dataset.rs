use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{INPUT_CHANNELS, INPUT_SIZE};
use crate::pnm::{self, Raster};
use crate::tensor::Tensor;

/// One image, optionally with a `[1,64,64]` mask of its discriminative region.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub mask: Option<Tensor>,
}

/// Images grouped by class. Pixel values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<Vec<Sample>>,
    pub source: String,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.images.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every image with its class index, class-major.
    pub fn labeled(&self) -> Vec<(&Tensor, usize)> {
        self.images
            .iter()
            .enumerate()
            .flat_map(|(c, imgs)| imgs.iter().map(move |s| (&s.image, c)))
            .collect()
    }

    /// SHA-256 over class names, image names and pixel bit patterns.
    /// Masks and `source` are not part of the fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (class, samples) in self.classes.iter().zip(&self.images) {
            h.update(class.as_bytes());
            h.update([0]);
            for s in samples {
                h.update(s.name.as_bytes());
                h.update([0]);
                for v in s.image.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `root/<class>/<name>.ppm` and, where present, `<name>.mask.pgm`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (class, samples) in self.classes.iter().zip(&self.images) {
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for s in samples {
                pnm::write(&dir.join(format!("{}.ppm", s.name)), &Raster::from_tensor(&s.image)?)?;
                if let Some(mask) = &s.mask {
                    pnm::write(&dir.join(format!("{}.mask.pgm", s.name)), &Raster::from_tensor(mask)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Loads `root/<class>/<image>.ppm` (64x64 P6) with optional
/// `<image>.mask.pgm` siblings. Classes and images are sorted by name.
pub fn load_ppm_dataset(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::format(root, "no class subdirectories"));
    }
    let mut classes = Vec::new();
    let mut images = Vec::new();
    for dir in class_dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&dir, "class directory name is not UTF-8"))?
            .to_string();
        let files: Vec<PathBuf> = read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        if files.is_empty() {
            return Err(Error::format(&dir, "class directory holds no .ppm images"));
        }
        let mut samples = Vec::with_capacity(files.len());
        for file in files {
            samples.push(load_sample(&file)?);
        }
        classes.push(name);
        images.push(samples);
    }
    Ok(Dataset {
        classes,
        images,
        source: root.display().to_string(),
    })
}

fn load_sample(file: &Path) -> Result<Sample> {
    let raster = pnm::read(file)?;
    if raster.channels != INPUT_CHANNELS || raster.width != INPUT_SIZE || raster.height != INPUT_SIZE {
        return Err(Error::format(
            file,
            format!(
                "expected a {INPUT_SIZE}x{INPUT_SIZE} P6 image, got {}x{} with {} channel(s)",
                raster.width, raster.height, raster.channels
            ),
        ));
    }
    let stem = file
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(file, "file name is not UTF-8"))?
        .to_string();
    let mask_path = file.with_file_name(format!("{stem}.mask.pgm"));
    let mask = if mask_path.exists() {
        let m = pnm::read(&mask_path)?;
        if m.channels != 1 || m.width != INPUT_SIZE || m.height != INPUT_SIZE {
            return Err(Error::format(&mask_path, "mask must be a 64x64 P5 image"));
        }
        Some(m.to_tensor())
    } else {
        None
    };
    Ok(Sample {
        name: stem,
        image: raster.to_tensor(),
        mask,
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}
