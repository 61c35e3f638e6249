use std::path::Path;

use crate::error::{Error, Result};
use crate::ops;
use crate::pnm::{self, Raster};
use crate::tensor::Tensor;

use super::net::SaliencyMap;

/// Upsamples a map to `out_h x out_w` and min-max scales it to bytes.
/// Constant maps become all zeros.
pub fn saliency_raster(map: &SaliencyMap, out_h: usize, out_w: usize) -> Result<Raster> {
    if !map.values().is_finite() {
        return Err(Error::Contract("saliency map must be finite".into()));
    }
    let up = ops::bilinear_upsample(map.values(), out_h, out_w)?;
    let (lo, hi) = (up.min(), up.max());
    let scaled: Tensor = if hi > lo {
        up.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(up.shape())
    };
    Raster::from_tensor(&scaled)
}

/// Writes the map as an 8-bit binary PGM.
pub fn export_saliency(map: &SaliencyMap, out_h: usize, out_w: usize, path: &Path) -> Result<()> {
    pnm::write(path, &saliency_raster(map, out_h, out_w)?)
}
