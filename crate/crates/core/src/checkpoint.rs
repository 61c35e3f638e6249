//! Versioned binary checkpoint of a parameter set.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SALMODCK"
//! version   u32
//! meta      u32 length + UTF-8 `key=value` lines
//! count     u32
//! per tensor:
//!   name    u32 length + UTF-8
//!   group   u32 length + UTF-8
//!   rank    u32
//!   extents rank x u64
//!   values  f64 bit patterns
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FusionPoint, ModelConfig, ParamTensor, SalModParams};
use crate::optim::Group;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SALMODCK";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters plus the class names the head was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: SalModParams,
    pub classes: Vec<String>,
}

impl Checkpoint {
    pub fn new(params: SalModParams, classes: Vec<String>) -> Result<Self> {
        if classes.len() != params.num_classes() {
            return Err(Error::Config(format!(
                "{} class names for a {}-way head",
                classes.len(),
                params.num_classes()
            )));
        }
        if let Some(bad) = classes.iter().find(|c| c.contains([',', '\n']) || c.is_empty()) {
            return Err(Error::Config(format!("class name `{bad}` cannot be stored")));
        }
        Ok(Self { params, classes })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.params.config();
        let meta = format!(
            "num_classes={}\nsaliency_depth={}\nfusion_point={}\nseed={}\nclasses={}\n",
            cfg.num_classes,
            cfg.saliency_depth,
            cfg.fusion_point,
            cfg.seed,
            self.classes.join(",")
        );
        put_bytes(&mut out, meta.as_bytes());
        out.extend_from_slice(&(self.params.tensors().len() as u32).to_le_bytes());
        for t in self.params.tensors() {
            put_bytes(&mut out, t.name.as_bytes());
            put_bytes(&mut out, t.group.as_str().as_bytes());
            out.extend_from_slice(&(t.value.rank() as u32).to_le_bytes());
            for &e in t.value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(path, msg);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != FORMAT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let meta = r.string().map_err(&fail)?;
        let meta: BTreeMap<&str, &str> = meta.lines().filter_map(|l| l.split_once('=')).collect();
        let field = |k: &str| meta.get(k).copied().ok_or_else(|| fail(format!("metadata lacks `{k}`")));
        let number = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| fail(format!("bad `{k}`"))) };
        let config = ModelConfig {
            num_classes: number("num_classes")? as usize,
            saliency_depth: number("saliency_depth")? as usize,
            fusion_point: field("fusion_point")?.parse::<FusionPoint>()?,
            seed: number("seed")?,
        };
        let classes: Vec<String> = field("classes")?.split(',').map(str::to_owned).collect();

        let count = r.u32().map_err(&fail)? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string().map_err(&fail)?;
            let group: Group = r.string().map_err(&fail)?.parse()?;
            let rank = r.u32().map_err(&fail)? as usize;
            if !(1..=4).contains(&rank) {
                return Err(fail(format!("tensor {name}: rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().map_err(&fail)? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| fail(format!("tensor {name}: extents {shape:?} exceed the file")))?;
            let data = (0..len)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&fail)?;
            let value = Tensor::new(&shape, data).map_err(|e| fail(format!("tensor {name}: {e}")))?;
            tensors.push(ParamTensor { name, group, value });
        }
        if r.remaining() != 0 {
            return Err(fail(format!("{} trailing bytes", r.remaining())));
        }
        let params = SalModParams::from_tensors(config, tensors).map_err(|e| fail(e.to_string()))?;
        Checkpoint::new(params, classes).map_err(|e| fail(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if n > self.remaining() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| format!("invalid UTF-8 before byte {}", self.pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn sample() -> Checkpoint {
        let mut p = build_model(&ModelConfig {
            num_classes: 3,
            saliency_depth: 2,
            fusion_point: FusionPoint::AfterConv3,
            seed: 9,
        })
        .unwrap();
        p.tensors_mut()[1].value.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        p.tensors_mut()[1].value.data_mut()[1] = -0.0;
        Checkpoint::new(p, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode(), Path::new("mem")).unwrap();
        assert_eq!(back.classes, ck.classes);
        assert_eq!(back.params.config(), ck.params.config());
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            assert!(a.value.bit_eq(&b.value), "{}", a.name);
            assert_eq!(a.group, b.group);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().encode();
        let p = Path::new("x.ck");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, p).is_err());
        let mut bad = bytes.clone();
        bad[8] = 2;
        let err = Checkpoint::decode(&bad, p).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra, p).is_err());
    }

    #[test]
    fn class_count_must_match_head() {
        let p = build_model(&ModelConfig::default()).unwrap();
        assert!(Checkpoint::new(p, vec!["x".into()]).is_err());
    }
}
