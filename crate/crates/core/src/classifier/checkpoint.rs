//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DFDR"
//! version  u32      1
//! count    u32      number of tensors (6)
//! per tensor, in order conv1_w, conv1_b, conv2_w, conv2_b, dense_w, dense_b:
//!   rank   u32
//!   dims   rank x u32
//!   values product(dims) x f64
//! ```
//!
//! Image side and class count are recovered from the dense weight shape.

use super::{ClassifierModel, Params, CONV2_FILTERS};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFDR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &ClassifierModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&6u32.to_le_bytes());
    for (shape, values) in model.tensor_shapes().iter().zip(model.params().tensors()) {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    if count != 6 {
        return Err(Error::Checkpoint(format!("expected 6 tensors, found {count}")));
    }
    let mut shapes = Vec::with_capacity(6);
    let mut tensors = Vec::with_capacity(6);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if n > bytes.len() / 8 {
            return Err(Error::Checkpoint("tensor larger than file".into()));
        }
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
        tensors.push(values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let dense = &shapes[4];
    if dense.len() != 2 || dense[0] % CONV2_FILTERS != 0 {
        return Err(Error::Checkpoint("malformed dense tensor".into()));
    }
    let cells = dense[0] / CONV2_FILTERS;
    let quarter = (cells as f64).sqrt().round() as usize;
    if quarter * quarter != cells {
        return Err(Error::Checkpoint("dense input is not a square feature map".into()));
    }
    let (image_side, class_count) = (quarter * 4, dense[1]);
    let template = ClassifierModel::zeros(image_side, class_count).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if template.tensor_shapes().as_slice() != shapes.as_slice() {
        return Err(Error::Checkpoint("tensor shapes do not match the architecture".into()));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("six tensors");
    let params =
        Params { conv1_w: next(), conv1_b: next(), conv2_w: next(), conv2_b: next(), dense_w: next(), dense_b: next() };
    ClassifierModel::from_params(image_side, class_count, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn round_trip() {
        let model = ClassifierModel::he_init(16, 5, &mut Prng::new(2)).unwrap();
        let bytes = save_checkpoint(&model);
        assert_eq!(&bytes[..4], b"DFDR");
        assert_eq!(load_checkpoint(&bytes).unwrap(), model);
    }

    #[test]
    fn rejects_corruption() {
        let model = ClassifierModel::he_init(16, 5, &mut Prng::new(2)).unwrap();
        let bytes = save_checkpoint(&model);
        assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(load_checkpoint(&bad).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut model = ClassifierModel::zeros(16, 5).unwrap();
        model.params_mut().conv1_b[0] = f64::NAN;
        assert!(load_checkpoint(&save_checkpoint(&model)).is_err());
    }
}
