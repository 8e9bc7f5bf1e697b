//! Dense row-major tensors, the small linear-algebra core, nearest-neighbor
//! index-map resizing, and the `.hrgt` binary container.
//!
//! Tensors are immutable after construction and safe to share across threads.
//! All reductions use a fixed sequential order so results are reproducible
//! across runs and thread counts.

use crate::error::{Error, Result};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

/// Element type of a [`Tensor`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    /// Unsigned 32-bit integers, used for region/node index maps and
    /// binary adjacency matrices.
    U32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U32),
            other => Err(Error::UnsupportedDtypeCode(other)),
        }
    }

    pub fn element_bytes(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "float32",
            Dtype::F64 => "float64",
            Dtype::U32 => "uint32",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::U32(_) => Dtype::U32,
        }
    }
}

/// Dense row-major multi-dimensional array. Carrier for all feature maps
/// and matrices in the library.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    payload: Payload,
}

const MAGIC: &[u8; 4] = b"HRGT";
const VERSION: u8 = 1;

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n: u128 = 1;
    for &d in shape {
        n = n.saturating_mul(d as u128);
    }
    if n > usize::MAX as u128 {
        return Err(Error::value("tensor", format!("shape {shape:?} overflows")));
    }
    Ok(n as usize)
}

impl Tensor {
    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Payload::F64(data))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, Payload::F32(data))
    }

    pub fn from_u32(shape: &[usize], data: Vec<u32>) -> Result<Self> {
        Self::new(shape, Payload::U32(data))
    }

    fn new(shape: &[usize], payload: Payload) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor", "rank must be at least 1"));
        }
        let numel = checked_numel(shape)?;
        if numel != payload.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} implies {numel} elements, payload has {}",
                    payload.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            payload,
        })
    }

    pub fn zeros_f64(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Self::from_f64(shape, vec![0.0; n])
    }

    /// Scalar (rank-1, length-1) float64 tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            payload: Payload::F64(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.payload.dtype()
    }

    pub fn numel(&self) -> usize {
        self.payload.len()
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                module: "tensor",
                expected: "float64",
                got: other.dtype().name(),
            }),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                module: "tensor",
                expected: "float32",
                got: other.dtype().name(),
            }),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.payload {
            Payload::U32(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                module: "tensor",
                expected: "uint32",
                got: other.dtype().name(),
            }),
        }
    }

    /// Numeric widening to float64. Lossless for all three dtypes.
    pub fn to_f64(&self) -> Tensor {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            payload: Payload::F64(data),
        }
    }

    /// Reinterpret with a new shape of the same element count. Metadata-only;
    /// the payload is moved, not copied.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if numel != self.payload.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "cannot reshape {:?} ({} elements) to {shape:?} ({numel} elements)",
                    self.shape,
                    self.payload.len()
                ),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn require_matrix(&self, module: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(
                module,
                format!("expected a rank-2 tensor, got shape {other:?}"),
            )),
        }
    }

    /// Matrix product with a fixed summation order: each output cell
    /// accumulates sequentially over the inner dimension, so float64 results
    /// are bitwise reproducible.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = self.require_matrix("matmul")?;
        let (q2, r) = other.require_matrix("matmul")?;
        if q != q2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.shape, other.shape
                ),
            ));
        }
        match (&self.payload, &other.payload) {
            (Payload::F64(a), Payload::F64(b)) => {
                Tensor::from_f64(&[p, r], matmul_impl(a, b, p, q, r))
            }
            (Payload::F32(a), Payload::F32(b)) => {
                Tensor::from_f32(&[p, r], matmul_impl(a, b, p, q, r))
            }
            (lhs, rhs) => Err(Error::DtypeMismatch {
                module: "matmul",
                expected: "matching float dtypes",
                got: if lhs.dtype() != rhs.dtype() {
                    "mixed dtypes"
                } else {
                    "uint32"
                },
            }),
        }
    }

    /// Transpose of a rank-2 float tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        match &self.payload {
            Payload::F64(v) => {
                let mut out = vec![0.0f64; v.len()];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = v[i * c + j];
                    }
                }
                Tensor::from_f64(&[c, r], out)
            }
            Payload::F32(v) => {
                let mut out = vec![0.0f32; v.len()];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = v[i * c + j];
                    }
                }
                Tensor::from_f32(&[c, r], out)
            }
            Payload::U32(_) => Err(Error::DtypeMismatch {
                module: "transpose",
                expected: "float dtype",
                got: "uint32",
            }),
        }
    }

    /// Nearest-neighbor resize for index maps: each output cell copies the
    /// input cell at floor-scaled source coordinates.
    pub fn resize_nearest_index(&self, target_h: usize, target_w: usize) -> Result<Tensor> {
        let (h, w) = self.require_matrix("resize")?;
        if h == 0 || w == 0 || target_h == 0 || target_w == 0 {
            return Err(Error::shape("resize", "sizes must be at least 1"));
        }
        let src = self.as_u32()?;
        let mut out = Vec::with_capacity(target_h * target_w);
        for oy in 0..target_h {
            let sy = oy * h / target_h;
            for ox in 0..target_w {
                let sx = ox * w / target_w;
                out.push(src[sy * w + sx]);
            }
        }
        Tensor::from_u32(&[target_h, target_w], out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bytes = self.to_bytes()?;
        file.write_all(&bytes).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Tensor::from_bytes(&bytes)
    }

    /// Serialize into the `.hrgt` container: magic `HRGT`, version byte,
    /// dtype code, ndim, little-endian u64 dims, little-endian payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::value("tensor", "rank exceeds container limit"));
        }
        let mut out = Vec::with_capacity(
            7 + 8 * self.shape.len() + self.numel() * self.dtype().element_bytes(),
        );
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::U32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 7 {
            return Err(Error::TruncatedPayload {
                declared: 7,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let dtype = Dtype::from_code(bytes[5])?;
        let ndim = bytes[6] as usize;
        if ndim == 0 {
            return Err(Error::shape("tensor", "rank must be at least 1"));
        }
        let dims_end = 7 + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::TruncatedPayload {
                declared: dims_end,
                found: bytes.len(),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let start = 7 + 8 * i;
            let dim = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
            if dim > usize::MAX as u64 {
                return Err(Error::value("tensor", "dimension overflows"));
            }
            shape.push(dim as usize);
        }
        let numel = checked_numel(&shape)?;
        let payload_bytes = numel
            .checked_mul(dtype.element_bytes())
            .ok_or_else(|| Error::value("tensor", "payload size overflows"))?;
        let found = bytes.len() - dims_end;
        if found < payload_bytes {
            return Err(Error::TruncatedPayload {
                declared: payload_bytes,
                found,
            });
        }
        if found > payload_bytes {
            return Err(Error::TrailingBytes(found - payload_bytes));
        }
        let body = &bytes[dims_end..];
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U32 => Payload::U32(
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(&shape, payload)
    }
}

fn matmul_impl<T>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    let mut out = vec![T::default(); p * r];
    for i in 0..p {
        for j in 0..r {
            // Sequential over the inner dimension; do not reorder.
            let mut acc = T::default();
            for k in 0..q {
                acc = acc + a[i * q + k] * b[k * r + j];
            }
            out[i * r + j] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_f64(&[n, n], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::from_f64(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = identity(2).matmul(&b).unwrap();
        assert_eq!(out.as_f64().unwrap(), &[3.0, 4.0]);
        assert_eq!(out.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Tensor::from_f64(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.as_f64().unwrap(), &[11.0]);
    }

    /// Naive triple-loop product with the same fixed summation order.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        let (av, bv) = (a.as_f64().unwrap(), b.as_f64().unwrap());
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += av[i * q + k] * bv[k * r + j];
                }
                out[i * r + j] = acc;
            }
        }
        out
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(&[rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        for (p, q, r, seed) in [(7, 5, 3, 1), (16, 16, 16, 2), (64, 33, 64, 3), (1, 64, 1, 4)] {
            let a = random_matrix(p, q, seed);
            let b = random_matrix(q, r, seed + 100);
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(&a, &b);
            assert_eq!(got.as_f64().unwrap(), want.as_slice(), "{p}x{q}x{r}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::from_f64(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::from_f64(&[2, 2], vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_rejects_index_dtype() {
        let a = Tensor::from_u32(&[1, 1], vec![1]).unwrap();
        let b = Tensor::from_u32(&[1, 1], vec![1]).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn resize_integer_upscale_fills_quadrants() {
        let m = Tensor::from_u32(&[2, 2], vec![1, 2, 3, 4]).unwrap();
        let out = m.resize_nearest_index(4, 4).unwrap();
        #[rustfmt::skip]
        let want = vec![
            1, 1, 2, 2,
            1, 1, 2, 2,
            3, 3, 4, 4,
            3, 3, 4, 4,
        ];
        assert_eq!(out.as_u32().unwrap(), want.as_slice());
    }

    #[test]
    fn resize_to_own_size_is_identity() {
        let m = Tensor::from_u32(&[3, 2], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let out = m.resize_nearest_index(3, 2).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn resize_downscale_matches_floor_formula() {
        let m = Tensor::from_u32(&[3, 3], (1..=9).collect()).unwrap();
        let out = m.resize_nearest_index(2, 2).unwrap();
        let src = m.as_u32().unwrap();
        let mut want = Vec::new();
        for oy in 0..2usize {
            for ox in 0..2usize {
                want.push(src[(oy * 3 / 2) * 3 + (ox * 3 / 2)]);
            }
        }
        assert_eq!(out.as_u32().unwrap(), want.as_slice());
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let t = Tensor::from_f32(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.25]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(bytes.len(), 47); // 4+1+1+1 header, 16 dims, 24 payload
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back, t);
    }

    #[test]
    fn file_save_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hrgt");
        let t = Tensor::from_u32(&[2, 2, 2], vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        t.save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        assert_eq!(back, t);
        let original = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), original);
    }

    #[test]
    fn file_bad_magic_is_named_error() {
        let t = Tensor::scalar(1.0);
        let mut bytes = t.to_bytes().unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::BadMagic(_))
        ));
    }

    #[test]
    fn file_unsupported_version_is_named_error() {
        let mut bytes = Tensor::scalar(1.0).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn file_truncation_and_trailing_are_named_errors() {
        let bytes = Tensor::from_f64(&[3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .to_bytes()
            .unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Tensor::from_bytes(truncated),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Tensor::from_bytes(&trailing),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn shape_payload_mismatch_rejected() {
        assert!(Tensor::from_f64(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_f64(&[], vec![]).is_err());
    }

    #[test]
    fn reshape_is_metadata_only() {
        let t = Tensor::from_f64(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.clone().reshape(&[6]).unwrap();
        assert_eq!(r.shape(), &[6]);
        assert_eq!(r.as_f64().unwrap(), t.as_f64().unwrap());
        assert!(t.reshape(&[4]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact_all_dtypes_ranks_1_to_4(
            shape in proptest::collection::vec(1usize..5, 1..=4),
            seed in 0u64..1000,
            dtype in 0u8..3,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let t = match dtype {
                0 => Tensor::from_f32(&shape, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap(),
                1 => Tensor::from_f64(&shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap(),
                _ => Tensor::from_u32(&shape, (0..n).map(|_| rng.gen::<u32>()).collect()).unwrap(),
            };
            let bytes = t.to_bytes().unwrap();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn resize_never_introduces_new_labels(
            h in 1usize..9, w in 1usize..9,
            th in 1usize..17, tw in 1usize..17,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u32> = (0..h * w).map(|_| rng.gen_range(1..6)).collect();
            let m = Tensor::from_u32(&[h, w], data.clone()).unwrap();
            let out = m.resize_nearest_index(th, tw).unwrap();
            for &label in out.as_u32().unwrap() {
                prop_assert!(data.contains(&label));
            }
        }
    }
}
