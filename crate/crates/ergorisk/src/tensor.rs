//! Dense tensors, the deterministic RNG, and the checkpoint file format.
//!
//! Tensors are plain row-major value buffers; gradient tracking lives in the
//! autodiff graph, not here. Everything is generic over the scalar so the
//! network trains in 32-bit while gradient checks run the identical code
//! path in 64-bit.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::{Read, Write};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor; panics if `data` does not fill `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "shape error: {shape:?} holds {expect} values, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::ZERO; n] }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "shape error: item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "shape error: expected rank 2, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        assert_eq!(
            self.shape, other.shape,
            "shape error: elementwise op on {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(
            self.shape, other.shape,
            "shape error: accumulate {:?} into {:?}",
            other.shape, self.shape
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|v| v * c)
    }

    /// Plain rank-2 matrix product (i-k-j loop order).
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, ka) = self.dims2();
        let (kb, n) = other.dims2();
        assert_eq!(ka, kb, "shape error: matmul [{m},{ka}] x [{kb},{n}]");
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let a_row = &self.data[i * ka..(i + 1) * ka];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Tensor<S> {
        let (m, n) = self.dims2();
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn sum_value(&self) -> S {
        self.data.iter().fold(S::ZERO, |acc, &v| acc + v)
    }

    /// Reorder the rows of a rank-2 tensor: row `i` of the result is row
    /// `perm[i]` of the input. `perm` must be a permutation of `0..rows`.
    pub fn permute_rows(&self, perm: &[usize]) -> Tensor<S> {
        let (n, d) = self.dims2();
        assert_eq!(perm.len(), n, "shape error: permutation length {} for {n} rows", perm.len());
        let mut out = Vec::with_capacity(n * d);
        for &p in perm {
            out.extend_from_slice(self.row(p));
        }
        Tensor { shape: vec![n, d], data: out }
    }

    /// Convert element precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Panic with a numeric-fault message if any value is non-finite.
    /// Called after every graph op in debug builds.
    pub fn check_finite(&self, context: &str) {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                panic!("numeric fault: non-finite value {v:?} at flat index {i} after {context}");
            }
        }
    }
}

/// Deterministic, portable random source with cheap independent streams.
///
/// Wraps a counter-based generator: a fixed seed yields the same sequence on
/// every platform, and `stream(id)` derives an independent generator without
/// consuming state from the parent — used to give every sample its own
/// reproducible randomness regardless of worker scheduling.
#[derive(Debug, Clone)]
pub struct ErgRng(ChaCha8Rng);

impl ErgRng {
    pub fn seed(seed: u64) -> Self {
        ErgRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for stream `id` under the same seed.
    pub fn stream(&self, id: u64) -> Self {
        let mut rng = self.0.clone();
        rng.set_stream(id);
        rng.set_word_pos(0);
        ErgRng(rng)
    }

    /// Fill a tensor with uniform values in `[lo, hi)`.
    pub fn fill_uniform<S: Scalar>(&mut self, t: &mut Tensor<S>, lo: f64, hi: f64) {
        use rand::Rng;
        for v in t.data_mut() {
            *v = S::from_f64(self.gen_range(lo..hi));
        }
    }
}

impl RngCore for ErgRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

/// Named parameter set, ordered by name for deterministic iteration.
pub type ParamMap<S> = BTreeMap<String, Tensor<S>>;

const CHECKPOINT_MAGIC: &[u8; 5] = b"ERGK1";
/// Sanity cap applied when reading; real parameter names are short.
const MAX_NAME_LEN: u32 = 4096;

/// Serialize parameters: magic, then per parameter (in name order) the
/// name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
/// and raw 32-bit LE values.
pub fn write_checkpoint<S: Scalar>(mut w: impl Write, params: &ParamMap<S>) -> Result<()> {
    let io_err = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Parse a checkpoint back into 32-bit parameters.
pub fn read_checkpoint(mut r: impl Read) -> Result<ParamMap<f32>> {
    let bad = |msg: String| Error::Schema(format!("checkpoint: {msg}"));
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| bad("missing magic bytes".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut params = ParamMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(bad(format!("read error: {e}"))),
        }
        let name_len = u32::from_le_bytes(len_buf);
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        r.read_exact(&mut name_buf)
            .map_err(|_| bad("truncated parameter name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| bad("parameter name is not UTF-8".into()))?;

        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf)
            .map_err(|_| bad(format!("{name}: truncated rank")))?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for i in 0..rank {
            let mut dim_buf = [0u8; 4];
            r.read_exact(&mut dim_buf)
                .map_err(|_| bad(format!("{name}: truncated dim {i}")))?;
            let d = u32::from_le_bytes(dim_buf) as usize;
            if d == 0 {
                return Err(bad(format!("{name}: zero dimension")));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| bad(format!("{name}: element count overflow")))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(count);
        let mut val_buf = [0u8; 4];
        for i in 0..count {
            r.read_exact(&mut val_buf)
                .map_err(|_| bad(format!("{name}: truncated at value {i} of {count}")))?;
            data.push(f32::from_le_bytes(val_buf));
        }
        if params.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
    }
    Ok(params)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ParamMap<S>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamMap<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice()).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn construction_and_accessors() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(Tensor::<f32>::scalar(7.0).item(), 7.0);
        assert_eq!(Tensor::<f64>::zeros(vec![4]).data(), &[0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "shape error")]
    fn construction_rejects_bad_length() {
        let _ = Tensor::new(vec![2, 2], vec![1.0f32]);
    }

    #[test]
    fn matmul_against_naive_oracle() {
        let mut rng = ErgRng::seed(3);
        let mut a = Tensor::<f64>::zeros(vec![3, 4]);
        let mut b = Tensor::<f64>::zeros(vec![4, 2]);
        rng.fill_uniform(&mut a, -1.0, 1.0);
        rng.fill_uniform(&mut b, -1.0, 1.0);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = ErgRng::seed(5);
        let mut a = Tensor::<f32>::zeros(vec![5, 7]);
        rng.fill_uniform(&mut a, -2.0, 2.0);
        assert_eq!(a.transpose2().transpose2(), a);
    }

    #[test]
    #[should_panic(expected = "numeric fault")]
    fn finite_check_panics_on_nan() {
        Tensor::new(vec![2], vec![1.0f32, f32::NAN]).check_finite("test op");
    }

    #[test]
    fn rng_is_deterministic_and_streams_are_independent() {
        let mut a = ErgRng::seed(42);
        let mut b = ErgRng::seed(42);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);

        let root = ErgRng::seed(42);
        let mut s1a = root.stream(1);
        let mut s1b = root.stream(1);
        let mut s2 = root.stream(2);
        assert_eq!(s1a.next_u64(), s1b.next_u64());
        assert_ne!(s1a.next_u64(), s2.next_u64());
        // Deriving streams does not advance the parent.
        let mut c = ErgRng::seed(42);
        assert_eq!(c.next_u64(), xs[0]);
    }

    #[test]
    fn rng_gen_range_is_reproducible() {
        let mut a = ErgRng::seed(9);
        let mut b = ErgRng::seed(9);
        for _ in 0..100 {
            let x: f64 = a.gen_range(0.0..1.0);
            let y: f64 = b.gen_range(0.0..1.0);
            assert_eq!(x.to_bits(), y.to_bits());
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ErgRng::seed(7);
        let mut params = ParamMap::<f32>::new();
        for (name, shape) in [
            ("cls.b", vec![8]),
            ("cls.w", vec![16, 8]),
            ("backbone.stage0.conv", vec![4, 3, 3, 3]),
            ("scalar.gain", vec![]),
        ] {
            let mut t = Tensor::zeros(shape);
            rng.fill_uniform(&mut t, -1.0, 1.0);
            params.insert(name.to_string(), t);
        }
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params).unwrap();
        assert_eq!(&bytes[..5], b"ERGK1");
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), params.len());
        for (name, t) in &params {
            let r = &back[name];
            assert_eq!(r.shape(), t.shape());
            for (a, b) in t.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Save -> load -> save reproduces identical bytes.
        let mut bytes2 = Vec::new();
        write_checkpoint(&mut bytes2, &back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params: ParamMap<f32> =
            [("w".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]))].into();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 2];
        assert!(read_checkpoint(truncated).is_err());

        assert!(read_checkpoint(&b"ERGK1\xff\xff\xff\xff"[..]).is_err());
    }
}
