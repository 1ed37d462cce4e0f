//! Dense row-major `f64` tensors with identity and gradient storage.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to shared storage. Shape is fixed
//! at creation; data is interior-mutable so an optimizer can update
//! parameters in place without invalidating handles already recorded on a
//! tape. A rank-0 tensor (empty shape) is a scalar with one element.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    requires_grad: bool,
    tracked: bool,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Shared handle to one tensor. Clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, tracked: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                requires_grad,
                tracked,
                data: RwLock::new(data),
                grad: Mutex::new(None),
            }),
        }
    }

    /// Non-differentiable leaf from explicit contents.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                details: format!("shape {:?} wants {} elements, got {}", shape, numel_of(shape), data.len()),
            });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, false))
    }

    /// Trainable leaf: participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "param",
                details: format!("shape {:?} wants {} elements, got {}", shape, numel_of(shape), data.len()),
            });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, true, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![0.0; numel_of(shape)], false, false)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![v; numel_of(shape)], false, false)
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(Vec::new(), vec![v], false, false)
    }

    /// Internal: op output. `tracked` marks results reachable from any
    /// gradient-requiring leaf so the tape can skip dead records.
    pub(crate) fn result(shape: Vec<usize>, data: Vec<f64>, tracked: bool) -> Tensor {
        Tensor::new_inner(shape, data, false, tracked)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for gradient-requiring leaves and anything computed from one.
    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read()
    }

    /// In-place mutation; used by the optimizer and the gradient checker.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.inner.data.write()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.read().clone()
    }

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.read();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// Accumulated gradient, if any backward pass has deposited one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().clone()
    }

    /// Adds `delta` into the persistent gradient accumulator.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.inner.grad.lock();
        match g.as_mut() {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock() = None;
    }

    /// Serializes as an IVT1 blob: magic `IVT1`, dtype byte (0 = f64), rank
    /// byte, little-endian `u32` extents, row-major little-endian `f64` data.
    pub fn write_ivt1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"IVT1")?;
        w.write_all(&[0u8])?;
        let nd = self.ndim();
        if nd > u8::MAX as usize {
            return Err(Error::Contract { op: "write_ivt1", msg: format!("rank {} too large", nd) });
        }
        w.write_all(&[nd as u8])?;
        for &e in self.shape() {
            if e > u32::MAX as usize {
                return Err(Error::Contract { op: "write_ivt1", msg: format!("extent {} too large", e) });
            }
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in self.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a blob written by [`Tensor::write_ivt1`]. The result is a plain
    /// leaf; callers re-wrap parameters as needed.
    pub fn read_ivt1<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"IVT1" {
            return Err(Error::Checkpoint(format!("bad tensor magic {:?}", magic)));
        }
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        if hdr[0] != 0 {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", hdr[0])));
        }
        let nd = hdr[1] as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            let mut e = [0u8; 4];
            r.read_exact(&mut e)?;
            shape.push(u32::from_le_bytes(e) as usize);
        }
        let n = numel_of(&shape);
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::from_vec(&shape, data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_is_rank_zero_with_one_element() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn from_vec_rejects_wrong_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn ids_are_unique_and_clones_alias() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[2]);
        assert_ne!(a.id(), b.id());
        let c = a.clone();
        assert_eq!(a.id(), c.id());
        c.data_mut()[0] = 7.0;
        assert_eq!(a.data()[0], 7.0);
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let t = Tensor::param(&[3], vec![0.0; 3]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 4.0, 6.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn ivt1_roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_ivt1(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"IVT1");
        assert_eq!(buf.len(), 4 + 1 + 1 + 2 * 4 + 6 * 8);
        let back = Tensor::read_ivt1(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        let (a, b) = (t.to_vec(), back.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ivt1_scalar_roundtrip() {
        let t = Tensor::scalar(-7.125);
        let mut buf = Vec::new();
        t.write_ivt1(&mut buf).unwrap();
        let back = Tensor::read_ivt1(&mut buf.as_slice()).unwrap();
        assert_eq!(back.ndim(), 0);
        assert_eq!(back.item(), -7.125);
    }
}
