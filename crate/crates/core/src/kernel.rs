use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Where a kernel's weights came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Handcrafted(String),
    Random(u64),
    Imported(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Handcrafted(name) => write!(f, "handcrafted({name})"),
            Provenance::Random(seed) => write!(f, "random({seed})"),
            Provenance::Imported(src) => write!(f, "imported({src})"),
        }
    }
}

/// A fixed convolution weight bank of shape `(out_c, in_c, kh, kw)`.
///
/// Weights are laid out `o → i → ky → kx`. There is no way to mutate a
/// kernel once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T: Scalar = f64> {
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    weights: Vec<T>,
    provenance: Provenance,
}

impl<T: Scalar> Kernel<T> {
    pub fn new(
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        weights: Vec<T>,
        provenance: Provenance,
    ) -> Result<Self> {
        if out_c == 0 || in_c == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "kernel dimensions must be positive, got ({out_c}, {in_c}, {kh}, {kw})"
            )));
        }
        let want = out_c * in_c * kh * kw;
        if weights.len() != want {
            return Err(Error::shape(format!(
                "kernel ({out_c}, {in_c}, {kh}, {kw}) needs {want} weights, got {}",
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("kernel weight {i}")));
        }
        Ok(Kernel {
            out_c,
            in_c,
            kh,
            kw,
            weights,
            provenance,
        })
    }

    pub fn out_c(&self) -> usize {
        self.out_c
    }

    pub fn in_c(&self) -> usize {
        self.in_c
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[((o * self.in_c + i) * self.kh + ky) * self.kw + kx]
    }

    /// The `kh × kw` slice connecting input channel `i` to output channel `o`.
    pub fn slice(&self, o: usize, i: usize) -> &[T] {
        let start = (o * self.in_c + i) * self.kh * self.kw;
        &self.weights[start..start + self.kh * self.kw]
    }

    pub fn cast<U: Scalar>(&self) -> Kernel<U> {
        Kernel {
            out_c: self.out_c,
            in_c: self.in_c,
            kh: self.kh,
            kw: self.kw,
            weights: self.weights.iter().map(|w| U::from_f64_lossy(w.as_f64())).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// The weights as a tensor with `n = out_c`, `c = in_c`.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(
            Shape::new(self.out_c, self.in_c, self.kh, self.kw),
            self.weights.clone(),
        )
        .expect("kernel invariants imply a valid tensor")
    }

    pub fn from_tensor(t: &Tensor<T>, provenance: Provenance) -> Result<Self> {
        let s = t.shape();
        Kernel::new(s.n, s.c, s.h, s.w, t.data().to_vec(), provenance)
    }
}
