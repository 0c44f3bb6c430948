//! Weight matrices under Dale's principle.
//!
//! A [`DaleMatrix`] stores magnitudes only. The sign every synapse carries is a
//! property of the presynaptic population ([`PreSign`]) and is applied to the
//! PSC, not to the weight. Only the network input layer is allowed mixed
//! signs.
//!
//! Binary layout written by [`DaleMatrix::write_to`] (all integers little
//! endian):
//!
//! ```text
//! b"DMAT"            4 bytes
//! name_len: u32      then name_len bytes of UTF-8
//! pre_sign: u8       0 = excitatory, 1 = inhibitory, 2 = mixed
//! rows: u64, cols: u64
//! rows*cols f64      row-major
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::rng::{substream, Stream};

const MATRIX_MAGIC: &[u8; 4] = b"DMAT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreSign {
    Excitatory,
    Inhibitory,
    Mixed,
}

impl PreSign {
    fn code(self) -> u8 {
        match self {
            PreSign::Excitatory => 0,
            PreSign::Inhibitory => 1,
            PreSign::Mixed => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PreSign::Excitatory),
            1 => Ok(PreSign::Inhibitory),
            2 => Ok(PreSign::Mixed),
            other => Err(Error::Format(format!("unknown pre_sign code {other}"))),
        }
    }

    pub fn is_constrained(self) -> bool {
        self != PreSign::Mixed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitVariant {
    #[default]
    Uniform,
    Normal,
}

/// Weight matrix of shape `(post, pre)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DaleMatrix {
    name: String,
    pre_sign: PreSign,
    values: Array2<f64>,
}

impl DaleMatrix {
    pub fn new(name: impl Into<String>, pre_sign: PreSign, values: Array2<f64>) -> Result<Self> {
        let m = Self {
            name: name.into(),
            pre_sign,
            values,
        };
        m.check_dale()?;
        Ok(m)
    }

    pub fn zeros(name: impl Into<String>, pre_sign: PreSign, shape: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            pre_sign,
            values: Array2::zeros(shape),
        }
    }

    /// Kaiming initialization with fan-in `shape.1`: `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`, or `N(0, 2 / fan_in)`. Constrained matrices take
    /// the absolute value of every draw.
    pub fn init_kaiming<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: (usize, usize),
        variant: InitVariant,
        pre_sign: PreSign,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        let (rows, fan_in) = shape;
        if fan_in == 0 || rows == 0 {
            return Err(Error::Matrix {
                name,
                reason: format!("cannot initialize shape {rows}x{fan_in} (zero fan-in or rows)"),
            });
        }
        let mut values = Array2::zeros(shape);
        match variant {
            InitVariant::Uniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("finite positive bound");
                values.mapv_inplace(|_: f64| dist.sample(rng));
            }
            InitVariant::Normal => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite positive std");
                values.mapv_inplace(|_: f64| dist.sample(rng));
            }
        }
        if pre_sign.is_constrained() {
            values.mapv_inplace(f64::abs);
        }
        Ok(Self {
            name,
            pre_sign,
            values,
        })
    }

    pub fn init_kaiming_seeded(
        name: impl Into<String>,
        shape: (usize, usize),
        variant: InitVariant,
        pre_sign: PreSign,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, Stream::Init, 0);
        Self::init_kaiming(name, shape, variant, pre_sign, &mut rng)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pre_sign(&self) -> PreSign {
        self.pre_sign
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Clamps negative entries to zero on constrained matrices.
    pub fn project(&mut self) {
        if self.pre_sign.is_constrained() {
            self.values.mapv_inplace(|w| if w < 0.0 { 0.0 } else { w });
        }
    }

    /// Mutates the values, then projects. Rejects shape changes and
    /// non-finite results.
    pub fn update(&mut self, f: impl FnOnce(&mut Array2<f64>)) -> Result<()> {
        let shape = self.values.dim();
        f(&mut self.values);
        if self.values.dim() != shape {
            return Err(Error::Matrix {
                name: self.name.clone(),
                reason: "update changed the shape".into(),
            });
        }
        if self.values.iter().any(|w| !w.is_finite()) {
            return Err(Error::Matrix {
                name: self.name.clone(),
                reason: "update produced a non-finite weight".into(),
            });
        }
        self.project();
        Ok(())
    }

    /// Overwrites all values with `values` (same shape), then projects.
    pub fn assign(&mut self, values: ArrayView2<f64>) -> Result<()> {
        check_shape("DaleMatrix::assign", self.values.dim(), values.dim())?;
        self.update(|v| v.assign(&values))
    }

    pub fn check_dale(&self) -> Result<()> {
        if self.pre_sign.is_constrained() {
            if let Some(w) = self.values.iter().find(|&&w| w < 0.0 || w.is_nan()) {
                return Err(Error::Matrix {
                    name: self.name.clone(),
                    reason: format!("Dale invariant violated by entry {w}"),
                });
            }
        }
        Ok(())
    }

    /// Synaptic current `psc · Wᵀ` for a `trials × pre` matrix of signed PSCs.
    pub fn apply(&self, psc: ArrayView2<f64>) -> Result<Array2<f64>> {
        if psc.ncols() != self.values.ncols() {
            return Err(Error::DimensionMismatch {
                context: "DaleMatrix::apply",
                expected: format!("{} presynaptic columns", self.values.ncols()),
                actual: format!("{}", psc.ncols()),
            });
        }
        Ok(psc.dot(&self.values.t()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        let name = self.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u8(self.pre_sign.code())?;
        let (rows, cols) = self.values.dim();
        w.write_u64::<LittleEndian>(rows as u64)?;
        w.write_u64::<LittleEndian>(cols as u64)?;
        for &x in self.values.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Format(format!("bad matrix magic {magic:?}")));
        }
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("matrix name: {e}")))?;
        let pre_sign = PreSign::from_code(r.read_u8()?)?;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("matrix `{name}` shape overflows")))?;
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let values = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Format(format!("matrix `{name}`: {e}")))?;
        Self::new(name, pre_sign, values)
    }
}

/// Functional form of [`DaleMatrix::project`].
pub fn project_dale(mut m: DaleMatrix) -> DaleMatrix {
    m.project();
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeReport {
    pub iterations: usize,
    /// Largest |row or column sum − target| after the last iteration.
    pub max_deviation: f64,
}

/// Alternating row/column rescaling until every row and column sums to
/// `target_sum` within `tol`, or `iters` sweeps are spent.
pub fn doubly_normalize(
    m: &DaleMatrix,
    target_sum: f64,
    iters: usize,
    tol: f64,
) -> Result<DaleMatrix> {
    doubly_normalize_with_report(m, target_sum, iters, tol).map(|(m, _)| m)
}

pub fn doubly_normalize_with_report(
    m: &DaleMatrix,
    target_sum: f64,
    iters: usize,
    tol: f64,
) -> Result<(DaleMatrix, NormalizeReport)> {
    let fail = |reason: String| Error::Matrix {
        name: m.name.clone(),
        reason,
    };
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(fail(format!("dual-sum normalization needs a square matrix, got {rows}x{cols}")));
    }
    if !(target_sum > 0.0) {
        return Err(fail(format!("target sum must be positive, got {target_sum}")));
    }
    if m.values.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(fail("dual-sum normalization needs non-negative finite entries".into()));
    }
    let mut w = m.values.clone();
    for (axis, label) in [(Axis(1), "row"), (Axis(0), "column")] {
        if let Some(i) = w.sum_axis(axis).iter().position(|&s| s <= 0.0) {
            return Err(fail(format!("{label} {i} is all zero and cannot be normalized")));
        }
    }

    let deviation = |w: &Array2<f64>| {
        let r = w.sum_axis(Axis(1)).iter().map(|s| (s - target_sum).abs()).fold(0.0, f64::max);
        let c = w.sum_axis(Axis(0)).iter().map(|s| (s - target_sum).abs()).fold(0.0, f64::max);
        r.max(c)
    };

    let mut iterations = 0;
    let mut dev = deviation(&w);
    while iterations < iters && dev > tol {
        let row_sums = w.sum_axis(Axis(1));
        for (mut row, s) in w.rows_mut().into_iter().zip(row_sums.iter()) {
            row.mapv_inplace(|x| x * (target_sum / s));
        }
        let col_sums = w.sum_axis(Axis(0));
        for (mut col, s) in w.columns_mut().into_iter().zip(col_sums.iter()) {
            col.mapv_inplace(|x| x * (target_sum / s));
        }
        iterations += 1;
        dev = deviation(&w);
    }

    let out = DaleMatrix {
        name: m.name.clone(),
        pre_sign: m.pre_sign,
        values: w,
    };
    Ok((
        out,
        NormalizeReport {
            iterations,
            max_deviation: dev,
        },
    ))
}
