//! Sobol low-discrepancy sequence with Joe–Kuo direction numbers,
//! Gray-code (Antonov–Saleev) update, 32-bit resolution. The index-0
//! all-zeros point is skipped.

use crate::qmc::joe_kuo::{JOE_KUO, MAX_DIMENSION};
use crate::qmc::QmcError;
use crate::scalar::Real;

const BITS: usize = 32;

/// Deterministic Sobol point stream in `[0,1)^d`. State is fully
/// determined by `(dimension, index)`.
#[derive(Debug, Clone)]
pub struct SobolStream {
    dimension: usize,
    index: u64,
    /// direction[d][k] as fixed-point fractions scaled by 2^32
    direction: Vec<[u32; BITS]>,
    /// current point, fixed-point
    current: Vec<u32>,
}

impl SobolStream {
    pub fn new(dimension: usize) -> Result<Self, QmcError> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(QmcError::UnsupportedDimension {
                dimension,
                max: MAX_DIMENSION,
            });
        }
        let mut direction = Vec::with_capacity(dimension);
        // Dimension 1 is the van der Corput sequence: m_k = 1 for all k.
        direction.push(std::array::from_fn(|k| 1u32 << (BITS - 1 - k)));
        for dim in 1..dimension {
            direction.push(direction_numbers(dim));
        }
        Ok(SobolStream {
            dimension,
            index: 0,
            direction,
            current: vec![0; dimension],
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Count of points emitted so far.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Next point of the sequence (the raw index-0 zero point is skipped,
    /// so the first emitted 1-D value is 0.5).
    pub fn next_point<R: Real>(&mut self) -> Vec<R> {
        // Antonov–Saleev: flip the direction number indexed by the lowest
        // zero bit of the previous index.
        let bit = (!self.index).trailing_zeros() as usize;
        debug_assert!(bit < BITS, "sequence length exceeds 2^32");
        self.index += 1;
        let scale = R::of(1.0 / (1u64 << BITS) as f64);
        self.current
            .iter_mut()
            .zip(&self.direction)
            .map(|(cur, dirs)| {
                *cur ^= dirs[bit];
                R::of(*cur as f64) * scale
            })
            .collect()
    }

    /// Fill a buffer with the next `n` points, row per point.
    pub fn take_points<R: Real>(&mut self, n: usize) -> Vec<Vec<R>> {
        (0..n).map(|_| self.next_point()).collect()
    }
}

/// Expand the Joe–Kuo initial values of dimension `dim` (0-based; `dim ≥ 1`)
/// into 32 direction numbers via the primitive-polynomial recurrence.
fn direction_numbers(dim: usize) -> [u32; BITS] {
    let (poly, m_init) = JOE_KUO[dim - 1];
    let s = (32 - poly.leading_zeros() - 1) as usize; // polynomial degree
    let mut m = [0u64; BITS];
    for (k, &mi) in m_init.iter().enumerate() {
        m[k] = mi as u64;
    }
    for k in s..BITS {
        // m_k = 2a₁m_{k−1} ⊕ 4a₂m_{k−2} ⊕ … ⊕ 2^s m_{k−s} ⊕ m_{k−s}
        let mut val = m[k - s] ^ (m[k - s] << s);
        for j in 1..s {
            let a = (poly >> (s - j)) & 1;
            if a == 1 {
                val ^= m[k - j] << j;
            }
        }
        m[k] = val;
    }
    std::array::from_fn(|k| (m[k] << (BITS - 1 - k)) as u32)
}
