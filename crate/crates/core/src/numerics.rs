//! Deterministic numeric kernels: fixed-order matvec, cosine matching,
//! symmetric INT4 quantization and a portable seeded generator.
//!
//! Every reduction accumulates in `f32` in ascending index order. Batched
//! and per-sample paths call the same kernels, so their outputs agree bit
//! for bit.

use crate::error::{check_dim, Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix shape {rows}x{cols}")));
        }
        check_dim(rows * cols, values.len())?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn from the generator's approximate standard normal,
    /// multiplied by `scale`.
    pub fn random(rows: usize, cols: usize, scale: f32, rng: &mut Rng) -> Self {
        let values = (0..rows * cols).map(|_| rng.normal() as f32 * scale).collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// `y_i = sum_j m[i,j] * x_j`, accumulated in ascending `j`.
pub fn matvec(m: &Mat, x: &[f32]) -> Result<Vec<f32>> {
    check_dim(m.cols, x.len())?;
    Ok((0..m.rows).map(|i| dot_unchecked(m.row(i), x)).collect())
}

/// `y_j = sum_i m[i,j] * x_i`, accumulated in ascending `i`. Used by the
/// backward passes.
pub fn matvec_t(m: &Mat, x: &[f32]) -> Result<Vec<f32>> {
    check_dim(m.rows, x.len())?;
    let mut y = vec![0.0f32; m.cols];
    for (i, xi) in x.iter().enumerate() {
        for (yj, mij) in y.iter_mut().zip(m.row(i)) {
            *yj += mij * xi;
        }
    }
    Ok(y)
}

fn dot_unchecked(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn dot(a: &[f32], b: &[f32]) -> Result<f32> {
    check_dim(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

pub fn norm(x: &[f32]) -> f32 {
    dot_unchecked(x, x).sqrt()
}

/// Unit-norm copy of `x`; the zero vector maps to itself.
pub fn l2_normalize(x: &[f32]) -> Vec<f32> {
    let n = norm(x);
    if n > 0.0 {
        x.iter().map(|v| v / n).collect()
    } else {
        x.to_vec()
    }
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either side is zero.
pub fn cosine(x: &[f32], y: &[f32]) -> Result<f32> {
    let d = dot(x, y)?;
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((d / (nx * ny)).clamp(-1.0, 1.0))
}

/// tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Largest representable INT4 code; -8 is never produced.
pub const INT4_MAX: i8 = 7;

/// Symmetric per-tensor INT4 block. Codes are stored two per byte, low
/// nibble first, as 4-bit two's complement.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    scale: f32,
    count: usize,
    packed: Vec<u8>,
}

impl QuantBlock {
    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Builds a block from explicit codes. Codes must lie in `[-7, 7]`.
    pub fn from_codes(codes: &[i8], scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("quant scale {scale}")));
        }
        if let Some(c) = codes.iter().find(|c| c.unsigned_abs() > INT4_MAX as u8) {
            return Err(Error::invalid(format!("int4 code {c} out of range")));
        }
        let mut packed = vec![0u8; codes.len().div_ceil(2)];
        for (i, c) in codes.iter().enumerate() {
            let nibble = (*c as u8) & 0x0f;
            packed[i / 2] |= if i % 2 == 0 { nibble } else { nibble << 4 };
        }
        Ok(Self { scale, count: codes.len(), packed })
    }

    pub fn code(&self, i: usize) -> i8 {
        let byte = self.packed[i / 2];
        let nibble = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        // sign-extend the 4-bit value
        ((nibble << 4) as i8) >> 4
    }

    pub fn codes(&self) -> Vec<i8> {
        (0..self.count).map(|i| self.code(i)).collect()
    }

    pub fn encoded_len(&self) -> usize {
        Self::encoded_len_for(self.count)
    }

    pub fn encoded_len_for(count: usize) -> usize {
        8 + count.div_ceil(2)
    }

    /// `u32 count | f32 scale | packed nibbles`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out
    }

    /// Decodes one block from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 8 {
            return Err(Error::malformed("quant block shorter than its header"));
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let scale = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::malformed(format!("quant scale {scale}")));
        }
        let n = count.div_ceil(2);
        let body = bytes
            .get(8..8 + n)
            .ok_or_else(|| Error::malformed(format!("quant block claims {count} codes")))?;
        if count % 2 == 1 && body[n - 1] >> 4 != 0 {
            return Err(Error::malformed("nonzero padding nibble"));
        }
        let block = Self { scale, count, packed: body.to_vec() };
        if (0..count).any(|i| block.code(i) == -8) {
            return Err(Error::malformed("int4 code -8 is reserved"));
        }
        Ok((block, 8 + n))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (block, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::malformed(format!(
                "{} trailing bytes after quant block",
                bytes.len() - used
            )));
        }
        Ok(block)
    }
}

/// Symmetric per-tensor quantization: `scale = max|x| / 7` (1.0 for an
/// all-zero input), codes rounded half away from zero and clamped to ±7.
pub fn quantize_int4(x: &[f32]) -> QuantBlock {
    let max = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / INT4_MAX as f32 } else { 1.0 };
    let codes: Vec<i8> = x
        .iter()
        .map(|v| (v / scale).round().clamp(-(INT4_MAX as f32), INT4_MAX as f32) as i8)
        .collect();
    QuantBlock::from_codes(&codes, scale).expect("codes clamped to int4 range")
}

pub fn dequantize_int4(q: &QuantBlock) -> Vec<f32> {
    (0..q.count).map(|i| q.code(i) as f32 * q.scale).collect()
}

/// SplitMix64 generator. The exact recurrence is
///
/// ```text
/// state = state + 0x9E3779B97F4A7C15          (wrapping)
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9    (wrapping)
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB    (wrapping)
/// out = z ^ (z >> 31)
/// ```
///
/// Only integer and exactly-rounded float operations are used downstream,
/// so a seed yields the same stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Irwin-Hall approximation of a standard normal (sum of twelve
    /// uniforms minus six). Avoids libm so it is bit-portable.
    pub fn normal(&mut self) -> f64 {
        (0..12).map(|_| self.uniform()).sum::<f64>() - 6.0
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Seed for a named stage, derived from the root seed by FNV-1a hashing
/// the stage name and mixing it through one SplitMix64 step.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Rng::new(root ^ h).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn scalar_matvec_oracle(rows: &[&[f32]], x: &[f32]) -> Vec<f32> {
        let mut out = Vec::new();
        for r in rows {
            let mut s = 0.0f32;
            for j in 0..x.len() {
                s += r[j] * x[j];
            }
            out.push(s);
        }
        out
    }

    #[test]
    fn matvec_examples() {
        let y = matvec(&Mat::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
        let y = matvec(&Mat::zeros(2, 2), &[5.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        let m = Mat::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = matvec(&m, &[1.0, 1.0]).unwrap();
        assert_eq!(y, scalar_matvec_oracle(&[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 1.0]));
        assert_eq!(y, vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let m = Mat::zeros(2, 3);
        assert!(matches!(matvec(&m, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(Mat::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let mut rng = Rng::new(3);
        let m = Mat::random(5, 7, 1.0, &mut rng);
        let x: Vec<f32> = (0..5).map(|_| rng.normal() as f32).collect();
        let got = matvec_t(&m, &x).unwrap();
        for j in 0..7 {
            let mut s = 0.0f32;
            for (i, xi) in x.iter().enumerate() {
                s += m.get(i, j) * xi;
            }
            assert_eq!(got[j], s);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(l2_normalize(&[1.0; 4]), vec![0.5; 4]);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.4, 1.5, 3.0] {
            let g = |v: f64| {
                0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
            };
            let fd = (g(x + 1e-5) - g(x - 1e-5)) / 2e-5;
            assert!((gelu_grad(x as f32) as f64 - fd).abs() < 1e-4, "x={x}");
        }
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_int4(&[0.0; 4]);
        assert_eq!(q.scale(), 1.0);
        assert_eq!(q.codes(), vec![0; 4]);
        assert_eq!(dequantize_int4(&q), vec![0.0; 4]);

        let q = quantize_int4(&[7.0, -7.0, 3.5, 0.0]);
        assert_eq!(q.scale(), 1.0);
        assert_eq!(q.codes(), vec![7, -7, 4, 0]);

        let q = QuantBlock::from_codes(&[7], 2.0).unwrap();
        assert_eq!(dequantize_int4(&q), vec![14.0]);
    }

    #[test]
    fn quantize_half_rounds_away_from_zero() {
        let q = quantize_int4(&[7.0, -3.5, 2.5, -0.5]);
        assert_eq!(q.codes(), vec![7, -4, 3, -1]);
    }

    #[test]
    fn round_trip_error_bounded_on_seeded_vectors() {
        let mut rng = Rng::new(0x1234);
        for _ in 0..1000 {
            let x: Vec<f32> = (0..64).map(|_| (rng.normal() * 3.0) as f32).collect();
            let q = quantize_int4(&x);
            let back = dequantize_int4(&q);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() <= q.scale() * 0.5 * (1.0 + 1e-5));
            }
        }
    }

    #[test]
    fn quant_layout_is_little_endian_low_nibble_first() {
        let q = QuantBlock::from_codes(&[1, -1, 7], 0.5).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(&bytes[0..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[8..], &[0xf1, 0x07]);
        assert_eq!(QuantBlock::from_bytes(&bytes).unwrap(), q);
    }

    #[test]
    fn quant_decode_rejects_malformed() {
        let good = QuantBlock::from_codes(&[1, 2, 3], 1.0).unwrap().to_bytes();
        assert!(QuantBlock::from_bytes(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(QuantBlock::from_bytes(&extra).is_err());
        let mut minus8 = good.clone();
        minus8[8] = 0x08;
        assert!(QuantBlock::from_bytes(&minus8).is_err());
        let mut bad_scale = good.clone();
        bad_scale[4..8].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(QuantBlock::from_bytes(&bad_scale).is_err());
        let mut huge = good;
        huge[0..4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(QuantBlock::from_bytes(&huge).is_err());
    }

    #[test]
    fn rng_reference_stream() {
        // First outputs of SplitMix64 seeded with 0, per the published recurrence.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn derived_seeds_differ_per_stage() {
        assert_ne!(derive_seed(42, "encoder"), derive_seed(42, "datagen"));
        assert_eq!(derive_seed(42, "encoder"), derive_seed(42, "encoder"));
    }

    proptest! {
        #[test]
        fn dequantize_within_half_step(x in proptest::collection::vec(-100.0f32..100.0, 1..80)) {
            let q = quantize_int4(&x);
            let back = dequantize_int4(&q);
            prop_assert_eq!(back.len(), x.len());
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= q.scale() * 0.5 * (1.0 + 1e-5));
            }
            prop_assert_eq!(QuantBlock::from_bytes(&q.to_bytes()).unwrap(), q);
        }

        #[test]
        fn cosine_symmetric(a in proptest::collection::vec(-10.0f32..10.0, 8), b in proptest::collection::vec(-10.0f32..10.0, 8)) {
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            let c = cosine(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn matvec_reproducible(vals in proptest::collection::vec(-5.0f32..5.0, 12), x in proptest::collection::vec(-5.0f32..5.0, 4)) {
            let m = Mat::new(3, 4, vals).unwrap();
            prop_assert_eq!(matvec(&m, &x).unwrap(), matvec(&m, &x).unwrap());
        }
    }
}
