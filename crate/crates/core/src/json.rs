//! JSON helpers: floats are written with 17 significant digits so documents round-trip bit-exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

/// An `f64` that serializes as `d.dddddddddddddddde±x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite number"));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for F17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(F17)
    }
}

pub fn vec_out(v: &DVector<f64>) -> Vec<F17> {
    v.iter().map(|&x| F17(x)).collect()
}

pub fn vec_in(v: &[F17]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|x| x.0))
}

/// Row-major nested rows.
pub fn mat_out(m: &DMatrix<f64>) -> Vec<Vec<F17>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|k| F17(m[(i, k)])).collect())
        .collect()
}

pub fn mat_in(rows: &[Vec<F17>], what: &str) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{what}: ragged matrix rows"));
    }
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|x| x.0)).collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        let xs = [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0];
        let wrapped: Vec<F17> = xs.iter().map(|&x| F17(x)).collect();
        let text = serde_json::to_string(&wrapped).unwrap();
        assert!(text.contains("1.0000000000000001e-1"));
        let back: Vec<F17> = serde_json::from_str(&text).unwrap();
        for (a, b) in xs.iter().zip(back) {
            assert_eq!(a.to_bits(), b.0.to_bits());
        }
    }
}
