//! Small sequence utilities shared by the CAS and heatmap code.

use crate::nn::FeatureMap;

/// Min-max normalize in place to `[0, 1]`. A constant sequence becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// Normalize every column (class) of a `T x C` map independently over time.
pub fn normalize_columns(map: &FeatureMap) -> FeatureMap {
    let mut out = map.clone();
    for c in 0..map.channels() {
        let mut col = map.column(c);
        min_max_normalize(&mut col);
        for (t, v) in col.into_iter().enumerate() {
            out.set(t, c, v);
        }
    }
    out
}

/// Spread rows sampled at `indices` back over `len` units: every unit takes the
/// row of the nearest sampled index, the earlier one on ties.
pub fn expand_to_units(sampled: &FeatureMap, indices: &[usize], len: usize) -> FeatureMap {
    debug_assert_eq!(sampled.len(), indices.len());
    let mut out = FeatureMap::zeros(len, sampled.channels());
    let mut k = 0;
    for u in 0..len {
        while k + 1 < indices.len() && indices[k + 1].abs_diff(u) < indices[k].abs_diff(u) {
            k += 1;
        }
        out.row_mut(u).copy_from_slice(sampled.row(k));
    }
    out
}
