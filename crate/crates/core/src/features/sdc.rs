//! Shifted delta cepstra: stacked delta blocks at fixed frame offsets.

use super::{FeatureError, FeatureKind, FeatureMatrix};

/// SDC stacking parameters. The defaults (16 base dims, d=1, P=3, k=7) give
/// the 112-dimensional configuration appended to a 16-dimensional base.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdcSpec {
    pub n_base: usize,
    /// delta half-window
    pub d: usize,
    /// block shift
    pub p: usize,
    /// block count
    pub k: usize,
}

impl Default for SdcSpec {
    fn default() -> Self {
        SdcSpec {
            n_base: 16,
            d: 1,
            p: 3,
            k: 7,
        }
    }
}

impl SdcSpec {
    pub fn sdc_dims(&self) -> usize {
        self.n_base * self.k
    }

    /// Minimum frame count: d + (k-1)P + d + 1.
    pub fn min_frames(&self) -> usize {
        2 * self.d + (self.k - 1) * self.p + 1
    }
}

/// SDC stacking over raw frame rows; returns rows of `n_base * (1 + k)`
/// values (`[base || deltas]`). Out-of-range frame indices replicate edges.
pub fn sdc_frames(base: &[Vec<f64>], spec: &SdcSpec) -> Result<Vec<Vec<f64>>, FeatureError> {
    let t = base.len();
    if t < spec.min_frames() {
        return Err(FeatureError::TooFewFrames {
            got: t,
            need: spec.min_frames(),
        });
    }
    let dims = base[0].len();
    assert_eq!(dims, spec.n_base, "base dims must match spec.n_base");
    let clamp = |idx: isize| -> usize { idx.clamp(0, t as isize - 1) as usize };
    let mut out = Vec::with_capacity(t);
    for f in 0..t as isize {
        let mut row = Vec::with_capacity(spec.n_base * (1 + spec.k));
        row.extend_from_slice(&base[f as usize]);
        for block in 0..spec.k as isize {
            let center = f + block * spec.p as isize;
            let ahead = &base[clamp(center + spec.d as isize)];
            let behind = &base[clamp(center - spec.d as isize)];
            for d in 0..spec.n_base {
                row.push(ahead[d] - behind[d]);
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Append 112 shifted-delta dimensions to a 16-dimensional MFCC base,
/// producing the 128-dimensional generative-classifier front-end.
pub fn sdc(base: &FeatureMatrix, spec: &SdcSpec) -> Result<FeatureMatrix, FeatureError> {
    if base.kind != FeatureKind::Mfcc16 {
        return Err(FeatureError::KindMismatch {
            expected: FeatureKind::Mfcc16,
            got: base.kind,
        });
    }
    if spec.n_base != 16 || spec.sdc_dims() != 112 {
        return Err(FeatureError::Invalid(format!(
            "spec {spec:?} does not produce the 16+112 layout"
        )));
    }
    let rows_in: Vec<Vec<f64>> = base.rows().map(<[f64]>::to_vec).collect();
    let stacked = sdc_frames(&rows_in, spec)?;
    let dims = 128;
    let mut data = Vec::with_capacity(stacked.len() * dims);
    for row in &stacked {
        data.extend_from_slice(row);
    }
    FeatureMatrix::new(
        FeatureKind::Mfcc16Sdc112,
        base.frame_hop_ms,
        stacked.len(),
        dims,
        data,
    )
}
