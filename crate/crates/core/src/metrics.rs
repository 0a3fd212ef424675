//! Evaluation metrics: RMSE, δ-threshold accuracies, polar RMSE on the cube
//! top and bottom faces, and left-right consistency error across the seam.

use std::fmt;

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, cube_texel_erp, default_face_size, erp_to_cube, CubeFace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// RMSE and the fractions of valid pixels with `max(g/p, p/g) < 1.25^i`.
/// Ground truth must be positive wherever both maps are valid.
pub fn rmse_and_deltas(gt: &DepthMap, pred: &DepthMap) -> Result<ThresholdMetrics> {
    gt.check_pair(pred, "rmse_and_deltas")?;
    let mask = gt.joint_mask(pred);
    let mut n = 0usize;
    let mut sq = 0.0;
    let mut hits = [0usize; 3];
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (g, p) = (gt.values[i], pred.values[i]);
        if g <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "ground truth {g} at pixel {i} is not positive"
            )));
        }
        n += 1;
        sq += (g - p) * (g - p);
        if p > 0.0 {
            let ratio = (g / p).max(p / g);
            for (k, hit) in hits.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(k as i32 + 1) {
                    *hit += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet("rmse_and_deltas"));
    }
    let nf = n as f64;
    Ok(ThresholdMetrics {
        rmse: (sq / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// How per-texel errors are aggregated by [`p_rmse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolarErrorMode {
    /// `sqrt(mean(e²))`.
    #[default]
    Squared,
    /// `sqrt(mean(|e|))`, the aggregation as literally printed in the
    /// metric's original definition.
    Literal,
}

/// Error over the top and bottom cube faces. Texels whose bilinear support
/// touches an invalid pixel of either map are skipped.
pub fn p_rmse(gt: &DepthMap, pred: &DepthMap, face_size: usize, mode: PolarErrorMode) -> Result<f64> {
    gt.check_pair(pred, "p_rmse")?;
    let (w, h) = (gt.width, gt.height);
    let g = erp_to_cube(&zeroed(gt), w, h, face_size)?;
    let p = erp_to_cube(&zeroed(pred), w, h, face_size)?;
    let mask = gt.joint_mask(pred);
    let mut total = 0.0;
    let mut n = 0usize;
    for face in [CubeFace::Top, CubeFace::Bottom] {
        let (gf, pf) = (g.face(face), p.face(face));
        for row in 0..face_size {
            for col in 0..face_size {
                let e = cube_texel_erp(face, row, col, face_size, w, h)?;
                let supported = bilinear_taps(e.u, e.v, w, h)
                    .iter()
                    .all(|&(i, wt)| wt == 0.0 || mask[i]);
                if !supported {
                    continue;
                }
                let err = gf[row * face_size + col] - pf[row * face_size + col];
                total += match mode {
                    PolarErrorMode::Squared => err * err,
                    PolarErrorMode::Literal => err.abs(),
                };
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet("p_rmse"));
    }
    Ok((total / n as f64).sqrt())
}

fn zeroed(d: &DepthMap) -> Vec<f64> {
    d.values
        .iter()
        .zip(&d.valid_mask)
        .map(|(v, &m)| if m { *v } else { 0.0 })
        .collect()
}

/// Mean over rows of `|(g[first] - g[last]) - (p[first] - p[last])|`,
/// restricted to rows whose four boundary pixels are valid.
pub fn lrce(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    gt.check_pair(pred, "lrce")?;
    let w = gt.width;
    if w < 2 {
        return Err(Error::InvalidInput(format!("lrce needs width >= 2, got {w}")));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for row in 0..gt.height {
        let last = w - 1;
        if !(gt.valid_at(row, 0) && gt.valid_at(row, last) && pred.valid_at(row, 0) && pred.valid_at(row, last)) {
            continue;
        }
        let gg = gt.at(row, 0) - gt.at(row, last);
        let gp = pred.at(row, 0) - pred.at(row, last);
        total += (gg - gp).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyValidSet("lrce"));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub p_rmse: f64,
    pub lrce: f64,
    pub valid_pixel_count: usize,
}

impl MetricReport {
    /// All metrics; `face_size` defaults to a quarter of the width.
    pub fn evaluate(
        gt: &DepthMap,
        pred: &DepthMap,
        face_size: Option<usize>,
        mode: PolarErrorMode,
    ) -> Result<Self> {
        let t = rmse_and_deltas(gt, pred)?;
        let fs = face_size.unwrap_or_else(|| default_face_size(gt.width));
        Ok(Self {
            rmse: t.rmse,
            delta1: t.delta1,
            delta2: t.delta2,
            delta3: t.delta3,
            p_rmse: p_rmse(gt, pred, fs, mode)?,
            lrce: lrce(gt, pred)?,
            valid_pixel_count: gt.joint_mask(pred).iter().filter(|&&m| m).count(),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rmse={:.6} d1={:.6} d2={:.6} d3={:.6} prmse={:.6} lrce={:.6} n={}",
            self.rmse,
            self.delta1,
            self.delta2,
            self.delta3,
            self.p_rmse,
            self.lrce,
            self.valid_pixel_count
        )
    }
}
