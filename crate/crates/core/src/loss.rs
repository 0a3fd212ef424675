//! Training objective: BerHu on depth plus BerHu on Sobel gradient maps.

use crate::depth::DepthMap;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{PadMode, Tape, Var};

/// BerHu threshold used throughout training.
pub const BERHU_DELTA: f64 = 0.2;

/// Horizontal Sobel kernel; the vertical one is its transpose.
pub const SOBEL_H: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];

/// Per-element reverse Huber value of residual `r`.
pub fn berhu_value(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        a
    } else {
        (r * r + delta * delta) / (2.0 * delta)
    }
}

fn berhu_slope(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        r / delta
    }
}

/// Mean BerHu of `pred - target` over entries where `mask` is set.
/// Differentiable in `pred`.
pub fn berhu_on(tape: &Tape, target: &[f64], pred: Var, mask: &[bool], delta: f64) -> Result<Var> {
    let pv = tape.value(pred);
    if pv.len() != target.len() || mask.len() != target.len() {
        return Err(shape_err(
            "berhu",
            format!("{} predictions, {} targets, {} mask", pv.len(), target.len(), mask.len()),
        ));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("BerHu delta {delta} must be > 0")));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyValidSet("berhu"));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let mut slopes = vec![0.0; pv.len()];
    for i in 0..pv.len() {
        if mask[i] {
            let r = pv[i] - target[i];
            total += berhu_value(r, delta);
            slopes[i] = berhu_slope(r, delta) * inv;
        }
    }
    Ok(tape.push_op(vec![], vec![total * inv], &[pred], move |g, s| {
        if let Some(gp) = s.get(pred) {
            for (a, b) in gp.iter_mut().zip(&slopes) {
                *a += g[0] * b;
            }
        }
    }))
}

/// Mean BerHu between two plain arrays.
pub fn berhu(target: &[f64], pred: &[f64], mask: &[bool], delta: f64) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.constant(&[pred.len()], pred.to_vec())?;
    let l = berhu_on(&tape, target, p, mask, delta)?;
    Ok(tape.scalar(l))
}

fn sobel_kernel(tape: &Tape) -> Var {
    let mut k = SOBEL_H.to_vec();
    for r in 0..3 {
        for c in 0..3 {
            k.push(SOBEL_H[c * 3 + r]);
        }
    }
    tape.constant(&[2, 1, 3, 3], k).expect("static kernel shape")
}

/// Horizontal and vertical Sobel responses of `x` (`H·W` values, any shape),
/// circular horizontally and zero-padded vertically. Returns a `[2, H, W]`
/// variable: plane 0 horizontal, plane 1 vertical.
pub fn image_gradients_on(tape: &Tape, x: Var, height: usize, width: usize) -> Result<Var> {
    let x = tape.reshape(x, &[1, height, width])?;
    tape.conv2d(x, sobel_kernel(tape), None, 1, PadMode::CircularHZeroV)
}

/// `(horizontal, vertical)` Sobel gradients of a row-major `H × W` image.
pub fn image_gradients(values: &[f64], width: usize, height: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if height < 3 || width < 3 {
        return Err(Error::InvalidInput(format!(
            "image gradients need at least 3x3, got {width}x{height}"
        )));
    }
    let tape = Tape::new();
    let x = tape.constant(&[height * width], values.to_vec())?;
    let g = tape.value(image_gradients_on(&tape, x, height, width)?);
    let n = height * width;
    Ok((g[..n].to_vec(), g[n..].to_vec()))
}

/// Pixels whose full 3×3 neighborhood (wrapping horizontally) is valid and
/// lies inside the image vertically.
pub fn gradient_mask(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; width * height];
    for r in 1..height.saturating_sub(1) {
        for c in 0..width {
            out[r * width + c] = (0..3).all(|dr| {
                (0..3).all(|dc| mask[(r + dr - 1) * width + (c + width + dc - 1) % width])
            });
        }
    }
    out
}

/// `berhu(g, p) + berhu(G_h g, G_h p) + berhu(G_v g, G_v p)` on the tape,
/// with `pred` holding `H·W` values and `mask` selecting valid pixels.
pub fn final_loss_masked(tape: &Tape, target: &DepthMap, pred: Var, mask: &[bool]) -> Result<Var> {
    let (w, h) = (target.width, target.height);
    if tape.value(pred).len() != w * h || mask.len() != w * h {
        return Err(shape_err(
            "final_loss",
            format!("prediction {:?} vs {w}x{h} target", tape.shape(pred)),
        ));
    }
    if h < 3 || w < 3 {
        return Err(Error::InvalidInput(format!("final loss needs at least 3x3, got {w}x{h}")));
    }
    let flat = tape.reshape(pred, &[w * h])?;
    let depth = berhu_on(tape, &target.values, flat, mask, BERHU_DELTA)?;

    // invalid target entries may hold anything; keep the convolution finite
    let clean: Vec<f64> = target
        .values
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { *v } else { 0.0 })
        .collect();
    let (gh, gv) = image_gradients(&clean, w, h)?;
    let grads = image_gradients_on(tape, flat, h, w)?;
    let grads = tape.reshape(grads, &[2 * w * h])?;
    let gmask = gradient_mask(mask, w, h);
    let both_mask: Vec<bool> = gmask.iter().chain(gmask.iter()).copied().collect();
    let n = w * h;
    // split the two planes through separate masks so each term is its own mean
    let mut h_mask = both_mask.clone();
    h_mask[n..].iter_mut().for_each(|m| *m = false);
    let mut v_mask = both_mask;
    v_mask[..n].iter_mut().for_each(|m| *m = false);
    let target_grads: Vec<f64> = gh.into_iter().chain(gv).collect();
    let horizontal = berhu_on(tape, &target_grads, grads, &h_mask, BERHU_DELTA)?;
    let vertical = berhu_on(tape, &target_grads, grads, &v_mask, BERHU_DELTA)?;
    tape.weighted_sum(&[(depth, 1.0), (horizontal, 1.0), (vertical, 1.0)])
}

/// [`final_loss_masked`] using the target's own validity mask.
pub fn final_loss_on(tape: &Tape, target: &DepthMap, pred: Var) -> Result<Var> {
    final_loss_masked(tape, target, pred, &target.valid_mask)
}

/// Training objective between two depth maps over their joint valid set.
pub fn final_loss(target: &DepthMap, pred: &DepthMap) -> Result<f64> {
    target.check_pair(pred, "final_loss")?;
    let mask = target.joint_mask(pred);
    let clean: Vec<f64> = pred
        .values
        .iter()
        .zip(&mask)
        .map(|(v, &m)| if m { *v } else { 0.0 })
        .collect();
    let tape = Tape::new();
    let p = tape.constant(&[clean.len()], clean)?;
    let l = final_loss_masked(&tape, target, p, &mask)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn berhu_branches() {
        assert!((berhu_value(0.1, 0.2) - 0.1).abs() < 1e-15);
        assert!((berhu_value(0.2, 0.2) - 0.2).abs() < 1e-15);
        assert!(((0.2f64 * 0.2 + 0.04) / 0.4 - 0.2).abs() < 1e-15);
        assert!((berhu_value(-0.6, 0.2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn berhu_is_smooth_at_threshold() {
        let d = BERHU_DELTA;
        let e = 1e-9;
        let left = (berhu_value(d, d) - berhu_value(d - e, d)) / e;
        let right = (berhu_value(d + e, d) - berhu_value(d, d)) / e;
        assert!((left - 1.0).abs() < 1e-6 && (right - 1.0).abs() < 1e-6);
        assert!((berhu_value(d + e, d) - berhu_value(d - e, d)).abs() < 3e-9);
    }

    #[test]
    fn berhu_rejects_empty_mask() {
        assert!(matches!(
            berhu(&[1.0], &[2.0], &[false], 0.2),
            Err(Error::EmptyValidSet(_))
        ));
    }

    #[test]
    fn sobel_on_ramp_and_constant() {
        let (w, h) = (10, 6);
        let ramp: Vec<f64> = (0..w * h).map(|i| (i % w) as f64).collect();
        let (gh, gv) = image_gradients(&ramp, w, h).unwrap();
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                assert_eq!(gh[r * w + c], 8.0);
                assert_eq!(gv[r * w + c], 0.0);
            }
        }
        let (gh, gv) = image_gradients(&vec![3.5; w * h], w, h).unwrap();
        for r in 1..h - 1 {
            for c in 0..w {
                assert_eq!(gh[r * w + c], 0.0);
                assert_eq!(gv[r * w + c], 0.0);
            }
        }
    }

    #[test]
    fn gradient_mask_needs_full_support() {
        let (w, h) = (5, 5);
        let mut mask = vec![true; w * h];
        mask[2 * w + 4] = false;
        let g = gradient_mask(&mask, w, h);
        assert!(!g[0] && !g[4 * w]);
        assert!(!g[w + 3] && !g[w] && !g[2 * w + 4]);
        assert!(g[w + 2] && g[3 * w + 1]);
    }

    #[test]
    fn final_loss_examples() {
        let (w, h) = (16, 8);
        let g: Vec<f64> = (0..w * h).map(|i| 1.0 + ((i * 7) % 13) as f64 * 0.1).collect();
        let gm = DepthMap::new(w, h, g.clone()).unwrap();
        assert_eq!(final_loss(&gm, &gm).unwrap(), 0.0);
        let p = DepthMap::new(w, h, g.iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((final_loss(&gm, &p).unwrap() - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn final_loss_non_negative(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 48)) {
            let g = DepthMap::new(8, 6, vals[..48].to_vec()).unwrap();
            let p = DepthMap::new(8, 6, vals[48..].to_vec()).unwrap();
            prop_assert!(final_loss(&g, &p).unwrap() >= 0.0);
        }
    }
}
