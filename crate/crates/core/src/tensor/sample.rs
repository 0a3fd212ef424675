use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::geometry::{wrap_column, SamplingGrid, PATCH_TOKENS};

/// Bilinear taps at a continuous feature-map position. Pixel centers sit at
/// integer coordinates; columns wrap, rows clamp to `[-0.5, H - 0.5]` and
/// then to the edge rows.
#[derive(Debug, Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    fu: f64,
    fv: f64,
    /// Whether the row coordinate moves the sample (false once clamped).
    v_free: bool,
}

impl Taps {
    #[inline]
    fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let uw = wrap_column(u, w);
        let u0 = uw.floor();
        let fu = uw - u0;
        let c0 = (u0 as isize).rem_euclid(w as isize) as usize;
        let c1 = (c0 + 1) % w;
        let hi = h as f64 - 0.5;
        let v_free = v > -0.5 && v < hi;
        let vc = v.clamp(-0.5, hi);
        let v0 = vc.floor();
        let fv = vc - v0;
        let r0 = (v0 as isize).clamp(0, h as isize - 1) as usize;
        let r1 = (v0 as isize + 1).clamp(0, h as isize - 1) as usize;
        Self {
            idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
            fu,
            fv,
            v_free,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fu, fv) = (self.fu, self.fv);
        [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv]
    }

    #[inline]
    fn value(&self, plane: &[f64]) -> f64 {
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        let top = a + self.fu * (b - a);
        let bottom = c + self.fu * (d - c);
        top + self.fv * (bottom - top)
    }

    /// `(d/du, d/dv)` of the interpolated value.
    #[inline]
    fn slopes(&self, plane: &[f64]) -> (f64, f64) {
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        let du = (1.0 - self.fv) * (b - a) + self.fv * (d - c);
        let dv = if self.v_free {
            (1.0 - self.fu) * (c - a) + self.fu * (d - b)
        } else {
            0.0
        };
        (du, dv)
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], g: f64) {
        let wts = self.weights();
        for i in 0..4 {
            plane[self.idx[i]] += wts[i] * g;
        }
    }
}

impl Tape {
    /// Samples `feat: [C, H, W]` at `pos: [P, 2]` (`(u, v)` rows) and returns
    /// `[C, P]`. Differentiable with respect to both the features and the
    /// positions.
    pub fn bilinear_sample(&self, feat: Var, pos: Var) -> Result<Var> {
        let (fv, fs) = self.get(feat);
        let (pv, ps) = self.get(pos);
        if fs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(shape_err("bilinear_sample", format!("feat {fs:?} pos {ps:?}")));
        }
        let (c, h, w, p) = (fs[0], fs[1], fs[2], ps[0]);
        if h == 0 || w == 0 {
            return Err(shape_err("bilinear_sample", "empty feature map"));
        }
        let taps: Vec<Taps> = pv.chunks(2).map(|x| Taps::new(x[0], x[1], h, w)).collect();
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            let plane = &fv[ch * h * w..(ch + 1) * h * w];
            for (o, t) in out[ch * p..(ch + 1) * p].iter_mut().zip(&taps) {
                *o = t.value(plane);
            }
        }
        Ok(self.push_op(vec![c, p], out, &[feat, pos], move |g, s| {
            if let Some(gf) = s.get(feat) {
                for ch in 0..c {
                    let plane = &mut gf[ch * h * w..(ch + 1) * h * w];
                    for (i, t) in taps.iter().enumerate() {
                        t.scatter(plane, g[ch * p + i]);
                    }
                }
            }
            if let Some(gp) = s.get(pos) {
                for ch in 0..c {
                    let plane = &fv[ch * h * w..(ch + 1) * h * w];
                    for (i, t) in taps.iter().enumerate() {
                        let (du, dv) = t.slopes(plane);
                        gp[2 * i] += du * g[ch * p + i];
                        gp[2 * i + 1] += dv * g[ch * p + i];
                    }
                }
            }
        }))
    }

    /// Multi-head patch sampling: for every head `m`, pixel `q` and token
    /// `k`, samples the head's channels of `values: [C, H, W]` at
    /// `grid[q][k] + flow[q, m·18 + 2k .. +2]`. `flow: [H·W, heads·18]` may be
    /// omitted for the bare grid. Returns `[C, H·W, 9]`.
    pub fn sample_tokens(
        &self,
        values: Var,
        grid: &SamplingGrid,
        flow: Option<Var>,
        heads: usize,
    ) -> Result<Var> {
        let (vv, vs) = self.get(values);
        if vs.len() != 3 || vs[1] != grid.height || vs[2] != grid.width {
            return Err(shape_err(
                "sample_tokens",
                format!("values {vs:?} vs grid {}x{}", grid.height, grid.width),
            ));
        }
        let (c, h, w) = (vs[0], vs[1], vs[2]);
        if heads == 0 || c % heads != 0 {
            return Err(shape_err("sample_tokens", format!("{c} channels, {heads} heads")));
        }
        let d = c / heads;
        let n = h * w;
        let k9 = PATCH_TOKENS;
        let flow_vals = match flow {
            Some(f) => {
                let (fv, fs) = self.get(f);
                if fs != [n, heads * k9 * 2] {
                    return Err(shape_err(
                        "sample_tokens",
                        format!("flow {fs:?}, expected [{n}, {}]", heads * k9 * 2),
                    ));
                }
                Some(fv)
            }
            None => None,
        };
        let positions = grid.positions.clone();
        let mut taps = Vec::with_capacity(heads * n * k9);
        for m in 0..heads {
            for q in 0..n {
                for k in 0..k9 {
                    let base = (q * k9 + k) * 2;
                    let (mut u, mut v) = (positions[base], positions[base + 1]);
                    if let Some(fv) = &flow_vals {
                        let fb = q * heads * k9 * 2 + m * k9 * 2 + k * 2;
                        u += fv[fb];
                        v += fv[fb + 1];
                    }
                    taps.push(Taps::new(u, v, h, w));
                }
            }
        }
        let mut out = vec![0.0; c * n * k9];
        for ch in 0..c {
            let m = ch / d;
            let plane = &vv[ch * n..(ch + 1) * n];
            let head_taps = &taps[m * n * k9..(m + 1) * n * k9];
            for (o, t) in out[ch * n * k9..(ch + 1) * n * k9].iter_mut().zip(head_taps) {
                *o = t.value(plane);
            }
        }
        let mut inputs = vec![values];
        inputs.extend(flow);
        Ok(self.push_op(vec![c, n, k9], out, &inputs, move |g, s| {
            if let Some(gv) = s.get(values) {
                for ch in 0..c {
                    let m = ch / d;
                    let plane = &mut gv[ch * n..(ch + 1) * n];
                    let head_taps = &taps[m * n * k9..(m + 1) * n * k9];
                    let gch = &g[ch * n * k9..(ch + 1) * n * k9];
                    for (t, &gi) in head_taps.iter().zip(gch) {
                        t.scatter(plane, gi);
                    }
                }
            }
            if let Some(f) = flow {
                if let Some(gf) = s.get(f) {
                    for ch in 0..c {
                        let m = ch / d;
                        let plane = &vv[ch * n..(ch + 1) * n];
                        for q in 0..n {
                            for k in 0..k9 {
                                let t = &taps[(m * n + q) * k9 + k];
                                let gi = g[(ch * n + q) * k9 + k];
                                let (du, dv) = t.slopes(plane);
                                let fb = q * heads * k9 * 2 + m * k9 * 2 + k * 2;
                                gf[fb] += du * gi;
                                gf[fb + 1] += dv * gi;
                            }
                        }
                    }
                }
            }
        }))
    }
}
