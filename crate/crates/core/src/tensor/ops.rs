use super::tape::{Tape, Var};
use crate::error::{shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`. Transposed operands
/// are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(shape_err(op, format!("expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let n: usize = shape.iter().product();
        if n != xv.len() {
            return Err(shape_err("reshape", format!("{xs:?} -> {shape:?}")));
        }
        Ok(self.push_op(shape.to_vec(), xv.as_ref().clone(), &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ash) = self.get(a);
        let (bv, bsh) = self.get(b);
        if ash != bsh {
            return Err(shape_err("add", format!("{ash:?} vs {bsh:?}")));
        }
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
        Ok(self.push_op(ash, out, &[a, b], move |g, s| {
            for v in [a, b] {
                if let Some(gv) = s.get(v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ash) = self.get(a);
        let (bv, bsh) = self.get(b);
        if ash != bsh {
            return Err(shape_err("mul", format!("{ash:?} vs {bsh:?}")));
        }
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        Ok(self.push_op(ash, out, &[a, b], move |g, s| {
            if let Some(ga) = s.get(a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = s.get(b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let (xv, xs) = self.get(x);
        let out = xv.iter().map(|v| v * factor).collect();
        self.push_op(xs, out, &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor);
            }
        })
    }

    pub fn square(&self, x: Var) -> Var {
        let (xv, xs) = self.get(x);
        let out = xv.iter().map(|v| v * v).collect();
        self.push_op(xs, out, &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                for i in 0..g.len() {
                    gx[i] += 2.0 * xv[i] * g[i];
                }
            }
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        let (xv, _) = self.get(x);
        let total = xv.iter().sum();
        self.push_op(vec![1], vec![total], &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.get(x).0.len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum `Σ w_i · x_i` of scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let (val, _) = self.get(v);
            if val.len() != 1 {
                return Err(shape_err("weighted_sum", "terms must be scalars"));
            }
            total += w * val[0];
        }
        let terms = terms.to_vec();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push_op(vec![1], vec![total], &inputs, move |g, s| {
            for &(v, w) in &terms {
                if let Some(gv) = s.get(v) {
                    gv[0] += w * g[0];
                }
            }
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (xv, xs) = self.get(x);
        expect_rank("transpose", &xs, 2)?;
        let (r, c) = (xs[0], xs[1]);
        let out = transpose_data(&xv, r, c);
        Ok(self.push_op(vec![c, r], out, &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }))
    }

    /// `[C, H, W]` feature map to `[H·W, C]` token rows.
    pub fn to_tokens(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        expect_rank("to_tokens", &shape, 3)?;
        let flat = self.reshape(x, &[shape[0], shape[1] * shape[2]])?;
        self.transpose(flat)
    }

    /// `[H·W, C]` token rows back to a `[C, H, W]` feature map.
    pub fn from_tokens(&self, x: Var, height: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x);
        expect_rank("from_tokens", &shape, 2)?;
        if shape[0] != height * width {
            return Err(shape_err("from_tokens", format!("{shape:?} vs {height}x{width}")));
        }
        let t = self.transpose(x)?;
        self.reshape(t, &[shape[1], height, width])
    }

    /// Row-wise affine map `x·W + b` with `x: [N, Din]`, `W: [Din, Dout]`,
    /// `b: [Dout]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let (wv, ws) = self.get(weight);
        expect_rank("linear", &xs, 2)?;
        expect_rank("linear", &ws, 2)?;
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if ws[0] != din {
            return Err(shape_err("linear", format!("input {xs:?} weight {ws:?}")));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = bias {
            let (bv, bs) = self.get(b);
            if bs != [dout] {
                return Err(shape_err("linear", format!("bias {bs:?}, expected [{dout}]")));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(&bv);
            }
        }
        gemm(n, din, dout, &xv, false, &wv, false, &mut out, 1.0);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(vec![n, dout], out, &inputs, move |g, s| {
            if let Some(gx) = s.get(x) {
                gemm(n, dout, din, g, false, &wv, true, gx, 1.0);
            }
            if let Some(gw) = s.get(weight) {
                gemm(din, n, dout, &xv, true, g, false, gw, 1.0);
            }
            if let Some(b) = bias {
                if let Some(gb) = s.get(b) {
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
        }))
    }

    /// Block-diagonal per-head linear map: `x: [N, M·d]`, `w: [M, d, d]`,
    /// head `m` of the output is `x_m · w[m]`.
    pub fn grouped_linear(&self, x: Var, weight: Var) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let (wv, ws) = self.get(weight);
        expect_rank("grouped_linear", &xs, 2)?;
        expect_rank("grouped_linear", &ws, 3)?;
        let (heads, d) = (ws[0], ws[1]);
        if ws[2] != d || xs[1] != heads * d {
            return Err(shape_err("grouped_linear", format!("input {xs:?} weight {ws:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let mut out = vec![0.0; n * c];
        for q in 0..n {
            for m in 0..heads {
                let xr = &xv[q * c + m * d..q * c + (m + 1) * d];
                let wm = &wv[m * d * d..(m + 1) * d * d];
                let orow = &mut out[q * c + m * d..q * c + (m + 1) * d];
                for (i, &xi) in xr.iter().enumerate() {
                    let wr = &wm[i * d..(i + 1) * d];
                    orow.iter_mut().zip(wr).for_each(|(o, w)| *o += xi * w);
                }
            }
        }
        Ok(self.push_op(vec![n, c], out, &[x, weight], move |g, s| {
            if let Some(gx) = s.get(x) {
                for q in 0..n {
                    for m in 0..heads {
                        let gr = &g[q * c + m * d..q * c + (m + 1) * d];
                        let wm = &wv[m * d * d..(m + 1) * d * d];
                        for i in 0..d {
                            let wr = &wm[i * d..(i + 1) * d];
                            gx[q * c + m * d + i] +=
                                wr.iter().zip(gr).map(|(w, g)| w * g).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(gw) = s.get(weight) {
                for q in 0..n {
                    for m in 0..heads {
                        let gr = &g[q * c + m * d..q * c + (m + 1) * d];
                        let xr = &xv[q * c + m * d..q * c + (m + 1) * d];
                        for i in 0..d {
                            let row = &mut gw[m * d * d + i * d..m * d * d + (i + 1) * d];
                            row.iter_mut().zip(gr).for_each(|(a, g)| *a += xr[i] * g);
                        }
                    }
                }
            }
        }))
    }

    /// Per-row standardization followed by a per-column affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let (gv, gs) = self.get(gain);
        let (bv, bs) = self.get(bias);
        expect_rank("layer_norm", &xs, 2)?;
        let (n, c) = (xs[0], xs[1]);
        if c == 0 || gs != [c] || bs != [c] {
            return Err(shape_err("layer_norm", format!("input {xs:?} gain {gs:?} bias {bs:?}")));
        }
        let mut normed = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let z = (row[j] - mean) * is;
                normed[r * c + j] = z;
                out[r * c + j] = z * gv[j] + bv[j];
            }
        }
        Ok(self.push_op(vec![n, c], out, &[x, gain, bias], move |g, s| {
            if let Some(gg) = s.get(gain) {
                for r in 0..n {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * normed[r * c + j];
                    }
                }
            }
            if let Some(gb) = s.get(bias) {
                for r in 0..n {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
            }
            if let Some(gx) = s.get(x) {
                let cf = c as f64;
                for r in 0..n {
                    let mut sum_dz = 0.0;
                    let mut sum_dz_z = 0.0;
                    for j in 0..c {
                        let dz = g[r * c + j] * gv[j];
                        sum_dz += dz;
                        sum_dz_z += dz * normed[r * c + j];
                    }
                    for j in 0..c {
                        let dz = g[r * c + j] * gv[j];
                        let z = normed[r * c + j];
                        gx[r * c + j] += inv_std[r] * (dz - sum_dz / cf - z * sum_dz_z / cf);
                    }
                }
            }
        }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&self, x: Var) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let k = *xs.last().ok_or_else(|| shape_err("softmax_last", "scalar input"))?;
        if k == 0 {
            return Err(shape_err("softmax_last", "empty last axis"));
        }
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(k).zip(out.chunks_mut(k)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (oi, &ri) in o.iter_mut().zip(row) {
                *oi = (ri - mx).exp();
                total += *oi;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let y = out.clone();
        Ok(self.push_op(xs, out, &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                for ((yr, gr), gxr) in y.chunks(k).zip(g.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        gxr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
        }))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let (xv, xs) = self.get(x);
        let out = xv.iter().map(|&v| gelu_scalar(v)).collect();
        self.push_op(xs, out, &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_derivative(xv[i]);
                }
            }
        })
    }

    pub fn softplus(&self, x: Var) -> Var {
        let (xv, xs) = self.get(x);
        let out = xv
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        self.push_op(xs, out, &[x], move |g, s| {
            if let Some(gx) = s.get(x) {
                for i in 0..g.len() {
                    gx[i] += g[i] / (1.0 + (-xv[i]).exp());
                }
            }
        })
    }

    /// Concatenates along the leading axis; trailing extents must match.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let (v, s) = self.get(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            lens.push(v.len());
            out.extend_from_slice(&v);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let parts_owned = parts.to_vec();
        Ok(self.push_op(shape, out, parts, move |g, s| {
            let mut off = 0;
            for (&p, &len) in parts_owned.iter().zip(&lens) {
                if let Some(gp) = s.get(p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                }
                off += len;
            }
        }))
    }

    /// Attention-weighted sum over the nine patch tokens of every head.
    ///
    /// `samples: [C, N, 9]` with `C = heads·d`, `attn: [N, heads·9]`;
    /// returns `[N, C]` with `out[q, c] = Σ_k attn[q, m·9+k] · samples[c, q, k]`
    /// where `m = c / d`.
    pub fn attend_tokens(&self, samples: Var, attn: Var, heads: usize) -> Result<Var> {
        let (sv, ss) = self.get(samples);
        let (av, ash) = self.get(attn);
        expect_rank("attend_tokens", &ss, 3)?;
        let (c, n, k) = (ss[0], ss[1], ss[2]);
        if heads == 0 || c % heads != 0 || ash != [n, heads * k] {
            return Err(shape_err(
                "attend_tokens",
                format!("samples {ss:?} attn {ash:?} heads {heads}"),
            ));
        }
        let d = c / heads;
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            let m = ch / d;
            for q in 0..n {
                let srow = &sv[(ch * n + q) * k..(ch * n + q + 1) * k];
                let arow = &av[q * heads * k + m * k..q * heads * k + (m + 1) * k];
                out[q * c + ch] = srow.iter().zip(arow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push_op(vec![n, c], out, &[samples, attn], move |g, s| {
            if let Some(gs) = s.get(samples) {
                for ch in 0..c {
                    let m = ch / d;
                    for q in 0..n {
                        let go = g[q * c + ch];
                        let arow = &av[q * heads * k + m * k..q * heads * k + (m + 1) * k];
                        let grow = &mut gs[(ch * n + q) * k..(ch * n + q + 1) * k];
                        grow.iter_mut().zip(arow).for_each(|(a, w)| *a += go * w);
                    }
                }
            }
            if let Some(ga) = s.get(attn) {
                for ch in 0..c {
                    let m = ch / d;
                    for q in 0..n {
                        let go = g[q * c + ch];
                        let srow = &sv[(ch * n + q) * k..(ch * n + q + 1) * k];
                        let grow = &mut ga[q * heads * k + m * k..q * heads * k + (m + 1) * k];
                        grow.iter_mut().zip(srow).for_each(|(a, v)| *a += go * v);
                    }
                }
            }
        }))
    }
}

pub(crate) fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
