use super::ops::gemm;
use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};

/// Border handling for convolutions over ERP feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Horizontal padding wraps around the longitude seam, vertical padding
    /// is zero.
    CircularHZeroV,
    Zero,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    mode: PadMode,
}

impl ConvGeom {
    fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        mode: PadMode,
    ) -> Result<Self> {
        if stride == 0 || kh < stride || kw < stride {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} incompatible with stride {stride}"),
            ));
        }
        if (kh - stride) % 2 != 0 || (kw - stride) % 2 != 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} with stride {stride} has no symmetric padding"),
            ));
        }
        let (ph, pw) = ((kh - stride) / 2, (kw - stride) / 2);
        let span_h = h + 2 * ph;
        let span_w = w + 2 * pw;
        if span_h < kh
            || span_w < kw
            || (span_h - kh) % stride != 0
            || (span_w - kw) % stride != 0
        {
            return Err(shape_err(
                "conv2d",
                format!("input {h}x{w} not divisible by stride {stride} with kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            ph,
            pw,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
            mode,
        })
    }

    /// Source pixel of tap `(a, b)` for output `(oy, ox)`, or `None` when the
    /// tap falls into zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, a: usize, b: usize) -> Option<usize> {
        let iy = (oy * self.stride + a) as isize - self.ph as isize;
        if iy < 0 || iy >= self.h as isize {
            return None;
        }
        let ix = (ox * self.stride + b) as isize - self.pw as isize;
        let ix = match self.mode {
            PadMode::CircularHZeroV => ix.rem_euclid(self.w as isize),
            PadMode::Zero => {
                if ix < 0 || ix >= self.w as isize {
                    return None;
                }
                ix
            }
        };
        Some(iy as usize * self.w + ix as usize)
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.cols();
        let mut cols = vec![0.0; self.rows() * p];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let r = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(src) = self.source(oy, ox, a, b) {
                                dst[oy * self.wo + ox] = plane[src];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let r = (ci * self.kh + a) * self.kw + b;
                    let src = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(dst) = self.source(oy, ox, a, b) {
                                plane[dst] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(tape: &Tape, op: &'static str, bias: Option<Var>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        let bs = tape.shape(b);
        if bs != [n] {
            return Err(shape_err(op, format!("bias {bs:?}, expected [{n}]")));
        }
    }
    Ok(())
}

impl Tape {
    /// Cross-correlation of `x: [Cin, H, W]` with `kernel: [Cout, Cin, kh, kw]`.
    ///
    /// Padding is `(k - stride) / 2` per axis, so a stride-1 3×3 kernel keeps
    /// the extent and a stride-2 4×4 kernel halves it.
    pub fn conv2d(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let (kv, ks) = self.get(kernel);
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(shape_err("conv2d", format!("input {xs:?} kernel {ks:?}")));
        }
        let cout = ks[0];
        check_bias(self, "conv2d", bias, cout)?;
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[2], ks[3], stride, mode)?;
        let cols = geom.im2col(&xv);
        let (rows, p) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; cout * p];
        if let Some(b) = bias {
            let bv = self.value(b);
            for (co, chunk) in out.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[co]);
            }
        }
        gemm(cout, rows, p, &kv, false, &cols, false, &mut out, 1.0);
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push_op(vec![cout, geom.ho, geom.wo], out, &inputs, move |g, s| {
            if let Some(gk) = s.get(kernel) {
                gemm(cout, p, rows, g, false, &cols, true, gk, 1.0);
            }
            if let Some(b) = bias {
                if let Some(gb) = s.get(b) {
                    for (co, chunk) in g.chunks(p).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
            }
            if let Some(gx) = s.get(x) {
                let mut gcols = vec![0.0; rows * p];
                gemm(rows, cout, p, &kv, true, g, false, &mut gcols, 0.0);
                geom.col2im_add(&gcols, gx);
            }
        }))
    }

    /// Stride-2 2×2 transposed convolution, `kernel: [Cin, Cout, 2, 2]`.
    /// Maps `[Cin, H, W]` to `[Cout, 2H, 2W]`; the exact adjoint of a stride-2
    /// 2×2 [`Tape::conv2d`] sharing the same kernel array.
    pub fn conv_transpose2x2(&self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let (kv, ks) = self.get(kernel);
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] || ks[2] != 2 || ks[3] != 2 {
            return Err(shape_err("conv_transpose2x2", format!("input {xs:?} kernel {ks:?}")));
        }
        let (cin, h, w, cout) = (xs[0], xs[1], xs[2], ks[1]);
        check_bias(self, "conv_transpose2x2", bias, cout)?;
        let p = h * w;
        let c4 = cout * 4;
        let mut expanded = vec![0.0; c4 * p];
        gemm(c4, cin, p, &kv, true, &xv, false, &mut expanded, 0.0);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; cout * ho * wo];
        let bv = bias.map(|b| self.value(b));
        for co in 0..cout {
            let b0 = bv.as_ref().map_or(0.0, |b| b[co]);
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &expanded[(co * 4 + a * 2 + bb) * p..(co * 4 + a * 2 + bb + 1) * p];
                    for i in 0..h {
                        for j in 0..w {
                            out[(co * ho + 2 * i + a) * wo + 2 * j + bb] = src[i * w + j] + b0;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push_op(vec![cout, ho, wo], out, &inputs, move |g, s| {
            let mut gexp = vec![0.0; c4 * p];
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut gexp
                            [(co * 4 + a * 2 + bb) * p..(co * 4 + a * 2 + bb + 1) * p];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] = g[(co * ho + 2 * i + a) * wo + 2 * j + bb];
                            }
                        }
                    }
                }
            }
            if let Some(gx) = s.get(x) {
                gemm(cin, c4, p, &kv, false, &gexp, false, gx, 1.0);
            }
            if let Some(gk) = s.get(kernel) {
                gemm(cin, p, c4, &xv, false, &gexp, true, gk, 1.0);
            }
            if let Some(b) = bias {
                if let Some(gb) = s.get(b) {
                    for (co, chunk) in g.chunks(ho * wo).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
            }
        }))
    }

    /// Per-channel 3×3 convolution (`kernel: [C, 3, 3]`), stride 1, with
    /// circular horizontal and zero vertical padding.
    pub fn depthwise_conv3x3(&self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, xs) = self.get(x);
        let (kv, ks) = self.get(kernel);
        if xs.len() != 3 || ks != [xs[0], 3, 3] {
            return Err(shape_err("depthwise_conv3x3", format!("input {xs:?} kernel {ks:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        check_bias(self, "depthwise_conv3x3", bias, c)?;
        let geom = ConvGeom::new(1, h, w, 3, 3, 1, PadMode::CircularHZeroV)?;
        let bv = bias.map(|b| self.value(b));
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            let k = &kv[ch * 9..(ch + 1) * 9];
            let b0 = bv.as_ref().map_or(0.0, |b| b[ch]);
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = b0;
                    for a in 0..3 {
                        for b in 0..3 {
                            if let Some(src) = geom.source(oy, ox, a, b) {
                                acc += k[a * 3 + b] * plane[src];
                            }
                        }
                    }
                    out[(ch * h + oy) * w + ox] = acc;
                }
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push_op(vec![c, h, w], out, &inputs, move |g, s| {
            if let Some(gx) = s.get(x) {
                for ch in 0..c {
                    let k = &kv[ch * 9..(ch + 1) * 9];
                    let gp = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..h {
                        for ox in 0..w {
                            let go = g[(ch * h + oy) * w + ox];
                            for a in 0..3 {
                                for b in 0..3 {
                                    if let Some(src) = geom.source(oy, ox, a, b) {
                                        gp[src] += k[a * 3 + b] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gk) = s.get(kernel) {
                for ch in 0..c {
                    let plane = &xv[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..h {
                        for ox in 0..w {
                            let go = g[(ch * h + oy) * w + ox];
                            for a in 0..3 {
                                for b in 0..3 {
                                    if let Some(src) = geom.source(oy, ox, a, b) {
                                        gk[ch * 9 + a * 3 + b] += plane[src] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                if let Some(gb) = s.get(b) {
                    for (ch, chunk) in g.chunks(h * w).enumerate() {
                        gb[ch] += chunk.iter().sum::<f64>();
                    }
                }
            }
        }))
    }
}
