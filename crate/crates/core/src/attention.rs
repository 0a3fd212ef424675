//! Panorama self-attention (PSA) with learnable token flow, the locally
//! enhanced feed-forward (LeFF) and the pre-norm transformer block that
//! composes them.
//!
//! Weight layout: every linear map stores `[in, out]` and acts on row
//! vectors (`y = x·W + b`). Per pixel, PSA reads its query row, predicts
//! `heads × 9` attention logits and `heads × 9 × 2` token offsets, samples the
//! value map at the nine tangent-patch positions shifted by those offsets,
//! mixes the samples with the softmaxed scores, applies the per-head map
//! `W'_m` and merges heads with `W_m`.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{SamplingGrid, PATCH_TOKENS};
use crate::tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

/// Components of the learned offset per head and pixel (`9` tokens × `(u, v)`).
pub const FLOW_COMPONENTS: usize = PATCH_TOKENS * 2;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaParams {
    pub channels: usize,
    pub heads: usize,
    pub q_weight: ParamId,
    pub q_bias: ParamId,
    pub v_weight: ParamId,
    pub v_bias: ParamId,
    pub attn_weight: ParamId,
    pub attn_bias: ParamId,
    pub flow_weight: ParamId,
    pub flow_bias: ParamId,
    /// `[heads, d, d]`, the per-head maps `W'_m`.
    pub head_out: ParamId,
    pub merge_weight: ParamId,
    pub merge_bias: ParamId,
}

impl PsaParams {
    /// Registers freshly initialized parameters under `prefix`. Attention
    /// and flow predictors start at zero (uniform scores, pure tangent-patch
    /// geometry); projections use uniform fan-in scaling.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || channels == 0 || channels % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        let c = channels;
        let d = c / heads;
        let b = fan_in_bound(c);
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            channels,
            heads,
            q_weight: add("q.weight", Tensor::uniform(&[c, c], b, rng))?,
            q_bias: add("q.bias", Tensor::zeros(&[c]))?,
            v_weight: add("v.weight", Tensor::uniform(&[c, c], b, rng))?,
            v_bias: add("v.bias", Tensor::zeros(&[c]))?,
            attn_weight: add("attn.weight", Tensor::zeros(&[c, heads * PATCH_TOKENS]))?,
            attn_bias: add("attn.bias", Tensor::zeros(&[heads * PATCH_TOKENS]))?,
            flow_weight: add("flow.weight", Tensor::zeros(&[c, heads * FLOW_COMPONENTS]))?,
            flow_bias: add("flow.bias", Tensor::zeros(&[heads * FLOW_COMPONENTS]))?,
            head_out: add(
                "head_out.weight",
                Tensor::uniform(&[heads, d, d], fan_in_bound(d), rng),
            )?,
            merge_weight: add("merge.weight", Tensor::uniform(&[c, c], b, rng))?,
            merge_bias: add("merge.bias", Tensor::zeros(&[c]))?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.q_weight,
            self.q_bias,
            self.v_weight,
            self.v_bias,
            self.attn_weight,
            self.attn_bias,
            self.flow_weight,
            self.flow_bias,
            self.head_out,
            self.merge_weight,
            self.merge_bias,
        ]
    }

    fn check(&self, tape: &Tape, tokens: Var, grid: &SamplingGrid) -> Result<()> {
        let s = tape.shape(tokens);
        if s != [grid.pixel_count(), self.channels] {
            return Err(shape_err(
                "psa",
                format!(
                    "tokens {s:?} vs grid {}x{} with {} channels",
                    grid.height, grid.width, self.channels
                ),
            ));
        }
        Ok(())
    }

    fn query(&self, tape: &Tape, tokens: Var, p: &Bindings) -> Result<Var> {
        tape.linear(tokens, p.get(self.q_weight), Some(p.get(self.q_bias)))
    }

    fn flow_from_query(&self, tape: &Tape, q: Var, p: &Bindings) -> Result<Var> {
        tape.linear(q, p.get(self.flow_weight), Some(p.get(self.flow_bias)))
    }

    /// PSA on token rows `[H·W, C]`; returns `[H·W, C]`.
    pub fn forward_tokens(
        &self,
        tape: &Tape,
        tokens: Var,
        grid: &SamplingGrid,
        p: &Bindings,
    ) -> Result<Var> {
        self.check(tape, tokens, grid)?;
        let n = grid.pixel_count();
        let m = self.heads;
        let q = self.query(tape, tokens, p)?;
        let v = tape.linear(tokens, p.get(self.v_weight), Some(p.get(self.v_bias)))?;

        let logits = tape.linear(q, p.get(self.attn_weight), Some(p.get(self.attn_bias)))?;
        let logits = tape.reshape(logits, &[n * m, PATCH_TOKENS])?;
        let attn = tape.softmax_last(logits)?;
        let attn = tape.reshape(attn, &[n, m * PATCH_TOKENS])?;

        let flow = self.flow_from_query(tape, q, p)?;
        let value_map = tape.from_tokens(v, grid.height, grid.width)?;
        let samples = tape.sample_tokens(value_map, grid, Some(flow), m)?;
        let mixed = tape.attend_tokens(samples, attn, m)?;
        let per_head = tape.grouped_linear(mixed, p.get(self.head_out))?;
        tape.linear(
            per_head,
            p.get(self.merge_weight),
            Some(p.get(self.merge_bias)),
        )
    }

    /// PSA on a `[C, H, W]` feature map.
    pub fn forward(&self, tape: &Tape, f: Var, grid: &SamplingGrid, p: &Bindings) -> Result<Var> {
        let tokens = tape.to_tokens(f)?;
        let out = self.forward_tokens(tape, tokens, grid, p)?;
        tape.from_tokens(out, grid.height, grid.width)
    }

    /// The learned offsets PSA adds to the grid for input `f: [C, H, W]`.
    pub fn token_flows(
        &self,
        tape: &Tape,
        f: Var,
        grid: &SamplingGrid,
        p: &Bindings,
    ) -> Result<TokenFlowField> {
        let tokens = tape.to_tokens(f)?;
        self.check(tape, tokens, grid)?;
        let q = self.query(tape, tokens, p)?;
        let flow = self.flow_from_query(tape, q, p)?;
        Ok(TokenFlowField::from_rows(
            &tape.value(flow),
            self.heads,
            grid.height,
            grid.width,
        ))
    }
}

/// Free-function form of [`PsaParams::forward`].
pub fn psa_forward(
    tape: &Tape,
    f: Var,
    grid: &SamplingGrid,
    params: &PsaParams,
    bound: &Bindings,
) -> Result<Var> {
    params.forward(tape, f, grid, bound)
}

/// Learned token offsets, `heads × H × W × 9 × 2` values of `(Δu, Δv)` in
/// pixels of the stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFlowField {
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub flows: Vec<f64>,
}

impl TokenFlowField {
    fn from_rows(rows: &[f64], heads: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        let mut flows = vec![0.0; heads * n * FLOW_COMPONENTS];
        for q in 0..n {
            for m in 0..heads {
                let src = &rows[(q * heads + m) * FLOW_COMPONENTS..][..FLOW_COMPONENTS];
                flows[(m * n + q) * FLOW_COMPONENTS..][..FLOW_COMPONENTS].copy_from_slice(src);
            }
        }
        Self {
            heads,
            height,
            width,
            flows,
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.heads, self.height, self.width, PATCH_TOKENS, 2]
    }

    /// `(Δu, Δv)` of token `k` at pixel `(row, col)` for head `m`.
    pub fn offset(&self, m: usize, row: usize, col: usize, k: usize) -> (f64, f64) {
        let i = ((m * self.height + row) * self.width + col) * FLOW_COMPONENTS + 2 * k;
        (self.flows[i], self.flows[i + 1])
    }

    pub fn max_abs_u(&self) -> f64 {
        self.flows.iter().step_by(2).fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.flows.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeffParams {
    pub channels: usize,
    pub ratio: usize,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub project_weight: ParamId,
    pub project_bias: ParamId,
}

impl LeffParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::InvalidConfig("LeFF expansion ratio must be >= 1".into()));
        }
        let c = channels;
        let hidden = ratio * c;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            channels,
            ratio,
            expand_weight: add("expand.weight", Tensor::uniform(&[c, hidden], fan_in_bound(c), rng))?,
            expand_bias: add("expand.bias", Tensor::zeros(&[hidden]))?,
            dw_kernel: add("dwconv.weight", Tensor::uniform(&[hidden, 3, 3], fan_in_bound(9), rng))?,
            dw_bias: add("dwconv.bias", Tensor::zeros(&[hidden]))?,
            project_weight: add(
                "project.weight",
                Tensor::uniform(&[hidden, c], fan_in_bound(hidden), rng),
            )?,
            project_bias: add("project.bias", Tensor::zeros(&[c]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.expand_weight,
            self.expand_bias,
            self.dw_kernel,
            self.dw_bias,
            self.project_weight,
            self.project_bias,
        ]
    }

    /// LeFF on token rows `[H·W, C]`.
    pub fn forward_tokens(
        &self,
        tape: &Tape,
        tokens: Var,
        height: usize,
        width: usize,
        p: &Bindings,
    ) -> Result<Var> {
        let x = tape.linear(tokens, p.get(self.expand_weight), Some(p.get(self.expand_bias)))?;
        let spatial = tape.from_tokens(x, height, width)?;
        let conv = tape.depthwise_conv3x3(spatial, p.get(self.dw_kernel), Some(p.get(self.dw_bias)))?;
        let act = tape.gelu(conv);
        let back = tape.to_tokens(act)?;
        tape.linear(back, p.get(self.project_weight), Some(p.get(self.project_bias)))
    }

    /// LeFF on a `[C, H, W]` feature map.
    pub fn forward(&self, tape: &Tape, f: Var, p: &Bindings) -> Result<Var> {
        let s = tape.shape(f);
        if s.len() != 3 || s[0] != self.channels {
            return Err(shape_err("leff", format!("input {s:?}, {} channels", self.channels)));
        }
        let tokens = tape.to_tokens(f)?;
        let out = self.forward_tokens(tape, tokens, s[1], s[2], p)?;
        tape.from_tokens(out, s[1], s[2])
    }
}

/// Free-function form of [`LeffParams::forward`].
pub fn leff_forward(tape: &Tape, f: Var, params: &LeffParams, bound: &Bindings) -> Result<Var> {
    params.forward(tape, f, bound)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PstBlockParams {
    pub psa: PsaParams,
    pub leff: LeffParams,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl PstBlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        leff_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let psa = PsaParams::init(store, &format!("{prefix}.psa"), channels, heads, rng)?;
        let leff = LeffParams::init(store, &format!("{prefix}.leff"), channels, leff_ratio, rng)?;
        let c = channels;
        Ok(Self {
            psa,
            leff,
            norm1_gain: store.add(format!("{prefix}.norm1.gain"), Tensor::filled(&[c], 1.0))?,
            norm1_bias: store.add(format!("{prefix}.norm1.bias"), Tensor::zeros(&[c]))?,
            norm2_gain: store.add(format!("{prefix}.norm2.gain"), Tensor::filled(&[c], 1.0))?,
            norm2_bias: store.add(format!("{prefix}.norm2.bias"), Tensor::zeros(&[c]))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.psa.channels
    }

    /// `f1 = f + PSA(LN(f))`, `out = f1 + LeFF(LN(f1))`.
    pub fn forward(&self, tape: &Tape, f: Var, grid: &SamplingGrid, p: &Bindings) -> Result<Var> {
        let tokens = tape.to_tokens(f)?;
        let n1 = tape.layer_norm(tokens, p.get(self.norm1_gain), p.get(self.norm1_bias))?;
        let attn = self.psa.forward_tokens(tape, n1, grid, p)?;
        let f1 = tape.add(tokens, attn)?;
        let n2 = tape.layer_norm(f1, p.get(self.norm2_gain), p.get(self.norm2_bias))?;
        let ff = self
            .leff
            .forward_tokens(tape, n2, grid.height, grid.width, p)?;
        let out = tape.add(f1, ff)?;
        tape.from_tokens(out, grid.height, grid.width)
    }

    /// Token flows of this block's attention for block input `f`.
    pub fn token_flows(
        &self,
        tape: &Tape,
        f: Var,
        grid: &SamplingGrid,
        p: &Bindings,
    ) -> Result<TokenFlowField> {
        let tokens = tape.to_tokens(f)?;
        let n1 = tape.layer_norm(tokens, p.get(self.norm1_gain), p.get(self.norm1_bias))?;
        let normed = tape.from_tokens(n1, grid.height, grid.width)?;
        self.psa.token_flows(tape, normed, grid, p)
    }
}

/// Free-function form of [`PstBlockParams::forward`].
pub fn pst_block(
    tape: &Tape,
    f: Var,
    grid: &SamplingGrid,
    params: &PstBlockParams,
    bound: &Bindings,
) -> Result<Var> {
    params.forward(tape, f, grid, bound)
}

/// Free-function form of [`PstBlockParams::token_flows`].
pub fn extract_token_flows(
    tape: &Tape,
    f: Var,
    grid: &SamplingGrid,
    params: &PstBlockParams,
    bound: &Bindings,
) -> Result<TokenFlowField> {
    params.token_flows(tape, f, grid, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_default_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, f: impl Fn(usize) -> f64) {
        let t = &mut store.get_mut(id).tensor;
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
    }

    fn identity(d: usize) -> impl Fn(usize) -> f64 {
        move |i| if i / d == i % d { 1.0 } else { 0.0 }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PsaParams::init(&mut store, "p", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn degenerate_weights_average_the_patch() {
        let (c, h, w, heads) = (4, 8, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let psa = PsaParams::init(&mut store, "psa", c, heads, &mut rng).unwrap();
        set(&mut store, psa.q_weight, identity(c));
        set(&mut store, psa.v_weight, identity(c));
        set(&mut store, psa.merge_weight, identity(c));
        let d = c / heads;
        set(&mut store, psa.head_out, move |i| identity(d)(i % (d * d)));
        let grid = build_default_grid(w, h).unwrap();
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let tape = Tape::new();
        let p = store.bind(&tape);
        let f = tape.constant(&[c, h, w], data.clone()).unwrap();
        let out = tape.value(psa.forward(&tape, f, &grid, &p).unwrap());
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            for row in 0..h {
                for col in 0..w {
                    let mean: f64 = (0..PATCH_TOKENS)
                        .map(|k| {
                            let e = grid.position(row, col, k);
                            crate::geometry::sample_erp(plane, w, h, e.u, e.v)
                        })
                        .sum::<f64>()
                        / 9.0;
                    let got = out[(ch * h + row) * w + col];
                    assert!((got - mean).abs() < 1e-12, "{got} vs {mean}");
                }
            }
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let (c, h, w, heads) = (8, 8, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let psa = PsaParams::init(&mut store, "psa", c, heads, &mut rng).unwrap();
        // non-trivial attention scores; flows stay zero
        set(&mut store, psa.attn_weight, |i| ((i * 37) % 11) as f64 * 0.1 - 0.5);
        let grid = build_default_grid(w, h).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let vals: Vec<f64> = (0..c).flat_map(|ch| vec![ch as f64 * 0.3 - 1.0; h * w]).collect();
        let f = tape.constant(&[c, h, w], vals).unwrap();
        let out = tape.value(psa.forward(&tape, f, &grid, &p).unwrap());
        for ch in 0..c {
            let plane = &out[ch * h * w..(ch + 1) * h * w];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn fresh_flows_are_zero_and_shaped() {
        let (c, h, w, heads) = (8, 8, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = PstBlockParams::init(&mut store, "b", c, heads, 2, &mut rng).unwrap();
        let grid = build_default_grid(w, h).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = tape.constant(&[c, h, w], data).unwrap();
        let flows = extract_token_flows(&tape, f, &grid, &block, &p).unwrap();
        assert_eq!(flows.shape(), [heads, h, w, 9, 2]);
        assert_eq!(flows.max_abs(), 0.0);
    }

    #[test]
    fn zero_output_weights_make_block_identity() {
        let (c, h, w, heads) = (8, 4, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = PstBlockParams::init(&mut store, "b", c, heads, 2, &mut rng).unwrap();
        for id in [
            block.psa.merge_weight,
            block.psa.merge_bias,
            block.leff.project_weight,
            block.leff.project_bias,
        ] {
            set(&mut store, id, |_| 0.0);
        }
        let grid = build_default_grid(w, h).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = tape.constant(&[c, h, w], data.clone()).unwrap();
        let out = pst_block(&tape, f, &grid, &block, &p).unwrap();
        assert_eq!(tape.shape(out), vec![c, h, w]);
        assert_eq!(*tape.value(out), data);
    }

    #[test]
    fn leff_collapses_to_gelu() {
        let (c, h, w) = (3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let leff = LeffParams::init(&mut store, "l", c, 1, &mut rng).unwrap();
        set(&mut store, leff.expand_weight, identity(c));
        set(&mut store, leff.project_weight, identity(c));
        set(&mut store, leff.dw_kernel, |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let tape = Tape::new();
        let p = store.bind(&tape);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = tape.constant(&[c, h, w], data.clone()).unwrap();
        let out = tape.value(leff_forward(&tape, f, &leff, &p).unwrap());
        let g = tape.constant(&[c, h, w], data).unwrap();
        let expect = tape.value(tape.gelu(g));
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        let z = tape.constant(&[c, h, w], vec![0.0; c * h * w]).unwrap();
        assert!(tape.value(leff_forward(&tape, z, &leff, &p).unwrap()).iter().all(|&v| v == 0.0));
    }
}
