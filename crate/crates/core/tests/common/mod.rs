#![allow(dead_code)]

use panoformer::geometry::SamplingGrid;
use panoformer::tensor::ParamStore;
use rand::Rng;

pub fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Plain bilinear lookup: columns wrap, rows clamp to `[-0.5, H - 0.5]` and
/// then to the edge rows.
pub fn sample(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let u = u.rem_euclid(w as f64);
    let v = v.clamp(-0.5, h as f64 - 0.5);
    let c0 = u.floor();
    let r0 = v.floor();
    let (fu, fv) = (u - c0, v - r0);
    let c0 = c0 as usize % w;
    let c1 = (c0 + 1) % w;
    let row = |r: f64| (r.max(0.0) as usize).min(h - 1);
    let (ra, rb) = (row(r0), row(r0 + 1.0));
    let at = |r: usize, c: usize| plane[r * w + c];
    (1.0 - fu) * (1.0 - fv) * at(ra, c0)
        + fu * (1.0 - fv) * at(ra, c1)
        + (1.0 - fu) * fv * at(rb, c0)
        + fu * fv * at(rb, c1)
}

/// Panorama self-attention written out term by term: for every pixel `q`,
/// head `m` and token `k`, sample the value head at the grid position plus
/// its flow, map it through `W'_m`, weight it by the softmaxed score and sum;
/// then merge the heads. Weights are read by name under `prefix`.
pub fn naive_psa(
    f: &[f64],
    c: usize,
    grid: &SamplingGrid,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
) -> Vec<f64> {
    let (h, w) = (grid.height, grid.width);
    let n = h * w;
    let d = c / heads;
    let get = |name: &str| store.by_name(&format!("{prefix}.{name}")).unwrap().tensor.data.clone();
    let (qw, qb) = (get("q.weight"), get("q.bias"));
    let (vw, vb) = (get("v.weight"), get("v.bias"));
    let (aw, ab) = (get("attn.weight"), get("attn.bias"));
    let (fw, fb) = (get("flow.weight"), get("flow.bias"));
    let wprime = get("head_out.weight");
    let (mw, mb) = (get("merge.weight"), get("merge.bias"));
    let a_cols = heads * 9;
    let f_cols = heads * 18;

    // value projection as C planes
    let mut v_planes = vec![0.0; c * n];
    for p in 0..n {
        for j in 0..c {
            let mut s = vb[j];
            for i in 0..c {
                s += f[i * n + p] * vw[i * c + j];
            }
            v_planes[j * n + p] = s;
        }
    }

    let mut out = vec![0.0; c * n];
    for q in 0..n {
        let mut query = vec![0.0; c];
        for j in 0..c {
            query[j] = qb[j];
            for i in 0..c {
                query[j] += f[i * n + q] * qw[i * c + j];
            }
        }
        let mut heads_out = vec![0.0; c];
        for m in 0..heads {
            let mut logits = [0.0; 9];
            for k in 0..9 {
                let col = m * 9 + k;
                logits[k] = ab[col];
                for j in 0..c {
                    logits[k] += query[j] * aw[j * a_cols + col];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..9 {
                let a = e[k] / z;
                let mut off = [0.0; 2];
                for (comp, o) in off.iter_mut().enumerate() {
                    let col = m * 18 + 2 * k + comp;
                    *o = fb[col];
                    for j in 0..c {
                        *o += query[j] * fw[j * f_cols + col];
                    }
                }
                let base = (q * 9 + k) * 2;
                let u = grid.positions[base] + off[0];
                let v = grid.positions[base + 1] + off[1];
                let s: Vec<f64> = (0..d)
                    .map(|i| sample(&v_planes[(m * d + i) * n..(m * d + i + 1) * n], h, w, u, v))
                    .collect();
                for jo in 0..d {
                    let mut t = 0.0;
                    for i in 0..d {
                        t += s[i] * wprime[m * d * d + i * d + jo];
                    }
                    heads_out[m * d + jo] += a * t;
                }
            }
        }
        for o in 0..c {
            let mut s = mb[o];
            for i in 0..c {
                s += heads_out[i] * mw[i * c + o];
            }
            out[o * n + q] = s;
        }
    }
    out
}

/// Circularly shifts every row of each `H × W` plane by `k` columns to the
/// right.
pub fn roll_columns(data: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (plane_in, plane_out) in data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                plane_out[r * w + (c + k) % w] = plane_in[r * w + c];
            }
        }
    }
    out
}

/// Depth along `dir` found by stepping 1 mm at a time until the point
/// leaves the room or enters an obstacle.
pub fn ray_march(scene: &panoformer::scene::SceneSpec, dir: [f64; 3]) -> f64 {
    let step = 1e-3;
    let o = scene.camera;
    let h = scene.room_half_extents;
    let mut i = 0u64;
    loop {
        i += 1;
        let t = i as f64 * step;
        let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
        let outside = (0..3).any(|a| p[a].abs() >= h[a]);
        if outside || scene.boxes.iter().any(|b| b.contains(p)) {
            return t;
        }
    }
}
