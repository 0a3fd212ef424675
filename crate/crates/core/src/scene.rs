//! Analytic panorama renderer for box rooms with box obstacles. Depth is
//! the exact ray length to the first surface; color is Lambert shading of a
//! per-surface albedo under one directional light.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::erp_to_sphere;
use crate::tensor::Tensor;

/// Direction the light comes from (normalized at use).
const LIGHT: [f64; 3] = [0.35, -0.45, 0.82];
const AMBIENT: f64 = 0.3;

/// Albedo of the six room faces in order -x, +x, -y, +y, floor, ceiling.
const ROOM_ALBEDO: [[f64; 3]; 6] = [
    [0.80, 0.55, 0.45],
    [0.45, 0.65, 0.80],
    [0.70, 0.75, 0.50],
    [0.60, 0.50, 0.75],
    [0.45, 0.40, 0.35],
    [0.92, 0.92, 0.90],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
}

impl BoxObstacle {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }
}

/// A room centered at the origin (`z` up) seen from `camera`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_half_extents: [f64; 3],
    pub camera: [f64; 3],
    #[serde(default)]
    pub boxes: Vec<BoxObstacle>,
    /// Seed the scene was generated from, if any.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room_half_extents: [2.0, 2.0, 1.0],
            camera: [0.0, 0.0, 0.0],
            boxes: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
}

impl SceneSpec {
    /// A room of random proportions with one to three obstacles.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = [
            rng.gen_range(1.8..3.2),
            rng.gen_range(1.8..3.2),
            rng.gen_range(1.1..1.5),
        ];
        let camera = [
            rng.gen_range(-0.4..0.4) * half[0],
            rng.gen_range(-0.4..0.4) * half[1],
            rng.gen_range(-0.1..0.2),
        ];
        let count = rng.gen_range(1..=3);
        let mut boxes = Vec::new();
        let mut attempts = 0;
        while boxes.len() < count && attempts < 100 {
            attempts += 1;
            let size = [
                rng.gen_range(0.3..0.9),
                rng.gen_range(0.3..0.9),
                rng.gen_range(0.3..1.2),
            ];
            let cx = rng.gen_range(-half[0] + size[0]..half[0] - size[0]);
            let cy = rng.gen_range(-half[1] + size[1]..half[1] - size[1]);
            let b = BoxObstacle {
                min: [cx - size[0], cy - size[1], -half[2]],
                max: [cx + size[0], cy + size[1], -half[2] + size[2]],
                albedo: [
                    rng.gen_range(0.2..0.95),
                    rng.gen_range(0.2..0.95),
                    rng.gen_range(0.2..0.95),
                ],
            };
            // keep a margin around the camera
            let clear = (0..3).any(|a| camera[a] < b.min[a] - 0.25 || camera[a] > b.max[a] + 0.25);
            if clear {
                boxes.push(b);
            }
        }
        Self {
            room_half_extents: half,
            camera,
            boxes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.room_half_extents;
        let finite = h.iter().chain(&self.camera).all(|v| v.is_finite());
        if !finite || h.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidInput("room half-extents must be positive".into()));
        }
        if (0..3).any(|a| self.camera[a].abs() >= h[a]) {
            return Err(Error::InvalidInput("camera must be strictly inside the room".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|a| !(b.min[a] < b.max[a])) {
                return Err(Error::InvalidInput(format!("box {i} has empty extent")));
            }
            if b.contains(self.camera) {
                return Err(Error::InvalidInput(format!("camera inside box {i}")));
            }
        }
        Ok(())
    }

    /// First surface hit by the ray from the camera along unit `dir`.
    pub fn trace(&self, dir: [f64; 3]) -> Hit {
        let o = self.camera;
        let h = self.room_half_extents;
        let mut best = Hit {
            distance: f64::INFINITY,
            normal: [0.0; 3],
            albedo: [0.0; 3],
        };
        for a in 0..3 {
            if dir[a] == 0.0 {
                continue;
            }
            let positive = dir[a] > 0.0;
            let wall = if positive { h[a] } else { -h[a] };
            let t = (wall - o[a]) / dir[a];
            if t < best.distance {
                let mut normal = [0.0; 3];
                normal[a] = if positive { -1.0 } else { 1.0 };
                best = Hit {
                    distance: t,
                    normal,
                    albedo: ROOM_ALBEDO[2 * a + positive as usize],
                };
            }
        }
        for b in &self.boxes {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            let mut missed = false;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if o[a] <= b.min[a] || o[a] >= b.max[a] {
                        missed = true;
                    }
                    continue;
                }
                let t0 = (b.min[a] - o[a]) / dir[a];
                let t1 = (b.max[a] - o[a]) / dir[a];
                let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                if lo > t_near {
                    t_near = lo;
                    axis = a;
                }
                t_far = t_far.min(hi);
            }
            if missed || t_near > t_far || t_near <= 0.0 || t_near >= best.distance {
                continue;
            }
            let mut normal = [0.0; 3];
            normal[axis] = if dir[axis] > 0.0 { -1.0 } else { 1.0 };
            best = Hit {
                distance: t_near,
                normal,
                albedo: b.albedo,
            };
        }
        best
    }

    /// Renders a `width × height` ERP image (`[3, H, W]`, values in `[0, 1]`)
    /// and its depth map.
    pub fn render(&self, width: usize, height: usize) -> Result<(Tensor, DepthMap)> {
        self.validate()?;
        let n = width * height;
        let norm = LIGHT.iter().map(|v| v * v).sum::<f64>().sqrt();
        let light = LIGHT.map(|v| v / norm);
        let mut rgb = vec![0.0; 3 * n];
        let mut depth = vec![0.0; n];
        for row in 0..height {
            for col in 0..width {
                let dir = erp_to_sphere(col as f64, row as f64, width, height)?.to_unit_vector();
                let hit = self.trace(dir);
                let i = row * width + col;
                depth[i] = hit.distance;
                let lambert = (0..3).map(|a| hit.normal[a] * light[a]).sum::<f64>().max(0.0);
                let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                for ch in 0..3 {
                    rgb[ch * n + i] = (hit.albedo[ch] * shade).clamp(0.0, 1.0);
                }
            }
        }
        Ok((
            Tensor::new(&[3, height, width], rgb)?,
            DepthMap::new(width, height, depth)?,
        ))
    }
}
