//! Projection math between the equirectangular (ERP) image plane, the unit
//! sphere and local tangent planes, plus ERP to cubemap resampling.
//!
//! Conventions used throughout the crate:
//!
//! * ERP pixel `i` has its center at the continuous coordinate `u = i`, so a
//!   `W`-wide image spans `u ∈ [-0.5, W - 0.5)`. Rows follow the same rule.
//! * Longitude `theta` grows eastward (to the right) and is zero at the
//!   center column; latitude `phi` grows northward (up) and is `+pi/2` at the
//!   top edge.
//! * World axes: `+x` looks at `theta = 0`, `+y` at `theta = pi/2`, `+z` at
//!   the north pole.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};

/// Number of tokens in a tangent patch (3×3 lattice).
pub const PATCH_TOKENS: usize = 9;
/// Index of the central token inside a patch.
pub const CENTER_TOKEN: usize = 4;

/// Wraps a longitude into `(-pi, pi]`.
pub fn normalize_longitude(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(TAU) - PI;
    if t <= -PI {
        t += TAU;
    }
    t
}

/// Wraps a continuous column coordinate into `[-0.5, width - 0.5)`.
pub fn wrap_column(u: f64, width: usize) -> f64 {
    let w = width as f64;
    let mut x = (u + 0.5).rem_euclid(w) - 0.5;
    if x >= w - 0.5 {
        x -= w;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalCoord {
    /// Builds a coordinate with the longitude wrapped and the latitude
    /// clamped to the poles.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self {
            theta: normalize_longitude(theta),
            phi: phi.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    pub fn to_unit_vector(self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [cp * ct, cp * st, sp]
    }

    /// Direction of a (not necessarily normalized) vector. The zero vector
    /// maps to `(0, 0)`.
    pub fn from_vector(v: [f64; 3]) -> Self {
        let horiz = v[0].hypot(v[1]);
        Self::new(v[1].atan2(v[0]), v[2].atan2(horiz))
    }

    /// Great-circle distance in radians.
    pub fn angular_distance(self, other: SphericalCoord) -> f64 {
        let a = self.to_unit_vector();
        let b = other.to_unit_vector();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        norm3(cross).atan2(dot3(a, b))
    }

    fn check_finite(self) -> Result<()> {
        if self.theta.is_finite() && self.phi.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("spherical coordinate"))
        }
    }
}

/// Position on the plane tangent to the unit sphere at some center, with
/// `x` along increasing longitude and `y` along increasing latitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentCoord {
    pub x: f64,
    pub y: f64,
}

/// Continuous ERP pixel coordinate (column `u`, row `v`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErpCoord {
    pub u: f64,
    pub v: f64,
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn check_extent(width: usize, height: usize) -> Result<()> {
    if width < 2 || height < 1 {
        return Err(Error::InvalidInput(format!(
            "ERP extent {width}x{height} too small (need width >= 2, height >= 1)"
        )));
    }
    Ok(())
}

pub fn erp_to_sphere(u: f64, v: f64, width: usize, height: usize) -> Result<SphericalCoord> {
    check_extent(width, height)?;
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite("ERP coordinate"));
    }
    let theta = ((u + 0.5) / width as f64 - 0.5) * TAU;
    let phi = (0.5 - (v + 0.5) / height as f64) * PI;
    Ok(SphericalCoord::new(theta, phi))
}

/// Inverse of [`erp_to_sphere`]. The seam `theta = pi` maps to the canonical
/// representative `u = -0.5`.
pub fn sphere_to_erp(c: SphericalCoord, width: usize, height: usize) -> Result<ErpCoord> {
    check_extent(width, height)?;
    c.check_finite()?;
    let c = SphericalCoord::new(c.theta, c.phi);
    let u = (c.theta / TAU + 0.5) * width as f64 - 0.5;
    let v = (0.5 - c.phi / PI) * height as f64 - 0.5;
    Ok(ErpCoord {
        u: wrap_column(u, width),
        v: v.clamp(-0.5, height as f64 - 0.5),
    })
}

/// Local east/north basis of the tangent plane at `center`.
fn tangent_frame(center: SphericalCoord) -> [[f64; 3]; 3] {
    let (st, ct) = center.theta.sin_cos();
    let (sp, cp) = center.phi.sin_cos();
    let normal = [cp * ct, cp * st, sp];
    let east = [-st, ct, 0.0];
    let north = [-sp * ct, -sp * st, cp];
    [normal, east, north]
}

/// Gnomonic (central) projection of `point` onto the plane tangent at
/// `center`.
pub fn gnomonic_forward(center: SphericalCoord, point: SphericalCoord) -> Result<TangentCoord> {
    center.check_finite()?;
    point.check_finite()?;
    let [normal, east, north] = tangent_frame(center);
    let p = point.to_unit_vector();
    let cos_c = dot3(p, normal);
    // cos_c <= 0 means the point sits on or past the horizon of the plane.
    if cos_c <= 1e-12 {
        return Err(Error::OutsideHemisphere {
            distance: center.angular_distance(point),
        });
    }
    Ok(TangentCoord {
        x: dot3(p, east) / cos_c,
        y: dot3(p, north) / cos_c,
    })
}

/// Inverse gnomonic projection about `center`. Lattice points whose
/// latitude would pass a pole come back on the far meridian.
pub fn gnomonic_inverse(center: SphericalCoord, t: TangentCoord) -> Result<SphericalCoord> {
    center.check_finite()?;
    if !t.x.is_finite() || !t.y.is_finite() {
        return Err(Error::NonFinite("tangent coordinate"));
    }
    let [normal, east, north] = tangent_frame(center);
    let p = [
        normal[0] + t.x * east[0] + t.y * north[0],
        normal[1] + t.x * east[1] + t.y * north[1],
        normal[2] + t.x * east[2] + t.y * north[2],
    ];
    Ok(SphericalCoord::from_vector(p))
}

/// Tangent-plane offsets of the 3×3 lattice in row-major image order
/// (index 0 is north-west, 4 the center, 8 south-east).
pub fn lattice_offsets(delta_theta: f64, delta_phi: f64) -> [TangentCoord; PATCH_TOKENS] {
    let tx = delta_theta.tan();
    let ty = delta_phi.tan();
    let mut out = [TangentCoord { x: 0.0, y: 0.0 }; PATCH_TOKENS];
    for (k, slot) in out.iter_mut().enumerate() {
        let row = k as isize / 3 - 1;
        let col = k as isize % 3 - 1;
        // image rows grow southward, tangent y grows northward
        *slot = TangentCoord {
            x: col as f64 * tx,
            y: -(row as f64) * ty,
        };
    }
    out
}

/// Sphere-domain positions of the nine tokens of the tangent patch centered
/// at `center`, before they are mapped onto the ERP grid.
pub fn tangent_patch(
    center: SphericalCoord,
    delta_theta: f64,
    delta_phi: f64,
) -> Result<[SphericalCoord; PATCH_TOKENS]> {
    let mut out = [center; PATCH_TOKENS];
    for (slot, t) in out.iter_mut().zip(lattice_offsets(delta_theta, delta_phi)) {
        *slot = gnomonic_inverse(center, t)?;
    }
    out[CENTER_TOKEN] = center;
    Ok(out)
}

/// Per-pixel ERP positions of the nine tokens of every tangent patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub width: usize,
    pub height: usize,
    pub delta_theta: f64,
    pub delta_phi: f64,
    /// `H × W × 9 × 2` values, `(u, v)` pairs in row-major order.
    pub positions: Vec<f64>,
}

impl SamplingGrid {
    pub fn position(&self, row: usize, col: usize, token: usize) -> ErpCoord {
        let i = ((row * self.width + col) * PATCH_TOKENS + token) * 2;
        ErpCoord {
            u: self.positions[i],
            v: self.positions[i + 1],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// One-pixel angular pitch of an ERP image: `(2pi / W, pi / H)`.
pub fn pixel_pitch(width: usize, height: usize) -> (f64, f64) {
    (TAU / width as f64, PI / height as f64)
}

/// Builds the grid of tangent-patch token positions for a `width × height`
/// ERP map. Steps must lie in `(0, pi/2)`; the lattice then never reaches
/// the horizon of its tangent plane.
pub fn build_stlm_grid(
    width: usize,
    height: usize,
    delta_theta: f64,
    delta_phi: f64,
) -> Result<SamplingGrid> {
    check_extent(width, height)?;
    for d in [delta_theta, delta_phi] {
        if !(d > 0.0 && d < FRAC_PI_2) {
            return Err(Error::InvalidInput(format!(
                "grid step {d} outside (0, pi/2)"
            )));
        }
    }
    let mut positions = Vec::with_capacity(width * height * PATCH_TOKENS * 2);
    for row in 0..height {
        for col in 0..width {
            let center = erp_to_sphere(col as f64, row as f64, width, height)?;
            let patch = tangent_patch(center, delta_theta, delta_phi)?;
            for (k, token) in patch.iter().enumerate() {
                if k == CENTER_TOKEN {
                    positions.extend_from_slice(&[col as f64, row as f64]);
                } else {
                    let e = sphere_to_erp(*token, width, height)?;
                    positions.extend_from_slice(&[e.u, e.v]);
                }
            }
        }
    }
    Ok(SamplingGrid {
        width,
        height,
        delta_theta,
        delta_phi,
        positions,
    })
}

/// [`build_stlm_grid`] with one-pixel angular steps.
pub fn build_default_grid(width: usize, height: usize) -> Result<SamplingGrid> {
    let (dt, dp) = pixel_pitch(width, height);
    build_stlm_grid(width, height, dt, dp)
}

/// Bilinear lookup into a single-channel ERP image with horizontal wrap and
/// vertical edge clamping. Returns the four `(flat index, weight)` taps.
pub fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let u = wrap_column(u, width);
    let v = v.clamp(0.0, (height - 1) as f64);
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let c0 = (u0 as isize).rem_euclid(width as isize) as usize;
    let c1 = (c0 + 1) % width;
    let r0 = v0 as usize;
    let r1 = (r0 + 1).min(height - 1);
    [
        (r0 * width + c0, (1.0 - fu) * (1.0 - fv)),
        (r0 * width + c1, fu * (1.0 - fv)),
        (r1 * width + c0, (1.0 - fu) * fv),
        (r1 * width + c1, fu * fv),
    ]
}

/// Bilinear sample of a single-channel ERP image; constants are reproduced
/// exactly.
pub fn sample_erp(image: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let taps = bilinear_taps(u, v, width, height);
    let [a, b, c, d] = taps.map(|(i, _)| image[i]);
    let fu = taps[1].1 + taps[3].1;
    let fv = taps[2].1 + taps[3].1;
    let top = a + fu * (b - a);
    let bottom = c + fu * (d - c);
    top + fv * (bottom - top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubeFace {
    Front,
    Right,
    Back,
    Left,
    Top,
    Bottom,
}

impl CubeFace {
    pub const ALL: [CubeFace; 6] = [
        CubeFace::Front,
        CubeFace::Right,
        CubeFace::Back,
        CubeFace::Left,
        CubeFace::Top,
        CubeFace::Bottom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CubeFace::Front => "front",
            CubeFace::Right => "right",
            CubeFace::Back => "back",
            CubeFace::Left => "left",
            CubeFace::Top => "top",
            CubeFace::Bottom => "bottom",
        }
    }

    /// Direction through face-plane point `(a, b)`, where `a ∈ [-1, 1]` runs
    /// left to right and `b ∈ [-1, 1]` top to bottom. Side faces are upright;
    /// the top face's lower edge meets the front face's upper edge and the
    /// bottom face's upper edge meets the front face's lower edge.
    pub fn direction(self, a: f64, b: f64) -> [f64; 3] {
        match self {
            CubeFace::Front => [1.0, a, -b],
            CubeFace::Right => [-a, 1.0, -b],
            CubeFace::Back => [-1.0, -a, -b],
            CubeFace::Left => [a, -1.0, -b],
            CubeFace::Top => [b, a, 1.0],
            CubeFace::Bottom => [-b, a, -1.0],
        }
    }

    /// Direction through the center of texel `(row, col)` of a face with
    /// `face_size` texels per side.
    pub fn texel_direction(self, row: usize, col: usize, face_size: usize) -> [f64; 3] {
        let n = face_size as f64;
        let a = 2.0 * (col as f64 + 0.5) / n - 1.0;
        let b = 2.0 * (row as f64 + 0.5) / n - 1.0;
        self.direction(a, b)
    }
}

/// Six square faces, ordered as [`CubeFace::ALL`].
#[derive(Debug, Clone, PartialEq)]
pub struct CubeFaceSet {
    pub face_size: usize,
    pub faces: [Vec<f64>; 6],
}

impl CubeFaceSet {
    pub fn face(&self, face: CubeFace) -> &[f64] {
        &self.faces[face as usize]
    }
}

/// ERP position looked at by texel `(row, col)` of `face`.
pub fn cube_texel_erp(
    face: CubeFace,
    row: usize,
    col: usize,
    face_size: usize,
    width: usize,
    height: usize,
) -> Result<ErpCoord> {
    let dir = face.texel_direction(row, col, face_size);
    sphere_to_erp(SphericalCoord::from_vector(dir), width, height)
}

fn check_cube_args(width: usize, height: usize, face_size: usize) -> Result<()> {
    if width < 2 || height * 2 != width {
        return Err(Error::InvalidInput(format!(
            "ERP image {width}x{height} is not 2:1"
        )));
    }
    if face_size < 2 {
        return Err(Error::InvalidInput(format!(
            "face size {face_size} must be >= 2"
        )));
    }
    Ok(())
}

/// Default cube face resolution, matching the equatorial pixel density.
pub fn default_face_size(width: usize) -> usize {
    (width / 4).max(2)
}

/// Resamples a single-channel 2:1 ERP image onto the six cube faces.
pub fn erp_to_cube(
    image: &[f64],
    width: usize,
    height: usize,
    face_size: usize,
) -> Result<CubeFaceSet> {
    check_cube_args(width, height, face_size)?;
    if image.len() != width * height {
        return Err(crate::error::shape_err(
            "erp_to_cube",
            format!("{} values for a {width}x{height} image", image.len()),
        ));
    }
    let mut faces: [Vec<f64>; 6] = Default::default();
    for face in CubeFace::ALL {
        let out = &mut faces[face as usize];
        out.reserve(face_size * face_size);
        for row in 0..face_size {
            for col in 0..face_size {
                let e = cube_texel_erp(face, row, col, face_size, width, height)?;
                out.push(sample_erp(image, width, height, e.u, e.v));
            }
        }
    }
    Ok(CubeFaceSet { face_size, faces })
}

/// Channel-planar multi-channel variant of [`erp_to_cube`]; `image` holds
/// `channels` consecutive `H × W` planes.
pub fn erp_to_cube_channels(
    image: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    face_size: usize,
) -> Result<Vec<CubeFaceSet>> {
    if channels == 0 || image.len() != channels * width * height {
        return Err(crate::error::shape_err(
            "erp_to_cube_channels",
            format!("{} values for {channels}x{width}x{height}", image.len()),
        ));
    }
    image
        .chunks(width * height)
        .map(|plane| erp_to_cube(plane, width, height, face_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn erp_center_and_quarter_turn() {
        let c = erp_to_sphere(255.5, 127.5, 512, 256).unwrap();
        assert_abs_diff_eq!(c.theta, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.phi, 0.0, epsilon = 1e-15);
        let c = erp_to_sphere(383.5, 127.5, 512, 256).unwrap();
        assert_abs_diff_eq!(c.theta, FRAC_PI_2, epsilon = 1e-15);
        let c = erp_to_sphere(255.5, -0.5, 512, 256).unwrap();
        assert_abs_diff_eq!(c.phi, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn sphere_to_erp_center_and_seam() {
        let e = sphere_to_erp(SphericalCoord::new(0.0, 0.0), 512, 256).unwrap();
        assert_eq!((e.u, e.v), (255.5, 127.5));
        // theta = pi sits on the seam; canonical representative is -0.5
        let e = sphere_to_erp(SphericalCoord::new(PI, 0.0), 512, 256).unwrap();
        assert_eq!(e.u, -0.5);
        let back = erp_to_sphere(e.u, e.v, 512, 256).unwrap();
        assert_abs_diff_eq!(back.theta, PI, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(erp_to_sphere(f64::NAN, 0.0, 8, 4).is_err());
        assert!(erp_to_sphere(0.0, 0.0, 1, 4).is_err());
        assert!(build_stlm_grid(8, 4, FRAC_PI_2, 0.1).is_err());
        assert!(build_stlm_grid(8, 4, 0.0, 0.1).is_err());
    }

    #[test]
    fn gnomonic_examples() {
        let o = SphericalCoord::new(0.0, 0.0);
        let t = gnomonic_forward(o, o).unwrap();
        assert_eq!((t.x, t.y), (0.0, 0.0));
        let t = gnomonic_forward(o, SphericalCoord::new(0.1, 0.0)).unwrap();
        assert_abs_diff_eq!(t.x, 0.1003347, epsilon = 1e-7);
        assert_abs_diff_eq!(t.y, 0.0, epsilon = 1e-15);
        let t = gnomonic_forward(o, SphericalCoord::new(0.1, 0.1)).unwrap();
        assert_abs_diff_eq!(t.x, 0.1003347, epsilon = 1e-7);
        assert_abs_diff_eq!(t.y, 0.1008385, epsilon = 1e-7);

        let c = SphericalCoord::new(0.3, -0.2);
        let p = gnomonic_inverse(c, TangentCoord { x: 0.0, y: 0.0 }).unwrap();
        assert_abs_diff_eq!(p.theta, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p.phi, -0.2, epsilon = 1e-15);
        let p = gnomonic_inverse(o, TangentCoord { x: 0.1f64.tan(), y: 0.0 }).unwrap();
        assert_abs_diff_eq!(p.theta, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(p.phi, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gnomonic_rejects_far_hemisphere() {
        let o = SphericalCoord::new(0.0, 0.0);
        assert!(matches!(
            gnomonic_forward(o, SphericalCoord::new(FRAC_PI_2, 0.0)),
            Err(Error::OutsideHemisphere { .. })
        ));
        assert!(gnomonic_forward(o, SphericalCoord::new(2.5, 0.3)).is_err());
        assert!(gnomonic_inverse(o, TangentCoord { x: f64::INFINITY, y: 0.0 }).is_err());
    }

    #[test]
    fn inverse_over_the_pole_lands_on_far_meridian() {
        let c = SphericalCoord::new(0.5, 1.5);
        let p = gnomonic_inverse(c, TangentCoord { x: 0.0, y: 0.2 }).unwrap();
        assert!(p.phi < FRAC_PI_2 && p.phi > 1.3);
        assert_abs_diff_eq!(normalize_longitude(p.theta - 0.5).abs(), PI, epsilon = 1e-12);
    }

    #[test]
    fn grid_center_token_and_equator_neighbors() {
        let g = build_default_grid(64, 32).unwrap();
        for row in 0..32 {
            for col in 0..64 {
                let e = g.position(row, col, CENTER_TOKEN);
                assert_eq!((e.u, e.v), (col as f64, row as f64));
            }
        }
        // equator rows straddle phi = 0, so use an odd height for an exact
        // equator row
        let g = build_default_grid(64, 33).unwrap();
        let east = g.position(16, 20, 5);
        let west = g.position(16, 20, 3);
        assert_abs_diff_eq!(east.u, 21.0, epsilon = 1e-9);
        assert_abs_diff_eq!(west.u, 19.0, epsilon = 1e-9);
        assert_abs_diff_eq!(east.v, 16.0, epsilon = 1e-9);
    }

    #[test]
    fn polar_rows_spread_horizontally() {
        let g = build_default_grid(64, 32).unwrap();
        let east = g.position(0, 10, 5);
        let west = g.position(0, 10, 3);
        let spread = normalize_longitude((east.u - west.u) * TAU / 64.0).abs() * 64.0 / TAU;
        assert!(spread > 2.0, "spread {spread}");
    }

    #[test]
    fn seam_neighbors_wrap() {
        let g = build_default_grid(32, 16).unwrap();
        for row in 0..16 {
            let west = g.position(row, 0, 3);
            assert!(west.u > 16.0 && west.u < 31.5, "row {row}: {}", west.u);
        }
        let west = g.position(8, 0, 3);
        assert!(west.u > 30.5, "{}", west.u);
        for x in g.positions.chunks(2) {
            assert!(x[0] >= -0.5 && x[0] < 31.5);
            assert!(x[1] >= -0.5 && x[1] <= 15.5);
        }
    }

    #[test]
    fn cube_constant_and_range() {
        let img = vec![2.0; 32 * 16];
        let cube = erp_to_cube(&img, 32, 16, 8).unwrap();
        for f in &cube.faces {
            assert!(f.iter().all(|&x| x == 2.0));
        }
        assert!(erp_to_cube(&img, 32, 15, 8).is_err());
        assert!(erp_to_cube(&img, 32, 16, 1).is_err());
    }

    #[test]
    fn cube_top_center_looks_at_pole() {
        let (w, h) = (64, 32);
        let img: Vec<f64> = (0..w * h).map(|i| (i / w) as f64).collect();
        let cube = erp_to_cube(&img, w, h, 9).unwrap();
        // row 0 of this image is 0.0; the pole clamps to row 0
        assert_abs_diff_eq!(cube.face(CubeFace::Top)[4 * 9 + 4], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            cube.face(CubeFace::Bottom)[4 * 9 + 4],
            (h - 1) as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cube_longitude_ramp_face_centers() {
        let (w, h) = (64, 32);
        let img: Vec<f64> = (0..w * h)
            .map(|i| erp_to_sphere((i % w) as f64, 0.0, w, h).unwrap().theta)
            .collect();
        let n = 9;
        let cube = erp_to_cube(&img, w, h, n).unwrap();
        let center = (n / 2) * n + n / 2;
        let tol = TAU / w as f64;
        assert!(cube.face(CubeFace::Front)[center].abs() < tol);
        assert!((cube.face(CubeFace::Right)[center] - FRAC_PI_2).abs() < tol);
        assert!((cube.face(CubeFace::Left)[center] + FRAC_PI_2).abs() < tol);
    }

    proptest! {
        #[test]
        fn erp_round_trip(u in -0.5f64..511.5, v in -0.5f64..255.5) {
            let c = erp_to_sphere(u, v, 512, 256).unwrap();
            let e = sphere_to_erp(c, 512, 256).unwrap();
            prop_assert!((e.u - u).abs() < 1e-12);
            prop_assert!((e.v - v).abs() < 1e-12);
        }

        #[test]
        fn cube_stays_within_source_range(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f64> = (0..32 * 16).map(|_| rng.gen_range(-3.0..5.0)).collect();
            let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let cube = erp_to_cube(&img, 32, 16, 8).unwrap();
            for f in &cube.faces {
                for &x in f {
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }
}
