use std::f64::consts::{FRAC_PI_2, PI, TAU};

use panoformer::geometry::{
    build_default_grid, build_stlm_grid, erp_to_sphere, gnomonic_forward, gnomonic_inverse,
    pixel_pitch, sphere_to_erp, tangent_patch, SphericalCoord, TangentCoord, CENTER_TOKEN,
    PATCH_TOKENS,
};
use proptest::prelude::*;

fn wrapped(d: f64, period: f64) -> f64 {
    (d + period / 2.0).rem_euclid(period) - period / 2.0
}

proptest! {
    #[test]
    fn erp_round_trip(theta in -PI..PI, phi in -1.55f64..1.55, w in 2usize..600, h in 1usize..300) {
        let s = SphericalCoord::new(theta, phi);
        let e = sphere_to_erp(s, w, h).unwrap();
        let back = erp_to_sphere(e.u, e.v, w, h).unwrap();
        prop_assert!(wrapped(back.theta - theta, TAU).abs() < 1e-12);
        prop_assert!((back.phi - phi).abs() < 1e-12);
    }

    #[test]
    fn gnomonic_round_trip(
        ct in -PI..PI,
        cp in -FRAC_PI_2..FRAC_PI_2,
        x in -3.0f64..3.0,
        y in -3.0f64..3.0,
    ) {
        let c = SphericalCoord::new(ct, cp);
        let p = gnomonic_inverse(c, TangentCoord { x, y }).unwrap();
        let t = gnomonic_forward(c, p).unwrap();
        prop_assert!((t.x - x).abs() < 1e-8 && (t.y - y).abs() < 1e-8);
        // tangent-plane radius is tan of the angular distance
        prop_assert!((c.angular_distance(p).tan() - x.hypot(y)).abs() < 1e-8);
    }

    #[test]
    fn patch_distances_do_not_depend_on_center(
        ct in -PI..PI,
        cp in -FRAC_PI_2..FRAC_PI_2,
        dt in 0.001f64..1.2,
        dp in 0.001f64..1.2,
    ) {
        let sorted = |c: SphericalCoord| {
            let mut d: Vec<f64> = tangent_patch(c, dt, dp).unwrap().iter().map(|p| c.angular_distance(*p)).collect();
            d.sort_by(f64::total_cmp);
            d
        };
        let here = sorted(SphericalCoord::new(ct, cp));
        let equator = sorted(SphericalCoord::new(0.0, 0.0));
        for (a, b) in here.iter().zip(&equator) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_center_token_is_the_pixel(w in 5usize..40, h in 3usize..20) {
        let grid = build_default_grid(w, h).unwrap();
        for r in 0..h {
            for c in 0..w {
                let e = grid.position(r, c, CENTER_TOKEN);
                prop_assert_eq!((e.u, e.v), (c as f64, r as f64));
                for k in 0..PATCH_TOKENS {
                    let e = grid.position(r, c, k);
                    prop_assert!(e.u.is_finite() && e.v.is_finite());
                }
            }
        }
    }

    #[test]
    fn grid_is_equivariant_to_column_shifts(w in 5usize..40, h in 3usize..20, k in 0usize..40) {
        let grid = build_default_grid(w, h).unwrap();
        let k = k % w;
        for r in 0..h {
            for c in 0..w {
                for t in 0..PATCH_TOKENS {
                    let a = grid.position(r, c, t);
                    let b = grid.position(r, (c + k) % w, t);
                    prop_assert!(wrapped(b.u - a.u - k as f64, w as f64).abs() < 1e-9);
                    prop_assert!((b.v - a.v).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn step_outside_open_quarter_circle_is_rejected() {
    assert!(build_stlm_grid(16, 8, 0.0, 0.1).is_err());
    assert!(build_stlm_grid(16, 8, 0.1, FRAC_PI_2).is_err());
    assert!(build_stlm_grid(16, 8, f64::NAN, 0.1).is_err());
}

#[test]
fn equator_neighbours_sit_one_pixel_away() {
    let (w, h) = (64, 33);
    let grid = build_default_grid(w, h).unwrap();
    let (dt, dp) = pixel_pitch(w, h);
    assert!((dt - TAU / w as f64).abs() < 1e-15 && (dp - PI / h as f64).abs() < 1e-15);
    let row = h / 2;
    for col in [0, 17, w - 1] {
        let east = grid.position(row, col, 5);
        let north = grid.position(row, col, 1);
        assert!(wrapped(east.u - col as f64 - 1.0, w as f64).abs() < 1e-9);
        assert!((east.v - row as f64).abs() < 1e-9);
        assert!((north.u - col as f64).abs() < 1e-9);
        assert!((row as f64 - 1.0 - north.v).abs() < 1e-9);
    }
}

#[test]
fn bad_extents_are_rejected() {
    // one-pixel steps leave (0, pi/2) on tiny maps
    assert!(build_default_grid(8, 2).is_err());
    assert!(build_default_grid(4, 3).is_err());
    assert!(erp_to_sphere(0.0, 0.0, 1, 1).is_err());
    assert!(sphere_to_erp(SphericalCoord::new(0.0, 0.0), 0, 4).is_err());
    assert!(build_default_grid(1, 1).is_err());
}
