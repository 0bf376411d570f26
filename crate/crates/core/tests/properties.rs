mod common;

use common::*;
use proptest::prelude::*;
use wavetomo::atmosphere::{advance_frozen_flow, generate_screen, LayerSpec, VonKarmanSpectrum};
use wavetomo::evaluation::strehl_marechal;
use wavetomo::wavelet::{prior_weight, WaveletTransform};
use wavetomo::wfs::{apply_inv_sensor, shack_hartmann, Elongation, SensorNoise, TipTiltProjector, WfsGeometry};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dwt_round_trip_and_parseval(seed in 0u64..10_000, order in 2usize..=4, size in prop::sample::select(vec![16usize, 32, 64])) {
        let t = WaveletTransform::new(order, 8).unwrap();
        let f = random_vec(size * size, seed);
        let c = t.dwt2(&f, size).unwrap();
        let back = t.idwt2(&c, size).unwrap();
        let err = f.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
        prop_assert!((norm(&c) - norm(&f)).abs() <= 1e-12 * norm(&f));
    }

    #[test]
    fn dwt_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0) {
        let t = WaveletTransform::standard();
        let n = 32;
        let x = random_vec(n * n, seed);
        let y = random_vec(n * n, seed + 1);
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let (cx, cy, cz) = (t.dwt2(&x, n).unwrap(), t.dwt2(&y, n).unwrap(), t.dwt2(&z, n).unwrap());
        for i in 0..cz.len() {
            prop_assert!((cz[i] - (a * cx[i] + cy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_weights_increase_with_scale(c in 0.01f64..10.0, l0 in 1.0f64..1e4, j in 0usize..8) {
        prop_assert!(prior_weight(c, l0, j + 1) > prior_weight(c, l0, j));
        prop_assert!(prior_weight(c, l0, j) > 0.0);
    }

    #[test]
    fn tiptilt_projector_is_orthogonal_projection(seed in 0u64..10_000, n in 1usize..200) {
        let t = TipTiltProjector::new(n);
        let s = random_vec(2 * n, seed);
        let u = random_vec(2 * n, seed + 7);
        let ps = t.apply(&s);
        let pps = t.apply(&ps);
        for (a, b) in ps.iter().zip(&pps) {
            prop_assert!((a - b).abs() < 1e-14);
        }
        let lhs = dot(&ps, &u);
        let rhs = dot(&s, &t.apply(&u));
        prop_assert!((lhs - rhs).abs() < 1e-13 * (1.0 + lhs.abs()));
    }

    #[test]
    fn noise_block_inverse_is_exact(
        sigma2 in 1e-4f64..10.0,
        bx in -3.0f64..3.0,
        by in -3.0f64..3.0,
        tau in 0.0f64..=1.0,
        fwhm in 0.2f64..3.0,
        seed in 0u64..1000,
    ) {
        let noise = SensorNoise {
            sigma2,
            elongation: Some(Elongation { betas: vec![[bx, by]], fwhm, tau }),
            tiptilt_removed: false,
        };
        let s = random_vec(2, seed);
        let x = apply_inv_sensor(&s, &noise);
        let [cxx, cxy, cyy] = noise.block(0);
        let r = [cxx * x[0] + cxy * x[1] - s[0], cxy * x[0] + cyy * x[1] - s[1]];
        prop_assert!(r[0].hypot(r[1]) <= 1e-12 * norm(&s));
        // SPD
        prop_assert!(cxx > 0.0 && cxx * cyy - cxy * cxy > 0.0);
    }

    #[test]
    fn planar_wavefront_is_read_exactly(a in -5.0f64..5.0, b in -5.0f64..5.0, n in 2usize..20) {
        let geom = WfsGeometry::new(n, 8.0, 0.0, 0.5, 0).unwrap();
        let grid = geom.corner_grid();
        let w: Vec<f64> = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.position_xy(k % (n + 1), k / (n + 1));
                a * x + b * y
            })
            .collect();
        let s = shack_hartmann(&w, &geom).unwrap();
        let na = geom.n_active();
        for i in 0..na {
            prop_assert!((s[i] - a).abs() < 1e-10 && (s[na + i] - b).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_flow_preserves_energy(seed in 0u64..1000, vx in -40.0f64..40.0, vy in -40.0f64..40.0) {
        let spec = LayerSpec { altitude_m: 0.0, strength: 1.0, wind: [vx, vy], grid_spacing_m: 0.5, grid_size: 32 };
        let screen = generate_screen(&spec, &VonKarmanSpectrum::new(25.0).unwrap(), seed).unwrap();
        let moved = advance_frozen_flow(&screen, [vx, vy], 0.013).unwrap();
        let (e0, e1) = (norm(&screen.values), norm(&moved.values));
        prop_assert!((e0 - e1).abs() <= 1e-12 * e0);
    }

    #[test]
    fn strehl_is_decreasing_and_bounded(a in 0.0f64..5.0, d in 1e-6f64..2.0) {
        let s0 = strehl_marechal(a).unwrap();
        let s1 = strehl_marechal(a + d).unwrap();
        prop_assert!(s1 < s0 && s0 <= 1.0 && s1 > 0.0);
    }
}
