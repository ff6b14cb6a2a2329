use num_complex::Complex64;
use proptest::prelude::*;

use alkatomo_core::observables::{default_observables, CyclopsVariant};
use alkatomo_core::qutrit::{
    devectorize, project_to_physical, random_state, spin1_rotation, vectorize, vectorize_matrix, DensityMatrix,
    Matrix3c, StateVector8,
};
use alkatomo_core::signal::{
    combine_cyclops, synthesize_trace, uniform_grid, NoiseSpec, SignalParams, SignalTrace, TraceLabel,
};

fn unit_axis() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..std::f64::consts::PI, 0.0f64..2.0 * std::f64::consts::PI).prop_map(|(theta, phi)| {
        [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
    })
}

fn hermitian() -> impl Strategy<Value = Matrix3c> {
    prop::array::uniform9(-1.0f64..1.0).prop_map(|v| {
        let mut m = Matrix3c::zeros();
        m[(0, 0)] = Complex64::new(v[0], 0.0);
        m[(1, 1)] = Complex64::new(v[1], 0.0);
        m[(2, 2)] = Complex64::new(v[2], 0.0);
        for (k, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            let z = Complex64::new(v[3 + 2 * k], v[4 + 2 * k]);
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rotations_compose_about_a_fixed_axis(n in unit_axis(), a in -7.0f64..7.0, b in -7.0f64..7.0) {
        let ra = spin1_rotation(n, a).unwrap();
        let rb = spin1_rotation(n, b).unwrap();
        let rab = spin1_rotation(n, a + b).unwrap();
        let diff = (ra.matrix() * rb.matrix() - rab.matrix()).norm();
        prop_assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn vectorize_inverts_devectorize(v in prop::array::uniform8(-1.0f64..1.0)) {
        let back = vectorize_matrix(&devectorize(&StateVector8(v)));
        for i in 0..8 {
            prop_assert!((back[i] - v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn devectorize_inverts_vectorize(seed in any::<u64>()) {
        let rho = random_state(seed);
        let m = devectorize(&vectorize(&rho));
        prop_assert!((m - rho.matrix()).norm() < 1e-15);
    }

    #[test]
    fn combined_traces_ignore_common_offsets(seed in 0u64..1000, offset in -5.0f64..5.0, phi in -3.2f64..3.2) {
        let rho = random_state(seed);
        let obs = default_observables();
        let times = uniform_grid(256, 1.0);
        let u = spin1_rotation([0.0, 1.0, 0.0], 0.3).unwrap();
        let combined = |offset: f64| -> Vec<SignalTrace> {
            let p = SignalParams { offset, phi, ..SignalParams::default() };
            let make = |variant: Option<CyclopsVariant>| {
                let mut pulses = vec![u.clone()];
                pulses.extend(variant.map(CyclopsVariant::unitary));
                synthesize_trace(&rho, &pulses, &obs, &p, &times, &NoiseSpec::none(),
                    TraceLabel { pulse: "p".into(), variant }).unwrap()
            };
            let base = make(None);
            CyclopsVariant::ALL
                .iter()
                .map(|&v| combine_cyclops(&base, &make(Some(v)), v).unwrap())
                .collect()
        };
        for (a, b) in combined(0.0).iter().zip(&combined(offset)) {
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-13, "{x} vs {y}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_beats_random_physical_states(h in hermitian(), seed in any::<u64>()) {
        let tr = h.trace().re;
        prop_assume!(tr.abs() > 0.1);
        let h = h.map(|z| z / tr);
        let p = project_to_physical(&h).unwrap();
        let best = (p.matrix() - h).norm();
        for k in 0..1000u64 {
            let sigma: DensityMatrix = random_state(seed.wrapping_add(k));
            prop_assert!(best <= (sigma.matrix() - h).norm() + 1e-12);
        }
    }
}
