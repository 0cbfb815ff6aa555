use popflow::master::{
    build_generator, check_reversibility, integrate_fke, poisson_reference, product_poisson,
    scaled_entropy, FkeOptions, StateSpaceIndex,
};
use popflow::meanfield::{integrate_meanfield, meanfield_energy};
use popflow::measure::{Configuration, DensityField, SiteSpace};
use popflow::ode::DtPolicy;
use popflow::rates::{
    check_db_n, make_example_model, random_configurations, ExampleModel, ExampleModelParams,
    HopKernelSpec, PairKernelSpec, RateModel, ScalarFn,
};
use popflow::ssa::{run_ensemble, EnsembleOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params() -> impl Strategy<Value = ExampleModelParams> {
    (
        0.2..1.0f64,
        1.0..2.5f64,
        -4.0..4.0f64,
        0.0..2.0f64,
        0.1..1.5f64,
        0.2..2.0f64,
        0.2..1.5f64,
        0.2..1.5f64,
    )
        .prop_map(
            |(low, high, steep, mid, hop, comp_w, hop_amp, hop_w)| ExampleModelParams {
                psi_bd: ScalarFn::Sigmoid {
                    low,
                    high,
                    steepness: steep,
                    midpoint: mid,
                },
                psi_h: ScalarFn::Reciprocal {
                    scale: hop,
                    rate: 0.5,
                },
                competition: PairKernelSpec::Gaussian {
                    amplitude: 1.0,
                    width: comp_w,
                },
                hop_kernel: HopKernelSpec::Gaussian {
                    amplitude: hop_amp,
                    width: hop_w,
                },
            },
        )
}

fn model(p: ExampleModelParams, sites: usize) -> ExampleModel {
    make_example_model(p, SiteSpace::uniform_grid(sites, 0.0, 1.0).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn detailed_balance_for_random_parameters(p in params(), sites in 1usize..4, n in 1u32..6, seed in any::<u64>()) {
        let m = model(p, sites);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = random_configurations(m.space(), n, 40, 8, &mut rng);
        let report = check_db_n(&m, &samples, n).unwrap();
        prop_assert!(report.max_rel <= 1e-12, "{report:?}");
    }

    #[test]
    fn generator_is_reversible_for_random_parameters(p in params(), n in 1u32..4) {
        let m = model(p, 2);
        let reference = poisson_reference(n, m.space(), 6, 1.0).unwrap();
        let g = build_generator(&m, n, reference.index()).unwrap();
        let r = check_reversibility(&g, &reference).unwrap();
        prop_assert!(r.max_rel <= 1e-12, "{r:?}");
    }

    #[test]
    fn fke_conserves_mass_and_dissipates_entropy(p in params(), m0 in 0.1..2.0f64, m1 in 0.1..2.0f64) {
        let m = model(p, 2);
        let n = 2;
        let cap = 16;
        let index = StateSpaceIndex::new(2, cap).unwrap();
        let p0 = product_poisson(&index, &[m0, m1]).unwrap();
        let g = build_generator(&m, n, &index).unwrap();
        let reference = poisson_reference(n, m.space(), cap, 1.0).unwrap();
        let times: Vec<f64> = (0..=8).map(|i| 0.25 * f64::from(i)).collect();
        let path = integrate_fke(
            &p0,
            &g,
            &times,
            DtPolicy::Adaptive { rtol: 1e-10, atol: 1e-13 },
            FkeOptions { outflow_tolerance: 1e-4 },
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for d in &path.dists {
            prop_assert!((d.total() + d.deficit() - 1.0).abs() <= 1e-9);
            let e = scaled_entropy(d, &reference, n).unwrap();
            prop_assert!(e <= last + 1e-9, "entropy rose from {last} to {e}");
            last = e;
        }
    }

    #[test]
    fn meanfield_energy_is_nonincreasing(p in params(), u in prop::collection::vec(0.0..3.0f64, 3)) {
        let m = model(p, 3);
        let u0 = DensityField::new(u).unwrap();
        let times: Vec<f64> = (0..=10).map(|i| 0.2 * f64::from(i)).collect();
        let path = integrate_meanfield(&u0, &m, &times, DtPolicy::Adaptive { rtol: 1e-10, atol: 1e-12 }).unwrap();
        let mut last = f64::INFINITY;
        for s in &path.states {
            prop_assert!(s.min() >= 0.0);
            let e = meanfield_energy(s, m.space());
            prop_assert!(e <= last + 1e-9, "energy rose from {last} to {e}");
            last = e;
        }
    }

    #[test]
    fn ssa_event_counts_balance_particles(p in params(), counts in prop::collection::vec(0u32..6, 2), seed in any::<u64>()) {
        let m = model(p, 2);
        let c0 = Configuration::new(3, counts).unwrap();
        let opts = EnsembleOptions { trajectories: 8, base_seed: seed, record_events: false };
        let e = run_ensemble(&c0, &m, 1.0, &[0.0, 1.0], &opts).unwrap();
        for tr in &e.trajectories {
            let end: u64 = tr.snapshots[1].iter().map(|&k| u64::from(k)).sum();
            prop_assert_eq!(end + tr.deaths, c0.particles() + tr.births);
            prop_assert_eq!(&tr.snapshots[0], &c0.counts().to_vec());
        }
    }
}
