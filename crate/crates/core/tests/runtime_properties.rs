use conns::network::{Architecture, NetworkParams};
use conns::projection::{project_network, ProjectionSpec};
use conns::runtime::{fixed_point_iterate, FixedPointConfig};
use nalgebra::DVector;
use proptest::prelude::*;

fn contracting_net(seed: u64, eps: f64) -> NetworkParams {
    let arch = Architecture { width: 10, hidden_layers: 2, final_linear: true };
    let mut p = NetworkParams::init(3, arch, seed);
    for w in p.weights_mut() {
        *w *= 4.0;
    }
    for (i, b) in p.biases.iter_mut().enumerate() {
        b.iter_mut().enumerate().for_each(|(j, v)| *v = 0.1 * ((i + j) as f64).sin() + 0.2);
    }
    project_network(&mut p, &ProjectionSpec::spectral(eps).unwrap()).unwrap();
    p
}

fn state() -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0..2.0f64, 3).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fixed_point_is_unique(seed in 0u64..500, x in state(), a in state(), b in state()) {
        let p = contracting_net(seed, 0.2);
        let cfg = FixedPointConfig { tol: 1e-12, ..FixedPointConfig::default() };
        let ra = fixed_point_iterate(&p, &x, &(a * 10.0), &cfg).unwrap();
        let rb = fixed_point_iterate(&p, &x, &b, &cfg).unwrap();
        prop_assert!(ra.converged && rb.converged);
        prop_assert!((&ra.k2_star - &rb.k2_star).amax() <= 1e-10);
    }

    #[test]
    fn passes_obey_the_geometric_bound(seed in 0u64..500, x in state(), k0 in state()) {
        let p = contracting_net(seed, 0.3);
        let mu = p.lipschitz_bound();
        prop_assume!(mu > 1e-3);
        let tol = 1e-9;
        let cfg = FixedPointConfig { tol, ..FixedPointConfig::default() };
        let first = (p.apply(&k0, &x) - &k0).norm();
        let r = fixed_point_iterate(&p, &x, &k0, &cfg).unwrap();
        prop_assert!(r.converged);
        let bound = if first <= tol { 1 } else { ((tol / first).ln() / mu.ln()).ceil() as usize + 1 };
        prop_assert!(r.iterations <= bound, "{} passes > bound {bound} (mu {mu})", r.iterations);
    }
}

#[test]
fn rate_estimate_is_bounded_by_the_certificate() {
    for seed in 0..40 {
        let p = contracting_net(seed, 0.02);
        let mu = p.lipschitz_bound();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let cfg = FixedPointConfig { tol: 1e-13, ..FixedPointConfig::default() };
        let r = fixed_point_iterate(&p, &x, &DVector::from_element(3, 5.0), &cfg).unwrap();
        if let Some(rate) = r.rate_estimate {
            assert!(rate <= mu + 0.05, "seed {seed}: rate {rate} vs bound {mu}");
        }
    }
}
