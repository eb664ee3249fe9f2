use lpqsm::dipole::{
    datafit_with, dipole_kernel, grad_datafit_with, kernel_value, padded_forward, LinearOperator, Orientation, PadSpec,
    PatchOperator,
};
use lpqsm::volume::inner_product;
use lpqsm::{GridSpec, RealVolume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(g: GridSpec, seed: u64) -> RealVolume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    RealVolume::from_fn(g, |_, _, _| r.gen_range(-1.0..1.0))
}

#[test]
fn kernel_lies_in_its_range() {
    let g = GridSpec::new([9, 10, 11], [0.7, 1.0, 1.4]).unwrap();
    let op = dipole_kernel(g, Orientation::tilted_about_y(33.0)).unwrap();
    assert!(op
        .kernel()
        .iter()
        .all(|&d| (-2.0 / 3.0 - 1e-12..=1.0 / 3.0 + 1e-12).contains(&d)));
}

#[test]
fn kernel_value_is_scale_invariant() {
    let h = Orientation::tilted_about_x(12.0).h();
    let k = [0.3, -1.2, 0.8];
    let scaled = k.map(|v| 7.5 * v);
    assert!((kernel_value(k, h) - kernel_value(scaled, h)).abs() < 1e-15);
}

#[test]
fn datafit_gradient_matches_finite_differences() {
    let g = GridSpec::isotropic([6, 6, 6]).unwrap();
    let ops: Vec<_> = [0.0, 35.0]
        .iter()
        .map(|&t| dipole_kernel(g, Orientation::tilted_about_x(t)).unwrap())
        .collect();
    let ys = vec![random(g, 1), random(g, 2)];
    let x = random(g, 3);
    let grad = grad_datafit_with(&ops, &x, &ys).unwrap();
    let dir = random(g, 4);
    let h = 1e-6;
    let f = |s: f64| datafit_with(&ops, &x.lincomb(1.0, &dir, s).unwrap(), &ys).unwrap();
    let fd = (f(h) - f(-h)) / (2.0 * h);
    let an = inner_product(&grad, &dir).unwrap();
    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
}

#[test]
fn patch_operator_adjoint_identity() {
    let full = GridSpec::isotropic([20, 20, 20]).unwrap();
    let op = dipole_kernel(full, Orientation::tilted_about_y(15.0)).unwrap();
    let pad = PadSpec::new([8, 8, 8], [2, 6, 10], full.dims).unwrap();
    let patch = PatchOperator::new(&op, pad).unwrap();
    let pg = GridSpec::isotropic([8, 8, 8]).unwrap();
    let (x, y) = (random(pg, 5), random(pg, 6));
    let lhs = inner_product(&patch.apply(&x).unwrap(), &y).unwrap();
    let rhs = inner_product(&x, &patch.apply_adjoint(&y).unwrap()).unwrap();
    assert!((lhs - rhs).abs() < 1e-10);
    assert_eq!(
        patch.apply(&x).unwrap().data(),
        padded_forward(&op, &x, &pad).unwrap().data()
    );
}

#[test]
fn bad_pads_are_rejected() {
    assert!(PadSpec::new([8, 8, 8], [15, 0, 0], [20, 20, 20]).is_err());
    assert!(PadSpec::new([30, 8, 8], [0, 0, 0], [20, 20, 20]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_adjoint_identity(seed in any::<u64>(), nx in 2usize..10, ny in 2usize..10, nz in 2usize..10,
                                tilt in -80.0f64..80.0) {
        let g = GridSpec::new([nx, ny, nz], [1.0, 0.9, 1.3]).unwrap();
        let op = dipole_kernel(g, Orientation::tilted_about_x(tilt)).unwrap();
        let (x, y) = (random(g, seed), random(g, seed ^ 1));
        let lhs = inner_product(&op.forward(&x).unwrap(), &y).unwrap();
        let rhs = inner_product(&x, &op.adjoint(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
