//! Analytic gradients of every primitive against central differences.

use hdc_tensor::gradcheck::{gradcheck, primitive_cases, GradcheckOpts};
use hdc_tensor::{Conv2dOpts, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive() {
    let opts = GradcheckOpts::default();
    let cases = primitive_cases(11);
    assert!(cases.len() > 40);
    for case in &cases {
        let r = case.run(&opts).unwrap();
        assert!(r.passed(opts.tol), "{}: {r:?}", case.name);
    }
}

#[test]
fn other_seeds() {
    let opts = GradcheckOpts::default();
    for seed in [1, 2] {
        for case in primitive_cases(seed) {
            let r = case.run(&opts).unwrap();
            assert!(r.passed(opts.tol), "{} seed {seed}: {r:?}", case.name);
        }
    }
}

#[test]
fn composite_chain() {
    // Shared inputs reached along several paths accumulate correctly.
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
    let w = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
    let opts = GradcheckOpts::default();
    let r = gradcheck(
        &[x, w],
        |_, v| {
            let h = v[0].conv2d(v[1], None, Conv2dOpts::new(1, 1))?.silu();
            let g = h.global_avg_pool()?.sigmoid();
            h.mul(g)?.add(v[0])?.layer_norm(1e-5)
        },
        &opts,
    )
    .unwrap();
    assert!(r.passed(opts.tol), "{r:?}");
}
