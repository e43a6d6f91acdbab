use nakul::ssm::*;
use nakul::tensor::gradcheck;
use nakul::tensor::rng::Streams;
use nakul::{ParamStore, Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Stable by construction: skew part plus a negative-definite symmetric part,
/// so every eigenvalue has real part ≤ -0.1.
fn stable_a(n: usize, vals: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| vals[i * n + j]);
    let skew = (&m - m.transpose()) * 0.5;
    let q = DMatrix::from_fn(n, n, |i, j| vals[n * n + i * n + j]);
    skew - (&q * q.transpose()) - DMatrix::identity(n, n) * 0.1
}

fn ssm_strategy() -> impl Strategy<Value = (SsmParams, f64, Vec<f64>)> {
    (1usize..=4, 1usize..=64).prop_flat_map(|(n, len)| {
        (
            proptest::collection::vec(-1.0f64..1.0, 2 * n * n + 2 * n + 1),
            0.01f64..2.0,
            proptest::collection::vec(-3.0f64..3.0, len),
        )
            .prop_map(move |(v, delta, x)| {
                let a = stable_a(n, &v);
                let off = 2 * n * n;
                let b = DVector::from_column_slice(&v[off..off + n]);
                let c = DVector::from_column_slice(&v[off + n..off + 2 * n]);
                (SsmParams::new(a, b, c, v[off + 2 * n]).unwrap(), delta, x)
            })
    })
}

proptest! {
    #[test]
    fn recurrence_equals_kernel_convolution((p, delta, x) in ssm_strategy()) {
        let d = discretize(&p, delta).unwrap();
        let x = Tensor::from_vec(x);
        let y = recurrent_scan(&d, &x).unwrap();
        let k = materialize_kernel(&d, x.numel()).unwrap();
        let conv = causal_convolve(&k, &x).unwrap();
        for t in 0..x.numel() {
            let expect = conv.data()[t] + d.d_skip * x.data()[t];
            prop_assert!((y.data()[t] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn discretized_stable_system_is_contractive((p, delta, _x) in ssm_strategy()) {
        let d = discretize(&p, delta).unwrap();
        let radius = d.a_bar.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(radius <= 1.0);
    }

    #[test]
    fn diagonal_a_discretizes_elementwise(diag in proptest::collection::vec(-5.0f64..0.0, 1..=4), delta in 0.001f64..3.0) {
        let n = diag.len();
        let p = SsmParams::new(
            DMatrix::from_diagonal(&DVector::from_vec(diag.clone())),
            DVector::from_element(n, 1.0),
            DVector::from_element(n, 1.0),
            0.0,
        ).unwrap();
        let d = discretize(&p, delta).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { (delta * diag[i]).exp() } else { 0.0 };
                prop_assert!((d.a_bar[(i, j)] - expect).abs() < 1e-12);
            }
            let expect_b = if diag[i] == 0.0 { delta } else { ((delta * diag[i]).exp() - 1.0) / diag[i] };
            prop_assert!((d.b_bar[i] - expect_b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_convolve_matches_direct_sum(
        k in proptest::collection::vec(-2.0f64..2.0, 1..12),
        x in proptest::collection::vec(-2.0f64..2.0, 1..40),
    ) {
        let y = causal_convolve(&Tensor::from_vec(k.clone()), &Tensor::from_vec(x.clone())).unwrap();
        for t in 0..x.len() {
            let mut s = 0.0;
            for j in 0..k.len() {
                if j <= t {
                    s += k[j] * x[t - j];
                }
            }
            prop_assert!((y.data()[t] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn two_state_diagonal_example() {
    let p = SsmParams::diagonal_init(2);
    let d = discretize(&p, 0.3).unwrap();
    assert!((d.a_bar[(0, 0)] - (-0.3f64).exp()).abs() < 1e-12);
    assert!((d.a_bar[(1, 1)] - (-0.6f64).exp()).abs() < 1e-12);
    assert_eq!(d.a_bar[(0, 1)], 0.0);
}

#[test]
fn discretize_rejects_non_positive_step() {
    let p = SsmParams::diagonal_init(2);
    assert!(discretize(&p, 0.0).is_err());
    assert!(discretize(&p, -1.0).is_err());
}

#[test]
fn impulse_response_is_the_kernel_and_zero_input_is_silent() {
    let d = discretize(&SsmParams::diagonal_init(3), 0.2).unwrap();
    let mut impulse = vec![0.0; 10];
    impulse[0] = 1.0;
    let y = recurrent_scan(&d, &Tensor::from_vec(impulse)).unwrap();
    let k = materialize_kernel(&d, 10).unwrap();
    assert!(y.max_abs_diff(&k) < 1e-15);
    let z = recurrent_scan(&d, &Tensor::zeros([10])).unwrap();
    assert!(z.data().iter().all(|v| *v == 0.0));
}

#[test]
fn scalar_kernel_decays_geometrically() {
    let p = SsmParams::new(
        DMatrix::from_element(1, 1, -0.8),
        DVector::from_element(1, 1.3),
        DVector::from_element(1, -0.4),
        0.0,
    )
    .unwrap();
    let d = discretize(&p, 0.25).unwrap();
    let k = materialize_kernel(&d, 20).unwrap();
    let ratio = d.a_bar[(0, 0)].abs();
    for w in k.data().windows(2) {
        assert!((w[1].abs() - ratio * w[0].abs()).abs() < 1e-14);
        assert!(w[1].abs() <= w[0].abs());
    }
}

#[test]
fn constant_input_selective_scan_reduces_to_fixed_recurrence() {
    let mut rng = Streams::new(7).stream("sel");
    let base = {
        let mut b = SsmParams::diagonal_init(4);
        b.d_skip = 0.3;
        b
    };
    let sp = SelectiveParams::random(3, 4, 0.5, &mut rng);
    let row = [0.4, -1.1, 0.9];
    let len = 16;
    let x = Tensor::new([len, 3], row.repeat(len)).unwrap();
    let y = selective_scan(&sp, &base, &x).unwrap();

    let pre: f64 = (0..3).map(|d| sp.w_delta.data()[d] * row[d]).sum();
    let delta = (1.0 + pre.exp()).ln();
    let proj = |w: &Tensor| DVector::from_fn(4, |n, _| (0..3).map(|d| row[d] * w.get(&[d, n])).sum());
    let fixed = SsmParams::new(base.a.clone(), proj(&sp.w_b), proj(&sp.w_c), base.d_skip).unwrap();
    let mean = row.iter().sum::<f64>() / 3.0;
    let expect = recurrent_scan(&discretize(&fixed, delta).unwrap(), &Tensor::full([len], mean)).unwrap();
    assert!(y.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn zeroed_selective_scan_ignores_feature_order() {
    let base = {
        let mut b = SsmParams::diagonal_init(4);
        b.d_skip = -1.2;
        b
    };
    let data: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let x = Tensor::new([5, 4], data.clone()).unwrap();
    let perm = [2usize, 0, 3, 1];
    let src = &data;
    let permuted: Vec<f64> = (0..5).flat_map(|t| perm.iter().map(move |&p| src[t * 4 + p])).collect();
    let xp = Tensor::new([5, 4], permuted).unwrap();
    let sp = SelectiveParams::zeros(4, 4);
    let a = selective_scan(&sp, &base, &x).unwrap();
    let b = selective_scan(&sp, &base, &xp).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-14);
}

#[test]
fn selective_scan_gradients_match_finite_differences() {
    let streams = Streams::new(11);
    let mut rng = streams.stream("init");
    let mut store = ParamStore::new();
    let base = {
        let mut b = SsmParams::diagonal_init(4);
        b.d_skip = 0.5;
        b
    };
    let sel = SelectiveSsm::new(&mut store, "ssm", SelectiveParams::random(5, 4, 0.6, &mut rng), base);
    let mut xr = streams.stream("x");
    let x = Tensor::randn([12, 5], 1.0, &mut xr);
    let ids = [sel.w_delta, sel.w_b, sel.w_c];
    let entries: Vec<_> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let report = gradcheck::check(&store, &entries, |tape: &Tape| {
        let xv = tape.constant(x.clone());
        let y = sel.forward(tape, xv)?;
        tape.sum_all(y)
    })
    .unwrap();
    assert!(report.passed(1e-3), "worst probe: {:?}", report.worst());
}
