//! The numerical core is generic over the scalar; exercise the f32
//! instantiation end to end at tolerances f32 can honor.

use flowcp::diffmath::{Matrix, Mlp, ParamStore};
use flowcp::ode::{integrate, OdeConfig};
use flowcp::qmc::SobolStream;
use flowcp::special::chi_quantile;

#[test]
fn f32_core_works_at_reduced_tolerances() {
    // Sobol points are exact dyadic fractions in either precision
    let mut s = SobolStream::new(2).unwrap();
    let p: Vec<f32> = s.next_point();
    assert_eq!(p, vec![0.5f32, 0.5]);

    // ODE: e within 1e-4 at loosened tolerances
    let cfg = OdeConfig::<f32> {
        abs_tol: 1e-5,
        rel_tol: 1e-5,
        ..OdeConfig::default()
    };
    let y = integrate(|_, x: &[f32]| vec![x[0]], &[1.0f32], 0.0, 1.0, &cfg).unwrap();
    assert!((y[0] - std::f32::consts::E).abs() < 1e-4);

    // chi quantile to f32 precision
    let q: f32 = chi_quantile(0.95f32, 2).unwrap();
    assert!((q - 2.447_747).abs() < 1e-4, "got {q}");

    // a forward/backward pass in f32
    let mlp = Mlp::from_dims("net", vec![2, 4, 1]);
    let mut store: ParamStore<f32> = ParamStore::new();
    store.insert("net.w0", Matrix::from_vec(2, 4, vec![0.1f32; 8]));
    store.insert("net.b0", Matrix::zeros(1, 4));
    store.insert("net.w1", Matrix::from_vec(4, 1, vec![0.25f32; 4]));
    store.insert("net.b1", Matrix::zeros(1, 1));
    let (out, mut tape) = mlp.forward(&store, &[1.0f32, -0.5]).unwrap();
    assert!(out[0].is_finite());
    let grads = tape.grad_params(&[1.0f32]).unwrap();
    assert!(grads.by_id(0).data().iter().all(|v| v.is_finite()));
}
