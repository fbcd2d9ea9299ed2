//! Temporary diagnostics (removed before release).

use cableinv::*;
use ndarray::Array2;

#[test]
#[ignore]
fn tree_inversion_trace() {
    let spec = builtin_example(ExampleId::Ex34).unwrap();
    let run_tgrid = spec.run_tgrid().unwrap();
    let g_true = (spec.g_true)(&run_tgrid);
    let problem0 = InverseProblem {
        params: spec.params.clone(),
        geometry: spec.geometry.clone(),
        tgrid: run_tgrid.clone(),
        boundary: spec.boundary.clone(),
        data: Observation {
            domain: spec.obs,
            values: Array2::zeros((run_tgrid.n_steps(), spec.geometry.n_nodes())),
        },
        delta: 0.0,
        tau: spec.tau,
        time_dependent: spec.time_dependent,
        denominator_norm: spec.denominator_norm,
        scheme: spec.scheme,
        clip_negative: spec.clip_negative,
    };
    let v_true = problem0.forward(&g_true).unwrap();
    println!(
        "V range [{:.4}, {:.4}]",
        v_true.values.iter().fold(f64::INFINITY, |m, &x| m.min(x)),
        v_true.values.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
    );
    let v_gamma = restrict_to_gamma(&v_true, spec.obs, &spec.geometry).unwrap();
    let noise = NoiseSpec { a: 0.5, b: 0.5, delta_rel: 0.01, seed: 1 };
    let (data, delta) = add_noise(&v_gamma, &noise, &run_tgrid, &spec.geometry);
    println!("delta = {delta:.6e}, tau*delta = {:.6e}", spec.tau * delta);
    let mut problem = problem0.clone();
    problem.data = data;
    problem.delta = delta;

    let mut g = problem.zero_initial_guess();
    for k in 1..=60 {
        let v = problem.forward(&g).unwrap();
        let vg = restrict_to_gamma(&v, problem.data.domain, &problem.geometry).unwrap();
        let residual = problem.data.sub(&vg).unwrap();
        let rn = gamma_norm(&residual, &problem.tgrid, &problem.geometry);
        let u = problem.adjoint(&g, &residual).unwrap();
        let grad = gradient_fields(&problem.params, &v, &u, &problem.tgrid, false);
        let w = step_size(rn, &grad, problem.denominator_norm, &problem.tgrid, &problem.geometry).unwrap();
        if k <= 12 || k % 10 == 0 {
            let gmax = grad.ion(0).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            let umax = u.values.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            println!(
                "k={k:3} rn={rn:.6e} w={w:.3e} max|grad|={gmax:.3e} max|U|={umax:.3e} minG={:.4} maxG={:.4}",
                g.ion(0).iter().fold(f64::INFINITY, |m, &x| m.min(x)),
                g.ion(0).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)),
            );
        }
        g = apply_update(&g, &grad, w, false);
    }
}
