//! End-to-end consistency of the upscaling outputs with the coupled solver:
//! for flow parallel to the interface the two interface-condition families
//! must agree once the classical slip coefficient is fitted from the
//! homogenized constants.

use std::sync::Arc;

use poroflow::boundary_layers::solve_boundary_layers;
use poroflow::geometry::InclusionShape;
use poroflow::linalg::SolveOptions;
use poroflow::macro_solver::{solve_coupled, InterfaceMode, MacroProblem};

#[test]
fn fitted_slip_coefficient_reproduces_homogenized_slip() {
    let opts = SolveOptions::default();
    let set =
        solve_boundary_layers(&InclusionShape::Circle { radius: 0.25 }, 3, 32, &opts).unwrap();
    let epsilon = 0.1;
    let e2 = epsilon * epsilon;
    let k_eps = [
        [set.cell.k[0][0] * e2, set.cell.k[0][1] * e2],
        [set.cell.k[1][0] * e2, set.cell.k[1][1] * e2],
    ];
    let n1 = set.constants.n1_bl;
    assert!(n1 < 0.0, "slip constant must be negative, got {n1}");

    // The effective slip length of the homogenized condition is -eps*N1; the
    // classical coefficient reproducing it is alpha = sqrt(k11_eps)/(-eps*N1).
    let alpha_star = k_eps[0][0].sqrt() / (-epsilon * n1);

    let mean_slip = |mode: InterfaceMode| {
        let mut prob = MacroProblem::new(1.0, -0.5, 0.5, 0.0, 64, k_eps, mode);
        prob.f1 = Some(Arc::new(|_, _| 1.0));
        let sol = solve_coupled(&prob, &opts).unwrap();
        assert!(sol.max_div_ff <= 1e-9 && sol.max_div_pm <= 1e-9);
        sol.trace.u_slip.iter().sum::<f64>() / sol.trace.u_slip.len() as f64
    };

    let s_new = mean_slip(InterfaceMode::New {
        epsilon,
        n1_bl: n1,
        ns_bl: set.constants.ns_bl,
        m1_bl: set.constants.m1_bl,
    });
    let s_bj = mean_slip(InterfaceMode::ClassicalBj { alpha: alpha_star });

    assert!(
        s_new > 0.0 && s_bj > 0.0,
        "forward forcing must slip forward: new {s_new:e}, classical {s_bj:e}"
    );
    let spread = (s_new - s_bj).abs() / s_new.abs().max(s_bj.abs());
    assert!(
        spread <= 0.2,
        "fitted classical slip differs by {:.1}% (new {s_new:e}, classical {s_bj:e})",
        100.0 * spread
    );
}
