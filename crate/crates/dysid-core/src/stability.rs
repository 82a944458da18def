//! Second-order stability region and the differentiable reparametrizations
//! that map unconstrained variables strictly inside it.
//!
//! The maps are assembled from scalar graph nodes over length-1 series, so
//! their gradients come out of the same reverse-mode machinery as everything
//! else instead of hand-coded Jacobians.

use crate::graph::{Graph, GraphBuilder};
use crate::signal::TimeSeries;

/// Condition region for `q^2 + a1 q + a2` having both roots strictly inside
/// the unit circle: `|a1| < 2` and `|a1| - 1 < a2 < 1`.
pub fn jury_stable(a1: f64, a2: f64) -> bool {
    a1.is_finite() && a2.is_finite() && a1.abs() < 2.0 && a1.abs() - 1.0 < a2 && a2 < 1.0
}

/// Unconstrained coordinates of a conjugate (or coincident) pole pair:
/// magnitude `sigmoid(rho)`, phase `pi * sigmoid(psi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjPoleParam {
    pub rho: f64,
    pub psi: f64,
}

/// Unconstrained coordinates spanning the whole stability region, both real
/// and complex pole pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullRegionParam {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl ConjPoleParam {
    pub fn new(rho: f64, psi: f64) -> Self {
        ConjPoleParam { rho, psi }
    }

    /// `(a1, a2)` denominator coefficients.
    pub fn to_coeffs(self) -> (f64, f64) {
        conj_coeffs(self.rho, self.psi)
    }

    /// Pulls coefficient adjoints back to `(rho_bar, psi_bar)`.
    pub fn backward(self, a1_bar: f64, a2_bar: f64) -> (f64, f64) {
        conj_backward(self.rho, self.psi, a1_bar, a2_bar)
    }
}

impl FullRegionParam {
    pub fn new(alpha1: f64, alpha2: f64) -> Self {
        FullRegionParam { alpha1, alpha2 }
    }

    pub fn to_coeffs(self) -> (f64, f64) {
        full_coeffs(self.alpha1, self.alpha2)
    }

    pub fn backward(self, a1_bar: f64, a2_bar: f64) -> (f64, f64) {
        full_backward(self.alpha1, self.alpha2, a1_bar, a2_bar)
    }
}

// a1 = -2 sigmoid(rho) cos(pi sigmoid(psi)), a2 = sigmoid(rho)^2
fn build_conj_graph() -> Graph {
    let mut b = GraphBuilder::new();
    let rho = b.input("rho", 1).unwrap();
    let psi = b.input("psi", 1).unwrap();
    let r = b.sigmoid("r", rho).unwrap();
    let phase_unit = b.sigmoid("phase_unit", psi).unwrap();
    let beta = b.scale("beta", phase_unit, std::f64::consts::PI, 0.0).unwrap();
    let c = b.cos("cos_beta", beta).unwrap();
    let rc = b.mul("r_cos", r, c).unwrap();
    let a1 = b.scale("a1", rc, -2.0, 0.0).unwrap();
    let a2 = b.mul("a2", r, r).unwrap();
    let out = b.concat("coeffs", &[a1, a2]).unwrap();
    b.build(out).unwrap()
}

// a1 = 2 tanh(alpha1)
// a2 = |a1| + (2 - |a1|) sigmoid(alpha2) - 1
fn build_full_graph() -> Graph {
    let mut b = GraphBuilder::new();
    let alpha1 = b.input("alpha1", 1).unwrap();
    let alpha2 = b.input("alpha2", 1).unwrap();
    let t = b.tanh("t", alpha1).unwrap();
    let a1 = b.scale("a1", t, 2.0, 0.0).unwrap();
    let mag = b.abs("mag", a1).unwrap();
    let room = b.scale("room", mag, -1.0, 2.0).unwrap();
    let s = b.sigmoid("s", alpha2).unwrap();
    let gain = b.mul("gain", room, s).unwrap();
    let raised = b.add("raised", &[mag, gain]).unwrap();
    let a2 = b.scale("a2", raised, 1.0, -1.0).unwrap();
    let out = b.concat("coeffs", &[a1, a2]).unwrap();
    b.build(out).unwrap()
}

fn scalar(v: f64) -> TimeSeries {
    TimeSeries::from_vec(vec![v]).expect("finite scalar")
}

fn eval_map(graph: &mut Graph, names: (&str, &str), x0: f64, x1: f64) -> (f64, f64) {
    let s0 = scalar(x0);
    let s1 = scalar(x1);
    let out = graph
        .forward_eval(&[(names.0, &s0), (names.1, &s1)])
        .expect("scalar map evaluates");
    (out.get(0, 0), out.get(0, 1))
}

fn backward_map(
    graph: &mut Graph,
    names: (&str, &str),
    x0: f64,
    x1: f64,
    a1_bar: f64,
    a2_bar: f64,
) -> (f64, f64) {
    let s0 = scalar(x0);
    let s1 = scalar(x1);
    graph
        .forward_eval(&[(names.0, &s0), (names.1, &s1)])
        .expect("scalar map evaluates");
    let seed = TimeSeries::from_channels(vec![vec![a1_bar], vec![a2_bar]]).expect("finite seed");
    graph.backward_seeded(&seed).expect("scalar map backward");
    let g0 = graph.input_grad(names.0).unwrap().scalar().unwrap();
    let g1 = graph.input_grad(names.1).unwrap().scalar().unwrap();
    (g0, g1)
}

/// Conjugate-pole map `(rho, psi) -> (a1, a2)`.
pub fn conj_coeffs(rho: f64, psi: f64) -> (f64, f64) {
    eval_map(&mut build_conj_graph(), ("rho", "psi"), rho, psi)
}

/// Adjoint of [`conj_coeffs`].
pub fn conj_backward(rho: f64, psi: f64, a1_bar: f64, a2_bar: f64) -> (f64, f64) {
    backward_map(&mut build_conj_graph(), ("rho", "psi"), rho, psi, a1_bar, a2_bar)
}

/// Whole-region map `(alpha1, alpha2) -> (a1, a2)`.
pub fn full_coeffs(alpha1: f64, alpha2: f64) -> (f64, f64) {
    eval_map(&mut build_full_graph(), ("alpha1", "alpha2"), alpha1, alpha2)
}

/// Adjoint of [`full_coeffs`].
pub fn full_backward(alpha1: f64, alpha2: f64, a1_bar: f64, a2_bar: f64) -> (f64, f64) {
    backward_map(
        &mut build_full_graph(),
        ("alpha1", "alpha2"),
        alpha1,
        alpha2,
        a1_bar,
        a2_bar,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::signal::{iir_filter, TransferFunction};

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Moduli of the two roots of q^2 + a1 q + a2.
    fn root_moduli(a1: f64, a2: f64) -> (f64, f64) {
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let r1 = (-a1 + disc.sqrt()) / 2.0;
            let r2 = (-a1 - disc.sqrt()) / 2.0;
            (r1.abs(), r2.abs())
        } else {
            let m = a2.sqrt();
            (m, m)
        }
    }

    #[test]
    fn jury_examples() {
        assert!(jury_stable(0.0, 0.25));
        assert!(!jury_stable(2.5, 0.0));
        // roots +-j sit on the unit circle: open region excludes them
        let (m1, m2) = root_moduli(0.0, 1.0);
        assert_eq!((m1, m2), (1.0, 1.0));
        assert!(!jury_stable(0.0, 1.0));
    }

    #[test]
    fn jury_agrees_with_root_oracle_on_grid() {
        let mut n_checked = 0;
        for i in 0..60 {
            for j in 0..60 {
                let a1 = -3.0 + 6.0 * (i as f64) / 59.0;
                let a2 = -2.0 + 4.0 * (j as f64) / 59.0;
                let (m1, m2) = root_moduli(a1, a2);
                // stay away from the boundary where strictness is ambiguous
                if (m1 - 1.0).abs() < 1e-9 || (m2 - 1.0).abs() < 1e-9 {
                    continue;
                }
                assert_eq!(jury_stable(a1, a2), m1 < 1.0 && m2 < 1.0, "({a1},{a2})");
                n_checked += 1;
            }
        }
        assert!(n_checked > 3000);
    }

    #[test]
    fn conj_map_matches_closed_form() {
        let cases = [(0.0, 0.0), (1.3, -0.4), (-2.0, 3.1), (0.7, 0.7)];
        for (rho, psi) in cases {
            let (a1, a2) = conj_coeffs(rho, psi);
            let r = sigmoid(rho);
            let beta = std::f64::consts::PI * sigmoid(psi);
            assert_relative_eq!(a1, -2.0 * r * beta.cos(), epsilon = 1e-15);
            assert_relative_eq!(a2, r * r, epsilon = 1e-15);
        }
    }

    #[test]
    fn conj_map_at_origin() {
        let (a1, a2) = conj_coeffs(0.0, 0.0);
        assert!(a1.abs() < 1e-15); // cos(pi/2) in floating point
        assert_relative_eq!(a2, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn conj_map_collapses_for_large_negative_rho() {
        for psi in [-5.0, 0.0, 5.0] {
            let (a1, a2) = conj_coeffs(-20.0, psi);
            assert!(a1.abs() < 1e-8);
            assert!(a2 < 1e-16);
        }
    }

    #[test]
    fn full_map_matches_closed_form() {
        let cases = [(0.0, 0.0), (0.9, -1.2), (-2.4, 0.3), (1.5, 4.0)];
        for (al1, al2) in cases {
            let (a1, a2) = full_coeffs(al1, al2);
            let e1 = 2.0 * al1.tanh();
            let e2 = e1.abs() + (2.0 - e1.abs()) * sigmoid(al2) - 1.0;
            assert_relative_eq!(a1, e1, epsilon = 1e-15);
            assert_relative_eq!(a2, e2, epsilon = 1e-14);
        }
    }

    #[test]
    fn full_map_at_origin_and_asymptote() {
        let (a1, a2) = full_coeffs(0.0, 0.0);
        assert_eq!(a1, 0.0);
        assert_eq!(a2, 0.0);
        let (_, a2) = full_coeffs(0.0, 20.0);
        assert!(a2 < 1.0);
        assert!((1.0 - a2) < 1e-8);
    }

    #[test]
    fn conj_sweep_stays_stable_and_conjugate() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..10_000 {
            let rho = rng.gen_range(-10.0..10.0);
            let psi = rng.gen_range(-10.0..10.0);
            let (a1, a2) = conj_coeffs(rho, psi);
            assert!(jury_stable(a1, a2), "({rho},{psi}) -> ({a1},{a2})");
            assert!(a2 >= a1 * a1 / 4.0 - 1e-15, "not conjugate: ({a1},{a2})");
        }
    }

    #[test]
    fn full_sweep_stays_stable_and_reaches_both_root_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let (mut real_seen, mut complex_seen) = (0usize, 0usize);
        for _ in 0..10_000 {
            let al1 = rng.gen_range(-5.0..5.0);
            let al2 = rng.gen_range(-5.0..5.0);
            let (a1, a2) = full_coeffs(al1, al2);
            assert!(jury_stable(a1, a2), "({al1},{al2}) -> ({a1},{a2})");
            let (m1, m2) = root_moduli(a1, a2);
            assert!(m1 < 1.0 && m2 < 1.0);
            if a2 < a1 * a1 / 4.0 {
                real_seen += 1;
            } else if a2 > a1 * a1 / 4.0 {
                complex_seen += 1;
            }
        }
        assert!(real_seen > 100, "real pole pairs: {real_seen}");
        assert!(complex_seen > 100, "complex pole pairs: {complex_seen}");
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..50 {
            let rho = rng.gen_range(-3.0..3.0);
            let psi = rng.gen_range(-3.0..3.0);
            // seed adjoints pick out one output row at a time
            for (a1_bar, a2_bar) in [(1.0, 0.0), (0.0, 1.0)] {
                let (g_rho, g_psi) = conj_backward(rho, psi, a1_bar, a2_bar);
                let pick = |a: (f64, f64)| a1_bar * a.0 + a2_bar * a.1;
                let fd_rho = (pick(conj_coeffs(rho + h, psi)) - pick(conj_coeffs(rho - h, psi)))
                    / (2.0 * h);
                let fd_psi = (pick(conj_coeffs(rho, psi + h)) - pick(conj_coeffs(rho, psi - h)))
                    / (2.0 * h);
                assert_relative_eq!(g_rho, fd_rho, max_relative = 1e-6, epsilon = 1e-9);
                assert_relative_eq!(g_psi, fd_psi, max_relative = 1e-6, epsilon = 1e-9);
            }

            // keep away from the abs kink at alpha1 = 0
            let al1 = rng.gen_range(0.2..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let al2 = rng.gen_range(-3.0..3.0);
            for (a1_bar, a2_bar) in [(1.0, 0.0), (0.0, 1.0)] {
                let (g1, g2) = full_backward(al1, al2, a1_bar, a2_bar);
                let pick = |a: (f64, f64)| a1_bar * a.0 + a2_bar * a.1;
                let fd1 =
                    (pick(full_coeffs(al1 + h, al2)) - pick(full_coeffs(al1 - h, al2))) / (2.0 * h);
                let fd2 =
                    (pick(full_coeffs(al1, al2 + h)) - pick(full_coeffs(al1, al2 - h))) / (2.0 * h);
                assert_relative_eq!(g1, fd1, max_relative = 1e-6, epsilon = 1e-9);
                assert_relative_eq!(g2, fd2, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn reparametrized_denominators_stay_finite_on_long_horizons() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let t_len = 100_000;
        let u: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..3 {
            let (a1, a2) = conj_coeffs(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let tf = TransferFunction::new(vec![1.0, 0.5], vec![a1, a2]);
            let y = iir_filter(&tf, &u).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));

            let (a1, a2) = full_coeffs(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let tf = TransferFunction::new(vec![1.0, 0.5], vec![a1, a2]);
            let y = iir_filter(&tf, &u).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }
}
