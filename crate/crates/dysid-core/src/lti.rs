//! The differentiable linear dynamical block: forward filtering plus the
//! closed-form backward passes for numerator, denominator and input, in SISO
//! and MIMO form, with the FIR specialization.
//!
//! Gradients come from auxiliary filtering. With `s = (1/A) u` the numerator
//! adjoint is a set of shifted dot products against the output adjoint; with
//! `w = -(1/A) y` the denominator adjoint has the same structure one delay
//! later; the input adjoint is the adjoint sequence filtered in reverse time
//! through the block itself, which keeps the cost linear in the horizon.

use crate::error::{Error, Result};
use crate::par::{map_indexed, ExecMode};
use crate::signal::{
    convolve, flip, iir_filter, iir_filter_counted, xcorr_lag, TimeSeries, TransferFunction,
};

/// Gradients produced by one SISO block backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Loss gradient w.r.t. the numerator coefficients, length `n_b + 1`.
    pub b_bar: Vec<f64>,
    /// Loss gradient w.r.t. the denominator coefficients, length `n_a`.
    pub a_bar: Vec<f64>,
    /// Loss gradient w.r.t. the input sequence.
    pub u_bar: Vec<f64>,
}

/// Filters a sequence through the block (rest initial state).
pub fn forward(tf: &TransferFunction, u: &[f64]) -> Result<Vec<f64>> {
    iir_filter(tf, u)
}

/// Forward pass with an executed-multiplication count, used to pin the
/// `T * (n_b + n_a + 1)` operator cost.
pub fn forward_counted(tf: &TransferFunction, u: &[f64]) -> Result<(Vec<f64>, u64)> {
    iir_filter_counted(tf, u)
}

/// Loss gradient w.r.t. the numerator coefficients.
///
/// Runs one sensitivity filtering `s = (1/A) u`, then takes the dot product of
/// the output adjoint with shifted versions of `s`.
pub fn backward_numerator(u: &[f64], a: &[f64], n_b: usize, y_bar: &[f64]) -> Result<Vec<f64>> {
    check_same_len("backward_numerator", u, y_bar)?;
    let sens = TransferFunction::new(vec![1.0], a.to_vec());
    let s = iir_filter(&sens, u)?;
    Ok((0..=n_b).map(|j| xcorr_lag(&s, y_bar, j as isize)).collect())
}

/// Loss gradient w.r.t. the denominator coefficients.
///
/// `y` must be the block's own forward output. Runs one sensitivity filtering
/// `w = -(1/A) y`, then takes shifted dot products with the output adjoint.
pub fn backward_denominator(y: &[f64], a: &[f64], y_bar: &[f64]) -> Result<Vec<f64>> {
    check_same_len("backward_denominator", y, y_bar)?;
    let sens = TransferFunction::new(vec![-1.0], a.to_vec());
    let w = iir_filter(&sens, y)?;
    Ok((1..=a.len())
        .map(|j| xcorr_lag(&w, y_bar, j as isize))
        .collect())
}

/// Loss gradient w.r.t. the input sequence: the adjoint filtered in reverse
/// time through the block, then reversed. Linear in the sequence length.
pub fn backward_input(tf: &TransferFunction, y_bar: &[f64]) -> Result<Vec<f64>> {
    Ok(flip(&iir_filter(tf, &flip(y_bar))?))
}

/// Full SISO backward pass.
pub fn backward(
    tf: &TransferFunction,
    u: &[f64],
    y: &[f64],
    y_bar: &[f64],
) -> Result<GradientBundle> {
    Ok(GradientBundle {
        b_bar: backward_numerator(u, &tf.a, tf.n_b(), y_bar)?,
        a_bar: backward_denominator(y, &tf.a, y_bar)?,
        u_bar: backward_input(tf, y_bar)?,
    })
}

/// FIR forward pass: causal convolution of the input with the numerator,
/// truncated to the input length.
pub fn fir_forward(b: &[f64], u: &[f64]) -> Vec<f64> {
    let mut y = convolve(b, u);
    y.truncate(u.len());
    y
}

/// FIR backward pass: both adjoints are cross-correlations.
///
/// Returns `(b_bar, u_bar)` with `b_bar[j] = (u ⋆ y_bar)_j` and
/// `u_bar[tau] = (b ⋆ y_bar)_tau`.
pub fn fir_backward(u: &[f64], b: &[f64], y_bar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len("fir_backward", u, y_bar)?;
    let b_bar = (0..b.len())
        .map(|j| xcorr_lag(u, y_bar, j as isize))
        .collect();
    let u_bar = (0..u.len())
        .map(|tau| xcorr_lag(b, y_bar, tau as isize))
        .collect();
    Ok((b_bar, u_bar))
}

fn check_same_len(context: &str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{} samples", x.len()),
            got: format!("{}", y.len()),
        });
    }
    Ok(())
}

/// A dense grid of SISO transfer functions mapping `inputs` channels to
/// `outputs` channels; entry `(k, h)` couples input channel `h` to output
/// channel `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoOperator {
    entries: Vec<TransferFunction>,
    inputs: usize,
    outputs: usize,
}

/// Per-entry coefficient gradients plus the multichannel input adjoint.
#[derive(Debug, Clone)]
pub struct MimoGradients {
    /// `b_bar[k][h]` for entry `(k, h)`.
    pub b_bar: Vec<Vec<Vec<f64>>>,
    /// `a_bar[k][h]` for entry `(k, h)`.
    pub a_bar: Vec<Vec<Vec<f64>>>,
    /// Input adjoint, `inputs` channels.
    pub u_bar: TimeSeries,
}

impl MimoOperator {
    pub fn new(entries: Vec<TransferFunction>, inputs: usize, outputs: usize) -> Result<Self> {
        if entries.len() != inputs * outputs {
            return Err(Error::ShapeMismatch {
                context: "MimoOperator::new".into(),
                expected: format!("{} entries", inputs * outputs),
                got: format!("{}", entries.len()),
            });
        }
        Ok(MimoOperator {
            entries,
            inputs,
            outputs,
        })
    }

    pub fn siso(tf: TransferFunction) -> Self {
        MimoOperator {
            entries: vec![tf],
            inputs: 1,
            outputs: 1,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Entry `(k, h)`: output channel `k`, input channel `h`.
    pub fn entry(&self, k: usize, h: usize) -> &TransferFunction {
        &self.entries[k * self.inputs + h]
    }

    pub fn entry_mut(&mut self, k: usize, h: usize) -> &mut TransferFunction {
        &mut self.entries[k * self.inputs + h]
    }

    /// MIMO forward: output channel `k` is the sum over input channels of the
    /// per-entry SISO filterings. Output channels are independent and run in
    /// parallel under [`ExecMode::Parallel`].
    pub fn forward(&self, u: &TimeSeries, mode: ExecMode) -> Result<TimeSeries> {
        if u.channels() != self.inputs {
            return Err(Error::ShapeMismatch {
                context: "MimoOperator::forward".into(),
                expected: format!("{} input channels", self.inputs),
                got: format!("{}", u.channels()),
            });
        }
        let t_len = u.samples();
        let rows: Vec<Result<Vec<f64>>> = map_indexed(mode, self.outputs, |k| {
            let mut acc = vec![0.0; t_len];
            for h in 0..self.inputs {
                let y_kh = iir_filter(self.entry(k, h), u.channel(h))?;
                for (a, v) in acc.iter_mut().zip(y_kh) {
                    *a += v;
                }
            }
            Ok(acc)
        });
        TimeSeries::from_channels(rows.into_iter().collect::<Result<Vec<_>>>()?)
    }

    /// MIMO backward: coefficient gradients of entry `(k, h)` follow from
    /// output adjoint channel `k` and input channel `h`; the input adjoint of
    /// channel `h` sums the per-entry input adjoints over `k`. Entries are
    /// independent and run in parallel under [`ExecMode::Parallel`].
    pub fn backward(
        &self,
        u: &TimeSeries,
        y_bar: &TimeSeries,
        mode: ExecMode,
    ) -> Result<MimoGradients> {
        if u.channels() != self.inputs || y_bar.channels() != self.outputs {
            return Err(Error::ShapeMismatch {
                context: "MimoOperator::backward".into(),
                expected: format!("{} in / {} out channels", self.inputs, self.outputs),
                got: format!("{} in / {} out", u.channels(), y_bar.channels()),
            });
        }
        if u.samples() != y_bar.samples() {
            return Err(Error::ShapeMismatch {
                context: "MimoOperator::backward".into(),
                expected: format!("{} samples", u.samples()),
                got: format!("{}", y_bar.samples()),
            });
        }
        let per_entry: Vec<Result<GradientBundle>> =
            map_indexed(mode, self.outputs * self.inputs, |idx| {
                let (k, h) = (idx / self.inputs, idx % self.inputs);
                let tf = self.entry(k, h);
                // The per-entry forward output is not part of the summed block
                // output, so recompute it for the denominator sensitivity.
                let y_kh = iir_filter(tf, u.channel(h))?;
                backward(tf, u.channel(h), &y_kh, y_bar.channel(k))
            });
        let per_entry = per_entry.into_iter().collect::<Result<Vec<_>>>()?;

        let mut b_bar = vec![Vec::new(); self.outputs];
        let mut a_bar = vec![Vec::new(); self.outputs];
        let mut u_bar = TimeSeries::zeros(u.samples(), self.inputs);
        for (idx, bundle) in per_entry.into_iter().enumerate() {
            let (k, h) = (idx / self.inputs, idx % self.inputs);
            let ch = u_bar.channel_mut(h);
            for (dst, v) in ch.iter_mut().zip(&bundle.u_bar) {
                *dst += v;
            }
            b_bar[k].push(bundle.b_bar);
            a_bar[k].push(bundle.a_bar);
        }
        Ok(MimoGradients { b_bar, a_bar, u_bar })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::signal::impulse_response;

    fn random_stable_tf(rng: &mut impl Rng, n_b: usize, n_a: usize) -> TransferFunction {
        let b: Vec<f64> = (0..=n_b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = random_stable_den(rng, n_a);
        TransferFunction::new(b, a)
    }

    // Stable denominator by expanding factors with pole magnitude <= 0.9.
    fn random_stable_den(rng: &mut impl Rng, n_a: usize) -> Vec<f64> {
        let mut poly = vec![1.0];
        let mut remaining = n_a;
        while remaining >= 2 {
            let r = rng.gen_range(0.05..0.9);
            let beta = rng.gen_range(0.1..std::f64::consts::PI - 0.1);
            poly = convolve(&poly, &[1.0, -2.0 * r * beta.cos(), r * r]);
            remaining -= 2;
        }
        if remaining == 1 {
            let p = rng.gen_range(-0.9..0.9);
            poly = convolve(&poly, &[1.0, -p]);
        }
        poly[1..].to_vec()
    }

    /// Central finite differences of L = y_bar . f(theta) over one parameter
    /// vector, where f re-runs the given closure.
    fn fd_grad(mut eval: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.to_vec();
                let mut minus = theta.to_vec();
                let step = h * theta[i].abs().max(1.0);
                plus[i] += step;
                minus[i] -= step;
                (eval(&plus) - eval(&minus)) / (2.0 * step)
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
        let scale = reference
            .iter()
            .chain(analytic)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        analytic
            .iter()
            .zip(reference)
            .fold(0.0f64, |m, (a, r)| m.max((a - r).abs() / scale))
    }

    fn dot(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn forward_delegates_to_filter() {
        let tf = TransferFunction::new(vec![1.0], vec![-0.5]);
        let u = [1.0, 0.0, 0.0, 0.0];
        let y = forward(&tf, &u).unwrap();
        assert_eq!(y, iir_filter(&tf, &u).unwrap());
        assert_eq!(y, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn backward_numerator_fir_case_is_cross_correlation() {
        // With an empty denominator the sensitivity equals the input.
        let u = [0.5, -1.0, 2.0, 0.25];
        let y_bar = [1.0, 1.0, -1.0, 3.0];
        let b_bar = backward_numerator(&u, &[], 2, &y_bar).unwrap();
        for (j, &v) in b_bar.iter().enumerate() {
            assert_eq!(v, xcorr_lag(&u, &y_bar, j as isize));
        }
    }

    #[test]
    fn backward_numerator_single_sample() {
        let b_bar = backward_numerator(&[2.0], &[0.7], 2, &[3.0]).unwrap();
        assert_eq!(b_bar, vec![6.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_denominator_single_sample_is_zero() {
        // y(0) does not depend on the denominator.
        let a_bar = backward_denominator(&[2.0], &[0.3], &[5.0]).unwrap();
        assert_eq!(a_bar, vec![0.0]);
    }

    #[test]
    fn backward_denominator_two_samples_hand_case() {
        // y(1) = b0 u(1) + b1 u(0) - a1 y(0), so dL/da1 = -y_bar(1) * y(0).
        let tf = TransferFunction::new(vec![1.0, 0.5], vec![0.3]);
        let u = [2.0, -1.0];
        let y = forward(&tf, &u).unwrap();
        let y_bar = [0.7, -1.3];
        let a_bar = backward_denominator(&y, &tf.a, &y_bar).unwrap();
        assert_relative_eq!(a_bar[0], -y_bar[1] * y[0], max_relative = 1e-14);
    }

    #[test]
    fn backward_input_identity_and_delay() {
        let y_bar = [1.0, 2.0, 3.0, 4.0];
        let u_bar = backward_input(&TransferFunction::identity(), &y_bar).unwrap();
        assert_eq!(u_bar, y_bar.to_vec());

        let delay = TransferFunction::new(vec![0.0, 1.0], vec![]);
        let u_bar = backward_input(&delay, &y_bar).unwrap();
        assert_eq!(u_bar, vec![2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn backward_input_matches_impulse_response_correlation() {
        // Quadratic-cost oracle: u_bar_tau = (g ⋆ y_bar)_tau at non-negative lags.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let tf = random_stable_tf(&mut rng, 2, 2);
            let t_len = 96;
            let y_bar: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u_bar = backward_input(&tf, &y_bar).unwrap();
            let g = impulse_response(&tf, t_len).unwrap().g;
            for tau in 0..t_len {
                let oracle = xcorr_lag(&g, &y_bar, tau as isize);
                assert!(
                    (u_bar[tau] - oracle).abs() < 1e-9,
                    "tau={tau}: {} vs {}",
                    u_bar[tau],
                    oracle
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t_len = 64;
        for _ in 0..10 {
            let n_b = rng.gen_range(0..=3);
            let n_a = rng.gen_range(1..=3);
            let tf = random_stable_tf(&mut rng, n_b, n_a);
            let u: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y_bar: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = forward(&tf, &u).unwrap();
            let bundle = backward(&tf, &u, &y, &y_bar).unwrap();

            let fd_b = fd_grad(
                |b| {
                    let t = TransferFunction::new(b.to_vec(), tf.a.clone());
                    dot(&y_bar, &forward(&t, &u).unwrap())
                },
                &tf.b,
                1e-6,
            );
            let fd_a = fd_grad(
                |a| {
                    let t = TransferFunction::new(tf.b.clone(), a.to_vec());
                    dot(&y_bar, &forward(&t, &u).unwrap())
                },
                &tf.a,
                1e-6,
            );
            let fd_u = fd_grad(|uu| dot(&y_bar, &forward(&tf, uu).unwrap()), &u, 1e-6);

            assert!(max_rel_err(&bundle.b_bar, &fd_b) < 1e-6, "numerator");
            assert!(max_rel_err(&bundle.a_bar, &fd_a) < 1e-6, "denominator");
            assert!(max_rel_err(&bundle.u_bar, &fd_u) < 1e-6, "input");
        }
    }

    #[test]
    fn sensitivity_shift_structure_is_exact() {
        // Filtering the j-delayed input through 1/A equals shifting the
        // lag-zero sensitivity, bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tf = random_stable_tf(&mut rng, 3, 2);
        let t_len = 50;
        let u: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sens = TransferFunction::new(vec![1.0], tf.a.clone());
        let s0 = iir_filter(&sens, &u).unwrap();
        for j in 1..=3usize {
            let mut delayed = vec![0.0; t_len];
            delayed[j..].copy_from_slice(&u[..t_len - j]);
            let s_j = iir_filter(&sens, &delayed).unwrap();
            for t in 0..t_len {
                let expected = if t >= j { s0[t - j] } else { 0.0 };
                assert_eq!(s_j[t], expected, "t={t}, j={j}");
            }
        }
    }

    #[test]
    fn input_backward_is_operator_transpose() {
        // <backward_input(G, y_bar), v> == <y_bar, forward(G, v)>
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let tf = random_stable_tf(&mut rng, 3, 3);
            let t_len = 80;
            let v: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y_bar: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs = dot(&backward_input(&tf, &y_bar).unwrap(), &v);
            let rhs = dot(&y_bar, &forward(&tf, &v).unwrap());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn fir_paths_match_general_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tf = TransferFunction::new(b.clone(), vec![]);
            let t_len = 64;
            let u: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y_bar: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let y_fir = fir_forward(&b, &u);
            let y_gen = forward(&tf, &u).unwrap();
            let (b_bar, u_bar) = fir_backward(&u, &b, &y_bar).unwrap();
            let bundle = backward(&tf, &u, &y_gen, &y_bar).unwrap();

            for t in 0..t_len {
                assert_relative_eq!(y_fir[t], y_gen[t], epsilon = 1e-12);
                assert_relative_eq!(u_bar[t], bundle.u_bar[t], epsilon = 1e-12);
            }
            for j in 0..b.len() {
                assert_relative_eq!(b_bar[j], bundle.b_bar[j], epsilon = 1e-12);
            }
            assert!(bundle.a_bar.is_empty());
        }
    }

    #[test]
    fn fir_unit_numerator() {
        let u = [1.0, -2.0, 3.0];
        let y_bar = [0.5, 0.5, 1.0];
        let (b_bar, u_bar) = fir_backward(&u, &[1.0], &y_bar).unwrap();
        assert_eq!(u_bar, y_bar.to_vec());
        assert_eq!(b_bar, vec![dot(&u, &y_bar)]);
    }

    #[test]
    fn mimo_reduces_to_siso() {
        let tf = TransferFunction::new(vec![0.4, -0.2], vec![-0.5]);
        let op = MimoOperator::siso(tf.clone());
        let u = TimeSeries::from_vec(vec![1.0, 2.0, -0.5, 0.0]).unwrap();
        let y = op.forward(&u, ExecMode::Sequential).unwrap();
        assert_eq!(y.channel(0), &forward(&tf, u.channel(0)).unwrap()[..]);
    }

    #[test]
    fn mimo_diagonal_identity_passes_through() {
        let ident = TransferFunction::identity();
        let zero = TransferFunction::new(vec![0.0], vec![]);
        let op = MimoOperator::new(
            vec![ident.clone(), zero.clone(), zero, ident],
            2,
            2,
        )
        .unwrap();
        let u = TimeSeries::from_channels(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let y = op.forward(&u, ExecMode::Sequential).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn mimo_forward_matches_per_entry_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let entries: Vec<TransferFunction> =
            (0..4).map(|_| random_stable_tf(&mut rng, 2, 2)).collect();
        let op = MimoOperator::new(entries.clone(), 2, 2).unwrap();
        let t_len = 48;
        let u = TimeSeries::from_channels(vec![
            (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ])
        .unwrap();
        let y = op.forward(&u, ExecMode::Sequential).unwrap();
        for k in 0..2 {
            let mut expect = vec![0.0; t_len];
            for h in 0..2 {
                let part = forward(&entries[k * 2 + h], u.channel(h)).unwrap();
                for (e, p) in expect.iter_mut().zip(part) {
                    *e += p;
                }
            }
            assert_eq!(y.channel(k), &expect[..]);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn mimo_parallel_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let entries: Vec<TransferFunction> =
            (0..9).map(|_| random_stable_tf(&mut rng, 3, 2)).collect();
        let op = MimoOperator::new(entries, 3, 3).unwrap();
        let t_len = 128;
        let u = TimeSeries::from_channels(
            (0..3)
                .map(|_| (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap();
        let y_bar = TimeSeries::from_channels(
            (0..3)
                .map(|_| (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap();
        let y_seq = op.forward(&u, ExecMode::Sequential).unwrap();
        let y_par = op.forward(&u, ExecMode::Parallel).unwrap();
        assert_eq!(y_seq, y_par);
        let g_seq = op.backward(&u, &y_bar, ExecMode::Sequential).unwrap();
        let g_par = op.backward(&u, &y_bar, ExecMode::Parallel).unwrap();
        assert_eq!(g_seq.u_bar, g_par.u_bar);
        assert_eq!(g_seq.b_bar, g_par.b_bar);
        assert_eq!(g_seq.a_bar, g_par.a_bar);
    }

    #[test]
    fn mimo_backward_zero_adjoint_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let entries: Vec<TransferFunction> =
            (0..4).map(|_| random_stable_tf(&mut rng, 1, 1)).collect();
        let op = MimoOperator::new(entries, 2, 2).unwrap();
        let u = TimeSeries::from_channels(vec![vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let y_bar = TimeSeries::zeros(2, 2);
        let grads = op.backward(&u, &y_bar, ExecMode::Sequential).unwrap();
        assert!(grads.u_bar.as_slice().iter().all(|&v| v == 0.0));
        for k in 0..2 {
            for h in 0..2 {
                assert!(grads.b_bar[k][h].iter().all(|&v| v == 0.0));
                assert!(grads.a_bar[k][h].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mimo_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let entries: Vec<TransferFunction> =
            (0..4).map(|_| random_stable_tf(&mut rng, 1, 2)).collect();
        let op = MimoOperator::new(entries, 2, 2).unwrap();
        let t_len = 40;
        let u = TimeSeries::from_channels(vec![
            (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ])
        .unwrap();
        let y_bar = TimeSeries::from_channels(vec![
            (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ])
        .unwrap();
        let loss = |op: &MimoOperator| {
            let y = op.forward(&u, ExecMode::Sequential).unwrap();
            (0..2).map(|k| dot(y_bar.channel(k), y.channel(k))).sum()
        };
        let grads = op.backward(&u, &y_bar, ExecMode::Sequential).unwrap();
        for k in 0..2 {
            for h in 0..2 {
                let base = op.entry(k, h).clone();
                let fd_b = fd_grad(
                    |b| {
                        let mut p = op.clone();
                        p.entry_mut(k, h).b = b.to_vec();
                        loss(&p)
                    },
                    &base.b,
                    1e-6,
                );
                let fd_a = fd_grad(
                    |a| {
                        let mut p = op.clone();
                        p.entry_mut(k, h).a = a.to_vec();
                        loss(&p)
                    },
                    &base.a,
                    1e-6,
                );
                assert!(max_rel_err(&grads.b_bar[k][h], &fd_b) < 1e-6);
                assert!(max_rel_err(&grads.a_bar[k][h], &fd_a) < 1e-6);
            }
        }
    }

    #[test]
    fn forward_cost_is_horizon_times_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n_b = rng.gen_range(0..=5);
            let n_a = rng.gen_range(0..=5);
            let tf = random_stable_tf(&mut rng, n_b, n_a);
            let t_len = rng.gen_range(1..=200);
            let u: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, count) = forward_counted(&tf, &u).unwrap();
            assert_eq!(count, (t_len as u64) * ((n_b + n_a + 1) as u64));
        }
    }
}
