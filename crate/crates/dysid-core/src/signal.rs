//! Deterministic sequence kernels: time reversal, convolution, cross-correlation,
//! recurrent IIR filtering and impulse-response extraction.
//!
//! All kernels are pure functions over `f64` slices with zero initial conditions
//! and zero-based time indexing. The recurrence in [`iir_filter`] is evaluated
//! strictly sequentially over time; there is no block-parallel scan.

use crate::error::{Error, Result};

/// A real-valued multichannel signal with `samples` time steps.
///
/// Storage is channel-major: each channel is a contiguous `samples`-length slice,
/// which keeps per-channel filtering allocation-free.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    samples: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TimeSeries {
    /// All-zero series of the given shape.
    pub fn zeros(samples: usize, channels: usize) -> Self {
        assert!(samples >= 1 && channels >= 1, "series shape must be >= 1x1");
        TimeSeries {
            samples,
            channels,
            data: vec![0.0; samples * channels],
        }
    }

    /// Single-channel series from a sample vector.
    pub fn from_vec(samples: Vec<f64>) -> Result<Self> {
        Self::from_channels(vec![samples])
    }

    /// Builds a series from per-channel sample vectors (all the same length).
    pub fn from_channels(channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() || channels[0].is_empty() {
            return Err(Error::ShapeMismatch {
                context: "TimeSeries::from_channels".into(),
                expected: "at least one channel with at least one sample".into(),
                got: "empty".into(),
            });
        }
        let samples = channels[0].len();
        let mut data = Vec::with_capacity(samples * channels.len());
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != samples {
                return Err(Error::ShapeMismatch {
                    context: format!("TimeSeries::from_channels channel {c}"),
                    expected: format!("{samples} samples"),
                    got: format!("{}", ch.len()),
                });
            }
            if let Some(t) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericalRange {
                    index: t,
                    context: format!("non-finite sample in channel {c}"),
                });
            }
            data.extend_from_slice(ch);
        }
        Ok(TimeSeries {
            samples,
            channels: channels.len(),
            data,
        })
    }

    /// Number of time samples.
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Number of channels.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Contiguous sample slice of channel `c`.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Mutable sample slice of channel `c`.
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Sample at time `t`, channel `c`.
    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[c * self.samples + t]
    }

    /// Sets the sample at time `t`, channel `c`.
    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        self.data[c * self.samples + t] = v;
    }

    /// Flat view of all samples, channel-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Flat mutable view of all samples, channel-major.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// True when `other` has the same (samples, channels) shape.
    pub fn same_shape(&self, other: &TimeSeries) -> bool {
        self.samples == other.samples && self.channels == other.channels
    }

    /// `(samples, channels)` pair, handy in error messages.
    pub fn shape(&self) -> (usize, usize) {
        (self.samples, self.channels)
    }

    /// The single value of a 1x1 series.
    pub fn scalar(&self) -> Option<f64> {
        (self.samples == 1 && self.channels == 1).then(|| self.data[0])
    }
}

/// A SISO rational operator in the unit-delay variable.
///
/// `b` holds the numerator coefficients `b[0]..b[n_b]`; `a` holds the
/// denominator coefficients starting at delay one (`a[0]` multiplies the
/// one-step-old output), so an empty `a` denotes a finite impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl TransferFunction {
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Self {
        assert!(!b.is_empty(), "numerator needs at least one coefficient");
        TransferFunction { b, a }
    }

    /// The identity operator (output equals input).
    pub fn identity() -> Self {
        TransferFunction::new(vec![1.0], vec![])
    }

    /// Discrete accumulator: output is the running sum of the input.
    pub fn integrator() -> Self {
        TransferFunction::new(vec![1.0], vec![-1.0])
    }

    /// Numerator order.
    pub fn n_b(&self) -> usize {
        self.b.len() - 1
    }

    /// Denominator order.
    pub fn n_a(&self) -> usize {
        self.a.len()
    }

    /// True when there are no denominator coefficients.
    pub fn is_fir(&self) -> bool {
        self.a.is_empty()
    }
}

/// Truncated impulse response of a transfer function.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub g: Vec<f64>,
}

/// Time reversal: `result[t] = v[T-t-1]`.
pub fn flip(v: &[f64]) -> Vec<f64> {
    v.iter().rev().copied().collect()
}

/// Full linear convolution; output length `n_x + n_y - 1`.
pub fn convolve(x: &[f64], y: &[f64]) -> Vec<f64> {
    let (n_x, n_y) = (x.len(), y.len());
    assert!(n_x >= 1 && n_y >= 1);
    let mut out = vec![0.0; n_x + n_y - 1];
    for (i, o) in out.iter_mut().enumerate() {
        let j_lo = (i + 1).saturating_sub(n_y);
        let j_hi = i.min(n_x - 1);
        let mut acc = 0.0;
        for j in j_lo..=j_hi {
            acc += x[j] * y[i - j];
        }
        *o = acc;
    }
    out
}

/// Full cross-correlation.
///
/// The result covers lags `-n_x+1 ..= n_y-1`; entry `i` of the returned vector
/// holds lag `i - (n_x - 1)`. Use [`xcorr_lag`] or slice from `n_x - 1` for the
/// non-negative-lag segment.
pub fn cross_correlate(x: &[f64], y: &[f64]) -> Vec<f64> {
    let (n_x, n_y) = (x.len(), y.len());
    assert!(n_x >= 1 && n_y >= 1);
    let mut out = vec![0.0; n_x + n_y - 1];
    for (idx, o) in out.iter_mut().enumerate() {
        let lag = idx as isize - (n_x as isize - 1);
        *o = xcorr_lag(x, y, lag);
    }
    out
}

/// Single cross-correlation value at the given lag: `sum_j x[j-lag] * y[j]`.
pub fn xcorr_lag(x: &[f64], y: &[f64], lag: isize) -> f64 {
    let (n_x, n_y) = (x.len() as isize, y.len() as isize);
    let j_lo = lag.max(0);
    let j_hi = (n_x + lag - 1).min(n_y - 1);
    let mut acc = 0.0;
    let mut j = j_lo;
    while j <= j_hi {
        acc += x[(j - lag) as usize] * y[j as usize];
        j += 1;
    }
    acc
}

/// Filters `u` through the recurrence
/// `y(t) = sum_k b[k] u(t-k) - sum_k a[k] y(t-k)` from rest.
///
/// Out-of-range terms are zero. Returns a numerical-range error with the first
/// offending time index if the output leaves the finite range (an unstable
/// operator on a long horizon).
pub fn iir_filter(tf: &TransferFunction, u: &[f64]) -> Result<Vec<f64>> {
    iir_filter_inner(tf, u, &mut NoCount)
}

/// Same as [`iir_filter`] but also reports the number of coefficient
/// multiplications executed, one per coefficient per time step.
pub fn iir_filter_counted(tf: &TransferFunction, u: &[f64]) -> Result<(Vec<f64>, u64)> {
    let mut count = MultCount(0);
    let y = iir_filter_inner(tf, u, &mut count)?;
    Ok((y, count.0))
}

trait CountMults {
    fn add(&mut self, n: u64);
}

struct NoCount;
impl CountMults for NoCount {
    #[inline(always)]
    fn add(&mut self, _n: u64) {}
}

struct MultCount(u64);
impl CountMults for MultCount {
    #[inline(always)]
    fn add(&mut self, n: u64) {
        self.0 += n;
    }
}

fn iir_filter_inner<C: CountMults>(
    tf: &TransferFunction,
    u: &[f64],
    count: &mut C,
) -> Result<Vec<f64>> {
    let t_len = u.len();
    assert!(t_len >= 1, "input must have at least one sample");
    let (b, a) = (&tf.b, &tf.a);
    let mut y = vec![0.0; t_len];
    for t in 0..t_len {
        let mut acc = 0.0;
        for (k, &bk) in b.iter().enumerate() {
            // Rest initialization: u(t-k) = 0 for t < k, multiplied explicitly
            // so the executed multiplication count matches the operator cost.
            let uk = if t >= k { u[t - k] } else { 0.0 };
            acc += bk * uk;
            count.add(1);
        }
        for (k, &ak) in a.iter().enumerate() {
            let yk = if t >= k + 1 { y[t - k - 1] } else { 0.0 };
            acc -= ak * yk;
            count.add(1);
        }
        if !acc.is_finite() {
            return Err(Error::NumericalRange {
                index: t,
                context: "iir_filter output left the finite range".into(),
            });
        }
        y[t] = acc;
    }
    Ok(y)
}

/// First `t_len` samples of the operator's response to a unit impulse from rest.
pub fn impulse_response(tf: &TransferFunction, t_len: usize) -> Result<ImpulseResponse> {
    assert!(t_len >= 1);
    let mut impulse = vec![0.0; t_len];
    impulse[0] = 1.0;
    Ok(ImpulseResponse {
        g: iir_filter(tf, &impulse)?,
    })
}
