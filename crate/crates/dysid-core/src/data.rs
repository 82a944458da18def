//! Synthetic dataset generation and CSV persistence: random-phase multisine
//! excitation, reference plants (linear-static-linear chains, a hysteretic
//! oscillator integrated with fixed-step RK4, an integrating plant with a
//! static friction map) and additive Gaussian measurement noise.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::{iir_filter, TimeSeries, TransferFunction};

/// Random-phase multisine settings.
#[derive(Debug, Clone)]
pub struct MultisineConfig {
    pub samples: usize,
    pub sample_rate: f64,
    /// Passband `[f_lo, f_hi]` in Hz; every DFT bin inside it is excited.
    pub band: (f64, f64),
    /// Target RMS of the generated signal.
    pub amplitude_rms: f64,
    pub seed: u64,
}

/// Sum of cosines on every DFT bin inside the band, with i.i.d. uniform
/// phases, rescaled to the target RMS. A band that contains no bin yields the
/// zero signal.
pub fn generate_multisine(cfg: &MultisineConfig) -> Result<TimeSeries> {
    if cfg.samples < 2 {
        return Err(Error::InvalidConfig(
            "multisine: need at least 2 samples".into(),
        ));
    }
    let nyquist = cfg.sample_rate / 2.0;
    let (f_lo, f_hi) = cfg.band;
    if !(0.0..nyquist).contains(&f_lo) || f_hi <= f_lo || f_hi > nyquist {
        return Err(Error::InvalidConfig(format!(
            "multisine: band [{f_lo}, {f_hi}] must satisfy 0 <= f_lo < f_hi <= {nyquist}"
        )));
    }
    let t_len = cfg.samples;
    let df = cfg.sample_rate / t_len as f64;
    // Bins strictly between DC and Nyquist whose frequency falls in the band.
    let k_max = (t_len - 1) / 2;
    let bins: Vec<usize> = (1..=k_max)
        .filter(|&k| {
            let f = k as f64 * df;
            f >= f_lo && f <= f_hi
        })
        .collect();
    let mut x = vec![0.0; t_len];
    if bins.is_empty() {
        return TimeSeries::from_vec(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phases: Vec<f64> = bins
        .iter()
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    for (t, sample) in x.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (&k, &phi) in bins.iter().zip(&phases) {
            acc += (std::f64::consts::TAU * k as f64 * t as f64 / t_len as f64 + phi).cos();
        }
        *sample = acc;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / t_len as f64).sqrt();
    if rms > 0.0 {
        let gain = cfg.amplitude_rms / rms;
        x.iter_mut().for_each(|v| *v *= gain);
    }
    TimeSeries::from_vec(x)
}

/// Memoryless scalar maps used by the reference plants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StaticMap {
    Identity,
    Tanh,
    /// `post * tanh(pre * x)`: a saturation with adjustable drive and height.
    ScaledTanh { pre: f64, post: f64 },
}

impl StaticMap {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            StaticMap::Identity => x,
            StaticMap::Tanh => x.tanh(),
            StaticMap::ScaledTanh { pre, post } => post * (pre * x).tanh(),
        }
    }
}

/// Linear-static-linear reference plant: `y = G2( f( G1(u) ) )` with the
/// static map applied per sample.
pub fn simulate_wh_reference(
    g1: &TransferFunction,
    f: &StaticMap,
    g2: &TransferFunction,
    u: &[f64],
) -> Result<Vec<f64>> {
    let stage1 = iir_filter(g1, u)?;
    let mid: Vec<f64> = stage1.iter().map(|&v| f.apply(v)).collect();
    iir_filter(g2, &mid)
}

/// Integrating reference plant with a static friction-style map on the
/// internal velocity: `y = cumsum( v - coulomb * tanh(v / smoothness) )`
/// where `v = G_v(u)`.
pub fn simulate_integrating_plant(
    g_v: &TransferFunction,
    coulomb: f64,
    smoothness: f64,
    u: &[f64],
) -> Result<Vec<f64>> {
    let v = iir_filter(g_v, u)?;
    let forced: Vec<f64> = v
        .iter()
        .map(|&x| x - coulomb * (x / smoothness).tanh())
        .collect();
    iir_filter(&TransferFunction::integrator(), &forced)
}

/// Coefficients of the hysteretic oscillator
/// `m y'' + k y + c y' + z = u`,
/// `z' = alpha y' - beta (gamma |y'| |z|^(nu-1) z + delta y' |z|^nu)`.
///
/// The defaults are desk-scale values chosen to show a clear hysteresis loop
/// with a bounded response under the shipped multisine excitation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoucWenParams {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub alpha: f64,
    pub beta_bw: f64,
    pub gamma: f64,
    pub delta: f64,
    pub nu: f64,
    pub sample_rate: f64,
}

impl Default for BoucWenParams {
    fn default() -> Self {
        BoucWenParams {
            mass: 1.0,
            stiffness: 200.0,
            damping: 8.0,
            alpha: 150.0,
            beta_bw: 10.0,
            gamma: 0.8,
            delta: -0.4,
            nu: 1.0,
            sample_rate: 750.0,
        }
    }
}

/// Displacement (mm), velocity (m/s) and hysteretic force trajectories.
#[derive(Debug, Clone)]
pub struct BoucWenStates {
    pub displacement_mm: Vec<f64>,
    pub velocity: Vec<f64>,
    pub hysteretic_force: Vec<f64>,
}

fn boucwen_derivative(p: &BoucWenParams, state: [f64; 3], u: f64) -> [f64; 3] {
    let [y, v, z] = state;
    let dy = v;
    let dv = (u - p.stiffness * y - p.damping * v - z) / p.mass;
    let z_pow = z.abs().powf(p.nu - 1.0) * z;
    let z_pow_nu = z.abs().powf(p.nu);
    let dz = p.alpha * v - p.beta_bw * (p.gamma * v.abs() * z_pow + p.delta * v * z_pow_nu);
    [dy, dv, dz]
}

fn rk4_step(p: &BoucWenParams, state: [f64; 3], u: f64, h: f64) -> [f64; 3] {
    let add = |s: [f64; 3], d: [f64; 3], w: f64| [s[0] + w * d[0], s[1] + w * d[1], s[2] + w * d[2]];
    let k1 = boucwen_derivative(p, state, u);
    let k2 = boucwen_derivative(p, add(state, k1, h / 2.0), u);
    let k3 = boucwen_derivative(p, add(state, k2, h / 2.0), u);
    let k4 = boucwen_derivative(p, add(state, k3, h), u);
    [
        state[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        state[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        state[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Integrates the hysteretic oscillator from rest with classical fixed-step
/// RK4, holding the input constant between samples. `substeps` RK4 steps are
/// taken per sample interval (1 is the production setting; larger values feed
/// the step-refinement check). Sample `t` of the output is the state after
/// the interval driven by `u[t]`.
pub fn simulate_boucwen_states(
    p: &BoucWenParams,
    u: &[f64],
    substeps: usize,
) -> Result<BoucWenStates> {
    assert!(substeps >= 1);
    let h = 1.0 / p.sample_rate / substeps as f64;
    let mut state = [0.0f64; 3];
    let mut out = BoucWenStates {
        displacement_mm: Vec::with_capacity(u.len()),
        velocity: Vec::with_capacity(u.len()),
        hysteretic_force: Vec::with_capacity(u.len()),
    };
    for (t, &ut) in u.iter().enumerate() {
        for _ in 0..substeps {
            state = rk4_step(p, state, ut, h);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalRange {
                index: t,
                context: "hysteretic oscillator state left the finite range".into(),
            });
        }
        out.displacement_mm.push(state[0] * 1000.0);
        out.velocity.push(state[1]);
        out.hysteretic_force.push(state[2]);
    }
    Ok(out)
}

/// Displacement output (mm) of the hysteretic oscillator.
pub fn simulate_boucwen(p: &BoucWenParams, u: &[f64]) -> Result<Vec<f64>> {
    Ok(simulate_boucwen_states(p, u, 1)?.displacement_mm)
}

/// Noise level, either absolute or relative to the signal RMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    Sigma(f64),
    SnrDb(f64),
}

/// Adds white Gaussian noise at the requested level, channel by channel,
/// deterministically per seed.
pub fn add_noise(y: &TimeSeries, spec: NoiseSpec, seed: u64) -> TimeSeries {
    let mut out = y.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..y.channels() {
        let ch = out.channel_mut(c);
        let sigma = match spec {
            NoiseSpec::Sigma(s) => s,
            NoiseSpec::SnrDb(db) => {
                let rms = (ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64).sqrt();
                rms / 10f64.powf(db / 20.0)
            }
        };
        if sigma == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
        for v in ch.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// Paired input/output record with sampling rate and an optional train/test
/// boundary (samples before `split` are training data).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: TimeSeries,
    pub y: TimeSeries,
    pub sample_rate: f64,
    pub split: Option<usize>,
}

impl Dataset {
    pub fn new(u: TimeSeries, y: TimeSeries, sample_rate: f64, split: Option<usize>) -> Result<Self> {
        if u.samples() != y.samples() {
            return Err(Error::ShapeMismatch {
                context: "Dataset::new".into(),
                expected: format!("{} samples", u.samples()),
                got: format!("{}", y.samples()),
            });
        }
        if let Some(s) = split {
            if s == 0 || s > u.samples() {
                return Err(Error::InvalidConfig(format!(
                    "split {s} outside 1..={}",
                    u.samples()
                )));
            }
        }
        Ok(Dataset {
            u,
            y,
            sample_rate,
            split,
        })
    }

    pub fn samples(&self) -> usize {
        self.u.samples()
    }

    fn range(&self, lo: usize, hi: usize) -> (TimeSeries, TimeSeries) {
        let cut = |s: &TimeSeries| {
            TimeSeries::from_channels(
                (0..s.channels())
                    .map(|c| s.channel(c)[lo..hi].to_vec())
                    .collect(),
            )
            .expect("slice of a valid series")
        };
        (cut(&self.u), cut(&self.y))
    }

    /// Training portion (everything before the split, or the whole record).
    pub fn train_portion(&self) -> (TimeSeries, TimeSeries) {
        let hi = self.split.unwrap_or(self.samples());
        self.range(0, hi)
    }

    /// Held-out portion after the split, when one exists.
    pub fn test_portion(&self) -> Option<(TimeSeries, TimeSeries)> {
        let s = self.split?;
        (s < self.samples()).then(|| self.range(s, self.samples()))
    }

    /// Writes `# fs=... split=...` metadata, a `u0,..,y0,..` header row and
    /// one row per sample with 17 significant digits, which round-trips f64
    /// exactly.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        match self.split {
            Some(s) => {
                let _ = writeln!(text, "# fs={} split={}", self.sample_rate, s);
            }
            None => {
                let _ = writeln!(text, "# fs={}", self.sample_rate);
            }
        }
        let headers: Vec<String> = (0..self.u.channels())
            .map(|c| format!("u{c}"))
            .chain((0..self.y.channels()).map(|c| format!("y{c}")))
            .collect();
        let _ = writeln!(text, "{}", headers.join(","));
        for t in 0..self.samples() {
            let row: Vec<String> = (0..self.u.channels())
                .map(|c| format!("{:.16e}", self.u.get(t, c)))
                .chain((0..self.y.channels()).map(|c| format!("{:.16e}", self.y.get(t, c))))
                .collect();
            let _ = writeln!(text, "{}", row.join(","));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sample_rate = None;
        let mut split = None;
        let mut columns: Option<(usize, usize)> = None;
        let mut u_rows: Vec<Vec<f64>> = Vec::new();
        let mut y_rows: Vec<Vec<f64>> = Vec::new();

        for (line_idx, raw) in text.lines().enumerate() {
            let line_no = line_idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for pair in meta.split_whitespace() {
                    let Some((key, value)) = pair.split_once('=') else {
                        return Err(Error::DatasetParse {
                            line: line_no,
                            message: format!("metadata entry '{pair}' is not key=value"),
                        });
                    };
                    match key {
                        "fs" => {
                            sample_rate =
                                Some(value.parse::<f64>().map_err(|_| Error::DatasetParse {
                                    line: line_no,
                                    message: format!("bad sampling rate '{value}'"),
                                })?)
                        }
                        "split" => {
                            split =
                                Some(value.parse::<usize>().map_err(|_| Error::DatasetParse {
                                    line: line_no,
                                    message: format!("bad split index '{value}'"),
                                })?)
                        }
                        other => {
                            return Err(Error::DatasetParse {
                                line: line_no,
                                message: format!("unknown metadata key '{other}'"),
                            })
                        }
                    }
                }
                continue;
            }
            match columns {
                None => {
                    let names: Vec<&str> = line.split(',').collect();
                    let n_u = names.iter().take_while(|n| n.starts_with('u')).count();
                    let n_y = names.len() - n_u;
                    if n_u == 0
                        || n_y == 0
                        || !names[n_u..].iter().all(|n| n.starts_with('y'))
                    {
                        return Err(Error::DatasetParse {
                            line: line_no,
                            message: format!("header row '{line}' must list u columns then y columns"),
                        });
                    }
                    columns = Some((n_u, n_y));
                }
                Some((n_u, n_y)) => {
                    let fields: Vec<&str> = line.split(',').collect();
                    if fields.len() != n_u + n_y {
                        return Err(Error::DatasetParse {
                            line: line_no,
                            message: format!(
                                "expected {} columns, found {}",
                                n_u + n_y,
                                fields.len()
                            ),
                        });
                    }
                    let mut row = Vec::with_capacity(fields.len());
                    for f in &fields {
                        row.push(f.trim().parse::<f64>().map_err(|_| Error::DatasetParse {
                            line: line_no,
                            message: format!("bad number '{f}'"),
                        })?);
                    }
                    u_rows.push(row[..n_u].to_vec());
                    y_rows.push(row[n_u..].to_vec());
                }
            }
        }

        let (n_u, n_y) = columns.ok_or(Error::DatasetParse {
            line: 1,
            message: "no header row".into(),
        })?;
        if u_rows.is_empty() {
            return Err(Error::DatasetParse {
                line: 1,
                message: "no data rows".into(),
            });
        }
        let transpose = |rows: &[Vec<f64>], n: usize| -> Result<TimeSeries> {
            TimeSeries::from_channels(
                (0..n)
                    .map(|c| rows.iter().map(|r| r[c]).collect())
                    .collect(),
            )
        };
        Dataset::new(
            transpose(&u_rows, n_u)?,
            transpose(&y_rows, n_y)?,
            sample_rate.ok_or(Error::DatasetParse {
                line: 1,
                message: "missing fs metadata".into(),
            })?,
            split,
        )
    }
}
