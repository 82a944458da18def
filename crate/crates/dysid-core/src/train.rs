//! Gradient-based model fitting: parameter initialization, the Adam update,
//! fit/RMSE metrics and the full-batch training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId, ParamRole};
use crate::signal::TimeSeries;

/// Adam hyperparameters; `beta1`, `beta2` and `epsilon` follow the reference
/// defaults of the algorithm, only the learning rate is problem-specific.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second-moment accumulators for every parameter group of a graph.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(graph: &Graph, config: AdamConfig) -> Self {
        let m = graph.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        let v = graph.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over all trainable groups, reading the
    /// gradients accumulated by the latest backward pass.
    ///
    /// A non-finite gradient aborts before touching any parameter and names
    /// the offending group.
    pub fn step(&mut self, graph: &mut Graph) -> Result<()> {
        for id in graph.param_ids() {
            let p = graph.param(id);
            if p.trainable && p.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: p.name.clone(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (idx, id) in graph.param_ids().enumerate() {
            if !graph.param(id).trainable {
                continue;
            }
            let grads = graph.param(id).grads.clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let values = graph.param_values_mut(id);
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Training settings for [`train`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Half-range of the uniform init for transfer-function coefficients.
    pub coeff_init_range: f64,
    /// When set, each iteration draws this many random windows of the given
    /// length and averages their gradients instead of using the full record.
    pub batch: Option<BatchConfig>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub window: usize,
    pub windows_per_iter: usize,
}

impl TrainConfig {
    pub fn new(iterations: usize, learning_rate: f64, seed: u64) -> Self {
        assert!(iterations >= 1 && learning_rate >= 0.0);
        TrainConfig {
            iterations,
            learning_rate,
            seed,
            coeff_init_range: 0.01,
            batch: None,
        }
    }
}

/// Draws initial values for every trainable parameter group, deterministically
/// per seed: transfer-function coefficients (or their reparametrization
/// variables) uniform in the configured range, dense-layer weights and biases
/// uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`. Frozen groups are untouched.
pub fn init_params(graph: &mut Graph, cfg: &TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = graph.param_ids().collect();
    for id in ids {
        let p = graph.param(id);
        if !p.trainable || p.values.is_empty() {
            continue;
        }
        let half = match p.role {
            ParamRole::LtiCoeff => cfg.coeff_init_range,
            ParamRole::AffineWeight { fan_in } | ParamRole::AffineBias { fan_in } => {
                1.0 / (fan_in as f64).sqrt()
            }
        };
        let values = graph.param_values_mut(id);
        for v in values.iter_mut() {
            *v = rng.gen_range(-half..half);
        }
    }
}

/// Accuracy metrics of a simulated output against a measured one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// Normalized accuracy in percent; 100 is a perfect match, 0 is the
    /// mean-predictor baseline, negative is worse than the baseline.
    pub fit: f64,
    pub rmse: f64,
}

/// `100 * (1 - ||y_meas - y_sim|| / ||y_meas - mean(y_meas)||)` over all
/// samples and channels. Errors when the measured signal is constant.
pub fn fit_index(y_meas: &TimeSeries, y_sim: &TimeSeries) -> Result<f64> {
    check_shapes("fit_index", y_meas, y_sim)?;
    let meas = y_meas.as_slice();
    let sim = y_sim.as_slice();
    let mean = meas.iter().sum::<f64>() / meas.len() as f64;
    let dev: f64 = meas.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if dev == 0.0 {
        return Err(Error::UndefinedMetric(
            "fit index needs a non-constant measured signal".into(),
        ));
    }
    let err: f64 = meas
        .iter()
        .zip(sim)
        .map(|(&m, &s)| (m - s) * (m - s))
        .sum();
    Ok(100.0 * (1.0 - (err / dev).sqrt()))
}

/// Root mean square error over all samples and channels.
pub fn rmse(y_meas: &TimeSeries, y_sim: &TimeSeries) -> Result<f64> {
    check_shapes("rmse", y_meas, y_sim)?;
    let n = y_meas.as_slice().len() as f64;
    let sum: f64 = y_meas
        .as_slice()
        .iter()
        .zip(y_sim.as_slice())
        .map(|(&m, &s)| (m - s) * (m - s))
        .sum();
    Ok((sum / n).sqrt())
}

pub fn metrics(y_meas: &TimeSeries, y_sim: &TimeSeries) -> Result<MetricsReport> {
    Ok(MetricsReport {
        fit: fit_index(y_meas, y_sim)?,
        rmse: rmse(y_meas, y_sim)?,
    })
}

fn check_shapes(context: &str, a: &TimeSeries, b: &TimeSeries) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// A model graph wrapped with an MSE head for training. The prediction node
/// stays addressable so simulated outputs can be read back after training.
#[derive(Debug, Clone)]
pub struct TrainingGraph {
    pub graph: Graph,
    pub input_name: String,
    pub target_name: String,
    prediction: NodeId,
}

/// Wraps a model graph (input -> prediction) with an MSE loss against a new
/// target entry node.
pub fn attach_mse_loss(model: Graph, input_name: &str, target_name: &str) -> Result<TrainingGraph> {
    let channels = model.output_channels();
    let (mut builder, pred) = GraphBuilder::extend(model);
    let target = builder.input(target_name, channels)?;
    let loss = builder.mse_loss("__loss", pred, target)?;
    Ok(TrainingGraph {
        graph: builder.build(loss)?,
        input_name: input_name.to_string(),
        target_name: target_name.to_string(),
        prediction: pred,
    })
}

impl TrainingGraph {
    /// Loss forward pass; the prediction node value is refreshed as a side
    /// effect.
    pub fn eval_loss(&mut self, u: &TimeSeries, y: &TimeSeries) -> Result<f64> {
        let out = self.graph.forward_eval(&[
            (self.input_name.as_str(), u),
            (self.target_name.as_str(), y),
        ])?;
        Ok(out.scalar().expect("mse output is scalar"))
    }

    /// Prediction from the latest forward pass.
    pub fn prediction(&self) -> &TimeSeries {
        self.graph
            .node_value_by_id(self.prediction)
            .expect("prediction evaluated")
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Loss value per iteration, before that iteration's update.
    pub loss_trace: Vec<f64>,
    pub train_metrics: MetricsReport,
}

/// Runs `iterations` Adam steps of gradient descent on the MSE over the whole
/// record (or random windows when batching is configured). Returns the loss
/// trace and final training metrics. A non-finite loss aborts with the
/// iteration index.
pub fn train(
    tg: &mut TrainingGraph,
    u: &TimeSeries,
    y: &TimeSeries,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if u.samples() != y.samples() {
        return Err(Error::ShapeMismatch {
            context: "train dataset".into(),
            expected: format!("{} samples", u.samples()),
            got: format!("{}", y.samples()),
        });
    }
    let mut adam = AdamState::new(&tg.graph, AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let loss = match &cfg.batch {
            None => {
                let loss = tg.eval_loss(u, y).map_err(|e| at_iteration(e, iter))?;
                tg.graph.backward()?;
                loss
            }
            Some(batch) => {
                batched_pass(tg, u, y, batch, &mut batch_rng).map_err(|e| at_iteration(e, iter))?
            }
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: iter,
                context: "loss left the finite range".into(),
            });
        }
        loss_trace.push(loss);
        adam.step(&mut tg.graph).map_err(|e| at_iteration(e, iter))?;
    }

    tg.eval_loss(u, y)?;
    let train_metrics = metrics(y, tg.prediction())?;
    Ok(TrainOutcome {
        loss_trace,
        train_metrics,
    })
}

/// Simulates the model part of a training graph on fresh data and scores it.
pub fn evaluate(tg: &mut TrainingGraph, u: &TimeSeries, y: &TimeSeries) -> Result<MetricsReport> {
    tg.eval_loss(u, y)?;
    metrics(y, tg.prediction())
}

fn at_iteration(e: Error, iter: usize) -> Error {
    match e {
        Error::NumericalRange { index, context } => Error::Divergence {
            iteration: iter,
            context: format!("numerical range error at sample {index}: {context}"),
        },
        other => other,
    }
}

// Gradient averaging over randomly placed windows: run forward/backward per
// window and rescale the accumulated gradients afterwards.
fn batched_pass(
    tg: &mut TrainingGraph,
    u: &TimeSeries,
    y: &TimeSeries,
    batch: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t_len = u.samples();
    let window = batch.window.min(t_len);
    let mut grand: Option<Vec<Vec<f64>>> = None;
    let mut loss_sum = 0.0;
    for _ in 0..batch.windows_per_iter.max(1) {
        let start = if t_len == window {
            0
        } else {
            rng.gen_range(0..=t_len - window)
        };
        let u_win = slice_series(u, start, window);
        let y_win = slice_series(y, start, window);
        loss_sum += tg.eval_loss(&u_win, &y_win)?;
        tg.graph.backward()?;
        let snapshot: Vec<Vec<f64>> = tg.graph.params().iter().map(|p| p.grads.clone()).collect();
        match &mut grand {
            None => grand = Some(snapshot),
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(snapshot) {
                    for (av, sv) in a.iter_mut().zip(s) {
                        *av += sv;
                    }
                }
            }
        }
    }
    let n = batch.windows_per_iter.max(1) as f64;
    if let Some(acc) = grand {
        tg.graph.overwrite_grads(acc.into_iter().map(|mut g| {
            g.iter_mut().for_each(|v| *v /= n);
            g
        }));
    }
    Ok(loss_sum / n)
}

fn slice_series(s: &TimeSeries, start: usize, len: usize) -> TimeSeries {
    TimeSeries::from_channels(
        (0..s.channels())
            .map(|c| s.channel(c)[start..start + len].to_vec())
            .collect(),
    )
    .expect("window of a valid series")
}
