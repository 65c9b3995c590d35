//! Multi-head deep emission networks and the stateless baseline predictor.
//!
//! Both share a tanh trunk. The emission network ends in one linear head per
//! candidate state; the baseline ends in a single head. Models work in
//! standardized units; [`Standardizer`] maps back for metrics.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::nd::{dense, dense_eval, init_dense, AdamState, Matrix, Mlp, ParamStore, Tape, Var};

pub const HIDDEN: usize = 64;

/// Affine map to zero mean, unit variance fitted on a training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Constant series fall back to unit scale.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 1.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| self.apply(*x)).collect()
    }
}

/// Model input `H_t`: the last `T0` observations (oldest first), each
/// followed by its covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    values: Vec<f64>,
    t0: usize,
}

impl HistoryWindow {
    /// `covariates[k]` holds the covariate row for `observations[k]`.
    pub fn new(observations: &[f64], covariates: &[Vec<f64>]) -> Result<Self> {
        let t0 = observations.len();
        if t0 == 0 {
            return Err(arg_err!("history window needs at least one observation"));
        }
        if !covariates.is_empty() && covariates.len() != t0 {
            return Err(arg_err!(
                "{} covariate rows for {} observations",
                covariates.len(),
                t0
            ));
        }
        let width = covariates.first().map_or(0, Vec::len);
        if covariates.iter().any(|c| c.len() != width) {
            return Err(arg_err!("covariate rows differ in width"));
        }
        let mut values = Vec::with_capacity(t0 * (1 + width));
        for (k, x) in observations.iter().enumerate() {
            values.push(*x);
            if let Some(c) = covariates.get(k) {
                values.extend_from_slice(c);
            }
        }
        Ok(Self { values, t0 })
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Rows `[z_{t−T0+1}, …, z_t]` for each `t` in `steps` (requires `t + 1 ≥ T0`).
pub fn history_matrix(z: &[f64], t0: usize, steps: core::ops::Range<usize>) -> Result<Matrix> {
    if t0 == 0 || steps.start + 1 < t0 || steps.end > z.len() {
        return Err(arg_err!(
            "history window of {} over steps {:?} of a length-{} series",
            t0,
            steps,
            z.len()
        ));
    }
    let rows = steps.len();
    let mut data = Vec::with_capacity(rows * t0);
    for t in steps {
        data.extend_from_slice(&z[t + 1 - t0..=t]);
    }
    Matrix::from_vec(rows, t0, data)
}

fn concat(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

/// Shared tanh trunk plus `heads` linear outputs. Each head reads the trunk
/// features together with the raw input, so a head can stay linear in the
/// input outside the range seen in training.
#[derive(Clone, Debug, PartialEq)]
pub struct DenModel {
    pub params: ParamStore,
    trunk: Mlp,
    heads: usize,
}

impl DenModel {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        input_width: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        if heads == 0 || input_width == 0 || hidden == 0 {
            return Err(arg_err!("emission network needs positive widths and heads"));
        }
        let trunk = Mlp::new("trunk", &[input_width, hidden, hidden], true);
        let mut params = ParamStore::new();
        trunk.init(&mut params, rng)?;
        for s in 0..heads {
            init_dense(&mut params, rng, &format!("head{s}"), hidden + input_width, 1)?;
        }
        Ok(Self {
            params,
            trunk,
            heads,
        })
    }

    /// A model with the given parameters and this model's architecture.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(arg_err!(
                "parameter layout does not match the emission network"
            ));
        }
        Ok(Self {
            params,
            trunk: self.trunk.clone(),
            heads: self.heads,
        })
    }

    pub fn input_width(&self) -> usize {
        self.trunk.input_width()
    }

    pub fn hidden(&self) -> usize {
        self.trunk.output_width()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Batched forward on a tape: `B x input` to `B x heads`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let trunk = self.trunk.forward(tape, params, x)?;
        let h = tape.concat_cols(&[trunk, x])?;
        let outs = (0..self.heads)
            .map(|s| dense(tape, params, h, &format!("head{s}")))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat_cols(&outs)
    }

    /// Batched predictions, `B x heads`.
    pub fn predict_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.input_width() {
            return Err(arg_err!(
                "emission network expects width {}, got {}",
                self.input_width(),
                inputs.cols()
            ));
        }
        let trunk = self.trunk.eval(&self.params, inputs)?;
        let h = concat(&trunk, inputs);
        let mut out = Matrix::zeros(inputs.rows(), self.heads);
        for s in 0..self.heads {
            let col = dense_eval(&self.params, &h, &format!("head{s}"))?;
            for r in 0..inputs.rows() {
                out.set(r, s, col.get(r, 0));
            }
        }
        Ok(out)
    }

    /// State-conditioned predictions for one window.
    pub fn predict_heads(&self, window: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::row_vector(window.to_vec());
        Ok(self.predict_batch(&x)?.into_vec())
    }
}

/// Single-head predictor that ignores hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub net: DenModel,
}

impl BaselineModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input_width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            net: DenModel::new(rng, input_width, 1, hidden)?,
        })
    }

    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        Ok(self.net.predict_heads(window)?[0])
    }

    pub fn predict_batch(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.net.predict_batch(inputs)?.into_vec())
    }
}

/// The prediction of the head picked by `action`.
pub fn select_prediction(heads: &[f64], action: usize) -> Result<f64> {
    heads
        .get(action)
        .copied()
        .ok_or_else(|| arg_err!("action {} outside 1..={}", action + 1, heads.len()))
}

/// Squared error of each head against the realized value.
pub fn head_errors(heads: &[f64], truth: f64) -> Vec<f64> {
    heads.iter().map(|h| (h - truth) * (h - truth)).collect()
}

/// One supervised example routed to a single head.
#[derive(Clone, Debug, PartialEq)]
pub struct ScreenedSample {
    pub input: Vec<f64>,
    pub head: usize,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    /// Minibatch size; the whole set is used when it is smaller.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScreenedFit {
    pub params: ParamStore,
    /// Mean squared error over all samples before and after the steps.
    pub loss_before: f64,
    pub loss_after: f64,
}

fn selected_head_loss(
    model: &DenModel,
    params: &ParamStore,
    tape: &mut Tape,
    samples: &[&ScreenedSample],
) -> Result<Var> {
    let width = model.input_width();
    let mut inputs = Vec::with_capacity(samples.len() * width);
    for s in samples {
        if s.input.len() != width {
            return Err(arg_err!(
                "sample width {} for an emission network of width {}",
                s.input.len(),
                width
            ));
        }
        if s.head >= model.heads() {
            return Err(arg_err!(
                "head {} outside 1..={}",
                s.head + 1,
                model.heads()
            ));
        }
        inputs.extend_from_slice(&s.input);
    }
    let x = tape.constant(Matrix::from_vec(samples.len(), width, inputs)?);
    let targets = tape.constant(Matrix::column_vector(
        samples.iter().map(|s| s.target).collect(),
    ));
    let out = model.forward(tape, params, x)?;
    let picked = tape.pick(out, samples.iter().map(|s| s.head).collect())?;
    let diff = tape.sub(picked, targets)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn full_loss(model: &DenModel, params: &ParamStore, samples: &[ScreenedSample]) -> Result<f64> {
    let mut tape = Tape::new();
    let refs: Vec<&ScreenedSample> = samples.iter().collect();
    let loss = selected_head_loss(model, params, &mut tape, &refs)?;
    Ok(tape.scalar(loss))
}

/// Fits the selected heads of a copy of `model.params` to `samples`.
///
/// Only the head named by each sample receives gradient, so heads absent
/// from the batch keep their output-layer weights. `None` when there is
/// nothing to train on. The optimizer state carries over between calls.
pub fn train_screened<R: Rng + ?Sized>(
    model: &DenModel,
    samples: &[ScreenedSample],
    cfg: FitConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<Option<ScreenedFit>> {
    train_screened_with(model, samples, cfg, adam, rng, |_| Ok(()))
}

/// [`train_screened`] calling `after_step` with the parameters after every
/// optimizer step.
pub fn train_screened_with<R, F>(
    model: &DenModel,
    samples: &[ScreenedSample],
    cfg: FitConfig,
    adam: &mut AdamState,
    rng: &mut R,
    mut after_step: F,
) -> Result<Option<ScreenedFit>>
where
    R: Rng + ?Sized,
    F: FnMut(&ParamStore) -> Result<()>,
{
    if samples.is_empty() {
        return Ok(None);
    }
    let mut params = model.params.clone();
    let loss_before = full_loss(model, &params, samples)?;
    for _ in 0..cfg.steps {
        let batch: Vec<&ScreenedSample> = if samples.len() <= cfg.batch {
            samples.iter().collect()
        } else {
            sample(rng, samples.len(), cfg.batch)
                .into_iter()
                .map(|k| &samples[k])
                .collect()
        };
        let mut tape = Tape::new();
        let loss = selected_head_loss(model, &params, &mut tape, &batch)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Training("emission loss is not finite".into()));
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut params, &grads)?;
        after_step(&params)?;
    }
    let loss_after = full_loss(model, &params, samples)?;
    Ok(Some(ScreenedFit {
        params,
        loss_before,
        loss_after,
    }))
}

/// Ordinary one-step regression of the baseline on all `(input, target)`
/// rows. Returns the final full-data mean squared error.
pub fn train_baseline<R: Rng + ?Sized>(
    model: &mut BaselineModel,
    inputs: &Matrix,
    targets: &[f64],
    cfg: FitConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<f64> {
    if inputs.rows() == 0 || inputs.rows() != targets.len() {
        return Err(arg_err!(
            "baseline needs matching, nonempty inputs ({}) and targets ({})",
            inputs.rows(),
            targets.len()
        ));
    }
    let samples: Vec<ScreenedSample> = (0..inputs.rows())
        .map(|r| ScreenedSample {
            input: inputs.row(r).to_vec(),
            head: 0,
            target: targets[r],
        })
        .collect();
    match train_screened(&model.net, &samples, cfg, adam, rng)? {
        Some(fit) => {
            model.net.params = fit.params;
            Ok(fit.loss_after)
        }
        None => Ok(f64::NAN),
    }
}

/// Mean squared error of the baseline on `(inputs, targets)`.
pub fn baseline_mse(model: &BaselineModel, inputs: &Matrix, targets: &[f64]) -> Result<f64> {
    let preds = model.predict_batch(inputs)?;
    let n = preds.len().max(1) as f64;
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::{AdamConfig, Tensor};
    use crate::rng::stream;
    use alloc::vec;

    #[test]
    fn selection_and_errors() {
        assert_eq!(select_prediction(&[1.2, -0.7], 1).unwrap(), -0.7);
        assert!(select_prediction(&[1.2, -0.7], 2).is_err());
        assert_eq!(head_errors(&[1.0, 3.0], 2.0), vec![1.0, 1.0]);
        assert_eq!(head_errors(&[2.0], 2.0), vec![0.0]);
        assert_eq!(head_errors(&[0.0, 0.5], 1.0), vec![1.0, 0.25]);
    }

    #[test]
    fn zeroed_heads_output_bias() {
        let mut rng = stream(1, "den", &[]);
        let mut den = DenModel::new(&mut rng, 2, 3, 8).unwrap();
        for s in 0..3 {
            den.params
                .set(&format!("head{s}.w"), Tensor::zeros(vec![1, 10]));
        }
        assert_eq!(den.predict_heads(&[0.4, -2.0]).unwrap(), vec![0.0; 3]);
        let a = den.predict_heads(&[0.1, 0.2]).unwrap();
        assert_eq!(a, den.predict_heads(&[0.1, 0.2]).unwrap());
        assert!(den.predict_heads(&[0.1]).is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = stream(2, "den", &[]);
        let den = DenModel::new(&mut rng, 3, 2, 16).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.9, 1.5, 0.0, -0.4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = den.forward(&mut tape, &den.params, xv).unwrap();
        let plain = den.predict_batch(&x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn history_windows() {
        let z = [1.0, 2.0, 3.0, 4.0];
        let m = history_matrix(&z, 2, 1..4).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 2.0, 3.0, 3.0, 4.0]);
        assert!(history_matrix(&z, 3, 1..4).is_err());
        let w = HistoryWindow::new(&[1.0, 2.0], &[vec![0.5], vec![0.6]]).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.5, 2.0, 0.6]);
        assert!(HistoryWindow::new(&[1.0], &[vec![0.5], vec![0.6]]).is_err());
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::fit(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.invert(s.apply(2.7)) - 2.7).abs() < 1e-15);
        assert_eq!(Standardizer::fit(&[5.0, 5.0]).std, 1.0);
    }

    #[test]
    fn empty_screened_set_is_a_no_op() {
        let mut rng = stream(3, "den", &[]);
        let den = DenModel::new(&mut rng, 1, 2, 4).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let fit = train_screened(
            &den,
            &[],
            FitConfig { steps: 5, batch: 8 },
            &mut adam,
            &mut rng,
        )
        .unwrap();
        assert!(fit.is_none());
        assert_eq!(adam.step, 0);
    }
}
