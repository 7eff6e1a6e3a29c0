//! End-to-end gradient check of the model loss against finite differences.
//!
//! The numeric derivative combines central differences at `h` and `h/2` by
//! Richardson extrapolation, and is taken in `f64` whatever the model
//! precision. The step shrinks until consecutive estimates agree, which keeps
//! the estimate off ReLU kinks.

use std::time::Instant;

use serde::Serialize;

use crate::embedding::synthetic_embed;
use crate::error::{Error, Result};
use crate::model::{model_forward, ConvSpec, Model, ModelConfig, StreamInput, Variant};
use crate::tensor::{OpKind, Precision, Scalar, Tape};
use crate::train::mse_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub d_e: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub head_dims: Vec<usize>,
    pub variant: Variant,
    pub seed: u64,
    pub precision: Precision,
    /// Longest sequence in the check batch.
    pub max_len: usize,
    pub step: f64,
    /// Maximum elementwise relative error; `None` picks 1e-6 at 64-bit and
    /// 1e-3 at 32-bit.
    pub tolerance: Option<f64>,
    /// Entries where both gradients are below this magnitude are skipped.
    pub min_grad: f64,
    /// Test hook: scale the backward rule of this op kind.
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            d_e: 16,
            n_heads: 2,
            n_layers: 1,
            conv1_filters: 8,
            conv2_filters: 8,
            head_dims: vec![8],
            variant: Variant::DuaDeep,
            seed: 0,
            precision: Precision::F64,
            max_len: 8,
            step: 1e-3,
            tolerance: None,
            min_grad: 1e-8,
            corrupt: None,
        }
    }
}

impl GradCheckConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_e: self.d_e,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: None,
            conv1: ConvSpec {
                filters: self.conv1_filters,
                kernel: 3,
            },
            conv2: ConvSpec {
                filters: self.conv2_filters,
                kernel: 5,
            },
            head_dims: self.head_dims.clone(),
            variant: self.variant,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(match self.precision {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-3,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> usize {
        self.groups.iter().filter(|g| !g.passed).count()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    /// Error when any group failed.
    pub fn ensure_passed(&self) -> Result<()> {
        match self.failures() {
            0 => Ok(()),
            n => Err(Error::GradCheckFailed(n)),
        }
    }
}

struct Pair<T> {
    antigen: StreamInput<T>,
    antibody: StreamInput<T>,
    target: T,
}

/// Two pairs of different lengths; the shorter streams are padded to the
/// batch maximum so masking is exercised.
fn batch<T: Scalar>(c: &GradCheckConfig) -> Result<Vec<Pair<T>>> {
    let l = c.max_len.max(2);
    let lens = [l, l - 2, l.saturating_sub(3).max(1), l - 1];
    let shapes = [(lens[0], lens[1]), (lens[2], lens[3])];
    let targets = [0.7, -1.2];
    let mut out = Vec::new();
    for (i, ((la, lb), t)) in shapes.iter().zip(targets).enumerate() {
        let toks = |len: usize, offset: usize| -> Vec<u8> {
            (0..len).map(|k| ((k * 7 + offset * 5 + i * 3) % 20 + 1) as u8).collect()
        };
        let ag = synthetic_embed("ag", &toks(*la, 1), c.d_e, c.seed ^ 0xA5)?;
        let ab = synthetic_embed("ab", &toks(*lb, 2), c.d_e, c.seed ^ 0xA5)?;
        out.push(Pair {
            antigen: StreamInput::<T>::from_matrix(&ag).padded(l)?,
            antibody: StreamInput::<T>::from_matrix(&ab).padded(l)?,
            target: T::of(t),
        });
    }
    Ok(out)
}

fn batch_loss<T: Scalar>(model: &Model<T>, pairs: &[Pair<T>]) -> Result<f64> {
    let tape = Tape::new();
    let b = model.bind_frozen(&tape);
    let preds = pairs
        .iter()
        .map(|p| model_forward(&tape, &b, &p.antigen, &p.antibody, &mut None))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<T> = pairs.iter().map(|p| p.target).collect();
    Ok(mse_loss(&preds, &targets)?.item().as_f64())
}

fn analytic<T: Scalar>(model: &Model<T>, pairs: &[Pair<T>], corrupt: Option<OpKind>) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    tape.debug_corrupt_backward(corrupt);
    let b = model.bind(&tape);
    let preds = pairs
        .iter()
        .map(|p| model_forward(&tape, &b, &p.antigen, &p.antibody, &mut None))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<T> = pairs.iter().map(|p| p.target).collect();
    let g = mse_loss(&preds, &targets)?.backward()?;
    Ok(b.vars
        .iter()
        .map(|&v| g.wrt(v).into_iter().map(|x| x.as_f64()).collect())
        .collect())
}

fn richardson(model: &mut Model<f64>, pairs: &[Pair<f64>], p: usize, i: usize, h: f64) -> Result<f64> {
    let x0 = model.params()[p].data()[i];
    let mut central = |h: f64| -> Result<f64> {
        model.params_mut()[p].data_mut()[i] = x0 + h;
        let up = batch_loss(model, pairs)?;
        model.params_mut()[p].data_mut()[i] = x0 - h;
        let down = batch_loss(model, pairs)?;
        Ok((up - down) / (2.0 * h))
    };
    let d1 = central(h);
    let d2 = central(h / 2.0);
    model.params_mut()[p].data_mut()[i] = x0;
    Ok((4.0 * d2? - d1?) / 3.0)
}

/// Shrinks the step by 10x until two successive estimates agree, so a ReLU
/// kink inside the first window does not spoil the estimate. Agreement
/// allows for rounding noise in the loss, about `eps * |loss| / h`; the
/// larger step of an agreeing pair is kept because it carries less of it.
fn numeric_at(model: &mut Model<f64>, pairs: &[Pair<f64>], at: (usize, usize), h: f64, agree: f64, loss: f64) -> Result<f64> {
    let (p, i) = at;
    let mut h = h;
    let mut prev = richardson(model, pairs, p, i, h)?;
    for _ in 0..MAX_SHRINK {
        h /= 10.0;
        let next = richardson(model, pairs, p, i, h)?;
        let noise = 16.0 * f64::EPSILON * loss.abs().max(1.0) / h;
        if (next - prev).abs() <= agree * next.abs().max(prev.abs()) + noise {
            return Ok(prev);
        }
        prev = next;
    }
    Ok(prev)
}

const MAX_SHRINK: usize = 3;

fn run_typed<T: Scalar>(c: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let model = Model::<T>::init(c.model_config())?;
    let pairs = batch::<T>(c)?;
    let grads = analytic(&model, &pairs, c.corrupt)?;

    let mut oracle = model.cast::<f64>();
    let pairs64 = batch::<f64>(c)?;
    let loss = batch_loss(&oracle, &pairs64)?;
    let tol = c.tolerance();
    let mut groups = Vec::new();
    for (p, spec) in model.layout().specs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (i, &a) in grads[p].iter().enumerate() {
            let n = numeric_at(&mut oracle, &pairs64, (p, i), c.step, tol / 10.0, loss)?;
            let scale = a.abs().max(n.abs());
            if scale <= c.min_grad {
                continue;
            }
            checked += 1;
            worst = worst.max((a - n).abs() / scale);
        }
        groups.push(GroupResult {
            name: spec.name.clone(),
            numel: grads[p].len(),
            checked,
            max_rel_err: worst,
            passed: worst < tol,
        });
    }
    Ok(GradCheckReport {
        groups,
        tolerance: tol,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Checks every parameter tensor of a small model.
pub fn run(c: &GradCheckConfig) -> Result<GradCheckReport> {
    match c.precision {
        Precision::F32 => run_typed::<f32>(c),
        Precision::F64 => run_typed::<f64>(c),
    }
}

/// Plain-text table, one line per parameter group.
pub fn render(r: &GradCheckReport) -> String {
    let width = r.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>7}  {:>12}  result\n", "group", "checked", "max_rel_err");
    for g in &r.groups {
        s.push_str(&format!(
            "{:<width$}  {:>7}  {:>12.3e}  {}\n",
            g.name,
            g.checked,
            g.max_rel_err,
            if g.passed { "pass" } else { "FAIL" }
        ));
    }
    s.push_str(&format!(
        "{} of {} groups passed (tolerance {:e}, max {:.3e}) in {:.1}s\n",
        r.groups.len() - r.failures(),
        r.groups.len(),
        r.tolerance,
        r.max_rel_err(),
        r.seconds
    ));
    s
}
