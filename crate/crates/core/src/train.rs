//! Mini-batch training against standardized targets with MSE loss.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::CleanRecord;
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{model_forward, Model, StreamInput};
use crate::tensor::{concat_last, Precision, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent, used for monotone-descent checks.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    pub optimizer: OptimizerKind,
    /// Stop as soon as the epoch's train MSE falls below this value.
    pub stop_below_train_mse: Option<f64>,
    /// Record elapsed seconds in the curves; when off the column is 0 so
    /// repeated runs give byte-identical files.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            precision: Precision::F32,
            optimizer: OptimizerKind::Adam,
            stop_below_train_mse: None,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive".into());
        }
        Ok(())
    }
}

/// Mean squared error between per-sample predictions (each `[1]`) and targets.
pub fn mse_loss<'t, T: Scalar>(preds: &[Var<'t, T>], targets: &[T]) -> Result<Var<'t, T>> {
    if preds.is_empty() {
        return Err(Error::Contract("mse_loss needs at least one prediction".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Dimension {
            op: "mse_loss",
            lhs: vec![preds.len()],
            rhs: vec![targets.len()],
        });
    }
    let tape = preds[0].tape();
    let p = concat_last(preds)?;
    let t = tape.constant(vec![targets.len()], targets.to_vec())?;
    p.mse(t)
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_grads<T: Scalar>(params: &[Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Dimension {
            op: "optimizer step",
            lhs: params.iter().map(|p| p.len()).collect(),
            rhs: grads.iter().map(|g| g.len()).collect(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd { lr: f64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn from_config(c: &TrainConfig) -> Self {
        match c.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(c.lr, c.beta1, c.beta2, c.eps)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: c.lr },
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd { lr } => {
                check_grads(params, grads)?;
                let lr = T::of(*lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &g) in p.data_mut().iter_mut().zip(g) {
                        *w = *w - lr * g;
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation RMSE.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> Decision {
        if val < self.best {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            Decision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// One training pair with a standardized target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub antigen: StreamInput<T>,
    pub antibody: StreamInput<T>,
    pub target: T,
}

/// Resolves records against an embedding store.
pub fn build_examples<T: Scalar>(records: &[CleanRecord], store: &EmbeddingStore) -> Result<Vec<Example<T>>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                antigen: StreamInput::from_matrix(store.get(&r.antigen_id)?),
                antibody: StreamInput::from_matrix(store.get(&r.antibody_id)?),
                target: T::of(r.pkd_std),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation RMSE.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    /// Parameters after the last epoch.
    pub last: Model<T>,
    pub curves: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Predictions for `examples` with the current parameters.
pub fn predict_examples<T: Scalar>(model: &Model<T>, examples: &[Example<T>]) -> Result<Vec<f64>> {
    let pairs: Vec<_> = examples.iter().map(|e| (&e.antigen, &e.antibody)).collect();
    Ok(model.predict_many(&pairs)?.into_iter().map(|v| v.as_f64()).collect())
}

pub fn rmse_on<T: Scalar>(model: &Model<T>, examples: &[Example<T>]) -> Result<f64> {
    let pred = predict_examples(model, examples)?;
    let target: Vec<f64> = examples.iter().map(|e| e.target.as_f64()).collect();
    metrics::rmse(&pred, &target)
}

/// One forward/backward/update over `batch`; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    batch: &[&Example<T>],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads) = {
        let b = model.bind(&tape);
        let mut rng = dropout_rng;
        let preds = batch
            .iter()
            .map(|e| model_forward(&tape, &b, &e.antigen, &e.antibody, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<T> = batch.iter().map(|e| e.target).collect();
        let loss = mse_loss(&preds, &targets)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        let g = loss.backward()?;
        let grads: Vec<Vec<T>> = b.vars.iter().map(|&v| g.wrt(v)).collect();
        (value, grads)
    };
    optimizer.step(model.params_mut(), &grads)?;
    Ok(loss)
}

/// Runs the epoch loop. `on_epoch` sees each record as it is produced.
pub fn train<T: Scalar>(
    model: Model<T>,
    config: &TrainConfig,
    train: &[Example<T>],
    val: &[Example<T>],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation sets".into()));
    }
    let mut model = model;
    let mut optimizer = Optimizer::from_config(config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_D80F);
    let use_dropout = model.config().dropout > 0.0;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let rng = if use_dropout { Some(&mut dropout_rng) } else { None };
            let loss = train_step(&mut model, &mut optimizer, &batch, rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi + 1,
                    loss,
                    max_abs_param: model.max_abs_param(),
                });
            }
        }
        let train_rmse = rmse_on(&model, train)?;
        let val_rmse = rmse_on(&model, val)?;
        if !train_rmse.is_finite() || !val_rmse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                loss: train_rmse * train_rmse,
                max_abs_param: model.max_abs_param(),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_rmse,
            val_rmse,
            seconds: if config.log_wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&rec);
        curves.push(rec);
        let decision = stopper.observe(epoch, val_rmse);
        if decision == Decision::Improved {
            best = model.clone();
        }
        if config
            .stop_below_train_mse
            .is_some_and(|t| train_rmse * train_rmse < t)
        {
            stop = StopReason::TargetReached;
            break;
        }
        if decision == Decision::Stop {
            stop = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_val_rmse) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_rmse,
        last: model,
        curves,
        stop,
    })
}

pub const CURVES_HEADER: &str = "epoch,train_rmse,val_rmse,seconds";

pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for r in curves {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_rmse, r.val_rmse, r.seconds));
    }
    s
}

pub fn write_curves(path: &Path, curves: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(curves_csv(curves).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_curves(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CURVES_HEADER {
        return Err(Error::Format(format!("{}: unexpected curves header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
