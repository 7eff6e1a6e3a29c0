//! Dual-stream affinity regressor: per-stream transformer and CNN branches,
//! pooled and fused into a dense regression head.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use config::{ConvSpec, ModelConfig, Variant};
pub use forward::{
    cnn_branch, encoder_layer_forward, ffn_forward, fusion_vector, head_forward, mhsa_forward,
    model_forward, stream_features, transformer_branch, Bound, DropoutRng, StreamInput,
};
pub use params::{AttentionHead, CnnLayers, Dense, EncoderLayer, Head, Init, Layout, ParamSpec, Stream};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Configuration, layout and parameter values of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model, seeded from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let layout = Layout::new(&config)?;
        let params = layout.init(config.seed);
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    /// Model from explicit parameter values, checked against the layout.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let layout = Layout::new(&config)?;
        if params.len() != layout.specs.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.specs.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    p.shape()
                )));
            }
            p.check_finite(&spec.name)?;
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    pub fn max_abs_param(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn bind<'t, 'm>(&'m self, tape: &'t Tape<T>) -> Bound<'t, 'm, T> {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p)).collect(),
            layout: &self.layout,
            config: &self.config,
        }
    }

    /// Records the parameters on `tape` without gradient tracking.
    pub fn bind_frozen<'t, 'm>(&'m self, tape: &'t Tape<T>) -> Bound<'t, 'm, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(&p.clone().with_requires_grad(false)))
                .collect(),
            layout: &self.layout,
            config: &self.config,
        }
    }

    /// Standardized-scale prediction for one pair.
    pub fn predict(&self, antigen: &StreamInput<T>, antibody: &StreamInput<T>) -> Result<T> {
        Ok(self.predict_many(&[(antigen, antibody)])?[0])
    }

    /// Predictions for many pairs on one tape, rewound between pairs.
    pub fn predict_many(&self, pairs: &[(&StreamInput<T>, &StreamInput<T>)]) -> Result<Vec<T>> {
        let tape = Tape::new();
        let b = self.bind_frozen(&tape);
        let mark = tape.mark();
        let mut out = Vec::with_capacity(pairs.len());
        for (ag, ab) in pairs {
            let y = model_forward(&tape, &b, ag, ab, &mut None)?.item();
            if !y.is_finite() {
                return Err(Error::NonFinite("model output".into()));
            }
            out.push(y);
            tape.rewind(mark);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }
}
