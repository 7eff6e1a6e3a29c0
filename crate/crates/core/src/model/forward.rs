use rand_chacha::ChaCha8Rng;

use super::params::{CnnLayers, EncoderLayer, Head, Layout, Stream};
use super::ModelConfig;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::{concat_last, Scalar, Tape, Tensor, Var};

/// One protein's embeddings plus a 0/1 mask over positions (1 = residue).
/// Masked rows must be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamInput<T> {
    embeddings: Tensor<T>,
    mask: Vec<T>,
}

impl<T: Scalar> StreamInput<T> {
    pub fn new(embeddings: Tensor<T>, mask: Vec<T>) -> Result<Self> {
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[0] != mask.len() {
            return Err(Error::Dimension {
                op: "stream_input",
                lhs: shape.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if mask.iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::Contract("mask entries must be 0 or 1".into()));
        }
        if !mask.iter().any(|&m| m == T::one()) {
            return Err(Error::EmptySequence);
        }
        let d = shape[1];
        for (row, &m) in embeddings.data().chunks_exact(d).zip(&mask) {
            if m == T::zero() && row.iter().any(|&v| v != T::zero()) {
                return Err(Error::Contract("masked embedding rows must be zero".into()));
            }
        }
        embeddings.check_finite("stream input")?;
        Ok(StreamInput { embeddings, mask })
    }

    /// Unpadded input from a stored embedding matrix.
    pub fn from_matrix(m: &EmbeddingMatrix) -> Self {
        StreamInput {
            embeddings: m.values.cast(),
            mask: vec![T::one(); m.len()],
        }
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn mask(&self) -> &[T] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn d_e(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == T::one()).collect()
    }

    /// Appends masked zero rows up to `len`.
    pub fn padded(&self, len: usize) -> Result<Self> {
        if len < self.len() {
            return Err(Error::Contract(format!("cannot pad length {} down to {len}", self.len())));
        }
        let d = self.d_e();
        let mut data = self.embeddings.data().to_vec();
        data.resize(len * d, T::zero());
        let mut mask = self.mask.clone();
        mask.resize(len, T::zero());
        StreamInput::new(Tensor::new(vec![len, d], data)?, mask)
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &p in perm {
            if p >= self.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract("not a permutation".into()));
            }
        }
        if perm.len() != self.len() {
            return Err(Error::Contract("not a permutation".into()));
        }
        let d = self.d_e();
        let src = self.embeddings.data();
        let data = perm.iter().flat_map(|&p| src[p * d..(p + 1) * d].iter().copied()).collect();
        let mask = perm.iter().map(|&p| self.mask[p]).collect();
        StreamInput::new(Tensor::new(vec![self.len(), d], data)?, mask)
    }
}

/// Parameters recorded on a tape, addressed through the layout.
pub struct Bound<'t, 'm, T> {
    pub vars: Vec<Var<'t, T>>,
    pub layout: &'m Layout,
    pub config: &'m ModelConfig,
}

impl<'t, T: Scalar> Bound<'t, '_, T> {
    fn v(&self, idx: usize) -> Var<'t, T> {
        self.vars[idx]
    }
}

/// Training-time dropout; `None` disables it.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn maybe_dropout<'t, T: Scalar>(x: Var<'t, T>, p: f64, rng: &mut DropoutRng<'_>) -> Result<Var<'t, T>> {
    match rng {
        Some(r) if p > 0.0 => x.dropout(p, &mut **r),
        _ => Ok(x),
    }
}

/// Multi-head self-attention over `x [L×d_e]`. Returns the output and the
/// per-head attention weights `[L×L]`.
pub fn mhsa_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    layer: &EncoderLayer,
    b: &Bound<'t, '_, T>,
    key_mask: &[bool],
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let scale = T::of(1.0 / (b.config.d_k() as f64).sqrt());
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let q = x.matmul(b.v(h.w_q))?;
        let k = x.matmul(b.v(h.w_k))?;
        let v = x.matmul(b.v(h.w_v))?;
        let scores = q.matmul(k.transpose()?)?.scale(scale).mask_keys(key_mask)?;
        let a = scores.softmax_rows();
        outs.push(a.matmul(v)?);
        weights.push(a);
    }
    let out = concat_last(&outs)?.matmul(b.v(layer.w_o))?;
    Ok((out, weights))
}

/// `relu(x W_1 + b_1) W_2 + b_2`.
pub fn ffn_forward<'t, T: Scalar>(x: Var<'t, T>, layer: &EncoderLayer, b: &Bound<'t, '_, T>) -> Result<Var<'t, T>> {
    x.matmul(b.v(layer.w_1))?
        .add_row(b.v(layer.b_1))?
        .relu()
        .matmul(b.v(layer.w_2))?
        .add_row(b.v(layer.b_2))
}

/// Post-norm encoder layer: `h = LN(x + MHSA(x))`, `out = LN(h + FFN(h))`.
pub fn encoder_layer_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    layer: &EncoderLayer,
    b: &Bound<'t, '_, T>,
    key_mask: &[bool],
    rng: &mut DropoutRng<'_>,
) -> Result<Var<'t, T>> {
    let eps = T::of(b.config.ln_eps);
    let p = b.config.dropout;
    let (attn, _) = mhsa_forward(x, layer, b, key_mask)?;
    let attn = maybe_dropout(attn, p, rng)?;
    let h = x.add(attn)?.layer_norm(b.v(layer.ln1_gamma), b.v(layer.ln1_beta), eps)?;
    let f = maybe_dropout(ffn_forward(h, layer, b)?, p, rng)?;
    h.add(f)?.layer_norm(b.v(layer.ln2_gamma), b.v(layer.ln2_beta), eps)
}

/// Encoder stack followed by masked mean pooling, giving `[d_e]`.
pub fn transformer_branch<'t, T: Scalar>(
    x: Var<'t, T>,
    input: &StreamInput<T>,
    layers: &[EncoderLayer],
    b: &Bound<'t, '_, T>,
    rng: &mut DropoutRng<'_>,
) -> Result<Var<'t, T>> {
    let key_mask = input.key_mask();
    let mut h = x;
    for layer in layers {
        h = encoder_layer_forward(h, layer, b, &key_mask, rng)?;
    }
    h.masked_mean_rows(input.mask())
}

/// Two same-padded convolutions with ReLU, then masked mean pooling, giving
/// `[conv2 filters]`. Rows beyond the sequence are zeroed between the two
/// convolutions so padding never leaks into real positions.
pub fn cnn_branch<'t, T: Scalar>(
    x: Var<'t, T>,
    input: &StreamInput<T>,
    cnn: &CnnLayers,
    b: &Bound<'t, '_, T>,
) -> Result<Var<'t, T>> {
    x.conv1d_same(b.v(cnn.conv1_w), b.v(cnn.conv1_b))?
        .relu()
        .row_mask(input.mask())?
        .conv1d_same(b.v(cnn.conv2_w), b.v(cnn.conv2_b))?
        .relu()
        .masked_mean_rows(input.mask())
}

/// Pooled features of one stream, transformer part first.
pub fn stream_features<'t, T: Scalar>(
    tape: &'t Tape<T>,
    input: &StreamInput<T>,
    stream: &Stream,
    b: &Bound<'t, '_, T>,
    rng: &mut DropoutRng<'_>,
) -> Result<Vec<Var<'t, T>>> {
    if input.d_e() != b.config.d_e {
        return Err(Error::ConfigMismatch(format!(
            "input width {} but model d_e is {}",
            input.d_e(),
            b.config.d_e
        )));
    }
    let x = tape.leaf(input.embeddings());
    let mut parts = Vec::with_capacity(2);
    if let Some(layers) = &stream.transformer {
        parts.push(transformer_branch(x, input, layers, b, rng)?);
    }
    if let Some(cnn) = &stream.cnn {
        parts.push(cnn_branch(x, input, cnn, b)?);
    }
    Ok(parts)
}

/// `[antigen features ; antibody features]`, 1-D of length
/// [`ModelConfig::fusion_width`].
pub fn fusion_vector<'t, T: Scalar>(
    tape: &'t Tape<T>,
    b: &Bound<'t, '_, T>,
    antigen: &StreamInput<T>,
    antibody: &StreamInput<T>,
    rng: &mut DropoutRng<'_>,
) -> Result<Var<'t, T>> {
    let mut parts = stream_features(tape, antigen, &b.layout.antigen, b, rng)?;
    parts.extend(stream_features(tape, antibody, &b.layout.antibody, b, rng)?);
    let f = concat_last(&parts)?;
    if f.len() != b.config.fusion_width() {
        return Err(Error::Contract(format!(
            "fusion width {} differs from configured {}",
            f.len(),
            b.config.fusion_width()
        )));
    }
    Ok(f)
}

/// ReLU hidden layers then a single linear output, giving `[1]`.
pub fn head_forward<'t, T: Scalar>(fusion: Var<'t, T>, head: &Head, b: &Bound<'t, '_, T>) -> Result<Var<'t, T>> {
    let mut y = fusion.reshape(&[1, fusion.len()])?;
    for d in &head.hidden {
        y = y.matmul(b.v(d.w))?.add_row(b.v(d.b))?.relu();
    }
    let w_out = b.v(head.w_out);
    y.matmul(w_out.reshape(&[w_out.len(), 1])?)?
        .reshape(&[1])?
        .add_row(b.v(head.b_out))
}

/// Predicted standardized affinity, shape `[1]`.
pub fn model_forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    b: &Bound<'t, '_, T>,
    antigen: &StreamInput<T>,
    antibody: &StreamInput<T>,
    rng: &mut DropoutRng<'_>,
) -> Result<Var<'t, T>> {
    let f = fusion_vector(tape, b, antigen, antibody, rng)?;
    head_forward(f, &b.layout.head, b)
}
