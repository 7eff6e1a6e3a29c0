//! Parameter layout: every learnable tensor lives in one flat, ordered list,
//! and the structs here hold indices into it.
//!
//! Order (also the checkpoint order): antigen stream, antibody stream, head.
//! Within a stream: encoder layers (per layer: `head{h}.w_q`, `head{h}.w_k`,
//! `head{h}.w_v` for each head, then `w_o`, `ffn.w_1`, `ffn.b_1`, `ffn.w_2`,
//! `ffn.b_2`, `ln1.gamma`, `ln1.beta`, `ln2.gamma`, `ln2.beta`), then
//! `cnn.conv1.w`, `cnn.conv1.b`, `cnn.conv2.w`, `cnn.conv2.b`. The head is
//! `dense{i}.w`, `dense{i}.b` per hidden layer, then `w_out`, `b_out`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn bound(&self) -> f64 {
        match *self {
            Init::Xavier { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub heads: Vec<AttentionHead>,
    pub w_o: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnLayers {
    pub conv1_w: usize,
    pub conv1_b: usize,
    pub conv2_w: usize,
    pub conv2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    /// `None` when the variant has no transformer branch. An empty stack is
    /// the identity before pooling.
    pub transformer: Option<Vec<EncoderLayer>>,
    pub cnn: Option<CnnLayers>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Vec<Dense>,
    /// Shape `[last hidden width]`.
    pub w_out: usize,
    /// Shape `[1]`.
    pub b_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub antigen: Stream,
    pub antibody: Stream,
    pub head: Head,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> usize {
        self.add(name, shape, Init::Xavier { fan_in, fan_out })
    }

    fn stream(&mut self, prefix: &str, c: &ModelConfig) -> Stream {
        let (d_e, d_k, d_ff) = (c.d_e, c.d_k(), c.d_ff());
        let transformer = c.variant.uses_transformer().then(|| {
            (0..c.n_layers)
                .map(|l| {
                    let p = format!("{prefix}.transformer.layer{l}");
                    let heads = (0..c.n_heads)
                        .map(|h| AttentionHead {
                            w_q: self.weight(format!("{p}.head{h}.w_q"), vec![d_e, d_k], d_e, d_k),
                            w_k: self.weight(format!("{p}.head{h}.w_k"), vec![d_e, d_k], d_e, d_k),
                            w_v: self.weight(format!("{p}.head{h}.w_v"), vec![d_e, d_k], d_e, d_k),
                        })
                        .collect();
                    EncoderLayer {
                        heads,
                        w_o: self.weight(format!("{p}.w_o"), vec![d_e, d_e], d_e, d_e),
                        w_1: self.weight(format!("{p}.ffn.w_1"), vec![d_e, d_ff], d_e, d_ff),
                        b_1: self.add(format!("{p}.ffn.b_1"), vec![d_ff], Init::Zeros),
                        w_2: self.weight(format!("{p}.ffn.w_2"), vec![d_ff, d_e], d_ff, d_e),
                        b_2: self.add(format!("{p}.ffn.b_2"), vec![d_e], Init::Zeros),
                        ln1_gamma: self.add(format!("{p}.ln1.gamma"), vec![d_e], Init::Ones),
                        ln1_beta: self.add(format!("{p}.ln1.beta"), vec![d_e], Init::Zeros),
                        ln2_gamma: self.add(format!("{p}.ln2.gamma"), vec![d_e], Init::Ones),
                        ln2_beta: self.add(format!("{p}.ln2.beta"), vec![d_e], Init::Zeros),
                    }
                })
                .collect()
        });
        let cnn = c.variant.uses_cnn().then(|| {
            let p = format!("{prefix}.cnn");
            let (k1, f1) = (c.conv1.kernel, c.conv1.filters);
            let (k2, f2) = (c.conv2.kernel, c.conv2.filters);
            CnnLayers {
                conv1_w: self.weight(format!("{p}.conv1.w"), vec![k1, d_e, f1], k1 * d_e, k1 * f1),
                conv1_b: self.add(format!("{p}.conv1.b"), vec![f1], Init::Zeros),
                conv2_w: self.weight(format!("{p}.conv2.w"), vec![k2, f1, f2], k2 * f1, k2 * f2),
                conv2_b: self.add(format!("{p}.conv2.b"), vec![f2], Init::Zeros),
            }
        });
        Stream { transformer, cnn }
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Result<Layout> {
        c.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let antigen = b.stream("antigen", c);
        let antibody = b.stream("antibody", c);
        let mut width = c.fusion_width();
        let hidden = c
            .head_dims
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let d = Dense {
                    w: b.weight(format!("head.dense{i}.w"), vec![width, out], width, out),
                    b: b.add(format!("head.dense{i}.b"), vec![out], Init::Zeros),
                };
                width = out;
                d
            })
            .collect();
        let head = Head {
            hidden,
            w_out: b.weight("head.w_out".into(), vec![width], width, 1),
            b_out: b.add("head.b_out".into(), vec![1], Init::Zeros),
        };
        Ok(Layout {
            specs: b.specs,
            antigen,
            antibody,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Seeded initialization, drawn in layout order from one stream.
    pub fn init<T: Scalar>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Xavier { .. } => {
                        let b = s.init.bound();
                        (0..n).map(|_| T::of(rng.random_range(-b..=b))).collect()
                    }
                };
                Tensor::new(s.shape.clone(), data)
                    .expect("layout shapes are positive")
                    .with_requires_grad(true)
            })
            .collect()
    }
}
