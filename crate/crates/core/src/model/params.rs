use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Named learnable tensors in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttentionIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct FusionIdx {
    pub self_attn: AttentionIdx,
    pub norm1: NormIdx,
    pub cross_attn: AttentionIdx,
    pub norm2: NormIdx,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub norm3: NormIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct HeadIdx {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub bn: NormIdx,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub fusion: Vec<FusionIdx>,
    pub heads: Vec<HeadIdx>,
}

enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect()
            }
            Init::Ones => vec![T::one(); n],
            Init::Zeros => vec![T::zero(); n],
        };
        self.store
            .push(name, Tensor::new(shape.to_vec(), data).expect("non-empty shape"))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::FanIn(fan_in));
        let b = self.add(format!("{prefix}.b"), &[fan_out], Init::FanIn(fan_in));
        (w, b)
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormIdx {
        NormIdx {
            gamma: self.add(format!("{prefix}.gamma"), &[width], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[width], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIdx {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.out"), d, d);
        AttentionIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }
}

/// Registers every parameter in canonical order, drawing initial values from `seed`.
pub(crate) fn build<T: Scalar>(config: &ModelConfig) -> (ParamStore<T>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let d = config.d_model;
    let hidden_ffn = d * config.ffn_expansion;
    let fusion = (0..super::FUSION_MODULES)
        .map(|i| {
            let p = format!("fusion{i}");
            let self_attn = b.attention(&format!("{p}.self_attn"), d);
            let norm1 = b.norm(&format!("{p}.norm1"), d);
            let cross_attn = b.attention(&format!("{p}.cross_attn"), d);
            let norm2 = b.norm(&format!("{p}.norm2"), d);
            let (ffn_w1, ffn_b1) = b.linear(&format!("{p}.ffn1"), d, hidden_ffn);
            let (ffn_w2, ffn_b2) = b.linear(&format!("{p}.ffn2"), hidden_ffn, d);
            let norm3 = b.norm(&format!("{p}.norm3"), d);
            FusionIdx {
                self_attn,
                norm1,
                cross_attn,
                norm2,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                norm3,
            }
        })
        .collect();
    let heads = (0..config.num_categories)
        .map(|n| {
            let p = format!("head{n}");
            let (fc1_w, fc1_b) = b.linear(&format!("{p}.fc1"), d, config.mlp_hidden);
            let bn = b.norm(&format!("{p}.bn"), config.mlp_hidden);
            let (fc2_w, fc2_b) = b.linear(&format!("{p}.fc2"), config.mlp_hidden, config.num_classes);
            HeadIdx {
                fc1_w,
                fc1_b,
                bn,
                fc2_w,
                fc2_b,
            }
        })
        .collect();
    (b.store, Layout { fusion, heads })
}
