//! Model configuration and parameter tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            context_len: 160,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("context_len", self.context_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("n_heads", "d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    /// Fused query/key/value projection, `3·d_model × d_model`.
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    /// FFN input projection, `d_ffn × d_model`.
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    /// FFN output projection, `d_model × d_ffn`. The key-value memory that
    /// rank-one and side-memory editing operate on.
    pub w_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        LayerParams {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            w_qkv: Tensor::zeros(&[3 * d, d]),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w_in: Tensor::zeros(&[f, d]),
            b_in: Tensor::zeros(&[f]),
            w_out: Tensor::zeros(&[d, f]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<T>); 11] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_in", &self.w_in),
            ("b_in", &self.b_in),
            ("w_out", &self.w_out),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 11] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_in", &mut self.w_in),
            ("b_in", &mut self.b_in),
            ("w_out", &mut self.w_out),
        ]
    }
}

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.d_model;
        Params {
            tok_emb: Tensor::zeros(&[vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.context_len, d]),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            lnf_g: Tensor::zeros(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[vocab_size, d]),
        }
    }

    /// GPT-2 style initialization, seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let mut p = Self::zeros(cfg, vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut fill = |t: &mut Tensor<T>, sd: f64| {
            let normal = Normal::new(0.0, sd).expect("valid std");
            for x in t.data.iter_mut() {
                *x = T::from_f64(normal.sample(&mut rng));
            }
        };
        fill(&mut p.tok_emb, std);
        fill(&mut p.pos_emb, std / 2.0);
        for layer in &mut p.layers {
            fill(&mut layer.w_qkv, std);
            fill(&mut layer.w_o, resid_std);
            fill(&mut layer.w_in, std);
            fill(&mut layer.w_out, resid_std);
            layer.ln1_g.data.fill(T::one());
            layer.ln2_g.data.fill(T::one());
        }
        fill(&mut p.head, std);
        p.lnf_g.data.fill(T::one());
        p
    }

    /// All tensors with stable dotted names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.tensors().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.tensors_mut().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf_g".to_string(), &mut self.lnf_g));
        out.push(("lnf_b".to_string(), &mut self.lnf_b));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill_zero();
        }
        z
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    w_qkv: l.w_qkv.cast(),
                    b_qkv: l.b_qkv.cast(),
                    w_o: l.w_o.cast(),
                    b_o: l.b_o.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w_in: l.w_in.cast(),
                    b_in: l.b_in.cast(),
                    w_out: l.w_out.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            head: self.head.cast(),
        }
    }

    /// `self += k * other`, tensor by tensor.
    pub fn axpy(&mut self, k: T, other: &Params<T>) {
        let others = other.named();
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(others) {
            a.axpy(k, b);
        }
    }

    pub fn scale(&mut self, k: T) {
        for (_, t) in self.named_mut() {
            t.scale(k);
        }
    }

    pub fn sum_sq(&self) -> T {
        self.named().iter().map(|(_, t)| t.sum_sq()).sum()
    }

    /// Order-sensitive digest of every parameter bit, for immutability checks.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for x in &t.data {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
