use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ConfigError, ModelConfig};

pub const INIT_STD: f64 = 0.02;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub o_w: Tensor<T>,
    pub o_b: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ff1_w: Tensor<T>,
    pub ff1_b: Tensor<T>,
    pub ff2_w: Tensor<T>,
    pub ff2_b: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

/// Encoder weights plus MLM and NSP heads. The MLM output projection is the
/// transposed token embedding; only its bias is a separate tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub position_emb: Tensor<T>,
    pub segment_emb: Tensor<T>,
    pub emb_ln_gamma: Tensor<T>,
    pub emb_ln_beta: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub mlm_dense_w: Tensor<T>,
    pub mlm_dense_b: Tensor<T>,
    pub mlm_ln_gamma: Tensor<T>,
    pub mlm_ln_beta: Tensor<T>,
    pub mlm_out_bias: Tensor<T>,
    pub pooler_w: Tensor<T>,
    pub pooler_b: Tensor<T>,
    pub nsp_w: Tensor<T>,
    pub nsp_b: Tensor<T>,
}

/// Stored (32-bit) parameters.
pub type Parameters = Params<f32>;
/// Gradients and working copies are 64-bit.
pub type Gradients = Params<f64>;

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

impl<T> LayerParams<T> {
    fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("attention.query.weight", &self.q_w),
            ("attention.query.bias", &self.q_b),
            ("attention.key.weight", &self.k_w),
            ("attention.key.bias", &self.k_b),
            ("attention.value.weight", &self.v_w),
            ("attention.value.bias", &self.v_b),
            ("attention.output.weight", &self.o_w),
            ("attention.output.bias", &self.o_b),
            ("attention.norm.gamma", &self.ln1_gamma),
            ("attention.norm.beta", &self.ln1_beta),
            ("ffn.inner.weight", &self.ff1_w),
            ("ffn.inner.bias", &self.ff1_b),
            ("ffn.output.weight", &self.ff2_w),
            ("ffn.output.bias", &self.ff2_b),
            ("ffn.norm.gamma", &self.ln2_gamma),
            ("ffn.norm.beta", &self.ln2_beta),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        [
            ("attention.query.weight", &mut self.q_w),
            ("attention.query.bias", &mut self.q_b),
            ("attention.key.weight", &mut self.k_w),
            ("attention.key.bias", &mut self.k_b),
            ("attention.value.weight", &mut self.v_w),
            ("attention.value.bias", &mut self.v_b),
            ("attention.output.weight", &mut self.o_w),
            ("attention.output.bias", &mut self.o_b),
            ("attention.norm.gamma", &mut self.ln1_gamma),
            ("attention.norm.beta", &mut self.ln1_beta),
            ("ffn.inner.weight", &mut self.ff1_w),
            ("ffn.inner.bias", &mut self.ff1_b),
            ("ffn.output.weight", &mut self.ff2_w),
            ("ffn.output.bias", &mut self.ff2_b),
            ("ffn.norm.gamma", &mut self.ln2_gamma),
            ("ffn.norm.beta", &mut self.ln2_beta),
        ]
    }
}

fn init_kind(name: &str) -> InitKind {
    if name.ends_with(".gamma") {
        InitKind::Ones
    } else if name.ends_with(".bias") || name.ends_with(".beta") {
        InitKind::Zeros
    } else {
        InitKind::Normal
    }
}

impl<T> Params<T> {
    /// All tensors with stable names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embeddings.token".into(), &self.token_emb),
            ("embeddings.position".into(), &self.position_emb),
            ("embeddings.segment".into(), &self.segment_emb),
            ("embeddings.norm.gamma".into(), &self.emb_ln_gamma),
            ("embeddings.norm.beta".into(), &self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, t) in layer.named() {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.extend([
            ("mlm.dense.weight".to_string(), &self.mlm_dense_w),
            ("mlm.dense.bias".to_string(), &self.mlm_dense_b),
            ("mlm.norm.gamma".to_string(), &self.mlm_ln_gamma),
            ("mlm.norm.beta".to_string(), &self.mlm_ln_beta),
            ("mlm.output.bias".to_string(), &self.mlm_out_bias),
            ("pooler.weight".to_string(), &self.pooler_w),
            ("pooler.bias".to_string(), &self.pooler_b),
            ("nsp.weight".to_string(), &self.nsp_w),
            ("nsp.bias".to_string(), &self.nsp_b),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("embeddings.token".into(), &mut self.token_emb),
            ("embeddings.position".into(), &mut self.position_emb),
            ("embeddings.segment".into(), &mut self.segment_emb),
            ("embeddings.norm.gamma".into(), &mut self.emb_ln_gamma),
            ("embeddings.norm.beta".into(), &mut self.emb_ln_beta),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer.named_mut() {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.extend([
            ("mlm.dense.weight".to_string(), &mut self.mlm_dense_w),
            ("mlm.dense.bias".to_string(), &mut self.mlm_dense_b),
            ("mlm.norm.gamma".to_string(), &mut self.mlm_ln_gamma),
            ("mlm.norm.beta".to_string(), &mut self.mlm_ln_beta),
            ("mlm.output.bias".to_string(), &mut self.mlm_out_bias),
            ("pooler.weight".to_string(), &mut self.pooler_w),
            ("pooler.bias".to_string(), &mut self.pooler_b),
            ("nsp.weight".to_string(), &mut self.nsp_w),
            ("nsp.bias".to_string(), &mut self.nsp_b),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize
    where
        T: Copy + Default,
    {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<T: Copy + Default> Params<T> {
    /// Allocates every tensor with its configured shape, filled by `fill`.
    pub fn shaped(config: &ModelConfig, fill: impl Fn(InitKind) -> T) -> Self {
        let h = config.hidden;
        let t = |shape: &[usize], name: &str| Tensor::filled(shape, fill(init_kind(name)));
        let layer = || LayerParams {
            q_w: t(&[h, h], "w"),
            q_b: t(&[h], ".bias"),
            k_w: t(&[h, h], "w"),
            k_b: t(&[h], ".bias"),
            v_w: t(&[h, h], "w"),
            v_b: t(&[h], ".bias"),
            o_w: t(&[h, h], "w"),
            o_b: t(&[h], ".bias"),
            ln1_gamma: t(&[h], ".gamma"),
            ln1_beta: t(&[h], ".beta"),
            ff1_w: t(&[h, config.ff_dim], "w"),
            ff1_b: t(&[config.ff_dim], ".bias"),
            ff2_w: t(&[config.ff_dim, h], "w"),
            ff2_b: t(&[h], ".bias"),
            ln2_gamma: t(&[h], ".gamma"),
            ln2_beta: t(&[h], ".beta"),
        };
        Params {
            config: config.clone(),
            token_emb: t(&[config.vocab_size, h], "w"),
            position_emb: t(&[config.max_seq, h], "w"),
            segment_emb: t(&[2, h], "w"),
            emb_ln_gamma: t(&[h], ".gamma"),
            emb_ln_beta: t(&[h], ".beta"),
            layers: (0..config.layers).map(|_| layer()).collect(),
            mlm_dense_w: t(&[h, h], "w"),
            mlm_dense_b: t(&[h], ".bias"),
            mlm_ln_gamma: t(&[h], ".gamma"),
            mlm_ln_beta: t(&[h], ".beta"),
            mlm_out_bias: t(&[config.vocab_size], ".bias"),
            pooler_w: t(&[h, h], "w"),
            pooler_b: t(&[h], ".bias"),
            nsp_w: t(&[h, 2], "w"),
            nsp_b: t(&[2], ".bias"),
        }
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        Self::shaped(config, |_| T::default())
    }

    pub fn convert<U: Copy + Default>(&self, f: impl Fn(T) -> U + Copy) -> Params<U> {
        let mut out = Params::<U>::zeros_like(&self.config);
        for ((_, dst), (_, src)) in out
            .named_tensors_mut()
            .into_iter()
            .zip(self.named_tensors())
        {
            *dst = src.map(f);
        }
        out
    }
}

impl Parameters {
    pub fn to_f64(&self) -> Params<f64> {
        self.convert(f64::from)
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}

impl Params<f64> {
    pub fn to_f32(&self) -> Parameters {
        self.convert(|x| x as f32)
    }
}

/// Draws from N(0, std²) truncated at two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Truncated-normal weights (σ = 0.02), zero biases, unit norm scales.
pub fn init_params(config: &ModelConfig) -> Result<Parameters, ConfigError> {
    config.validate()?;
    let mut params = Parameters::zeros_like(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (name, tensor) in params.named_tensors_mut() {
        match init_kind(&name) {
            InitKind::Normal => {
                for x in &mut tensor.data {
                    *x = truncated_normal(&mut rng, INIT_STD) as f32;
                }
            }
            InitKind::Ones => tensor.data.fill(1.0),
            InitKind::Zeros => tensor.data.fill(0.0),
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 4,
            ff_dim: 64,
            vocab_size: 100,
            max_seq: 96,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_init() {
        let a = init_params(&toy()).unwrap();
        let b = init_params(&toy()).unwrap();
        assert_eq!(a, b);
        let mut c = toy();
        c.seed = 8;
        assert_ne!(init_params(&c).unwrap(), a);
    }

    #[test]
    fn shapes_and_init_kinds() {
        let p = init_params(&toy()).unwrap();
        assert_eq!(p.token_emb.shape, [100, 32]);
        assert_eq!(p.layers[1].ff1_w.shape, [32, 64]);
        assert_eq!(p.nsp_w.shape, [32, 2]);
        assert!(p.layers[0].q_b.data.iter().all(|&x| x == 0.0));
        assert!(p.mlm_ln_gamma.data.iter().all(|&x| x == 1.0));
        assert!(p.token_emb.data.iter().all(|&x| x.abs() <= 0.04));
        let mean_sq: f64 = p
            .token_emb
            .data
            .iter()
            .map(|&x| f64::from(x).powi(2))
            .sum::<f64>()
            / p.token_emb.len() as f64;
        // truncation at 2σ shrinks the variance to about 0.774 σ²
        assert!((mean_sq.sqrt() - 0.02 * 0.774f64.sqrt()).abs() < 0.002);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = toy();
        c.hidden = 30;
        assert!(init_params(&c).is_err());
    }

    #[test]
    fn names_unique() {
        let p = init_params(&toy()).unwrap();
        let names: std::collections::HashSet<_> =
            p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 5 + 2 * 16 + 9);
    }
}
