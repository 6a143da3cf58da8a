//! Feature encoder and the four regression heads.
//!
//! Every model is an [`EncoderConfig`] MLP producing `φ(x)` followed by one
//! head. Graph builders (`build_*`) add nodes to an [`Expr`] whose leaves are
//! named after the entries of the model's [`ParamStore`]; the inference
//! helpers evaluate those graphs directly.

mod checkpoint;
mod incremental;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{nn, Bindings, Expr, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::TokenScheme;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use incremental::DecoderCache;

/// Longest token sequence the positional table supports.
pub const MAX_SEQUENCE_LEN: usize = 64;

/// Hidden widths swept for the encoder.
pub const ENCODER_WIDTH_PRESETS: [usize; 3] = [256, 512, 2048];

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        EncoderConfig { input_dim, layers: 3, hidden: 512 }
    }

    pub fn with_size(mut self, layers: usize, hidden: usize) -> Self {
        self.layers = layers;
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder.input_dim must be positive".into()));
        }
        if !(2..=5).contains(&self.layers) {
            return Err(Error::Config(format!("encoder.layers must be in 2..=5, got {}", self.layers)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("encoder.hidden must be positive".into()));
        }
        Ok(())
    }

    /// Width of `φ(x)`.
    pub fn output_dim(&self) -> usize {
        self.hidden
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
}

impl DecoderConfig {
    /// One layer, one head, 32 units.
    pub fn benchmark() -> Self {
        DecoderConfig { layers: 1, heads: 1, width: 32 }
    }

    /// Three layers, four heads, 128 units.
    pub fn ablation() -> Self {
        DecoderConfig { layers: 3, heads: 4, width: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 {
            return Err(Error::Config("decoder layers, heads and width must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.width {} is not divisible by decoder.heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadConfig {
    Decoder {
        #[serde(default)]
        decoder: DecoderConfig,
        scheme: TokenScheme,
    },
    Riemann {
        bins: usize,
    },
    Pointwise {
        #[serde(default)]
        sigmoid: bool,
    },
    Mdn {
        mixtures: usize,
    },
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            HeadConfig::Decoder { decoder, scheme } => {
                decoder.validate()?;
                scheme.validate()?;
                if scheme.len() > MAX_SEQUENCE_LEN {
                    return Err(Error::Config(format!(
                        "token sequence length {} exceeds {MAX_SEQUENCE_LEN}",
                        scheme.len()
                    )));
                }
                Ok(())
            }
            HeadConfig::Riemann { bins } if *bins < 2 => {
                Err(Error::Config(format!("riemann bins must be >= 2, got {bins}")))
            }
            HeadConfig::Mdn { mixtures } if *mixtures == 0 => {
                Err(Error::Config("mdn mixtures must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadConfig::Decoder { .. } => "decoder",
            HeadConfig::Riemann { .. } => "riemann",
            HeadConfig::Pointwise { .. } => "pointwise",
            HeadConfig::Mdn { .. } => "mdn",
        }
    }

    /// Whether the head defines a density over targets.
    pub fn is_distributional(&self) -> bool {
        !matches!(self, HeadConfig::Pointwise { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

/// Mixture parameters per row: weights, means, standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnParams {
    pub pi: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Graph handles for an MDN head.
#[derive(Clone, Copy, Debug)]
pub struct MdnVars {
    pub log_pi: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Encoder plus head with its trainable parameters.
#[derive(Clone, Debug)]
pub struct RegressionModel {
    config: ModelConfig,
    params: ParamStore,
}

impl RegressionModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let enc = &config.encoder;
        let mut fan_in = enc.input_dim;
        for i in 0..enc.layers {
            nn::init_linear(&mut params, rng, &format!("enc.{i}"), fan_in, enc.hidden);
            fan_in = enc.hidden;
        }
        let d = enc.output_dim();
        match &config.head {
            HeadConfig::Decoder { decoder, scheme } => {
                let (w, v) = (decoder.width, scheme.vocab_size());
                nn::init_linear(&mut params, rng, "dec.phi", d, w);
                params.insert("dec.tok", nn::glorot_uniform(rng, v, w));
                params.insert("dec.pos", nn::glorot_uniform(rng, scheme.len(), w));
                for l in 0..decoder.layers {
                    let b = format!("dec.blocks.{l}");
                    init_norm(&mut params, &format!("{b}.ln1"), w);
                    nn::init_attention(&mut params, rng, &format!("{b}.attn"), w);
                    init_norm(&mut params, &format!("{b}.ln2"), w);
                    nn::init_linear(&mut params, rng, &format!("{b}.mlp.0"), w, 4 * w);
                    nn::init_linear(&mut params, rng, &format!("{b}.mlp.1"), 4 * w, w);
                }
                init_norm(&mut params, "dec.ln", w);
                nn::init_linear(&mut params, rng, "dec.out", w, v);
            }
            HeadConfig::Riemann { bins } => nn::init_linear(&mut params, rng, "head", d, *bins),
            HeadConfig::Pointwise { .. } => nn::init_linear(&mut params, rng, "head", d, 1),
            HeadConfig::Mdn { mixtures } => {
                for part in ["pi", "mu", "sigma"] {
                    nn::init_linear(&mut params, rng, &format!("head.{part}"), d, *mixtures);
                }
            }
        }
        Ok(RegressionModel { config, params })
    }

    /// Reassembles a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = RegressionModel::new(config.clone(), &mut rng)?;
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter `{name}` is missing"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Config("checkpoint holds unexpected parameters".into()));
        }
        Ok(RegressionModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scheme(&self) -> Option<&TokenScheme> {
        match &self.config.head {
            HeadConfig::Decoder { scheme, .. } => Some(scheme),
            _ => None,
        }
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.count("enc.")
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count("") - self.encoder_param_count()
    }

    pub fn param_count(&self) -> usize {
        self.params.count("")
    }

    /// `φ(x)` for a `[B, input_dim]` input node.
    pub fn build_features(&self, e: &mut Expr, x: Var) -> Result<Var> {
        let enc = &self.config.encoder;
        let shape = e.shape(x);
        if shape.len() != 2 || shape[1] != enc.input_dim {
            return Err(Error::Config(format!(
                "feature matrix has shape {shape:?}, encoder expects [_, {}]",
                enc.input_dim
            )));
        }
        let mut h = x;
        let mut fan_in = enc.input_dim;
        for i in 0..enc.layers {
            h = nn::linear(e, h, &format!("enc.{i}"), fan_in, enc.hidden)?;
            h = e.relu(h);
            fan_in = enc.hidden;
        }
        Ok(h)
    }

    fn decoder_parts(&self) -> Result<(&DecoderConfig, &TokenScheme)> {
        match &self.config.head {
            HeadConfig::Decoder { decoder, scheme } => Ok((decoder, scheme)),
            other => Err(Error::Usage(format!("{} head has no token decoder", other.name()))),
        }
    }

    /// Next-token logits `[B, T+1, V]` for `φ: [B, d]` followed by the `T`
    /// tokens of each row of `inputs`. Position `t` sees `φ` and `inputs[.., <t]`.
    pub fn build_decoder(&self, e: &mut Expr, phi: Var, inputs: &[Vec<usize>]) -> Result<Var> {
        let (cfg, scheme) = self.decoder_parts()?;
        let batch = e.shape(phi)[0];
        if inputs.len() != batch {
            return Err(Error::Usage(format!("{} token rows for a batch of {batch}", inputs.len())));
        }
        let t_in = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|r| r.len() != t_in) {
            return Err(Error::Usage("token prefixes in one batch must share a length".into()));
        }
        let len = t_in + 1;
        if len > scheme.len() {
            return Err(Error::Usage(format!(
                "prefix of {t_in} tokens leaves nothing to predict (sequence length {})",
                scheme.len()
            )));
        }
        let (w, v, d) = (cfg.width, scheme.vocab_size(), self.config.encoder.output_dim());
        if let Some(bad) = inputs.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Usage(format!("token {bad} outside vocabulary of {v}")));
        }
        let start = nn::linear(e, phi, "dec.phi", d, w)?;
        let mut x = e.reshape(start, &[batch, 1, w])?;
        if t_in > 0 {
            let table = e.leaf("dec.tok", &[v, w])?;
            let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
            let emb = e.embedding(table, flat)?;
            let emb = e.reshape(emb, &[batch, t_in, w])?;
            x = e.concat(&[x, emb], 1)?;
        }
        let pos = e.leaf("dec.pos", &[scheme.len(), w])?;
        let pos = e.slice(pos, 0, 0, len)?;
        x = e.add(x, pos)?;
        for l in 0..cfg.layers {
            let b = format!("dec.blocks.{l}");
            let n = norm(e, x, &format!("{b}.ln1"), w)?;
            let a = nn::causal_self_attention(e, n, &format!("{b}.attn"), cfg.heads)?;
            x = e.add(x, a)?;
            let n = norm(e, x, &format!("{b}.ln2"), w)?;
            let m = nn::linear(e, n, &format!("{b}.mlp.0"), w, 4 * w)?;
            let m = e.relu(m);
            let m = nn::linear(e, m, &format!("{b}.mlp.1"), 4 * w, w)?;
            x = e.add(x, m)?;
        }
        let x = norm(e, x, "dec.ln", w)?;
        nn::linear(e, x, "dec.out", w, v)
    }

    pub fn build_riemann_logits(&self, e: &mut Expr, phi: Var) -> Result<Var> {
        match self.config.head {
            HeadConfig::Riemann { bins } => {
                nn::linear(e, phi, "head", self.config.encoder.output_dim(), bins)
            }
            ref other => Err(Error::Usage(format!("{} head has no bin logits", other.name()))),
        }
    }

    /// `[B, 1]` point predictions.
    pub fn build_pointwise(&self, e: &mut Expr, phi: Var) -> Result<Var> {
        match self.config.head {
            HeadConfig::Pointwise { sigmoid } => {
                let out = nn::linear(e, phi, "head", self.config.encoder.output_dim(), 1)?;
                Ok(if sigmoid { e.sigmoid(out) } else { out })
            }
            ref other => Err(Error::Usage(format!("{} head is not pointwise", other.name()))),
        }
    }

    pub fn build_mdn(&self, e: &mut Expr, phi: Var) -> Result<MdnVars> {
        match self.config.head {
            HeadConfig::Mdn { mixtures } => {
                let d = self.config.encoder.output_dim();
                let pi = nn::linear(e, phi, "head.pi", d, mixtures)?;
                let mu = nn::linear(e, phi, "head.mu", d, mixtures)?;
                let s = nn::linear(e, phi, "head.sigma", d, mixtures)?;
                let s = e.elu(s);
                Ok(MdnVars { log_pi: e.log_softmax(pi), mu, sigma: e.add_scalar(s, 1.0) })
            }
            ref other => Err(Error::Usage(format!("{} head is not a mixture", other.name()))),
        }
    }

    fn run(&self, build: impl FnOnce(&Self, &mut Expr) -> Result<Var>) -> Result<Tensor> {
        let mut e = Expr::new();
        let root = build(self, &mut e)?;
        e.set_root(root);
        let mut b = Bindings::new();
        self.params.bind_into(&mut b);
        let mut values = e.forward(&b)?;
        Ok(values.swap_remove(root.index()).into_owned())
    }

    /// `φ(x)` for a `[B, input_dim]` matrix.
    pub fn encode_features(&self, x: &Tensor) -> Result<Tensor> {
        self.run(|m, e| {
            let x = e.constant(x.clone());
            m.build_features(e, x)
        })
    }

    /// Next-token logits `[B, V]` for each `φ` row and its prefix.
    pub fn decoder_next_logits(&self, phi: &Tensor, prefixes: &[Vec<usize>]) -> Result<Tensor> {
        let t = prefixes.first().map_or(0, Vec::len);
        let all = self.run(|m, e| {
            let p = e.constant(phi.clone());
            m.build_decoder(e, p, prefixes)
        })?;
        let v = all.last_dim();
        let rows = prefixes.len();
        let mut out = Vec::with_capacity(rows * v);
        for r in 0..rows {
            out.extend_from_slice(all.row(r * (t + 1) + t));
        }
        Tensor::new([rows, v], out)
    }

    /// Logits for a single `φ` row after `prefix`.
    pub fn decoder_logits(&self, phi: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        let phi = Tensor::new([1, phi.len()], phi.to_vec())?;
        Ok(self.decoder_next_logits(&phi, &[prefix.to_vec()])?.into_data())
    }

    pub fn riemann_probs(&self, phi: &Tensor) -> Result<Tensor> {
        self.run(|m, e| {
            let p = e.constant(phi.clone());
            let l = m.build_riemann_logits(e, p)?;
            Ok(e.softmax(l))
        })
    }

    pub fn pointwise_predict(&self, phi: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .run(|m, e| {
                let p = e.constant(phi.clone());
                m.build_pointwise(e, p)
            })?
            .into_data())
    }

    pub fn mdn_params(&self, phi: &Tensor) -> Result<MdnParams> {
        let pi = self.run(|m, e| {
            let p = e.constant(phi.clone());
            let v = m.build_mdn(e, p)?;
            Ok(e.exp(v.log_pi))
        })?;
        let mu = self.run(|m, e| {
            let p = e.constant(phi.clone());
            Ok(m.build_mdn(e, p)?.mu)
        })?;
        let sigma = self.run(|m, e| {
            let p = e.constant(phi.clone());
            Ok(m.build_mdn(e, p)?.sigma)
        })?;
        Ok(MdnParams { pi, mu, sigma })
    }
}

fn init_norm(params: &mut ParamStore, name: &str, width: usize) {
    params.insert(format!("{name}.g"), Tensor::full([width], 1.0));
    params.insert(format!("{name}.b"), Tensor::zeros([width]));
}

fn norm(e: &mut Expr, x: Var, name: &str, width: usize) -> Result<Var> {
    let g = e.leaf(&format!("{name}.g"), &[width])?;
    let b = e.leaf(&format!("{name}.b"), &[width])?;
    let n = e.layer_norm(x, LN_EPS);
    let n = e.mul(n, g)?;
    e.add(n, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn zero_all(m: &mut RegressionModel) {
        let names: Vec<String> = m.params().names().map(String::from).collect();
        for n in names {
            m.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }

    fn set(m: &mut RegressionModel, name: &str, values: &[f64]) {
        m.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(values);
    }

    fn small(head: HeadConfig) -> RegressionModel {
        let cfg = ModelConfig { encoder: EncoderConfig::new(2).with_size(2, 2), head };
        RegressionModel::new(cfg, &mut rng()).unwrap()
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut m = small(HeadConfig::Pointwise { sigmoid: false });
        zero_all(&mut m);
        let phi = m.encode_features(&Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap()).unwrap();
        assert_eq!(phi.data(), &[0.0, 0.0]);
    }

    #[test]
    fn feature_width_follows_config() {
        for layers in 2..=5 {
            for hidden in [3, 17] {
                let cfg = ModelConfig {
                    encoder: EncoderConfig::new(4).with_size(layers, hidden),
                    head: HeadConfig::Riemann { bins: 4 },
                };
                let m = RegressionModel::new(cfg, &mut rng()).unwrap();
                let phi = m.encode_features(&Tensor::full([5, 4], 0.3)).unwrap();
                assert_eq!(phi.shape(), &[5, hidden]);
            }
        }
    }

    #[test]
    fn hand_set_encoder_matches_arithmetic() {
        let mut m = small(HeadConfig::Pointwise { sigmoid: false });
        // layer 0: [[1, -2], [3, 1]], b = (0, 1); layer 1: [[1, 1], [-1, 2]], b = (-1, 0)
        set(&mut m, "enc.0.w", &[1.0, -2.0, 3.0, 1.0]);
        set(&mut m, "enc.0.b", &[0.0, 1.0]);
        set(&mut m, "enc.1.w", &[1.0, 1.0, -1.0, 2.0]);
        set(&mut m, "enc.1.b", &[-1.0, 0.0]);
        let phi = m.encode_features(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        // h1 = relu(1+3, -2+1+1) = (4, 0); h2 = relu(4-1, 4) = (3, 4)
        assert_eq!(phi.data(), &[3.0, 4.0]);
        let bad = m.encode_features(&Tensor::full([1, 3], 1.0));
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn riemann_examples() {
        let mut m = small(HeadConfig::Riemann { bins: 2 });
        zero_all(&mut m);
        let phi = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.riemann_probs(&phi).unwrap().data(), &[0.5, 0.5]);
        set(&mut m, "head.b", &[3f64.ln(), 0.0]);
        let p = m.riemann_probs(&phi).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12 && (p.data()[1] - 0.25).abs() < 1e-12);
        set(&mut m, "head.b", &[3f64.ln() + 7.0, 7.0]);
        let q = m.riemann_probs(&phi).unwrap();
        assert!((q.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pointwise_examples() {
        let mut m = small(HeadConfig::Pointwise { sigmoid: true });
        zero_all(&mut m);
        let phi = Tensor::from_rows(&[vec![2.0, 5.0]]).unwrap();
        assert_eq!(m.pointwise_predict(&phi).unwrap(), vec![0.5]);
        let mut m = small(HeadConfig::Pointwise { sigmoid: false });
        zero_all(&mut m);
        assert_eq!(m.pointwise_predict(&phi).unwrap(), vec![0.0]);
        set(&mut m, "head.w", &[1.5, -2.0]);
        set(&mut m, "head.b", &[0.25]);
        assert_eq!(m.pointwise_predict(&phi).unwrap(), vec![3.0 - 10.0 + 0.25]);
    }

    #[test]
    fn mdn_examples() {
        let mut m = small(HeadConfig::Mdn { mixtures: 2 });
        zero_all(&mut m);
        let phi = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let p = m.mdn_params(&phi).unwrap();
        assert_eq!(p.pi.data(), &[0.5, 0.5]);
        assert_eq!(p.sigma.data(), &[1.0, 1.0]);
        set(&mut m, "head.sigma.b", &[-20.0, 0.5]);
        set(&mut m, "head.mu.w", &[1.0, 0.0, 0.0, -1.0]);
        set(&mut m, "head.pi.b", &[2f64.ln(), 0.0]);
        let p = m.mdn_params(&phi).unwrap();
        assert!(p.sigma.data()[0] > 0.0 && (p.sigma.data()[0] - (-20f64).exp()).abs() < 1e-15);
        assert!((p.sigma.data()[1] - 1.5).abs() < 1e-15);
        assert_eq!(p.mu.data(), &[1.0, -2.0]);
        assert!((p.pi.data()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    fn decoder_model(scheme: TokenScheme) -> RegressionModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig::new(2).with_size(2, 8),
            head: HeadConfig::Decoder { decoder: DecoderConfig { layers: 2, heads: 2, width: 8 }, scheme },
        };
        RegressionModel::new(cfg, &mut rng()).unwrap()
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut m = decoder_model(TokenScheme::normalized(4, 3).unwrap());
        m.params_mut().get_mut("dec.out.w").unwrap().data_mut().fill(0.0);
        m.params_mut().get_mut("dec.out.b").unwrap().data_mut().fill(0.0);
        let logits = m.decoder_logits(&[0.3; 8], &[1, 2]).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
    }

    #[test]
    fn decoder_is_causal() {
        let m = decoder_model(TokenScheme::normalized(3, 4).unwrap());
        let phi = Tensor::new([1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let run = |tokens: &[usize]| {
            let mut e = Expr::new();
            let p = e.constant(phi.clone());
            let out = m.build_decoder(&mut e, p, &[tokens.to_vec()]).unwrap();
            e.set_root(out);
            let mut b = Bindings::new();
            m.params().bind_into(&mut b);
            e.forward(&b).unwrap()[out.index()].clone().into_owned()
        };
        let base = [0, 1, 2];
        let reference = run(&base);
        for j in 0..3 {
            for tok in 0..3 {
                let mut changed = base;
                changed[j] = tok;
                let out = run(&changed);
                // token j is input position j + 1
                for pos in 0..=j {
                    assert_eq!(out.row(pos), reference.row(pos), "pos {pos} saw token {j}");
                }
                if tok != base[j] {
                    assert_ne!(out.row(j + 1), reference.row(j + 1));
                }
            }
        }
        // the last-position logits from a prefix query agree with the full pass
        let next = m.decoder_next_logits(&phi, &[vec![0, 1]]).unwrap();
        assert_eq!(next.data(), reference.row(2));
        assert!(matches!(m.decoder_logits(phi.data(), &[0, 1, 2, 0]), Err(Error::Usage(_))));
    }

    #[test]
    fn default_decoder_is_small_fraction() {
        let cfg = ModelConfig {
            encoder: EncoderConfig::new(1),
            head: HeadConfig::Decoder {
                decoder: DecoderConfig::benchmark(),
                scheme: TokenScheme::unnormalized(10, 3, 4).unwrap(),
            },
        };
        let m = RegressionModel::new(cfg, &mut rng()).unwrap();
        let frac = m.head_param_count() as f64 / m.param_count() as f64;
        assert!(frac < 0.1, "{frac}");
    }

    #[test]
    fn outputs_finite_across_random_parameter_draws() {
        let m0 = decoder_model(TokenScheme::unnormalized(4, 1, 2).unwrap());
        let mdn0 = small(HeadConfig::Mdn { mixtures: 3 });
        let mut r = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10_000 {
            let mut m = mdn0.clone();
            let names: Vec<String> = m.params().names().map(String::from).collect();
            for n in &names {
                for v in m.params_mut().get_mut(n).unwrap().data_mut() {
                    *v = r.random_range(-3.0..3.0);
                }
            }
            let phi = Tensor::new([1, 2], vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]).unwrap();
            let p = m.mdn_params(&phi).unwrap();
            assert!(p.pi.is_finite() && p.mu.is_finite() && p.sigma.data().iter().all(|&s| s > 0.0));
        }
        for _ in 0..200 {
            let mut m = m0.clone();
            let names: Vec<String> = m.params().names().map(String::from).collect();
            for n in &names {
                for v in m.params_mut().get_mut(n).unwrap().data_mut() {
                    *v = r.random_range(-3.0..3.0);
                }
            }
            let phi: Vec<f64> = (0..8).map(|_| r.random_range(-3.0..3.0)).collect();
            assert!(m.decoder_logits(&phi, &[4, 5, 1]).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            (EncoderConfig::new(2).with_size(1, 8), HeadConfig::Riemann { bins: 4 }),
            (EncoderConfig::new(2).with_size(6, 8), HeadConfig::Riemann { bins: 4 }),
            (EncoderConfig::new(2), HeadConfig::Riemann { bins: 1 }),
            (EncoderConfig::new(2), HeadConfig::Mdn { mixtures: 0 }),
            (
                EncoderConfig::new(2),
                HeadConfig::Decoder {
                    decoder: DecoderConfig { layers: 1, heads: 3, width: 32 },
                    scheme: TokenScheme::normalized(2, 4).unwrap(),
                },
            ),
        ];
        for (encoder, head) in bad {
            let cfg = ModelConfig { encoder, head };
            assert!(matches!(RegressionModel::new(cfg, &mut rng()), Err(Error::Config(_))));
        }
    }
}
