//! The frozen base denoiser: `M` pre-norm transformer blocks over latent
//! tokens with timestep and prompt-class conditioning.
//!
//! Tokenisation is the identity on the latent layout: token `(f, h, w)` is the
//! latent cell's channel vector. The forward pass records every block's input
//! and output so control branches (and tests) can inspect them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::LatentTensor;
use crate::control::ControlBundle;
use crate::diffusion::Denoiser;
use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::nn::{Block, BlockCache, LayerNorm, LayerNormCache, Linear};
use crate::params::ParamSet;
use crate::tensor::{add_assign, Tensor, TokenMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaseConfig {
    pub latent_channels: usize,
    /// latent grid `(f, h, w)`
    pub grid: (usize, usize, usize),
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub num_classes: usize,
}

impl BaseConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_channels,
            self.n_tokens(),
            self.width,
            self.blocks,
            self.heads,
            self.mlp_hidden,
            self.time_dim,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Configuration(
                "base config has a zero dimension".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Configuration(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Configuration(
                "time embedding dim must be even".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub config: BaseConfig,
    pub embed: Linear,
    pub pos: Tensor,
    pub time_proj: Linear,
    pub class_embed: Tensor,
    pub blocks: Vec<Block>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

impl BaseParams {
    pub fn init<R: Rng + ?Sized>(config: BaseConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let embed = Linear::new(config.latent_channels, d, rng);
        let pos = Tensor::randn(&[config.n_tokens(), d], 0.1, rng);
        let time_proj = Linear::new(config.time_dim, d, rng);
        let class_embed = Tensor::randn(&[config.num_classes, d], 0.1, rng);
        let blocks = (0..config.blocks)
            .map(|_| Block::new(d, config.heads, config.mlp_hidden, rng))
            .collect();
        let head = Linear::with_std(d, config.latent_channels, 0.1 / math::sqrt(d as f64), rng);
        Ok(Self {
            config,
            embed,
            pos,
            time_proj,
            class_embed,
            blocks,
            head_norm: LayerNorm::new(d),
            head,
        })
    }

    pub(crate) fn check_input(&self, z_t: &LatentTensor, class: usize) -> Result<()> {
        if z_t.channels != self.config.latent_channels {
            return Err(dim_err(
                "channels",
                format!(
                    "latent has {} channels, embed expects {}",
                    z_t.channels, self.config.latent_channels
                ),
            ));
        }
        if z_t.grid() != self.config.grid {
            return Err(dim_err(
                "grid",
                "latent grid differs from the model's token grid",
            ));
        }
        if class >= self.config.num_classes {
            return Err(Error::Conditioning(format!(
                "unknown prompt class {class} (model has {})",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// `x_0 = embed(z_t) + pos + time_proj(sin(t)) + class_embed[c]`.
    pub(crate) fn embed_tokens(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.config.n_tokens();
        let d = self.config.width;
        let time_feat = timestep_features(t, self.config.time_dim);
        let mut cond = self.time_proj.forward(&time_feat, 1);
        add_assign(
            &mut cond,
            &self.class_embed.data[class * d..(class + 1) * d],
        );
        let mut x0 = self.embed.forward(&z_t.data, n);
        add_assign(&mut x0, &self.pos.data);
        for row in x0.chunks_exact_mut(d) {
            add_assign(row, &cond);
        }
        (x0, time_feat)
    }

    pub(crate) fn embed_backward(
        &self,
        tokens: &[f64],
        time_feat: &[f64],
        class: usize,
        dx0: &[f64],
        grad: &mut BaseParams,
    ) {
        let n = self.config.n_tokens();
        let d = self.config.width;
        self.embed
            .backward(tokens, dx0, n, Some(&mut grad.embed), false);
        add_assign(&mut grad.pos.data, dx0);
        let mut dcond = vec![0.0; d];
        for row in dx0.chunks_exact(d) {
            add_assign(&mut dcond, row);
        }
        add_assign(
            &mut grad.class_embed.data[class * d..(class + 1) * d],
            &dcond,
        );
        self.time_proj
            .backward(time_feat, &dcond, 1, Some(&mut grad.time_proj), false);
    }

    pub(crate) fn head_forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, LayerNormCache) {
        let n = self.config.n_tokens();
        let (normed, cache) = self.head_norm.forward(x, n);
        (self.head.forward(&normed, n), normed, cache)
    }

    pub(crate) fn head_backward(
        &self,
        normed: &[f64],
        cache: &LayerNormCache,
        d_eps: &[f64],
        grad: Option<&mut BaseParams>,
    ) -> Vec<f64> {
        let n = self.config.n_tokens();
        match grad {
            Some(g) => {
                let dn = self
                    .head
                    .backward(normed, d_eps, n, Some(&mut g.head), true)
                    .unwrap();
                self.head_norm.backward(cache, &dn, Some(&mut g.head_norm))
            }
            None => {
                let dn = self.head.backward(normed, d_eps, n, None, true).unwrap();
                self.head_norm.backward(cache, &dn, None)
            }
        }
    }
}

impl ParamSet for BaseParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.embed.visit("embed", f);
        f("pos", &self.pos);
        self.time_proj.visit("time_proj", f);
        f("class_embed", &self.class_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.head_norm.visit("head_norm", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut("embed", f);
        f("pos", &mut self.pos);
        self.time_proj.visit_mut("time_proj", f);
        f("class_embed", &mut self.class_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.head_norm.visit_mut("head_norm", f);
        self.head.visit_mut("head", f);
    }
}

/// Sinusoidal timestep features `[sin(t·ω_i)…, cos(t·ω_i)…]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = math::exp(-math::ln(10_000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = math::sin(arg);
        out[half + i] = math::cos(arg);
    }
    out
}

/// Input and output of one base block.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub input: TokenMap,
    pub output: TokenMap,
}

/// Everything the backward pass needs from a base (or controlled) forward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) tokens: Vec<f64>,
    pub(crate) time_feat: Vec<f64>,
    pub(crate) class: usize,
    pub(crate) caches: Vec<BlockCache>,
    pub(crate) outputs: Vec<Vec<f64>>,
    pub(crate) head_normed: Vec<f64>,
    pub(crate) head_cache: LayerNormCache,
    pub eps: LatentTensor,
}

impl ForwardTrace {
    pub fn taps(&self, width: usize, grid: (usize, usize, usize)) -> Vec<Tap> {
        self.caches
            .iter()
            .zip(&self.outputs)
            .map(|(c, y)| Tap {
                input: TokenMap::new(c.input.clone(), width, grid),
                output: TokenMap::new(y.clone(), width, grid),
            })
            .collect()
    }
}

/// Runs one base block; `cond` is added to every token first when given.
pub fn block_forward(x: &TokenMap, block: &Block, cond: Option<&[f64]>) -> Result<TokenMap> {
    if x.width != block.width() {
        return Err(dim_err(
            "width",
            format!(
                "tokens have width {}, block expects {}",
                x.width,
                block.width()
            ),
        ));
    }
    if let Some(c) = cond {
        if c.len() != x.width {
            return Err(dim_err(
                "width",
                "conditioning vector width differs from tokens",
            ));
        }
    }
    let (y, _) = block.forward(&x.tokens, x.n_tokens(), cond);
    Ok(TokenMap::new(y, x.width, x.grid))
}

/// Uncontrolled base network `ε_θ(z_t, t, c)`.
#[derive(Debug, Clone, Copy)]
pub struct BaseModel<'a> {
    pub params: &'a BaseParams,
}

impl<'a> BaseModel<'a> {
    pub fn new(params: &'a BaseParams) -> Self {
        Self { params }
    }

    pub fn forward(&self, z_t: &LatentTensor, t: usize, class: usize) -> Result<ForwardTrace> {
        let p = self.params;
        p.check_input(z_t, class)?;
        let n = p.config.n_tokens();
        let (mut x, time_feat) = p.embed_tokens(z_t, t, class);
        let mut caches = Vec::with_capacity(p.blocks.len());
        let mut outputs = Vec::with_capacity(p.blocks.len());
        for block in &p.blocks {
            let (y, cache) = block.forward(&x, n, None);
            caches.push(cache);
            outputs.push(y.clone());
            x = y;
        }
        let (eps_tokens, head_normed, head_cache) = p.head_forward(&x);
        let mut eps = z_t.clone();
        eps.data = eps_tokens;
        Ok(ForwardTrace {
            tokens: z_t.data.clone(),
            time_feat,
            class,
            caches,
            outputs,
            head_normed,
            head_cache,
            eps,
        })
    }

    /// `(ε̂, taps)` for `(z_t, t, c)`.
    pub fn forward_with_taps(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
    ) -> Result<(LatentTensor, Vec<Tap>)> {
        let trace = self.forward(z_t, t, class)?;
        let taps = trace.taps(self.params.config.width, self.params.config.grid);
        Ok((trace.eps, taps))
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dε̂`.
    pub fn backward(&self, trace: &ForwardTrace, d_eps: &[f64], grad: &mut BaseParams) {
        let p = self.params;
        let n = p.config.n_tokens();
        let mut dx = p.head_backward(&trace.head_normed, &trace.head_cache, d_eps, Some(grad));
        for (i, block) in p.blocks.iter().enumerate().rev() {
            dx = block.backward(&trace.caches[i], &dx, n, Some(&mut grad.blocks[i]));
        }
        p.embed_backward(&trace.tokens, &trace.time_feat, trace.class, &dx, grad);
    }

    /// ε-MSE loss and its full parameter gradient.
    pub fn loss_and_grad(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        eps_true: &LatentTensor,
    ) -> Result<(f64, BaseParams)> {
        let trace = self.forward(z_t, t, class)?;
        let (loss, d_eps) = mse_and_grad(&trace.eps.data, &eps_true.data);
        let mut grad = self.params.zeros_like();
        self.backward(&trace, &d_eps, &mut grad);
        Ok((loss, grad))
    }
}

impl Denoiser for BaseModel<'_> {
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        _control: Option<&ControlBundle>,
    ) -> Result<LatentTensor> {
        Ok(self.forward(z_t, t, class)?.eps)
    }
}

pub(crate) fn mse_and_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let loss = crate::diffusion::mse(pred, target);
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PatchSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BaseConfig {
        BaseConfig {
            latent_channels: 6,
            grid: (1, 2, 2),
            width: 8,
            blocks: 3,
            heads: 2,
            mlp_hidden: 16,
            time_dim: 4,
            num_classes: 3,
        }
    }

    fn random_latent(cfg: &BaseConfig, rng: &mut ChaCha8Rng) -> LatentTensor {
        let t = Tensor::randn(&[cfg.n_tokens() * cfg.latent_channels], 1.0, rng);
        LatentTensor::from_data(
            cfg.grid.0,
            cfg.grid.1,
            cfg.grid.2,
            cfg.latent_channels,
            PatchSpec::new(1, 1),
            t.data,
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_predict_zero_noise() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = BaseParams::init(cfg, &mut rng).unwrap();
        p.visit_mut(&mut |_, t| t.data.fill(0.0));
        // identity embed on the first channels
        for i in 0..cfg.latent_channels {
            p.embed.weight.data[i * cfg.width + i] = 1.0;
        }
        let z = random_latent(&cfg, &mut rng);
        let eps = BaseModel::new(&p).predict(&z, 5, 1, None).unwrap();
        assert!(eps.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_chain_and_determinism() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BaseParams::init(cfg, &mut rng).unwrap();
        let z = random_latent(&cfg, &mut rng);
        let model = BaseModel::new(&p);
        let (eps, taps) = model.forward_with_taps(&z, 3, 2).unwrap();
        assert_eq!(taps.len(), cfg.blocks);
        for i in 1..taps.len() {
            assert_eq!(taps[i].input, taps[i - 1].output);
        }
        let (eps2, _) = model.forward_with_taps(&z, 3, 2).unwrap();
        assert_eq!(eps, eps2);
        assert_eq!(eps.channels, cfg.latent_channels);
    }

    #[test]
    fn input_validation() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BaseParams::init(cfg, &mut rng).unwrap();
        let z = random_latent(&cfg, &mut rng);
        let model = BaseModel::new(&p);
        assert!(matches!(
            model.forward(&z, 1, 3),
            Err(Error::Conditioning(_))
        ));
        let bad = LatentTensor::zeros(1, 2, 2, 5, PatchSpec::new(1, 1));
        assert!(matches!(
            model.forward(&bad, 1, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn block_forward_shape_and_width_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::new(8, 2, 16, &mut rng);
        let x = TokenMap::new(Tensor::randn(&[12, 8], 1.0, &mut rng).data, 8, (3, 2, 2));
        let y = block_forward(&x, &block, None).unwrap();
        assert_eq!((y.width, y.grid), (8, (3, 2, 2)));
        let wrong = TokenMap::new(vec![0.0; 12 * 4], 4, (3, 2, 2));
        assert!(block_forward(&wrong, &block, None).is_err());
    }

    #[test]
    fn timestep_features_known_values() {
        let f = timestep_features(0, 6);
        assert_eq!(f, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let f = timestep_features(2, 2);
        assert!((f[0] - 2f64.sin()).abs() < 1e-15);
    }
}
