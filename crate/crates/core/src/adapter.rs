//! The control adapter: `N` lightweight transformer blocks fed by the base's
//! initial feature map and the aligned control bundle, fused into the frozen
//! base after selected blocks through adaptive average pooling.
//!
//! At control point `i` the next base input becomes
//! `x_b^{i+1} = y_b^i + AdaptiveAvgPool(fuse_k(y_c^k))`. The fuse projections
//! start at zero so a fresh adapter is an exact no-op.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::base::{mse_and_grad, BaseParams, ForwardTrace, Tap};
use crate::codec::LatentTensor;
use crate::control::ControlBundle;
use crate::diffusion::Denoiser;
use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::nn::{Block, BlockCache, Linear};
use crate::params::ParamSet;
use crate::tensor::{add_assign, matmul, matmul_nt, matmul_tn_acc, Tensor, TokenMap};

/// Where control residuals enter the base network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Layout {
    /// Evenly spaced anchors, each residual re-added at every block up to the
    /// next anchor.
    Even,
    /// The last `N` blocks.
    End,
    /// Evenly spaced anchors, one fusion per anchor.
    Space,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Even, Layout::End, Layout::Space];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Even => "even",
            Layout::End => "end",
            Layout::Space => "space",
        }
    }
}

/// Control-to-base block ratio presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SizeRatio {
    /// 1:15
    Small,
    /// 1:5
    Medium,
    /// 1:2
    Large,
}

impl SizeRatio {
    pub const ALL: [SizeRatio; 3] = [SizeRatio::Small, SizeRatio::Medium, SizeRatio::Large];

    pub fn denominator(self) -> usize {
        match self {
            SizeRatio::Small => 15,
            SizeRatio::Medium => 5,
            SizeRatio::Large => 2,
        }
    }

    /// `max(1, round(M / denominator))`, rounding half up.
    pub fn control_blocks(self, base_blocks: usize) -> usize {
        let d = self.denominator();
        ((2 * base_blocks + d) / (2 * d)).max(1)
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeRatio::Small => "small",
            SizeRatio::Medium => "medium",
            SizeRatio::Large => "large",
        }
    }
}

/// 1-based base block indices where control branches attach.
///
/// `space` and `even` share the anchors `(k−1)·⌊M/N⌋ + 1`; `end` takes the
/// last `N` blocks.
pub fn control_indices(m: usize, n: usize, layout: Layout) -> Result<Vec<usize>> {
    if n == 0 || n > m {
        return Err(Error::Parameter(format!(
            "need 1 <= N <= M, got N={n}, M={m}"
        )));
    }
    Ok(match layout {
        Layout::Space | Layout::Even => {
            let stride = m / n;
            (1..=n).map(|k| (k - 1) * stride + 1).collect()
        }
        Layout::End => (m - n + 1..=m).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetworkSpec {
    #[cfg_attr(feature = "serde", serde(rename = "M"))]
    pub m: usize,
    #[cfg_attr(feature = "serde", serde(rename = "N"))]
    pub n: usize,
    pub layout: Layout,
    pub ratio: Option<SizeRatio>,
    pub indices: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(m: usize, n: usize, layout: Layout) -> Result<Self> {
        Ok(Self {
            m,
            n,
            layout,
            ratio: None,
            indices: control_indices(m, n, layout)?,
        })
    }

    pub fn from_ratio(m: usize, ratio: SizeRatio, layout: Layout) -> Result<Self> {
        let n = ratio.control_blocks(m);
        Ok(Self {
            ratio: Some(ratio),
            ..Self::new(m, n, layout)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expect = control_indices(self.m, self.n, self.layout)?;
        if expect != self.indices {
            return Err(Error::Configuration(format!(
                "indices {:?} inconsistent with {} layout (expected {:?})",
                self.indices,
                self.layout.name(),
                expect
            )));
        }
        Ok(())
    }

    /// Which control branch (0-based `k`) advances after base block `i`.
    pub fn anchor_at(&self, i: usize) -> Option<usize> {
        self.indices.iter().position(|&a| a == i)
    }

    /// Which control branch's residual is added after base block `i`.
    pub fn fusion_source(&self, i: usize) -> Option<usize> {
        match self.layout {
            Layout::Space | Layout::End => self.anchor_at(i),
            Layout::Even => self.indices.iter().rposition(|&a| a <= i),
        }
    }
}

/// Floor/ceil bins `[⌊j·d_in/d_out⌋, ⌈(j+1)·d_in/d_out⌉)` for each output `j`.
pub fn pool_bins(d_in: usize, d_out: usize) -> Vec<(usize, usize)> {
    (0..d_out)
        .map(|j| (j * d_in / d_out, ((j + 1) * d_in).div_ceil(d_out)))
        .collect()
}

fn pool_rows(x: &[f64], bins: &[(usize, usize)], d_in: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / d_in * bins.len());
    for row in x.chunks_exact(d_in) {
        for &(s, e) in bins {
            out.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
    }
    out
}

fn pool_rows_backward(dy: &[f64], bins: &[(usize, usize)], d_in: usize) -> Vec<f64> {
    let d_out = bins.len();
    let mut dx = vec![0.0; dy.len() / d_out * d_in];
    for (drow, xrow) in dy.chunks_exact(d_out).zip(dx.chunks_exact_mut(d_in)) {
        for (&g, &(s, e)) in drow.iter().zip(bins) {
            let share = g / (e - s) as f64;
            for v in &mut xrow[s..e] {
                *v += share;
            }
        }
    }
    dx
}

/// Resizes every token's feature vector to `d_out` by bin averaging.
pub fn adaptive_avg_pool(y: &TokenMap, d_out: usize) -> Result<TokenMap> {
    if y.width == 0 || d_out == 0 {
        return Err(Error::Parameter("pool widths must be positive".into()));
    }
    let bins = pool_bins(y.width, d_out);
    Ok(TokenMap::new(
        pool_rows(&y.tokens, &bins, y.width),
        d_out,
        y.grid,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdapterConfig {
    /// bundle channels, `ch + 1`
    pub control_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub base_width: usize,
    pub blocks: usize,
}

/// Trainable adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VCtrlParams {
    pub config: AdapterConfig,
    pub align_gain: Tensor,
    pub align_shift: Tensor,
    /// `(ch+1) × d_c`, no bias (the shift plays that role)
    pub align_proj: Tensor,
    pub entry: Linear,
    pub blocks: Vec<Block>,
    pub fuse_out: Vec<Linear>,
}

const RMS_EPS: f64 = 1e-8;

impl VCtrlParams {
    /// Fresh adapter: random blocks and alignment, zero fuse projections.
    pub fn init<R: Rng + ?Sized>(config: AdapterConfig, rng: &mut R) -> Result<Self> {
        if [
            config.control_channels,
            config.width,
            config.heads,
            config.base_width,
            config.blocks,
            config.mlp_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::Configuration(
                "adapter config has a zero dimension".into(),
            ));
        }
        if config.width % config.heads != 0 {
            return Err(Error::Configuration(format!(
                "adapter width {} not divisible by {} heads",
                config.width, config.heads
            )));
        }
        let c = config.control_channels;
        let d = config.width;
        Ok(Self {
            config,
            align_gain: Tensor::filled(&[c], 1.0),
            align_shift: Tensor::zeros(&[c]),
            align_proj: Tensor::randn(&[c, d], 1.0 / math::sqrt(c as f64), rng),
            entry: Linear::new(config.base_width, d, rng),
            blocks: (0..config.blocks)
                .map(|_| Block::new(d, config.heads, config.mlp_hidden, rng))
                .collect(),
            fuse_out: (0..config.blocks).map(|_| Linear::zeros(d, d)).collect(),
        })
    }

    fn check(&self, base: &BaseParams, spec: &NetworkSpec, bundle: &ControlBundle) -> Result<()> {
        spec.validate()?;
        if spec.m != base.blocks.len() {
            return Err(Error::Configuration(format!(
                "spec has M={} but base has {} blocks",
                spec.m,
                base.blocks.len()
            )));
        }
        if spec.n != self.blocks.len() || spec.n != self.fuse_out.len() {
            return Err(Error::Configuration(format!(
                "spec has N={} but adapter has {} blocks",
                spec.n,
                self.blocks.len()
            )));
        }
        if self.config.base_width != base.config.width {
            return Err(Error::Configuration(
                "adapter base width differs from base".into(),
            ));
        }
        if bundle.grid() != base.config.grid {
            return Err(dim_err(
                "grid",
                "control bundle grid differs from base token grid",
            ));
        }
        if bundle.latent.channels != self.config.control_channels {
            return Err(dim_err(
                "channels",
                format!(
                    "bundle has {} channels, adapter expects {}",
                    bundle.latent.channels, self.config.control_channels
                ),
            ));
        }
        Ok(())
    }
}

impl ParamSet for VCtrlParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("align.gain", &self.align_gain);
        f("align.shift", &self.align_shift);
        f("align.proj", &self.align_proj);
        self.entry.visit("entry", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        for (i, l) in self.fuse_out.iter().enumerate() {
            l.visit(&format!("fuse_out.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("align.gain", &mut self.align_gain);
        f("align.shift", &mut self.align_shift);
        f("align.proj", &mut self.align_proj);
        self.entry.visit_mut("entry", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        for (i, l) in self.fuse_out.iter_mut().enumerate() {
            l.visit_mut(&format!("fuse_out.{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct AlignCache {
    normed: Vec<f64>,
    affine: Vec<f64>,
}

/// RMS-normalise each bundle channel over tokens, apply the learned
/// per-channel gain and shift, then project to the adapter width.
fn align_forward(bundle: &ControlBundle, params: &VCtrlParams) -> (Vec<f64>, AlignCache) {
    let c = params.config.control_channels;
    let n = bundle.latent.n_tokens();
    let data = &bundle.latent.data;
    let mut rms = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (r, v) in rms.iter_mut().zip(row) {
            *r += v * v;
        }
    }
    for r in rms.iter_mut() {
        *r = math::sqrt(*r / n as f64 + RMS_EPS);
    }
    let mut normed = vec![0.0; n * c];
    let mut affine = vec![0.0; n * c];
    for (tok, row) in data.chunks_exact(c).enumerate() {
        for j in 0..c {
            let u = row[j] / rms[j];
            normed[tok * c + j] = u;
            affine[tok * c + j] = u * params.align_gain.data[j] + params.align_shift.data[j];
        }
    }
    let out = matmul(&affine, &params.align_proj.data, n, c, params.config.width);
    (out, AlignCache { normed, affine })
}

fn align_backward(cache: &AlignCache, dout: &[f64], params: &VCtrlParams, grad: &mut VCtrlParams) {
    let c = params.config.control_channels;
    let d = params.config.width;
    let n = dout.len() / d;
    matmul_tn_acc(&cache.affine, dout, n, c, d, &mut grad.align_proj.data);
    let da = matmul_nt(dout, &params.align_proj.data, n, c, d);
    for tok in 0..n {
        for j in 0..c {
            let g = da[tok * c + j];
            grad.align_gain.data[j] += g * cache.normed[tok * c + j];
            grad.align_shift.data[j] += g;
        }
    }
}

/// DistAlign: bundle tokens to adapter-width control tokens.
pub fn dist_align(bundle: &ControlBundle, params: &VCtrlParams) -> Result<TokenMap> {
    if bundle.latent.channels != params.config.control_channels {
        return Err(dim_err(
            "channels",
            "bundle channels differ from adapter input",
        ));
    }
    let (out, _) = align_forward(bundle, params);
    Ok(TokenMap::new(out, params.config.width, bundle.grid()))
}

#[derive(Debug, Clone)]
struct ControlTrace {
    align: AlignCache,
    /// control stream states `s_0 … s_N`
    states: Vec<Vec<f64>>,
    caches: Vec<BlockCache>,
}

/// Forward record of a controlled pass.
#[derive(Debug, Clone)]
pub struct ControlledTrace {
    pub base: ForwardTrace,
    x0: Vec<f64>,
    control: ControlTrace,
}

impl ControlledTrace {
    pub fn eps(&self) -> &LatentTensor {
        &self.base.eps
    }
}

/// The frozen base plus an adapter: `ε_θ(z_t, t, c, z_m)`.
#[derive(Debug, Clone, Copy)]
pub struct ControlledModel<'a> {
    pub base: &'a BaseParams,
    pub adapter: &'a VCtrlParams,
    pub spec: &'a NetworkSpec,
}

impl<'a> ControlledModel<'a> {
    pub fn new(base: &'a BaseParams, adapter: &'a VCtrlParams, spec: &'a NetworkSpec) -> Self {
        Self {
            base,
            adapter,
            spec,
        }
    }

    pub fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        bundle: &ControlBundle,
    ) -> Result<ControlledTrace> {
        let (base, adapter, spec) = (self.base, self.adapter, self.spec);
        base.check_input(z_t, class)?;
        adapter.check(base, spec, bundle)?;
        let n = base.config.n_tokens();
        let d_c = adapter.config.width;
        let bins = pool_bins(d_c, base.config.width);

        let (x0, time_feat) = base.embed_tokens(z_t, t, class);
        let (aligned, align) = align_forward(bundle, adapter);
        let mut s = adapter.entry.forward(&x0, n);
        add_assign(&mut s, &aligned);

        let mut states = Vec::with_capacity(spec.n + 1);
        states.push(s);
        let mut ccaches = Vec::with_capacity(spec.n);
        let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(spec.n);
        let mut caches = Vec::with_capacity(spec.m);
        let mut outputs = Vec::with_capacity(spec.m);
        let mut x = x0.clone();
        for (idx, block) in base.blocks.iter().enumerate() {
            let i = idx + 1;
            let (y, cache) = block.forward(&x, n, None);
            caches.push(cache);
            if let Some(k) = spec.anchor_at(i) {
                let (s_next, cc) = adapter.blocks[k].forward(&states[k], n, None);
                let fused = adapter.fuse_out[k].forward(&s_next, n);
                residuals.push(pool_rows(&fused, &bins, d_c));
                ccaches.push(cc);
                states.push(s_next);
            }
            let mut next = y.clone();
            if let Some(k) = spec.fusion_source(i) {
                add_assign(&mut next, &residuals[k]);
            }
            outputs.push(y);
            x = next;
        }
        let (eps_tokens, head_normed, head_cache) = base.head_forward(&x);
        let mut eps = z_t.clone();
        eps.data = eps_tokens;
        Ok(ControlledTrace {
            base: ForwardTrace {
                tokens: z_t.data.clone(),
                time_feat,
                class,
                caches,
                outputs,
                head_normed,
                head_cache,
                eps,
            },
            x0,
            control: ControlTrace {
                align,
                states,
                caches: ccaches,
            },
        })
    }

    pub fn forward_with_taps(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        bundle: &ControlBundle,
    ) -> Result<(LatentTensor, Vec<Tap>)> {
        let trace = self.forward(z_t, t, class, bundle)?;
        let taps = trace
            .base
            .taps(self.base.config.width, self.base.config.grid);
        Ok((trace.base.eps, taps))
    }

    /// Backpropagates `dL/dε̂`. Adapter gradients always accumulate into
    /// `adapter_grad`; base gradients only when `base_grad` is given, and
    /// base blocks whose inputs cannot reach the adapter are skipped
    /// otherwise.
    pub fn backward(
        &self,
        trace: &ControlledTrace,
        d_eps: &[f64],
        mut base_grad: Option<&mut BaseParams>,
        adapter_grad: &mut VCtrlParams,
    ) {
        let (base, adapter, spec) = (self.base, self.adapter, self.spec);
        let n = base.config.n_tokens();
        let d_c = adapter.config.width;
        let bins = pool_bins(d_c, base.config.width);
        let bt = &trace.base;
        let ct = &trace.control;

        let mut dx = base.head_backward(
            &bt.head_normed,
            &bt.head_cache,
            d_eps,
            base_grad.as_deref_mut(),
        );
        let mut dres: Vec<Vec<f64>> = vec![vec![0.0; n * base.config.width]; spec.n];
        let mut ds = vec![0.0; n * d_c];
        let first_anchor = spec.indices[0];
        for i in (1..=spec.m).rev() {
            if let Some(k) = spec.fusion_source(i) {
                add_assign(&mut dres[k], &dx);
            }
            if let Some(k) = spec.anchor_at(i) {
                let dfused = pool_rows_backward(&dres[k], &bins, d_c);
                let d_state = adapter.fuse_out[k]
                    .backward(
                        &ct.states[k + 1],
                        &dfused,
                        n,
                        Some(&mut adapter_grad.fuse_out[k]),
                        true,
                    )
                    .unwrap();
                add_assign(&mut ds, &d_state);
                ds = adapter.blocks[k].backward(
                    &ct.caches[k],
                    &ds,
                    n,
                    Some(&mut adapter_grad.blocks[k]),
                );
            }
            if base_grad.is_none() && i <= first_anchor {
                continue;
            }
            let g = base_grad.as_deref_mut().map(|g| &mut g.blocks[i - 1]);
            dx = base.blocks[i - 1].backward(&bt.caches[i - 1], &dx, n, g);
        }
        let dx0_entry = adapter.entry.backward(
            &trace.x0,
            &ds,
            n,
            Some(&mut adapter_grad.entry),
            base_grad.is_some(),
        );
        align_backward(&ct.align, &ds, adapter, adapter_grad);
        if let Some(g) = base_grad {
            if let Some(extra) = dx0_entry {
                add_assign(&mut dx, &extra);
            }
            base.embed_backward(&bt.tokens, &bt.time_feat, bt.class, &dx, g);
        }
    }

    /// ε-MSE loss with adapter gradients (and base gradients if requested).
    pub fn loss_and_grad(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        bundle: &ControlBundle,
        eps_true: &LatentTensor,
        with_base_grad: bool,
    ) -> Result<(f64, VCtrlParams, Option<BaseParams>)> {
        let trace = self.forward(z_t, t, class, bundle)?;
        let (loss, d_eps) = mse_and_grad(&trace.base.eps.data, &eps_true.data);
        let mut ag = self.adapter.zeros_like();
        let mut bg = with_base_grad.then(|| self.base.zeros_like());
        self.backward(&trace, &d_eps, bg.as_mut(), &mut ag);
        Ok((loss, ag, bg))
    }
}

impl Denoiser for ControlledModel<'_> {
    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class: usize,
        control: Option<&ControlBundle>,
    ) -> Result<LatentTensor> {
        let bundle = control
            .ok_or_else(|| Error::Conditioning("controlled model needs a control bundle".into()))?;
        Ok(self.forward(z_t, t, class, bundle)?.base.eps)
    }
}
