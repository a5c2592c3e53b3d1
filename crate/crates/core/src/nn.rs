//! Transformer building blocks with explicit forward caches and hand-derived
//! backward passes. Activations are `n × d` row-major token matrices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::tensor::{add_assign, dot, matmul, matmul_nt, matmul_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self::with_std(fan_in, fan_out, 1.0 / math::sqrt(fan_in as f64), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (i, o) = (self.in_dim(), self.out_dim());
        let mut y = matmul(x, &self.weight.data, n, i, o);
        for row in y.chunks_exact_mut(o) {
            add_assign(row, &self.bias.data);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// `dL/dx` when `need_dx`.
    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        n: usize,
        grad: Option<&mut Linear>,
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        if let Some(g) = grad {
            matmul_tn_acc(x, dy, n, i, o, &mut g.weight.data);
            for row in dy.chunks_exact(o) {
                add_assign(&mut g.bias.data, row);
            }
        }
        need_dx.then(|| matmul_nt(dy, &self.weight.data, n, i, o))
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.gamma.len();
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / math::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * self.gamma.data[j] + self.beta.data[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &[f64],
        grad: Option<&mut LayerNorm>,
    ) -> Vec<f64> {
        let d = self.gamma.len();
        let n = cache.rstd.len();
        if let Some(g) = grad {
            for r in 0..n {
                for j in 0..d {
                    g.gamma.data[j] += dy[r * d + j] * cache.xhat[r * d + j];
                    g.beta.data[j] += dy[r * d + j];
                }
            }
        }
        let mut dx = vec![0.0; n * d];
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                dxhat[j] = dy[r * d + j] * self.gamma.data[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot(&dxhat, xh) / d as f64;
            for j in 0..d {
                dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Multi-head self-attention without masking.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × n × n row-stochastic weights
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads > 0 && d % heads == 0,
            "width {d} not divisible by {heads} heads"
        );
        Self {
            heads,
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::with_std(d, d, 0.5 / math::sqrt(d as f64), rng),
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, AttentionCache) {
        let d = self.q.in_dim();
        let hd = d / self.heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let q = self.q.forward(x, n);
        let k = self.k.forward(x, n);
        let v = self.v.forward(x, n);
        let mut probs = vec![0.0; self.heads * n * n];
        let mut ctx = vec![0.0; n * d];
        for h in 0..self.heads {
            let off = h * hd;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let s = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                    p[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = 0.0;
                for pj in p.iter_mut() {
                    *pj = math::exp(*pj - max);
                    sum += *pj;
                }
                let c = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..n {
                    p[j] /= sum;
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (cv, &vv) in c.iter_mut().zip(vj) {
                        *cv += p[j] * vv;
                    }
                }
            }
        }
        let out = self.o.forward(&ctx, n);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(
        &self,
        x: &[f64],
        cache: &AttentionCache,
        dout: &[f64],
        n: usize,
        mut grad: Option<&mut Attention>,
    ) -> Vec<f64> {
        let d = self.q.in_dim();
        let hd = d / self.heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let dctx = self
            .o
            .backward(
                &cache.ctx,
                dout,
                n,
                grad.as_deref_mut().map(|g| &mut g.o),
                true,
            )
            .unwrap();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..self.heads {
            let off = h * hd;
            for i in 0..n {
                let p = &cache.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &dctx[i * d + off..i * d + off + hd];
                for j in 0..n {
                    dp[j] = dot(dci, &cache.v[j * d + off..j * d + off + hd]);
                    let dvj = &mut dv[j * d + off..j * d + off + hd];
                    for (a, &b) in dvj.iter_mut().zip(dci) {
                        *a += p[j] * b;
                    }
                }
                let pdp = dot(p, &dp);
                for j in 0..n {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                        dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                    }
                }
            }
        }
        let (gq, gk, gv) = match grad {
            Some(g) => (Some(&mut g.q), Some(&mut g.k), Some(&mut g.v)),
            None => (None, None, None),
        };
        let mut dx = self.q.backward(x, &dq, n, gq, true).unwrap();
        add_assign(&mut dx, &self.k.backward(x, &dk, n, gk, true).unwrap());
        add_assign(&mut dx, &self.v.backward(x, &dv, n, gv, true).unwrap());
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.o.visit(&format!("{prefix}.o"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
        self.o.visit_mut(&format!("{prefix}.o"), f);
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x))`, `y = h + mlp(ln2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    /// block input after the optional conditioning add
    pub input: Vec<f64>,
    ln1: LayerNormCache,
    a_in: Vec<f64>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    m_in: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, hidden, rng),
            fc2: Linear::with_std(hidden, d, 0.5 / math::sqrt(hidden as f64), rng),
        }
    }

    pub fn width(&self) -> usize {
        self.ln1.gamma.len()
    }

    /// Runs the block over `n` tokens. `cond`, when given, is a width-`d`
    /// vector added to every token before the block.
    pub fn forward(&self, x: &[f64], n: usize, cond: Option<&[f64]>) -> (Vec<f64>, BlockCache) {
        let d = self.width();
        let mut input = x.to_vec();
        if let Some(c) = cond {
            for row in input.chunks_exact_mut(d) {
                add_assign(row, c);
            }
        }
        let (a_in, ln1) = self.ln1.forward(&input, n);
        let (a_out, attn) = self.attn.forward(&a_in, n);
        let mut h = input.clone();
        add_assign(&mut h, &a_out);
        let (m_in, ln2) = self.ln2.forward(&h, n);
        let pre = self.fc1.forward(&m_in, n);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let m_out = self.fc2.forward(&act, n);
        let mut y = h;
        add_assign(&mut y, &m_out);
        (
            y,
            BlockCache {
                input,
                ln1,
                a_in,
                attn,
                ln2,
                m_in,
                pre,
                act,
            },
        )
    }

    /// Returns `dL/dx`; accumulates parameter gradients into `grad` if given.
    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: &[f64],
        n: usize,
        mut grad: Option<&mut Block>,
    ) -> Vec<f64> {
        let mut dh = dy.to_vec();
        let dact = self
            .fc2
            .backward(
                &cache.act,
                dy,
                n,
                grad.as_deref_mut().map(|g| &mut g.fc2),
                true,
            )
            .unwrap();
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(g, &p)| g * gelu_grad(p))
            .collect();
        let dm_in = self
            .fc1
            .backward(
                &cache.m_in,
                &dpre,
                n,
                grad.as_deref_mut().map(|g| &mut g.fc1),
                true,
            )
            .unwrap();
        add_assign(
            &mut dh,
            &self
                .ln2
                .backward(&cache.ln2, &dm_in, grad.as_deref_mut().map(|g| &mut g.ln2)),
        );
        let mut dx = dh.clone();
        let da_in = self.attn.backward(
            &cache.a_in,
            &cache.attn,
            &dh,
            n,
            grad.as_deref_mut().map(|g| &mut g.attn),
        );
        add_assign(
            &mut dx,
            &self
                .ln1
                .backward(&cache.ln1, &da_in, grad.as_deref_mut().map(|g| &mut g.ln1)),
        );
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_projections_leave_only_residual_and_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = Block::new(8, 2, 16, &mut rng);
        block.attn.o = Linear::zeros(8, 8);
        block.fc2 = Linear::zeros(16, 8);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng).data;
        let cond: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let (y, _) = block.forward(&x, 5, Some(&cond));
        for r in 0..5 {
            for j in 0..8 {
                assert_eq!(y[r * 8 + j], x[r * 8 + j] + cond[j]);
            }
        }
    }

    #[test]
    fn single_token_attention_is_the_value_path() {
        // one token, d=2, one head: softmax over one key is 1 so the
        // attention output is o(v(x)).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = Attention::new(2, 1, &mut rng);
        let x = [0.3, -1.2];
        let (out, cache) = attn.forward(&x, 1);
        assert_eq!(cache.probs, vec![1.0]);
        let v = attn.v.forward(&x, 1);
        let w = &attn.v.weight.data;
        let hand_v = [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]];
        assert!((v[0] - hand_v[0]).abs() < 1e-15 && (v[1] - hand_v[1]).abs() < 1e-15);
        let o = &attn.o.weight.data;
        let hand = [
            hand_v[0] * o[0] + hand_v[1] * o[2],
            hand_v[0] * o[1] + hand_v[1] * o[3],
        ];
        assert!((out[0] - hand[0]).abs() < 1e-14);
        assert!((out[1] - hand[1]).abs() < 1e-14);
    }

    #[test]
    fn block_is_permutation_equivariant_over_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::new(8, 2, 16, &mut rng);
        let n = 6;
        let x = Tensor::randn(&[n, 8], 1.0, &mut rng).data;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp: Vec<f64> = perm
            .iter()
            .flat_map(|&p| x[p * 8..(p + 1) * 8].to_vec())
            .collect();
        let (y, _) = block.forward(&x, n, None);
        let (yp, _) = block.forward(&xp, n, None);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp[i * 8 + j] - y[p * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::new(4, 2, 8, &mut rng);
        let n = 3;
        let x = Tensor::randn(&[n, 4], 1.0, &mut rng).data;
        let w: Vec<f64> = Tensor::randn(&[n, 4], 1.0, &mut rng).data;
        let loss = |b: &Block, x: &[f64]| dot(&b.forward(x, n, None).0, &w);
        let (_, cache) = block.forward(&x, n, None);
        let mut grad = block.clone();
        grad.visit_mut("", &mut |_, t| t.data.fill(0.0));
        let dx = block.backward(&cache, &w, n, Some(&mut grad));
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
        }
        let mut grads = Vec::new();
        grad.visit("", &mut |name, t| {
            grads.push((alloc::string::String::from(name), t.data.clone()))
        });
        for (ti, (name, g)) in grads.iter().enumerate() {
            for e in 0..g.len() {
                let mut bp = block.clone();
                let mut bm = block.clone();
                let mut idx = 0;
                bp.visit_mut("", &mut |_, t| {
                    if idx == ti {
                        t.data[e] += h;
                    }
                    idx += 1;
                });
                idx = 0;
                bm.visit_mut("", &mut |_, t| {
                    if idx == ti {
                        t.data[e] -= h;
                    }
                    idx += 1;
                });
                let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
                assert!((fd - g[e]).abs() < 1e-6, "{name}[{e}] {fd} vs {}", g[e]);
            }
        }
    }
}
