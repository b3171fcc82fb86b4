//! Post-norm encoder stack over a classification token followed by the
//! active branch rows.
//!
//! Inactive rows are dropped from the sequence before the first layer, so no
//! query ever attends to them and their stored values never reach the logits.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{apply_mask, dropout_mask, loss_grad, validate_dropout, FusionError, Backward, FusionInput};
use crate::encoders::NUM_BRANCHES;
use crate::tensor::{affine, affine_backward, Init, ParamSlot, Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 16;
const HEADER: usize = 4;

// Offsets inside one layer's block of parameters.
const QW: usize = 0;
const QB: usize = 1;
const KW: usize = 2;
const KB: usize = 3;
const VW: usize = 4;
const VB: usize = 5;
const OW: usize = 6;
const OB: usize = 7;
const LN1G: usize = 8;
const LN1B: usize = 9;
const F1W: usize = 10;
const F1B: usize = 11;
const F2W: usize = 12;
const F2B: usize = 13;
const LN2G: usize = 14;
const LN2B: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub classes: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl TransformerSpec {
    /// Width 1024, 8 heads, feed-forward 4096, 3 layers, dropout 0.5.
    pub fn new(classes: usize) -> Self {
        Self {
            width: 1024,
            heads: 8,
            ffn: 4096,
            layers: 3,
            classes,
            dropout: 0.5,
            ln_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.width == 0 || self.heads == 0 || self.ffn == 0 || self.layers == 0 {
            return Err(FusionError::InvalidSpec("transformer sizes must be non-zero".into()));
        }
        if self.width % self.heads != 0 {
            return Err(FusionError::InvalidSpec(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(FusionError::InvalidSpec("at least two classes required".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(FusionError::InvalidSpec("layer-norm epsilon must be positive".into()));
        }
        validate_dropout(self.dropout)
    }

    pub fn layout(&self) -> Vec<ParamSlot> {
        let (w, f) = (self.width, self.ffn);
        let mut out = vec![
            ParamSlot::new("cls", &[w], Init::Normal(INIT_STD)),
            ParamSlot::new("type_embeddings", &[NUM_BRANCHES, w], Init::Normal(INIT_STD)),
            ParamSlot::new("embedding_norm.gamma", &[w], Init::Ones),
            ParamSlot::new("embedding_norm.beta", &[w], Init::Zeros),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for proj in ["query", "key", "value", "output"] {
                out.push(ParamSlot::new(p(&format!("attention.{proj}.weight")), &[w, w], Init::FanIn(w)));
                out.push(ParamSlot::new(p(&format!("attention.{proj}.bias")), &[w], Init::Zeros));
            }
            out.push(ParamSlot::new(p("attention_norm.gamma"), &[w], Init::Ones));
            out.push(ParamSlot::new(p("attention_norm.beta"), &[w], Init::Zeros));
            out.push(ParamSlot::new(p("ffn.in.weight"), &[f, w], Init::FanIn(w)));
            out.push(ParamSlot::new(p("ffn.in.bias"), &[f], Init::Zeros));
            out.push(ParamSlot::new(p("ffn.out.weight"), &[w, f], Init::FanIn(f)));
            out.push(ParamSlot::new(p("ffn.out.bias"), &[w], Init::Zeros));
            out.push(ParamSlot::new(p("ffn_norm.gamma"), &[w], Init::Ones));
            out.push(ParamSlot::new(p("ffn_norm.beta"), &[w], Init::Zeros));
        }
        out.push(ParamSlot::new("output.weight", &[self.classes, w], Init::FanIn(w)));
        out.push(ParamSlot::new("output.bias", &[self.classes], Init::Zeros));
        out
    }

    fn out_index(&self) -> usize {
        HEADER + PER_LAYER * self.layers
    }
}

#[derive(Debug, Clone)]
pub struct TransformerHead<T> {
    spec: TransformerSpec,
    params: Vec<Tensor<T>>,
}

/// Row-wise layer-norm state kept for the backward pass.
struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

struct LayerCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `[head][query][key]`.
    probs: Vec<T>,
    ctx: Vec<T>,
    norm1: NormCache<T>,
    h1: Vec<T>,
    pre_gelu: Vec<T>,
    act: Vec<T>,
    norm2: NormCache<T>,
}

struct Cache<T> {
    active: Vec<usize>,
    norm0: NormCache<T>,
    layers: Vec<LayerCache<T>>,
    cls_out: Vec<T>,
    cls_mask: Option<Vec<T>>,
    logits: Vec<T>,
}

fn linear_rows<T: Scalar>(x: &[T], n: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let in_dim = x.len() / n;
    let mut out = Vec::with_capacity(n * bias.len());
    for r in 0..n {
        out.extend(affine(weight, bias, &x[r * in_dim..(r + 1) * in_dim]));
    }
    out
}

fn linear_rows_backward<T: Scalar>(
    weight: &[T],
    x: &[T],
    n: usize,
    dy: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let in_dim = x.len() / n;
    let out_dim = dy.len() / n;
    let mut dx = Vec::with_capacity(x.len());
    for r in 0..n {
        dx.extend(affine_backward(
            weight,
            &x[r * in_dim..(r + 1) * in_dim],
            &dy[r * out_dim..(r + 1) * out_dim],
            d_weight,
            d_bias,
        ));
    }
    dx
}

fn layer_norm<T: Scalar>(x: &[T], width: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / width;
    let w = T::of(width as f64);
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(n);
    for row in x.chunks_exact(width) {
        let mean = row.iter().copied().sum::<T>() / w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * is;
            xhat.push(h);
            y.push(gamma[j] * h + beta[j]);
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    width: usize,
    gamma: &[T],
    dy: &[T],
    d_gamma: &mut [T],
    d_beta: &mut [T],
) -> Vec<T> {
    let w = T::of(width as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for (r, (dyr, xh)) in dy.chunks_exact(width).zip(cache.xhat.chunks_exact(width)).enumerate() {
        let mut dxhat = Vec::with_capacity(width);
        for j in 0..width {
            d_gamma[j] += dyr[j] * xh[j];
            d_beta[j] += dyr[j];
            dxhat.push(dyr[j] * gamma[j]);
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / w;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / w;
        let is = cache.inv_std[r];
        for j in 0..width {
            dx.push(is * (dxhat[j] - mean_d - xh[j] * mean_dx));
        }
    }
    dx
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

/// Tanh approximation of the Gaussian error linear unit.
fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl<T: Scalar> TransformerHead<T> {
    pub(super) fn from_parts(spec: TransformerSpec, params: Vec<Tensor<T>>) -> Self {
        Self { spec, params }
    }

    pub fn spec(&self) -> &TransformerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    fn p(&self, layer: usize, offset: usize) -> &[T] {
        &self.params[HEADER + PER_LAYER * layer + offset].data
    }

    fn attention(&self, q: &[T], k: &[T], v: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let w = self.spec.width;
        let heads = self.spec.heads;
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = Vec::with_capacity(heads * n * n);
        let mut ctx = vec![T::zero(); n * w];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q[i * w..][cols.clone()];
                let mut scores: Vec<T> = (0..n)
                    .map(|j| {
                        let kj = &k[j * w..][cols.clone()];
                        qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                scores.iter_mut().for_each(|s| *s = (*s - max).exp());
                let sum: T = scores.iter().copied().sum();
                scores.iter_mut().for_each(|s| *s = *s / sum);
                let ci = &mut ctx[i * w..][cols.clone()];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &v[j * w..][cols.clone()];
                    for (c, &x) in ci.iter_mut().zip(vj) {
                        *c += p * x;
                    }
                }
                probs.extend(scores);
            }
        }
        (probs, ctx)
    }

    fn layer_forward(&self, l: usize, input: Vec<T>, n: usize) -> (Vec<T>, LayerCache<T>) {
        let w = self.spec.width;
        let eps = T::of(self.spec.ln_eps);
        let q = linear_rows(&input, n, self.p(l, QW), self.p(l, QB));
        let k = linear_rows(&input, n, self.p(l, KW), self.p(l, KB));
        let v = linear_rows(&input, n, self.p(l, VW), self.p(l, VB));
        let (probs, ctx) = self.attention(&q, &k, &v, n);
        let mut r1 = linear_rows(&ctx, n, self.p(l, OW), self.p(l, OB));
        for (a, &b) in r1.iter_mut().zip(&input) {
            *a += b;
        }
        let (h1, norm1) = layer_norm(&r1, w, self.p(l, LN1G), self.p(l, LN1B), eps);
        let pre_gelu = linear_rows(&h1, n, self.p(l, F1W), self.p(l, F1B));
        let act: Vec<T> = pre_gelu.iter().map(|&x| gelu(x)).collect();
        let mut r2 = linear_rows(&act, n, self.p(l, F2W), self.p(l, F2B));
        for (a, &b) in r2.iter_mut().zip(&h1) {
            *a += b;
        }
        let (out, norm2) = layer_norm(&r2, w, self.p(l, LN2G), self.p(l, LN2B), eps);
        let cache = LayerCache {
            input,
            q,
            k,
            v,
            probs,
            ctx,
            norm1,
            h1,
            pre_gelu,
            act,
            norm2,
        };
        (out, cache)
    }

    fn run(&self, input: &FusionInput<T>, rng: Option<&mut dyn RngCore>) -> Result<Cache<T>, FusionError> {
        input.check()?;
        let w = self.spec.width;
        if input.width != w {
            return Err(FusionError::DimensionMismatch(format!(
                "input rows have width {}, model width is {w}",
                input.width
            )));
        }
        let active: Vec<usize> = (0..NUM_BRANCHES).filter(|&i| input.is_active(i)).collect();
        let n = active.len() + 1;
        let mut x = Vec::with_capacity(n * w);
        x.extend_from_slice(&self.params[0].data);
        let types = &self.params[1].data;
        for &b in &active {
            x.extend(input.rows[b].iter().zip(&types[b * w..(b + 1) * w]).map(|(&r, &t)| r + t));
        }
        let (mut h, norm0) = layer_norm(&x, w, &self.params[2].data, &self.params[3].data, T::of(self.spec.ln_eps));
        let mut layers = Vec::with_capacity(self.spec.layers);
        for l in 0..self.spec.layers {
            let (next, cache) = self.layer_forward(l, h, n);
            layers.push(cache);
            h = next;
        }
        let mut cls_out = h[..w].to_vec();
        let cls_mask = dropout_mask(w, self.spec.dropout, rng);
        apply_mask(&mut cls_out, cls_mask.as_deref());
        let o = self.spec.out_index();
        let logits = affine(&self.params[o].data, &self.params[o + 1].data, &cls_out);
        Ok(Cache {
            active,
            norm0,
            layers,
            cls_out,
            cls_mask,
            logits,
        })
    }

    pub fn forward(&self, input: &FusionInput<T>, rng: Option<&mut dyn RngCore>) -> Result<Vec<T>, FusionError> {
        Ok(self.run(input, rng)?.logits)
    }

    fn attention_backward(&self, c: &LayerCache<T>, dctx: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let w = self.spec.width;
        let heads = self.spec.heads;
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); n * w];
        let mut dk = vec![T::zero(); n * w];
        let mut dv = vec![T::zero(); n * w];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let p = &c.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &dctx[i * w..][cols.clone()];
                let dp: Vec<T> = (0..n)
                    .map(|j| dci.iter().zip(&c.v[j * w..][cols.clone()]).map(|(&a, &b)| a * b).sum())
                    .collect();
                let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    for (dvj, &g) in dv[j * w..][cols.clone()].iter_mut().zip(dci) {
                        *dvj += p[j] * g;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for d in cols.clone() {
                        dq[i * w + d] += ds * c.k[j * w + d];
                        dk[j * w + d] += ds * c.q[i * w + d];
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    fn layer_backward(&self, l: usize, c: &LayerCache<T>, dout: &[T], n: usize, g: &mut [Tensor<T>]) -> Vec<T> {
        let w = self.spec.width;
        let base = HEADER + PER_LAYER * l;
        let gl = &mut g[base..base + PER_LAYER];
        let (gg, gb) = two_mut(gl, LN2G, LN2B);
        let dr2 = layer_norm_backward(&c.norm2, w, self.p(l, LN2G), dout, &mut gg.data, &mut gb.data);
        let (gw, gb) = two_mut(gl, F2W, F2B);
        let mut dact = linear_rows_backward(self.p(l, F2W), &c.act, n, &dr2, &mut gw.data, &mut gb.data);
        for (d, &x) in dact.iter_mut().zip(&c.pre_gelu) {
            *d *= gelu_grad(x);
        }
        let (gw, gb) = two_mut(gl, F1W, F1B);
        let mut dh1 = linear_rows_backward(self.p(l, F1W), &c.h1, n, &dact, &mut gw.data, &mut gb.data);
        for (a, &b) in dh1.iter_mut().zip(&dr2) {
            *a += b;
        }
        let (gg, gb) = two_mut(gl, LN1G, LN1B);
        let dr1 = layer_norm_backward(&c.norm1, w, self.p(l, LN1G), &dh1, &mut gg.data, &mut gb.data);
        let (gw, gb) = two_mut(gl, OW, OB);
        let dctx = linear_rows_backward(self.p(l, OW), &c.ctx, n, &dr1, &mut gw.data, &mut gb.data);
        let (dq, dk, dv) = self.attention_backward(c, &dctx, n);
        let mut din = dr1;
        for (wi, bi, d) in [(QW, QB, &dq), (KW, KB, &dk), (VW, VB, &dv)] {
            let (gw, gb) = two_mut(gl, wi, bi);
            let dx = linear_rows_backward(self.p(l, wi), &c.input, n, d, &mut gw.data, &mut gb.data);
            for (a, b) in din.iter_mut().zip(dx) {
                *a += b;
            }
        }
        din
    }

    pub fn backward_into(
        &self,
        input: &FusionInput<T>,
        label: usize,
        rng: Option<&mut dyn RngCore>,
        g: &mut [Tensor<T>],
    ) -> Result<Backward<T>, FusionError> {
        let c = self.run(input, rng)?;
        let w = self.spec.width;
        let n = c.active.len() + 1;
        let (loss, dlogits) = loss_grad(&c.logits, label);

        let o = self.spec.out_index();
        let (gw, gb) = two_mut(g, o, o + 1);
        let mut dcls = affine_backward(&self.params[o].data, &c.cls_out, &dlogits, &mut gw.data, &mut gb.data);
        apply_mask(&mut dcls, c.cls_mask.as_deref());

        let mut dh = vec![T::zero(); n * w];
        dh[..w].copy_from_slice(&dcls);
        for l in (0..self.spec.layers).rev() {
            dh = self.layer_backward(l, &c.layers[l], &dh, n, g);
        }
        let (gg, gb) = two_mut(g, 2, 3);
        let dx = layer_norm_backward(&c.norm0, w, &self.params[2].data, &dh, &mut gg.data, &mut gb.data);

        for (a, &b) in g[0].data.iter_mut().zip(&dx[..w]) {
            *a += b;
        }
        let mut rows = vec![vec![T::zero(); w]; NUM_BRANCHES];
        for (k, &b) in c.active.iter().enumerate() {
            let src = &dx[(k + 1) * w..(k + 2) * w];
            rows[b].copy_from_slice(src);
            for (a, &s) in g[1].data[b * w..(b + 1) * w].iter_mut().zip(src) {
                *a += s;
            }
        }
        Ok(Backward {
            loss,
            logits: c.logits,
            rows,
        })
    }
}

/// Mutable references to two distinct tensors `i < j`.
fn two_mut<T>(t: &mut [Tensor<T>], i: usize, j: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
    debug_assert!(i < j);
    let (a, b) = t.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{Head, HeadSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> TransformerSpec {
        TransformerSpec {
            width: 4,
            heads: 2,
            ffn: 6,
            layers: 2,
            classes: 3,
            dropout: 0.5,
            ln_eps: 1e-12,
        }
    }

    fn input(rng: &mut ChaCha8Rng, presence: [bool; 8]) -> FusionInput<f64> {
        use rand::Rng;
        let rows = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        FusionInput::from_rows(rows, presence, [true; 8], 4).unwrap()
    }

    #[test]
    fn width_must_divide_heads() {
        let mut s = toy();
        s.heads = 3;
        assert!(matches!(s.validate(), Err(FusionError::InvalidSpec(_))));
    }

    #[test]
    fn layout_has_sixteen_tensors_per_layer() {
        let s = TransformerSpec::new(3);
        assert_eq!(s.layout().len(), 4 + 16 * 3 + 2);
    }

    #[test]
    fn all_masked_depends_only_on_cls_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head: Head<f64> = Head::new(&HeadSpec::Transformer(toy()), &mut rng).unwrap();
        let a = input(&mut rng, [false; 8]);
        let b = input(&mut rng, [false; 8]);
        assert_eq!(head.forward(&a, None).unwrap(), head.forward(&b, None).unwrap());
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head: Head<f32> = Head::new(&HeadSpec::Transformer(toy()), &mut rng).unwrap();
        let rows = (0..8).map(|i| vec![i as f32 * 0.1; 4]).collect();
        let x = FusionInput::from_rows(rows, [true; 8], [true; 8], 4).unwrap();
        let a = head.forward(&x, None).unwrap();
        let b = head.forward(&x, None).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
