//! Minimal layers with hand-written backward passes.
//!
//! All parameters of a model live in one flat buffer; layers only hold
//! offsets into it. Gradients use a buffer of the same layout, which makes
//! optimizers, Fisher estimates and finite-difference checks plain slice
//! arithmetic.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::scalar::{c, Scalar};

/// Running allocator for parameter offsets.
#[derive(Debug, Default, Clone, Copy)]
pub struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let at = self.next;
        self.next += n;
        at
    }

    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn forward<A: Scalar>(self, x: &Array2<A>) -> Array2<A> {
        match self {
            Activation::Relu => x.mapv(|v| if v > A::zero() { v } else { A::zero() }),
            Activation::Tanh => x.mapv(|v| v.tanh()),
            Activation::Softplus => x.mapv(softplus),
        }
    }

    /// Multiply `grad` in place by the derivative at pre-activation `pre`.
    fn backward<A: Scalar>(self, pre: &Array2<A>, grad: &mut Array2<A>) {
        match self {
            Activation::Relu => Zip::from(grad).and(pre).for_each(|g, &p| {
                if p <= A::zero() {
                    *g = A::zero();
                }
            }),
            Activation::Tanh => Zip::from(grad).and(pre).for_each(|g, &p| {
                let t = p.tanh();
                *g *= A::one() - t * t;
            }),
            Activation::Softplus => Zip::from(grad).and(pre).for_each(|g, &p| {
                *g *= sigmoid(p);
            }),
        }
    }
}

#[inline]
pub fn sigmoid<A: Scalar>(v: A) -> A {
    if v >= A::zero() {
        A::one() / (A::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (A::one() + e)
    }
}

#[inline]
fn softplus<A: Scalar>(v: A) -> A {
    // log(1 + e^v) without overflow
    v.max(A::zero()) + (-v.abs()).exp().ln_1p()
}

/// Row-wise softmax.
pub fn softmax<A: Scalar>(logits: &Array2<A>) -> Array2<A> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(A::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Pull a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward<A: Scalar>(probs: &Array2<A>, dprobs: &Array2<A>) -> Array2<A> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((q, dq), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let dot: A = q.iter().zip(dq.iter()).map(|(&a, &b)| a * b).sum();
        for ((o, &qk), &dk) in o.iter_mut().zip(q.iter()).zip(dq.iter()) {
            *o = qk * (dk - dot);
        }
    }
    out
}

fn uniform_fill<A: Scalar>(dst: &mut [A], bound: f64, rng: &mut Rng) {
    for v in dst {
        *v = c(rng.random_range(-bound..=bound));
    }
}

/// Fully connected layer `y = x W + b`, `W` stored row-major `[n_in, n_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new(alloc: &mut ParamAlloc, n_in: usize, n_out: usize) -> Self {
        let w = alloc.take(n_in * n_out);
        let b = alloc.take(n_out);
        Self { w, b, n_in, n_out }
    }

    pub fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    pub fn weight<'a, A>(&self, p: &'a [A]) -> ArrayView2<'a, A> {
        ArrayView2::from_shape((self.n_in, self.n_out), &p[self.w..self.w + self.n_in * self.n_out])
            .expect("layout")
    }

    pub fn bias<'a, A>(&self, p: &'a [A]) -> &'a [A] {
        &p[self.b..self.b + self.n_out]
    }

    fn weight_mut<'a, A>(&self, p: &'a mut [A]) -> ArrayViewMut2<'a, A> {
        ArrayViewMut2::from_shape((self.n_in, self.n_out), &mut p[self.w..self.w + self.n_in * self.n_out])
            .expect("layout")
    }

    /// Uniform init with bound `gain * sqrt(6 / fan_in)`, zero bias.
    pub fn init<A: Scalar>(&self, p: &mut [A], gain: f64, rng: &mut Rng) {
        let bound = gain * (6.0 / self.n_in as f64).sqrt();
        uniform_fill(&mut p[self.w..self.w + self.n_in * self.n_out], bound, rng);
        p[self.b..self.b + self.n_out].iter_mut().for_each(|v| *v = A::zero());
    }

    pub fn forward<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> Array2<A> {
        let mut out = Array2::zeros((x.nrows(), self.n_out));
        let bias = ndarray::ArrayView1::from(self.bias(p));
        out.rows_mut().into_iter().for_each(|mut r| r.assign(&bias));
        general_mat_mul(A::one(), &x, &self.weight(p), A::one(), &mut out);
        out
    }

    /// Accumulate `dW += xᵀ dy`, `db += Σ dy` into `g`; return `dy Wᵀ` when
    /// `need_dx`.
    pub fn backward<A: Scalar>(
        &self,
        p: &[A],
        g: &mut [A],
        x: ArrayView2<'_, A>,
        dy: ArrayView2<'_, A>,
        need_dx: bool,
    ) -> Option<Array2<A>> {
        general_mat_mul(A::one(), &x.t(), &dy, A::one(), &mut self.weight_mut(g));
        let db = dy.sum_axis(Axis(0));
        for (gb, d) in g[self.b..self.b + self.n_out].iter_mut().zip(db.iter()) {
            *gb += *d;
        }
        need_dx.then(|| dy.dot(&self.weight(p).t()))
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<A> {
    inputs: Vec<Array2<A>>,
    pre: Vec<Array2<A>>,
}

/// Dense stack with a shared hidden activation and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(alloc: &mut ParamAlloc, n_in: usize, hidden: &[usize], n_out: usize, activation: Activation) -> Self {
        let mut dims = vec![n_in];
        dims.extend_from_slice(hidden);
        dims.push(n_out);
        let layers = dims.windows(2).map(|w| Dense::new(alloc, w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("non-empty").n_out
    }

    /// He-style init for hidden layers; the output layer gets `out_gain`.
    pub fn init<A: Scalar>(&self, p: &mut [A], out_gain: f64, rng: &mut Rng) {
        let hidden_gain = match self.activation {
            Activation::Relu | Activation::Softplus => 2f64.sqrt(),
            Activation::Tanh => 1.0,
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let gain = if i == last { out_gain } else { hidden_gain / 3f64.sqrt() };
            l.init(p, gain, rng);
        }
    }

    pub fn forward<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> (Array2<A>, MlpCache<A>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(p, h.view());
            inputs.push(h);
            if i == last {
                h = z.clone();
            } else {
                h = self.activation.forward(&z);
            }
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    /// Forward without keeping activations.
    pub fn predict<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> Array2<A> {
        let mut h = self.layers[0].forward(p, x);
        for l in &self.layers[1..] {
            h = self.activation.forward(&h);
            h = l.forward(p, h.view());
        }
        h
    }

    pub fn backward<A: Scalar>(
        &self,
        p: &[A],
        g: &mut [A],
        cache: &MlpCache<A>,
        dout: Array2<A>,
        need_dx: bool,
    ) -> Option<Array2<A>> {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                self.activation.backward(&cache.pre[i], &mut d);
            }
            let want = need_dx || i > 0;
            match self.layers[i].backward(p, g, cache.inputs[i].view(), d.view(), want) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

/// Convolution layer description for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Valid (unpadded) 2-D convolution over channel-major images, lowered to a
/// matrix product via im2col.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAlloc, in_ch: usize, in_h: usize, in_w: usize, spec: ConvSpec) -> Self {
        assert!(spec.kernel <= in_h && spec.kernel <= in_w, "kernel larger than input");
        assert!(spec.stride >= 1);
        let out_h = (in_h - spec.kernel) / spec.stride + 1;
        let out_w = (in_w - spec.kernel) / spec.stride + 1;
        let patch = in_ch * spec.kernel * spec.kernel;
        let w = alloc.take(patch * spec.filters);
        let b = alloc.take(spec.filters);
        Self {
            w,
            b,
            in_ch,
            out_ch: spec.filters,
            kernel: spec.kernel,
            stride: spec.stride,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.positions()
    }

    fn dense(&self) -> Dense {
        Dense {
            w: self.w,
            b: self.b,
            n_in: self.patch(),
            n_out: self.out_ch,
        }
    }

    pub fn init<A: Scalar>(&self, p: &mut [A], gain: f64, rng: &mut Rng) {
        self.dense().init(p, gain, rng);
    }

    /// `[B, in_ch*H*W]` → `[B*P, patch]`.
    fn im2col<A: Scalar>(&self, x: ArrayView2<'_, A>) -> Array2<A> {
        let (k, s) = (self.kernel, self.stride);
        let plane = self.in_h * self.in_w;
        let pos = self.positions();
        let mut cols = Array2::zeros((x.nrows() * pos, self.patch()));
        for (b, row) in x.rows().into_iter().enumerate() {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut dst = cols.row_mut(b * pos + oy * self.out_w + ox);
                    let mut j = 0;
                    for ch in 0..self.in_ch {
                        for ky in 0..k {
                            let base = ch * plane + (oy * s + ky) * self.in_w + ox * s;
                            for kx in 0..k {
                                dst[j] = row[base + kx];
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<A: Scalar>(&self, cols: &Array2<A>, batch: usize) -> Array2<A> {
        let (k, s) = (self.kernel, self.stride);
        let plane = self.in_h * self.in_w;
        let pos = self.positions();
        let mut dx = Array2::zeros((batch, self.in_ch * plane));
        for b in 0..batch {
            let mut out = dx.row_mut(b);
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let src = cols.row(b * pos + oy * self.out_w + ox);
                    let mut j = 0;
                    for ch in 0..self.in_ch {
                        for ky in 0..k {
                            let base = ch * plane + (oy * s + ky) * self.in_w + ox * s;
                            for kx in 0..k {
                                out[base + kx] += src[j];
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// `[B*P, out_ch]` (position-major) → `[B, out_ch*P]` (channel-major).
    fn to_channel_major<A: Scalar>(&self, y: &Array2<A>, batch: usize) -> Array2<A> {
        let pos = self.positions();
        let mut out = Array2::zeros((batch, self.out_len()));
        for b in 0..batch {
            let blk = y.slice(s![b * pos..(b + 1) * pos, ..]);
            let mut dst = out.row_mut(b);
            for (p, r) in blk.rows().into_iter().enumerate() {
                for (ch, &v) in r.iter().enumerate() {
                    dst[ch * pos + p] = v;
                }
            }
        }
        out
    }

    fn from_channel_major<A: Scalar>(&self, d: &Array2<A>) -> Array2<A> {
        let pos = self.positions();
        let batch = d.nrows();
        let mut out = Array2::zeros((batch * pos, self.out_ch));
        for b in 0..batch {
            let src = d.row(b);
            for p in 0..pos {
                let mut r = out.row_mut(b * pos + p);
                for ch in 0..self.out_ch {
                    r[ch] = src[ch * pos + p];
                }
            }
        }
        out
    }

    /// Returns the channel-major pre-activation and the im2col matrix.
    pub fn forward<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> (Array2<A>, Array2<A>) {
        let cols = self.im2col(x);
        let y = self.dense().forward(p, cols.view());
        (self.to_channel_major(&y, x.nrows()), cols)
    }

    pub fn backward<A: Scalar>(
        &self,
        p: &[A],
        g: &mut [A],
        cols: &Array2<A>,
        dout: &Array2<A>,
        need_dx: bool,
    ) -> Option<Array2<A>> {
        let d = self.from_channel_major(dout);
        let dcols = self.dense().backward(p, g, cols.view(), d.view(), need_dx)?;
        Some(self.col2im(&dcols, dout.nrows()))
    }
}

/// Convolutional feature extractor followed by a dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub convs: Vec<Conv2d>,
    pub head: Mlp,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ConvNetCache<A> {
    cols: Vec<Array2<A>>,
    pre: Vec<Array2<A>>,
    head: MlpCache<A>,
}

impl ConvNet {
    pub fn new(
        alloc: &mut ParamAlloc,
        shape: crate::data::ImageShape,
        convs: &[ConvSpec],
        hidden: &[usize],
        n_out: usize,
        activation: Activation,
    ) -> Self {
        let (mut ch, mut h, mut w) = (shape.channels, shape.height, shape.width);
        let mut layers = Vec::with_capacity(convs.len());
        for spec in convs {
            let l = Conv2d::new(alloc, ch, h, w, *spec);
            ch = l.out_ch;
            h = l.out_h;
            w = l.out_w;
            layers.push(l);
        }
        let head = Mlp::new(alloc, ch * h * w, hidden, n_out, activation);
        Self {
            convs: layers,
            head,
            activation,
        }
    }

    pub fn init<A: Scalar>(&self, p: &mut [A], out_gain: f64, rng: &mut Rng) {
        for l in &self.convs {
            l.init(p, 2f64.sqrt() / 3f64.sqrt(), rng);
        }
        self.head.init(p, out_gain, rng);
    }

    pub fn forward<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> (Array2<A>, ConvNetCache<A>) {
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.to_owned();
        for l in &self.convs {
            let (z, c) = l.forward(p, h.view());
            h = self.activation.forward(&z);
            cols.push(c);
            pre.push(z);
        }
        let (out, head) = self.head.forward(p, h.view());
        (out, ConvNetCache { cols, pre, head })
    }

    pub fn predict<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> Array2<A> {
        let mut h = x.to_owned();
        for l in &self.convs {
            let (z, _) = l.forward(p, h.view());
            h = self.activation.forward(&z);
        }
        self.head.predict(p, h.view())
    }

    pub fn backward<A: Scalar>(&self, p: &[A], g: &mut [A], cache: &ConvNetCache<A>, dout: Array2<A>) {
        let need = !self.convs.is_empty();
        let Some(mut d) = self.head.backward(p, g, &cache.head, dout, need) else {
            return;
        };
        for i in (0..self.convs.len()).rev() {
            self.activation.backward(&cache.pre[i], &mut d);
            match self.convs[i].backward(p, g, &cache.cols[i], &d, i > 0) {
                Some(dx) => d = dx,
                None => return,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::rng::derive_rng;

    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, p: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = p.to_vec();
        a[i] += h;
        let mut b = p.to_vec();
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = derive_rng(seed, "x", 0);
        Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_matches_hand_product() {
        let mut alloc = ParamAlloc::default();
        let d = Dense::new(&mut alloc, 2, 2);
        // W = [[1, 2], [3, 4]], b = [0.5, -0.5]
        let p = vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let y = d.forward(&p, ndarray::arr2(&[[1.0, 1.0]]).view());
        assert_eq!(y, ndarray::arr2(&[[4.5, 5.5]]));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Softplus, Activation::Relu] {
            let mut alloc = ParamAlloc::default();
            let net = Mlp::new(&mut alloc, 4, &[5, 3], 2, act);
            let mut p = vec![0.0; alloc.len()];
            net.init(&mut p, 1.0, &mut derive_rng(1, "init", 0));
            let x = random_input(3, 4, 2);
            let loss = |p: &[f64]| net.predict(p, x.view()).mapv(|v| v * v).sum();
            let (out, cache) = net.forward(&p, x.view());
            let mut g = vec![0.0; p.len()];
            net.backward(&p, &mut g, &cache, out.mapv(|v| 2.0 * v), false);
            for i in 0..p.len() {
                let n = numeric_grad(&loss, &p, i);
                assert!((g[i] - n).abs() < 1e-6 * (1.0 + n.abs()), "{act:?} param {i}: {} vs {n}", g[i]);
            }
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut alloc = ParamAlloc::default();
        let spec = ConvSpec {
            filters: 2,
            kernel: 2,
            stride: 1,
        };
        let conv = Conv2d::new(&mut alloc, 1, 3, 3, spec);
        let mut p = vec![0.0; alloc.len()];
        conv.init(&mut p, 1.0, &mut derive_rng(3, "init", 0));
        let x = random_input(1, 9, 4);
        let (y, _) = conv.forward(&p, x.view());
        let w = conv.dense().weight(&p).to_owned();
        for f in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = p[conv.b + f];
                    for ky in 0..2 {
                        for kx in 0..2 {
                            acc += x[[0, (oy + ky) * 3 + ox + kx]] * w[[ky * 2 + kx, f]];
                        }
                    }
                    assert!((y[[0, f * 4 + oy * 2 + ox]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn convnet_gradients_match_finite_differences() {
        let mut alloc = ParamAlloc::default();
        let shape = ImageShape::new(2, 6, 6);
        let convs = [
            ConvSpec { filters: 3, kernel: 3, stride: 1 },
            ConvSpec { filters: 2, kernel: 2, stride: 2 },
        ];
        let net = ConvNet::new(&mut alloc, shape, &convs, &[4], 2, Activation::Tanh);
        let mut p = vec![0.0; alloc.len()];
        net.init(&mut p, 1.0, &mut derive_rng(5, "init", 0));
        let x = random_input(2, 72, 6);
        let loss = |p: &[f64]| net.predict(p, x.view()).mapv(|v| v * v).sum();
        let (out, cache) = net.forward(&p, x.view());
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &mut g, &cache, out.mapv(|v| 2.0 * v));
        for i in 0..p.len() {
            let n = numeric_grad(&loss, &p, i);
            assert!((g[i] - n).abs() < 1e-6 * (1.0 + n.abs()), "param {i}: {} vs {n}", g[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches() {
        let logits = random_input(4, 3, 7);
        let q = softmax(&logits);
        for r in q.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let w = random_input(4, 3, 8);
        let f = |l: &Array2<f64>| (softmax(l) * &w).sum();
        let d = softmax_backward(&q, &w);
        for i in 0..4 {
            for j in 0..3 {
                let mut a = logits.clone();
                a[[i, j]] += 1e-6;
                let mut b = logits.clone();
                b[[i, j]] -= 1e-6;
                let n = (f(&a) - f(&b)) / 2e-6;
                assert!((d[[i, j]] - n).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
