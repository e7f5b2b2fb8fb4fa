//! M2-style semi-supervised VAE.
//!
//! The encoder sees `(x, y)` and produces `(μ, log σ)`, the classifier maps
//! `x` to `q(y|x)`, and the decoder maps `(z, y)` to Bernoulli means. Losses
//! come with hand-derived gradients over the flat parameter buffer.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{CsadError, Result};
use crate::nn::{
    sigmoid, softmax, softmax_backward, Activation, ConvNet, ConvNetCache, ConvSpec, Mlp, MlpCache, ParamAlloc,
};
use crate::rng::{derive_rng, standard_normal, Rng};
use crate::scalar::{c, Scalar};

/// Lower clamp for every log argument; the upper clamp is `1 - LOG_EPS`.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    /// Convolution stack, used only when the input has an image shape.
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            conv: vec![ConvSpec {
                filters: 8,
                kernel: 5,
                stride: 2,
            }],
            hidden: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsVaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier: ClassifierSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<ImageShape>,
    pub n_classes: usize,
    pub beta_kl: f64,
    pub alpha_cls: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub activation: Activation,
    /// Monte-Carlo draws of `z` per anomaly score.
    pub mc_samples: usize,
}

impl Default for SsVaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            latent_dim: 32,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            classifier: ClassifierSpec::default(),
            image_shape: None,
            n_classes: 2,
            beta_kl: 1.0,
            alpha_cls: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 10,
            early_stop_patience: 3,
            activation: Activation::Relu,
            mc_samples: 8,
        }
    }
}

impl SsVaeConfig {
    /// Defaults sized for `input_dim` inputs, convolutional classifier when
    /// an image shape is given.
    pub fn for_input(input_dim: usize, image_shape: Option<ImageShape>) -> Self {
        Self {
            input_dim,
            image_shape,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CsadError::Config(m));
        if self.input_dim == 0 {
            return err("input_dim must be ≥ 1".into());
        }
        if self.latent_dim == 0 {
            return err("latent_dim must be ≥ 1".into());
        }
        if self.n_classes < 2 {
            return err(format!("n_classes {} < 2", self.n_classes));
        }
        if !(self.beta_kl > 0.0) {
            return err(format!("beta_kl {} must be > 0", self.beta_kl));
        }
        if !(self.alpha_cls > 0.0) {
            return err(format!("alpha_cls {} must be > 0", self.alpha_cls));
        }
        if !(self.learning_rate > 0.0) {
            return err(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return err("batch_size and mc_samples must be ≥ 1".into());
        }
        if [&self.encoder_hidden, &self.decoder_hidden, &self.classifier.hidden]
            .iter()
            .any(|h| h.contains(&0))
        {
            return err("layer widths must be ≥ 1".into());
        }
        if let Some(s) = self.image_shape {
            if s.n_pixels() != self.input_dim {
                return err(format!("image shape {s:?} does not match input_dim {}", self.input_dim));
            }
            let (mut h, mut w) = (s.height, s.width);
            for cs in &self.classifier.conv {
                if cs.kernel == 0 || cs.stride == 0 || cs.filters == 0 || cs.kernel > h || cs.kernel > w {
                    return err(format!("conv layer {cs:?} does not fit a {h}×{w} input"));
                }
                h = (h - cs.kernel) / cs.stride + 1;
                w = (w - cs.kernel) / cs.stride + 1;
            }
        }
        Ok(())
    }
}

/// Per-batch mean loss components. `kl` already carries the β weight and
/// `cls` the α weight, so `total = recon + kl + cls - entropy`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub cls: f64,
    pub entropy: f64,
    pub total: f64,
}

impl std::ops::Add for LossBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            recon: self.recon + o.recon,
            kl: self.kl + o.kl,
            cls: self.cls + o.cls,
            entropy: self.entropy + o.entropy,
            total: self.total + o.total,
        }
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl, self.cls, self.entropy, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            recon: self.recon * k,
            kl: self.kl * k,
            cls: self.cls * k,
            entropy: self.entropy * k,
            total: self.total * k,
        }
    }
}

/// Standard-normal draws for one loss evaluation: one matrix for the
/// labelled rows and one per class for the unlabelled rows.
#[derive(Debug, Clone)]
pub struct LossNoise<A> {
    pub labelled: Array2<A>,
    pub unlabelled: Vec<Array2<A>>,
}

impl<A: Scalar> LossNoise<A> {
    pub fn draw(rng: &mut Rng, n_labelled: usize, n_unlabelled: usize, latent_dim: usize, n_classes: usize) -> Self {
        let labelled = standard_normal(rng, n_labelled, latent_dim);
        let unlabelled = (0..n_classes)
            .map(|_| standard_normal(rng, n_unlabelled, latent_dim))
            .collect();
        Self { labelled, unlabelled }
    }

    pub fn zeros(n_labelled: usize, n_unlabelled: usize, latent_dim: usize, n_classes: usize) -> Self {
        Self {
            labelled: Array2::zeros((n_labelled, latent_dim)),
            unlabelled: vec![Array2::zeros((n_unlabelled, latent_dim)); n_classes],
        }
    }
}

/// Inputs to one evaluation of the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a, A> {
    pub x_labelled: ArrayView2<'a, A>,
    pub y_labelled: &'a [usize],
    pub x_unlabelled: ArrayView2<'a, A>,
    pub noise: &'a LossNoise<A>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ClassifierNet {
    Dense(Mlp),
    Conv(ConvNet),
}

enum ClassifierCache<A> {
    Dense(MlpCache<A>),
    Conv(ConvNetCache<A>),
}

impl ClassifierNet {
    fn init<A: Scalar>(&self, p: &mut [A], rng: &mut Rng) {
        match self {
            ClassifierNet::Dense(m) => m.init(p, 1.0, rng),
            ClassifierNet::Conv(n) => n.init(p, 1.0, rng),
        }
    }

    fn forward<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> (Array2<A>, ClassifierCache<A>) {
        match self {
            ClassifierNet::Dense(m) => {
                let (o, c) = m.forward(p, x);
                (o, ClassifierCache::Dense(c))
            }
            ClassifierNet::Conv(n) => {
                let (o, c) = n.forward(p, x);
                (o, ClassifierCache::Conv(c))
            }
        }
    }

    fn predict<A: Scalar>(&self, p: &[A], x: ArrayView2<'_, A>) -> Array2<A> {
        match self {
            ClassifierNet::Dense(m) => m.predict(p, x),
            ClassifierNet::Conv(n) => n.predict(p, x),
        }
    }

    fn backward<A: Scalar>(&self, p: &[A], g: &mut [A], cache: &ClassifierCache<A>, d: Array2<A>) {
        match (self, cache) {
            (ClassifierNet::Dense(m), ClassifierCache::Dense(c)) => {
                m.backward(p, g, c, d, false);
            }
            (ClassifierNet::Conv(n), ClassifierCache::Conv(c)) => n.backward(p, g, c, d),
            _ => unreachable!("classifier cache kind"),
        }
    }
}

/// Forward state of `L(x, y)` for a batch with fixed labels.
struct Branch<A> {
    enc: MlpCache<A>,
    mu: Array2<A>,
    log_sigma: Array2<A>,
    sigma: Array2<A>,
    dec: MlpCache<A>,
    x_hat: Array2<A>,
    /// unweighted closed-form KL per row
    kl: Array1<A>,
    bce: Array1<A>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    encoder: Mlp,
    decoder: Mlp,
    classifier: ClassifierNet,
    n_params: usize,
}

impl Layout {
    fn new(cfg: &SsVaeConfig) -> Self {
        let mut alloc = ParamAlloc::default();
        let k = cfg.n_classes;
        let encoder = Mlp::new(
            &mut alloc,
            cfg.input_dim + k,
            &cfg.encoder_hidden,
            2 * cfg.latent_dim,
            cfg.activation,
        );
        let decoder = Mlp::new(
            &mut alloc,
            cfg.latent_dim + k,
            &cfg.decoder_hidden,
            cfg.input_dim,
            cfg.activation,
        );
        let classifier = match cfg.image_shape {
            Some(shape) if !cfg.classifier.conv.is_empty() => ClassifierNet::Conv(ConvNet::new(
                &mut alloc,
                shape,
                &cfg.classifier.conv,
                &cfg.classifier.hidden,
                k,
                cfg.activation,
            )),
            _ => ClassifierNet::Dense(Mlp::new(
                &mut alloc,
                cfg.input_dim,
                &cfg.classifier.hidden,
                k,
                cfg.activation,
            )),
        };
        Self {
            encoder,
            decoder,
            classifier,
            n_params: alloc.len(),
        }
    }
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))` per row.
pub fn kl_diag_gaussian<A: Scalar>(mu: &Array2<A>, log_sigma: &Array2<A>) -> Array1<A> {
    let half: A = c(0.5);
    let two: A = c(2.0);
    let mut out = Array1::zeros(mu.nrows());
    Zip::from(&mut out)
        .and(mu.rows())
        .and(log_sigma.rows())
        .for_each(|o, m, l| {
            *o = half
                * m.iter()
                    .zip(l.iter())
                    .map(|(&m, &l)| m * m + (two * l).exp() - A::one() - two * l)
                    .sum::<A>();
        });
    out
}

/// `z = μ + exp(log σ) ⊙ noise`.
pub fn reparameterize<A: Scalar>(mu: &Array2<A>, log_sigma: &Array2<A>, noise: &Array2<A>) -> Array2<A> {
    assert_eq!(mu.dim(), log_sigma.dim(), "reparameterize: μ vs log σ");
    assert_eq!(mu.dim(), noise.dim(), "reparameterize: μ vs noise");
    let mut z = mu.clone();
    Zip::from(&mut z)
        .and(log_sigma)
        .and(noise)
        .for_each(|z, &l, &n| *z += l.exp() * n);
    z
}

#[inline]
fn clamp_prob<A: Scalar>(v: A) -> (A, bool) {
    let lo: A = c(LOG_EPS);
    let hi: A = c(1.0 - LOG_EPS);
    if v < lo {
        (lo, false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

/// Row-wise `-Σ [x log x̂ + (1-x) log(1-x̂)]` with ε-clamped `x̂`.
pub fn bce_rows<A: Scalar>(x: ArrayView2<'_, A>, x_hat: &Array2<A>) -> Array1<A> {
    let mut out = Array1::zeros(x.nrows());
    Zip::from(&mut out)
        .and(x.rows())
        .and(x_hat.rows())
        .for_each(|o, xr, hr| {
            *o = -xr
                .iter()
                .zip(hr.iter())
                .map(|(&x, &h)| {
                    let (h, _) = clamp_prob(h);
                    x * h.ln() + (A::one() - x) * (A::one() - h).ln()
                })
                .sum::<A>();
        });
    out
}

/// `-Σ q log q` per row with ε-clamped logs.
pub fn entropy_rows<A: Scalar>(q: &Array2<A>) -> Array1<A> {
    q.map_axis(Axis(1), |r| -r.iter().map(|&v| v * clamp_prob(v).0.ln()).sum::<A>())
}

fn label_matrix<A: Scalar>(rows: usize, y: &[usize], k: usize) -> Array2<A> {
    let mut m = Array2::zeros((rows, k));
    for (i, &c) in y.iter().enumerate() {
        m[[i, c]] = A::one();
    }
    m
}

fn constant_labels<A: Scalar>(rows: usize, class: usize, k: usize) -> Array2<A> {
    let mut m = Array2::zeros((rows, k));
    m.column_mut(class).fill(A::one());
    m
}

fn to_f64_mean<A: Scalar>(v: &Array1<A>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
    }
}

/// The semi-supervised VAE: config, layer layout and flat parameters.
#[derive(Debug, Clone)]
pub struct SsVae<A> {
    config: SsVaeConfig,
    layout: Layout,
    params: Vec<A>,
}

impl<A: Scalar> SsVae<A> {
    /// Fresh model. The encoder output layer starts near zero so that
    /// `μ ≈ 0` and `σ ≈ 1` for any input.
    pub fn new(config: SsVaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![A::zero(); layout.n_params];
        layout.encoder.init(&mut params, 0.01, rng);
        layout.decoder.init(&mut params, 1.0, rng);
        layout.classifier.init(&mut params, rng);
        Ok(Self { config, layout, params })
    }

    /// Rebuild a model around stored parameters.
    pub fn from_params(config: SsVaeConfig, params: Vec<A>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.n_params {
            return Err(CsadError::Validation(format!(
                "parameter buffer has {} entries, layout needs {}",
                params.len(),
                layout.n_params
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &SsVaeConfig {
        &self.config
    }

    pub fn params(&self) -> &[A] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [A] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[A]) {
        assert_eq!(params.len(), self.params.len(), "set_params: length");
        self.params.copy_from_slice(params);
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Encoder means and log standard deviations for `x` under one-hot `y`.
    pub fn encode(&self, x: ArrayView2<'_, A>, y: ArrayView2<'_, A>) -> (Array2<A>, Array2<A>) {
        assert_eq!(x.nrows(), y.nrows(), "encode: x vs y rows");
        let inp = concatenate(Axis(1), &[x, y]).expect("encode concat");
        let out = self.layout.encoder.predict(&self.params, inp.view());
        self.split_encoder(out)
    }

    /// Encoder means for every row under the given class.
    pub fn encode_mean(&self, x: ArrayView2<'_, A>, class: usize) -> Array2<A> {
        let y = constant_labels(x.nrows(), class, self.config.n_classes);
        self.encode(x, y.view()).0
    }

    fn split_encoder(&self, out: Array2<A>) -> (Array2<A>, Array2<A>) {
        let l = self.config.latent_dim;
        let mu = out.slice(s![.., ..l]).to_owned();
        let ls = out.slice(s![.., l..]).to_owned();
        (mu, ls)
    }

    /// `q(y|x)` rows.
    pub fn classify(&self, x: ArrayView2<'_, A>) -> Array2<A> {
        softmax(&self.layout.classifier.predict(&self.params, x))
    }

    /// Bernoulli means for latent rows `z` under one-hot `y`.
    pub fn decode(&self, z: ArrayView2<'_, A>, y: ArrayView2<'_, A>) -> Array2<A> {
        assert_eq!(z.nrows(), y.nrows(), "decode: z vs y rows");
        let inp = concatenate(Axis(1), &[z, y]).expect("decode concat");
        self.layout.decoder.predict(&self.params, inp.view()).mapv(sigmoid)
    }

    /// Draw `z ~ N(0, I)` and decode under `class`. Returns `(x̂, z)`.
    pub fn generate(&self, class: usize, n: usize, rng: &mut Rng) -> (Array2<A>, Array2<A>) {
        let z = standard_normal::<A>(rng, n, self.config.latent_dim);
        let x = self.decode_class(z.view(), class);
        (x, z)
    }

    pub fn decode_class(&self, z: ArrayView2<'_, A>, class: usize) -> Array2<A> {
        let y = constant_labels(z.nrows(), class, self.config.n_classes);
        self.decode(z, y.view())
    }

    fn branch_forward(&self, x: ArrayView2<'_, A>, y: ArrayView2<'_, A>, noise: &Array2<A>) -> Branch<A> {
        let p = &self.params;
        let inp = concatenate(Axis(1), &[x, y]).expect("encoder concat");
        let (out, enc) = self.layout.encoder.forward(p, inp.view());
        let (mu, log_sigma) = self.split_encoder(out);
        let sigma = log_sigma.mapv(|v| v.exp());
        let mut z = mu.clone();
        Zip::from(&mut z)
            .and(&sigma)
            .and(noise)
            .for_each(|z, &s, &n| *z += s * n);
        let dinp = concatenate(Axis(1), &[z.view(), y]).expect("decoder concat");
        let (logits, dec) = self.layout.decoder.forward(p, dinp.view());
        let x_hat = logits.mapv(sigmoid);
        let kl = kl_diag_gaussian(&mu, &log_sigma);
        let bce = bce_rows(x, &x_hat);
        Branch {
            enc,
            mu,
            log_sigma,
            sigma,
            dec,
            x_hat,
            kl,
            bce,
        }
    }

    /// Backward of `Σ_b w_b (β KL_b + BCE_b)`.
    fn branch_backward(&self, g: &mut [A], br: &Branch<A>, x: ArrayView2<'_, A>, noise: &Array2<A>, w: &Array1<A>) {
        let p = &self.params;
        let beta: A = c(self.config.beta_kl);
        let mut dlogits = br.x_hat.clone();
        Zip::from(dlogits.rows_mut())
            .and(x.rows())
            .and(w)
            .for_each(|mut d, xr, &wb| {
                Zip::from(&mut d).and(&xr).for_each(|d, &xv| {
                    let inside = clamp_prob(*d).1;
                    *d = if inside { wb * (*d - xv) } else { A::zero() };
                });
            });
        let dinp = self
            .layout
            .decoder
            .backward(p, g, &br.dec, dlogits, true)
            .expect("decoder input grad");
        let l = self.config.latent_dim;
        let dz = dinp.slice(s![.., ..l]);
        let mut denc = Array2::zeros((x.nrows(), 2 * l));
        for b in 0..x.nrows() {
            let wb = w[b] * beta;
            for j in 0..l {
                let mu = br.mu[[b, j]];
                let s = br.sigma[[b, j]];
                let dzj = dz[[b, j]];
                denc[[b, j]] = dzj + wb * mu;
                denc[[b, l + j]] = dzj * s * noise[[b, j]] + wb * (s * s - A::one());
            }
        }
        self.layout.encoder.backward(p, g, &br.enc, denc, false);
    }

    fn check_finite(&self, what: &str, br: &Branch<A>) -> Result<()> {
        let bad = |a: &Array2<A>| a.iter().any(|v| !v.is_finite());
        if bad(&br.mu) || bad(&br.log_sigma) || bad(&br.x_hat) {
            let max_mu = br.mu.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
            let max_ls = br.log_sigma.iter().fold(f64::MIN, |m, v| m.max(v.as_f64()));
            return Err(CsadError::Numeric(format!(
                "{what}: non-finite activations on a batch of {} rows (max |μ| {max_mu:.3e}, max log σ {max_ls:.3e})",
                br.mu.nrows()
            )));
        }
        Ok(())
    }

    fn labelled_part(
        &self,
        x: ArrayView2<'_, A>,
        y: &[usize],
        noise: &Array2<A>,
        grad: Option<&mut [A]>,
    ) -> Result<LossBreakdown> {
        let n = x.nrows();
        if n == 0 {
            return Ok(LossBreakdown::default());
        }
        if y.len() != n {
            return Err(CsadError::Validation(format!("{} labels for {n} rows", y.len())));
        }
        let k = self.config.n_classes;
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(CsadError::Validation(format!("label {bad} outside 0..{k}")));
        }
        let beta: A = c(self.config.beta_kl);
        let alpha: A = c(self.config.alpha_cls);
        let yoh = label_matrix::<A>(n, y, k);
        let br = self.branch_forward(x, yoh.view(), noise);
        self.check_finite("labelled loss", &br)?;
        let (logits, ccache) = self.layout.classifier.forward(&self.params, x);
        let q = softmax(&logits);
        let ce: Array1<A> = Array1::from_iter(y.iter().enumerate().map(|(b, &c)| -clamp_prob(q[[b, c]]).0.ln()));

        let out = LossBreakdown {
            recon: to_f64_mean(&br.bce),
            kl: self.config.beta_kl * to_f64_mean(&br.kl),
            cls: self.config.alpha_cls * to_f64_mean(&ce),
            entropy: 0.0,
            total: 0.0,
        };
        let total = to_f64_mean(&(&br.bce + &(&br.kl * beta) + &(&ce * alpha)));
        let out = LossBreakdown { total, ..out };
        if !out.is_finite() {
            return Err(CsadError::Numeric(format!("labelled loss is not finite: {out:?}")));
        }

        if let Some(g) = grad {
            let inv: A = A::one() / c::<A>(n as f64);
            let w = Array1::from_elem(n, inv);
            self.branch_backward(g, &br, x, noise, &w);
            let mut dq = Array2::zeros((n, k));
            for (b, &cl) in y.iter().enumerate() {
                let (qv, inside) = clamp_prob(q[[b, cl]]);
                if inside {
                    dq[[b, cl]] = -alpha * inv / qv;
                }
            }
            let dlogits = softmax_backward(&q, &dq);
            self.layout.classifier.backward(&self.params, g, &ccache, dlogits);
        }
        Ok(out)
    }

    fn unlabelled_part(&self, x: ArrayView2<'_, A>, noise: &[Array2<A>], grad: Option<&mut [A]>) -> Result<LossBreakdown> {
        let n = x.nrows();
        if n == 0 {
            return Ok(LossBreakdown::default());
        }
        let k = self.config.n_classes;
        if noise.len() != k {
            return Err(CsadError::Validation(format!("{} noise matrices for {k} classes", noise.len())));
        }
        let beta: A = c(self.config.beta_kl);
        let (logits, ccache) = self.layout.classifier.forward(&self.params, x);
        let q = softmax(&logits);
        let h = entropy_rows(&q);

        let mut branches = Vec::with_capacity(k);
        let mut recon = Array1::<A>::zeros(n);
        let mut kl = Array1::<A>::zeros(n);
        let mut l_by_class = Array2::<A>::zeros((n, k));
        for cls in 0..k {
            let yoh = constant_labels::<A>(n, cls, k);
            let br = self.branch_forward(x, yoh.view(), &noise[cls]);
            self.check_finite("unlabelled loss", &br)?;
            let qc = q.column(cls);
            recon += &(&br.bce * &qc);
            kl += &(&br.kl * &qc);
            l_by_class.column_mut(cls).assign(&(&br.bce + &(&br.kl * beta)));
            branches.push(br);
        }
        let per_row: Array1<A> = (&q * &l_by_class).sum_axis(Axis(1)) - &h;
        let out = LossBreakdown {
            recon: to_f64_mean(&recon),
            kl: self.config.beta_kl * to_f64_mean(&kl),
            cls: 0.0,
            entropy: to_f64_mean(&h),
            total: to_f64_mean(&per_row),
        };
        if !out.is_finite() {
            return Err(CsadError::Numeric(format!("unlabelled loss is not finite: {out:?}")));
        }

        if let Some(g) = grad {
            let inv: A = A::one() / c::<A>(n as f64);
            for (cls, br) in branches.iter().enumerate() {
                let w = q.column(cls).mapv(|v| v * inv);
                self.branch_backward(g, br, x, &noise[cls], &w);
            }
            let mut dq = Array2::zeros((n, k));
            Zip::from(&mut dq).and(&q).and(&l_by_class).for_each(|d, &qv, &l| {
                let (cv, inside) = clamp_prob(qv);
                let dh = cv.ln() + if inside { A::one() } else { A::zero() };
                *d = (l + dh) * inv;
            });
            let dlogits = softmax_backward(&q, &dq);
            self.layout.classifier.backward(&self.params, g, &ccache, dlogits);
        }
        Ok(out)
    }

    /// Labelled loss: mean of `β·KL + BCE + α·CE`.
    pub fn loss_labelled(&self, x: ArrayView2<'_, A>, y: &[usize], noise: &Array2<A>) -> Result<LossBreakdown> {
        if x.nrows() == 0 {
            return Err(CsadError::Validation("labelled batch is empty".into()));
        }
        self.labelled_part(x, y, noise, None)
    }

    /// Unlabelled loss: mean of `Σ_y q(y|x) L(x,y) - H(q(y|x))`.
    pub fn loss_unlabelled(&self, x: ArrayView2<'_, A>, noise: &[Array2<A>]) -> Result<LossBreakdown> {
        if x.nrows() == 0 {
            return Err(CsadError::Validation("unlabelled batch is empty".into()));
        }
        self.unlabelled_part(x, noise, None)
    }

    pub fn total_loss(&self, batch: &LossBatch<'_, A>) -> Result<LossBreakdown> {
        self.loss_impl(batch, None)
    }

    /// Total loss; its gradient is added into `grad`.
    pub fn loss_and_grad(&self, batch: &LossBatch<'_, A>, grad: &mut [A]) -> Result<LossBreakdown> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        self.loss_impl(batch, Some(grad))
    }

    fn loss_impl(&self, batch: &LossBatch<'_, A>, mut grad: Option<&mut [A]>) -> Result<LossBreakdown> {
        if batch.x_labelled.nrows() == 0 && batch.x_unlabelled.nrows() == 0 {
            return Err(CsadError::Validation("both labelled and unlabelled batches are empty".into()));
        }
        let l = self.labelled_part(
            batch.x_labelled,
            batch.y_labelled,
            &batch.noise.labelled,
            grad.as_deref_mut(),
        )?;
        let u = self.unlabelled_part(batch.x_unlabelled, &batch.noise.unlabelled, grad)?;
        Ok(l + u)
    }

    /// Per-row negative unlabelled ELBO, `z` averaged over the configured
    /// number of draws. The draws are shared by all rows, so a row's score
    /// depends only on the row and `seed`.
    pub fn elbo_score(&self, x: ArrayView2<'_, A>, seed: u64) -> Array1<A> {
        const CHUNK: usize = 256;
        let m = self.config.mc_samples;
        let noise = standard_normal::<A>(&mut derive_rng(seed, "elbo-score", 0), m, self.config.latent_dim);
        let n = x.nrows();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<Array1<A>> = starts
            .par_iter()
            .map(|&s| self.score_chunk(x.slice(s![s..(s + CHUNK).min(n), ..]), &noise))
            .collect();
        let mut out = Array1::zeros(n);
        for (s, part) in starts.into_iter().zip(parts) {
            out.slice_mut(s![s..s + part.len()]).assign(&part);
        }
        out
    }

    fn score_chunk(&self, x: ArrayView2<'_, A>, noise: &Array2<A>) -> Array1<A> {
        let n = x.nrows();
        let k = self.config.n_classes;
        let beta: A = c(self.config.beta_kl);
        let inv_m: A = A::one() / c::<A>(noise.nrows() as f64);
        let q = self.classify(x);
        let mut score = -entropy_rows(&q);
        for cls in 0..k {
            let y = constant_labels::<A>(n, cls, k);
            let (mu, log_sigma) = self.encode(x, y.view());
            let sigma = log_sigma.mapv(|v| v.exp());
            let mut l = kl_diag_gaussian(&mu, &log_sigma) * beta;
            for eps in noise.rows() {
                let z = &mu + &(&sigma * &eps);
                let x_hat = self.decode(z.view(), y.view());
                l += &(bce_rows(x, &x_hat) * inv_m);
            }
            score += &(&l * &q.column(cls));
        }
        score
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng as _;

    fn tiny(seed: u64) -> SsVae<f64> {
        let cfg = SsVaeConfig {
            input_dim: 6,
            latent_dim: 2,
            encoder_hidden: vec![5],
            decoder_hidden: vec![5],
            classifier: ClassifierSpec {
                conv: vec![],
                hidden: vec![4],
            },
            activation: Activation::Tanh,
            ..SsVaeConfig::default()
        };
        SsVae::new(cfg, &mut derive_rng(seed, "init", 0)).unwrap()
    }

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = derive_rng(seed, "x", 0);
        Array2::from_shape_simple_fn((rows, cols), || r.random::<f64>())
    }

    #[test]
    fn fresh_encoder_is_near_prior() {
        let m = tiny(1);
        let x = unit_rows(4, 6, 2);
        let (mu, ls) = m.encode(x.view(), label_matrix(4, &[0, 1, 0, 1], 2).view());
        assert_eq!(mu.dim(), (4, 2));
        assert!(mu.iter().all(|v| v.abs() < 0.1));
        assert!(ls.iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn reparameterize_cases() {
        let mu = ndarray::arr2(&[[1.0, -2.0]]);
        let z = reparameterize(&mu, &Array2::zeros((1, 2)), &Array2::zeros((1, 2)));
        assert_eq!(z, mu);
        let n = ndarray::arr2(&[[0.3, 0.7]]);
        assert_eq!(reparameterize(&Array2::zeros((1, 2)), &Array2::zeros((1, 2)), &n), n);
    }

    #[test]
    fn kl_zero_at_prior() {
        let kl = kl_diag_gaussian(&Array2::<f64>::zeros((3, 4)), &Array2::zeros((3, 4)));
        assert!(kl.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probabilities_and_outputs_in_range() {
        let m = tiny(3);
        let x = unit_rows(5, 6, 4);
        let q = m.classify(x.view());
        for r in q.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let (xh, z) = m.generate(1, 7, &mut derive_rng(5, "gen", 0));
        assert_eq!(z.dim(), (7, 2));
        assert!(xh.iter().all(|&v| v > 0.0 && v < 1.0));
        let (e, _) = m.generate(0, 0, &mut derive_rng(5, "gen", 0));
        assert_eq!(e.nrows(), 0);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let m = tiny(6);
        let xl = unit_rows(3, 6, 7);
        let xu = unit_rows(4, 6, 8);
        let y = [0, 1, 0];
        let noise = LossNoise::draw(&mut derive_rng(9, "n", 0), 3, 4, 2, 2);
        let batch = LossBatch {
            x_labelled: xl.view(),
            y_labelled: &y,
            x_unlabelled: xu.view(),
            noise: &noise,
        };
        let t = m.total_loss(&batch).unwrap();
        let l = m.loss_labelled(xl.view(), &y, &noise.labelled).unwrap();
        let u = m.loss_unlabelled(xu.view(), &noise.unlabelled).unwrap();
        assert_eq!(t.total, l.total + u.total);
        assert!((t.total - (t.recon + t.kl + t.cls - t.entropy)).abs() < 1e-12);
    }

    #[test]
    fn both_empty_is_error() {
        let m = tiny(6);
        let e = Array2::<f64>::zeros((0, 6));
        let noise = LossNoise::zeros(0, 0, 2, 2);
        let batch = LossBatch {
            x_labelled: e.view(),
            y_labelled: &[],
            x_unlabelled: e.view(),
            noise: &noise,
        };
        assert!(matches!(m.total_loss(&batch), Err(CsadError::Validation(_))));
    }

    #[test]
    fn score_is_row_local() {
        let m = tiny(10);
        let x = unit_rows(6, 6, 11);
        let a = m.elbo_score(x.view(), 3);
        let b = m.elbo_score(x.slice(s![2..4, ..]), 3);
        assert_eq!(a[2], b[0]);
        assert_eq!(a[3], b[1]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SsVaeConfig::for_input(784, Some(ImageShape::new(1, 28, 28)));
        cfg.validate().unwrap();
        cfg.beta_kl = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SsVaeConfig::for_input(780, Some(ImageShape::new(1, 28, 28)));
        assert!(cfg.validate().is_err());
        cfg.image_shape = None;
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());
    }
}

#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng as _;

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let cfg = SsVaeConfig {
                input_dim: 6,
                latent_dim: 2,
                encoder_hidden: vec![5],
                decoder_hidden: vec![5],
                classifier: ClassifierSpec { conv: vec![], hidden: vec![4] },
                activation: act,
                beta_kl: 0.7,
                alpha_cls: 1.3,
                ..SsVaeConfig::default()
            };
            let mut m = SsVae::<f64>::new(cfg, &mut derive_rng(1, "init", 0)).unwrap();
            let mut r = derive_rng(2, "p", 0);
            m.params_mut().iter_mut().for_each(|p| *p = r.random_range(-0.8..0.8));
            let mut r = derive_rng(3, "x", 0);
            let xl = Array2::from_shape_simple_fn((3, 6), || r.random::<f64>());
            let xu = Array2::from_shape_simple_fn((3, 6), || r.random::<f64>());
            let y = [0usize, 1, 1];
            let noise = LossNoise::draw(&mut derive_rng(4, "n", 0), 3, 3, 2, 2);
            let batch = LossBatch { x_labelled: xl.view(), y_labelled: &y, x_unlabelled: xu.view(), noise: &noise };
            let mut g = vec![0.0; m.n_params()];
            m.loss_and_grad(&batch, &mut g).unwrap();
            let base = m.params().to_vec();
            let mut worst = 0.0f64;
            for i in 0..base.len() {
                let h = 1e-6;
                let mut p = base.clone();
                p[i] += h;
                m.set_params(&p);
                let a = m.total_loss(&batch).unwrap().total;
                p[i] -= 2.0 * h;
                m.set_params(&p);
                let b = m.total_loss(&batch).unwrap().total;
                let num = (a - b) / (2.0 * h);
                let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-3);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{act:?}: worst relative error {worst}");
        }
    }
}
