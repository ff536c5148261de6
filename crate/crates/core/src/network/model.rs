use super::config::{ModelConfig, HYPER_STRIDE, SIGMA_MIN};
use super::entropy::{quantize, FactorizedPrior, QuantMode};
use super::params::{Bound, ParamId, ParamStore};
use crate::attention::{gwam_forward, GwamConfig, HeadVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

/// Negative slope of every leaky ReLU.
const SLOPE: f64 = 0.2;

/// Initial spread of the latent relative to unit-variance layers, so that
/// rounding keeps information from the first step on.
const LATENT_GAIN: f64 = 2.0;

/// Distortion is measured on the 8-bit scale: `lambda * 255^2 * MSE`.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    transpose: bool,
}

impl Conv {
    fn apply<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.w), Some(p.var(self.b)));
        if self.transpose {
            g.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn apply<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let t = self.a.apply(g, p, x)?;
        let t = g.leaky_relu(t, S::of(SLOPE));
        let t = self.b.apply(g, p, t)?;
        g.add(x, t)
    }
}

#[derive(Clone, Debug)]
struct Gwam {
    config: GwamConfig,
    heads: Vec<[ParamId; 4]>,
}

impl Gwam {
    fn apply<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let heads: Vec<HeadVars> = self
            .heads
            .iter()
            .map(|ids| HeadVars {
                theta: p.var(ids[0]),
                phi: p.var(ids[1]),
                g: p.var(ids[2]),
                z: p.var(ids[3]),
            })
            .collect();
        gwam_forward(g, x, &self.config, &heads)
    }
}

/// Three 1x1 layers.
#[derive(Clone, Copy, Debug)]
struct Mlp([Conv; 3]);

impl Mlp {
    fn apply<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let mut t = x;
        for (i, c) in self.0.iter().enumerate() {
            t = c.apply(g, p, t)?;
            if i < 2 {
                t = g.leaky_relu(t, S::of(SLOPE));
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug)]
struct SliceNet {
    start: usize,
    len: usize,
    mean_scale: Mlp,
    residual: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    enc1: Conv,
    enc_res1: Option<ResBlock>,
    enc2: Conv,
    enc_res2: ResBlock,
    enc_att1: Gwam,
    enc3: Conv,
    enc_res3: ResBlock,
    enc4: Conv,
    enc_att2: Gwam,
    dec_att2: Gwam,
    dec4: Conv,
    dec_res3: ResBlock,
    dec3: Conv,
    dec_att1: Gwam,
    dec_res2: ResBlock,
    dec2: Conv,
    dec_res1: Option<ResBlock>,
    dec1: Conv,
    ha: [Conv; 3],
    hs: [Conv; 3],
    slices: Vec<SliceNet>,
    prior_loc: ParamId,
    prior_log_scale: ParamId,
}

struct Builder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut Rng,
}

impl<S: Real> Builder<'_, S> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let std = gain / ((cin * k * k) as f64).sqrt();
        let w = self.store.add(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, self.rng));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
            transpose: false,
        }
    }

    /// 4x4 stride-2 upsampling.
    fn tconv(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> Conv {
        // each output sees about cin * 4 taps
        let std = gain / ((cin * 4) as f64).sqrt();
        let w = self.store.add(format!("{name}.w"), Tensor::randn(&[cin, cout, 4, 4], std, self.rng));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride: 2,
            pad: 1,
            transpose: true,
        }
    }

    fn res(&mut self, name: &str, c: usize) -> ResBlock {
        ResBlock {
            a: self.conv(&format!("{name}.a"), c, c, 3, 1, 1.4),
            b: self.conv(&format!("{name}.b"), c, c, 3, 1, 0.1),
        }
    }

    fn gwam(&mut self, name: &str, config: GwamConfig, c: usize) -> Gwam {
        let d = c / config.heads;
        let std = 1.0 / (d as f64).sqrt();
        let heads = (0..config.heads)
            .map(|h| {
                ["theta", "phi", "g", "z"].map(|m| {
                    let s = if m == "z" { std * 0.1 } else { std };
                    self.store
                        .add(format!("{name}.h{h}.{m}"), Tensor::randn(&[d, d], s, self.rng))
                })
            })
            .collect();
        Gwam { config, heads }
    }

    fn mlp(&mut self, name: &str, cin: usize, hidden: usize, cout: usize, last_gain: f64) -> Mlp {
        Mlp([
            self.conv(&format!("{name}.0"), cin, hidden, 1, 1, 1.4),
            self.conv(&format!("{name}.1"), hidden, hidden, 1, 1, 1.4),
            self.conv(&format!("{name}.2"), hidden, cout, 1, 1, last_gain),
        ])
    }
}

/// Intermediate quantities of the latent coding path.
#[derive(Clone, Copy, Debug)]
pub struct EntropyOut {
    pub z: Var,
    pub z_hat: Var,
    pub y_hat: Var,
    pub y_bar: Var,
    pub mu: Var,
    pub sigma: Var,
    pub residual: Var,
    /// Per-element bits, same shape as `y`.
    pub rate_y: Var,
    /// Per-element bits, same shape as `z`.
    pub rate_z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    pub loss: Var,
    pub bpp: Var,
    pub mse: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub y: Var,
    pub x_hat: Var,
    pub entropy: EntropyOut,
    pub rd: RdTerms,
}

/// The full codec network: transforms with attention blocks, hyperprior,
/// slice entropy model and factorized prior.
#[derive(Clone, Debug)]
pub struct Gabic<S: Real = f32> {
    config: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

impl<S: Real> Gabic<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let layout = build(&config, &mut Builder {
            store: &mut params,
            rng: &mut rng,
        });
        Ok(Gabic { config, params, layout })
    }

    /// Rebuild around stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((n0, t0), (n1, t1)) in fresh.params.iter().zip(params.iter()) {
            if n0 != n1 || t0.shape() != t1.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{n1}` {:?} does not match `{n0}` {:?}",
                    t1.shape(),
                    t0.shape()
                )));
            }
        }
        Ok(Gabic {
            params,
            ..fresh
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Real>(&self) -> Gabic<T> {
        Gabic {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Current factorized prior of the hyper latent.
    pub fn prior(&self) -> FactorizedPrior {
        let loc = self.params.get(self.layout.prior_loc).data().iter().map(|v| v.f64()).collect();
        let scale = self
            .params
            .get(self.layout.prior_log_scale)
            .data()
            .iter()
            .map(|v| v.f64().exp())
            .collect();
        FactorizedPrior { loc, scale }
    }

    /// `f_a`: NCHW image in [0, 1] to the latent `y`.
    pub fn analysis(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 3 || h % HYPER_STRIDE != 0 || w % HYPER_STRIDE != 0 {
            return Err(Error::shape(
                "analysis",
                format!("need 3 channels and extents divisible by {HYPER_STRIDE}, got {c}x{h}x{w}"),
            ));
        }
        let l = &self.layout;
        let lr = S::of(SLOPE);
        let t = l.enc1.apply(g, p, x)?;
        let mut t = g.leaky_relu(t, lr);
        if let Some(r) = &l.enc_res1 {
            t = r.apply(g, p, t)?;
        }
        let t = l.enc2.apply(g, p, t)?;
        let t = g.leaky_relu(t, lr);
        let t = l.enc_res2.apply(g, p, t)?;
        let t = l.enc_att1.apply(g, p, t)?;
        let t = l.enc3.apply(g, p, t)?;
        let t = g.leaky_relu(t, lr);
        let t = l.enc_res3.apply(g, p, t)?;
        let y = l.enc4.apply(g, p, t)?;
        l.enc_att2.apply(g, p, y)
    }

    /// `f_s`: corrected latent back to an image (unclamped).
    pub fn synthesis(&self, g: &mut Graph<S>, p: &Bound, y_bar: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(y_bar).dims4()?;
        let hyper = HYPER_STRIDE / super::config::LATENT_STRIDE;
        if c != self.config.latent_channels || h % hyper != 0 || w % hyper != 0 {
            return Err(Error::shape(
                "synthesis",
                format!(
                    "need {} channels and extents divisible by {hyper}, got {c}x{h}x{w}",
                    self.config.latent_channels
                ),
            ));
        }
        let l = &self.layout;
        let lr = S::of(SLOPE);
        let t = l.dec_att2.apply(g, p, y_bar)?;
        let t = l.dec4.apply(g, p, t)?;
        let t = g.leaky_relu(t, lr);
        let t = l.dec_res3.apply(g, p, t)?;
        let t = l.dec3.apply(g, p, t)?;
        let t = g.leaky_relu(t, lr);
        let t = l.dec_att1.apply(g, p, t)?;
        let t = l.dec_res2.apply(g, p, t)?;
        let t = l.dec2.apply(g, p, t)?;
        let mut t = g.leaky_relu(t, lr);
        if let Some(r) = &l.dec_res1 {
            t = r.apply(g, p, t)?;
        }
        l.dec1.apply(g, p, t)
    }

    /// `h_a`.
    pub fn hyper_analysis(&self, g: &mut Graph<S>, p: &Bound, y: Var) -> Result<Var> {
        let [a, b, c] = self.layout.ha;
        let lr = S::of(SLOPE);
        let t = a.apply(g, p, y)?;
        let t = g.leaky_relu(t, lr);
        let t = b.apply(g, p, t)?;
        let t = g.leaky_relu(t, lr);
        c.apply(g, p, t)
    }

    /// `h_s`: returns `concat(D_mu, D_sigma)` with `2 * C_y` channels.
    pub fn hyper_synthesis(&self, g: &mut Graph<S>, p: &Bound, z_hat: Var) -> Result<Var> {
        let [a, b, c] = self.layout.hs;
        let lr = S::of(SLOPE);
        let t = a.apply(g, p, z_hat)?;
        let t = g.leaky_relu(t, lr);
        let t = b.apply(g, p, t)?;
        let t = g.leaky_relu(t, lr);
        c.apply(g, p, t)
    }

    fn context(g: &mut Graph<S>, d: Var, prev: &[Var], extra: Option<Var>) -> Result<Var> {
        let mut parts = Vec::with_capacity(prev.len() + 2);
        parts.push(d);
        parts.extend_from_slice(prev);
        parts.extend(extra);
        if parts.len() == 1 {
            Ok(d)
        } else {
            g.concat_channels(&parts)
        }
    }

    /// `(mu_i, sigma_i)` of slice `i` from the hyper features and the
    /// already corrected slices `prev = [y_bar_0, .., y_bar_{i-1}]`.
    pub fn slice_params(&self, g: &mut Graph<S>, p: &Bound, i: usize, d: Var, prev: &[Var]) -> Result<(Var, Var)> {
        let net = self.slice_net(i, prev.len())?;
        let ctx = Self::context(g, d, prev, None)?;
        let out = net.mean_scale.apply(g, p, ctx)?;
        let mu = g.slice_channels(out, 0, net.len)?;
        let raw = g.slice_channels(out, net.len, net.len)?;
        let sigma = g.softplus(raw);
        let sigma = g.clamp_min(sigma, S::of(SIGMA_MIN));
        Ok((mu, sigma))
    }

    /// Residual `r_i` added to the quantized slice `y_hat_i`.
    pub fn slice_residual(&self, g: &mut Graph<S>, p: &Bound, i: usize, d: Var, prev: &[Var], y_hat: Var) -> Result<Var> {
        let net = self.slice_net(i, prev.len())?;
        let ctx = Self::context(g, d, prev, Some(y_hat))?;
        let out = net.residual.apply(g, p, ctx)?;
        let t = g.tanh(out);
        Ok(g.scale(t, S::of(0.5)))
    }

    fn slice_net(&self, i: usize, prev: usize) -> Result<&SliceNet> {
        if i >= self.layout.slices.len() || prev != i {
            return Err(Error::invalid(format!(
                "slice {i} of {} needs {i} previous slices, got {prev}",
                self.layout.slices.len()
            )));
        }
        Ok(&self.layout.slices[i])
    }

    /// Hyperprior and slice model over `y`. Slices are processed in coding
    /// order, each conditioned only on what a decoder already holds.
    pub fn entropy_pipeline(&self, g: &mut Graph<S>, p: &Bound, y: Var, mode: QuantMode, rng: &mut Rng) -> Result<EntropyOut> {
        let z = self.hyper_analysis(g, p, y)?;
        let zero = g.constant(Tensor::zeros(g.shape(z)));
        let z_hat = quantize(g, z, zero, mode, rng)?;
        let z_rate_in = if mode.rate_mode() == mode {
            z_hat
        } else {
            quantize(g, z, zero, mode.rate_mode(), rng)?
        };
        let loc = p.var(self.layout.prior_loc);
        let log_scale = p.var(self.layout.prior_log_scale);
        let scale = g.exp(log_scale);
        let rate_z = g.logistic_bits(z_rate_in, loc, scale)?;

        let d = self.hyper_synthesis(g, p, z_hat)?;
        let n = self.layout.slices.len();
        let (mut mus, mut sigmas, mut y_hats, mut rs, mut rates) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut prev: Vec<Var> = Vec::with_capacity(n);
        for i in 0..n {
            let net = self.layout.slices[i];
            let yi = g.slice_channels(y, net.start, net.len)?;
            let (mu, sigma) = self.slice_params(g, p, i, d, &prev)?;
            let y_hat = quantize(g, yi, mu, mode, rng)?;
            let rate_in = if mode.rate_mode() == mode {
                y_hat
            } else {
                quantize(g, yi, mu, mode.rate_mode(), rng)?
            };
            rates.push(g.gaussian_bits(rate_in, mu, sigma)?);
            let r = self.slice_residual(g, p, i, d, &prev, y_hat)?;
            let y_bar = g.add(y_hat, r)?;
            mus.push(mu);
            sigmas.push(sigma);
            y_hats.push(y_hat);
            rs.push(r);
            prev.push(y_bar);
        }
        let cat = |g: &mut Graph<S>, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat_channels(v) };
        Ok(EntropyOut {
            z,
            z_hat,
            y_hat: cat(g, &y_hats)?,
            y_bar: cat(g, &prev)?,
            mu: cat(g, &mus)?,
            sigma: cat(g, &sigmas)?,
            residual: cat(g, &rs)?,
            rate_y: cat(g, &rates)?,
            rate_z,
        })
    }

    /// Analysis, entropy model, synthesis and RD loss in one pass.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var, mode: QuantMode, lambda: f64, rng: &mut Rng) -> Result<ForwardOut> {
        let y = self.analysis(g, p, x)?;
        let entropy = self.entropy_pipeline(g, p, y, mode, rng)?;
        let x_hat = self.synthesis(g, p, entropy.y_bar)?;
        let rd = rd_loss(g, x, x_hat, entropy.rate_y, entropy.rate_z, lambda)?;
        Ok(ForwardOut { y, x_hat, entropy, rd })
    }
}

/// `(sum rate_y + sum rate_z) / (N H W) + lambda * 255^2 * MSE(x, x_hat)`,
/// bits per pixel plus 8-bit-scale squared error.
pub fn rd_loss<S: Real>(g: &mut Graph<S>, x: Var, x_hat: Var, rate_y: Var, rate_z: Var, lambda: f64) -> Result<RdTerms> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let (n, _, h, w) = g.value(x).dims4()?;
    let pixels = (n * h * w) as f64;
    let ry = g.sum(rate_y);
    let rz = g.sum(rate_z);
    let bits = g.add(ry, rz)?;
    let bpp = g.scale(bits, S::of(1.0 / pixels));
    let diff = g.sub(x, x_hat)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq);
    let dist = g.scale(mse, S::of(lambda * DISTORTION_SCALE));
    let loss = g.add(bpp, dist)?;
    Ok(RdTerms { loss, bpp, mse })
}

fn build<S: Real>(cfg: &ModelConfig, b: &mut Builder<'_, S>) -> Layout {
    let (n, cy, cz) = (cfg.channels, cfg.latent_channels, cfg.hyper_channels);
    let full = cfg.full_res_blocks;
    let enc1 = b.conv("enc.conv1", 3, n, 3, 2, 1.4);
    let enc_res1 = full.then(|| b.res("enc.res1", n));
    let enc2 = b.conv("enc.conv2", n, n, 3, 2, 1.4);
    let enc_res2 = b.res("enc.res2", n);
    let enc_att1 = b.gwam("enc.gwam1", cfg.gwam(0), n);
    let enc3 = b.conv("enc.conv3", n, n, 3, 2, 1.4);
    let enc_res3 = b.res("enc.res3", n);
    let enc4 = b.conv("enc.conv4", n, cy, 3, 2, LATENT_GAIN);
    let enc_att2 = b.gwam("enc.gwam2", cfg.gwam(1), cy);

    let dec_att2 = b.gwam("dec.gwam2", cfg.gwam(1), cy);
    let dec4 = b.tconv("dec.tconv4", cy, n, 1.4 / LATENT_GAIN);
    let dec_res3 = b.res("dec.res3", n);
    let dec3 = b.tconv("dec.tconv3", n, n, 1.4);
    let dec_att1 = b.gwam("dec.gwam1", cfg.gwam(0), n);
    let dec_res2 = b.res("dec.res2", n);
    let dec2 = b.tconv("dec.tconv2", n, n, 1.4);
    let dec_res1 = full.then(|| b.res("dec.res1", n));
    let dec1 = b.tconv("dec.tconv1", n, 3, 0.1);
    // start from mid-grey
    b.store.get_mut(dec1.b).data_mut().fill(S::of(0.5));

    let ha = [
        b.conv("hyper.a1", cy, n, 3, 1, 1.4 / LATENT_GAIN),
        b.conv("hyper.a2", n, n, 3, 2, 1.4),
        b.conv("hyper.a3", n, cz, 3, 2, 1.0),
    ];
    let hs = [
        b.tconv("hyper.s1", cz, n, 1.4),
        b.tconv("hyper.s2", n, n, 1.4),
        b.conv("hyper.s3", n, 2 * cy, 3, 1, 1.0),
    ];
    let slices = cfg
        .slice_ranges()
        .into_iter()
        .enumerate()
        .map(|(i, (start, len))| {
            let cin = 2 * cy + start;
            SliceNet {
                start,
                len,
                mean_scale: b.mlp(&format!("slice{i}.ms"), cin, cfg.slice_hidden, 2 * len, 1.0),
                residual: b.mlp(&format!("slice{i}.res"), cin + len, cfg.slice_hidden, len, 0.1),
            }
        })
        .collect();
    let prior_loc = b.store.add("prior.loc", Tensor::zeros(&[cz]));
    let prior_log_scale = b.store.add("prior.log_scale", Tensor::zeros(&[cz]));
    Layout {
        enc1,
        enc_res1,
        enc2,
        enc_res2,
        enc_att1,
        enc3,
        enc_res3,
        enc4,
        enc_att2,
        dec_att2,
        dec4,
        dec_res3,
        dec3,
        dec_att1,
        dec_res2,
        dec2,
        dec_res1,
        dec1,
        ha,
        hs,
        slices,
        prior_loc,
        prior_log_scale,
    }
}
