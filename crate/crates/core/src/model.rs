//! Encoder, decoder and context network over a latent space split into `k`
//! attribute chunks `z_f` plus one unspecified chunk `z_u`.
//!
//! The encoder emits `(k+2)·d` values per image: the `k` feature chunks
//! followed by the mean and log-variance of a diagonal Gaussian over `z_u`.
//! The decoder consumes the `(k+1)·d` values `[z_f, z_u]`.
//!
//! Forward passes are recorded on a [`Tape`] through [`Bound`]; the free
//! functions ([`encode`], [`decode`], ...) are gradient-free conveniences that
//! run batch norm in eval mode.

use crate::diffcore::{BufferStore, Mode, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::RngState;

/// Encoder convolutions: (kernel, output channels), all stride 2.
const ENCODER_CONVS: [(usize, usize); 4] = [(4, 64), (3, 128), (3, 256), (3, 512)];
/// Decoder transposed convolutions after the reshape, all stride 2.
const DECODER_DECONVS: [(usize, usize); 4] = [(3, 256), (3, 128), (3, 64), (4, 3)];
const HIDDEN: usize = 1024;
const CONTEXT_HIDDEN: usize = 4096;
const BOTTLENECK_CHANNELS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// `d`
    pub latent_dim: usize,
    /// `k`
    pub num_attributes: usize,
    /// `c`
    pub context_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_dim: 32,
            num_attributes: 2,
            context_dim: 100,
        }
    }
}

impl ModelConfig {
    /// Spatial side after the last encoder convolution.
    pub fn bottleneck_side(&self) -> Result<usize> {
        let mut side = self.image_size;
        for (kernel, _) in ENCODER_CONVS {
            if side < kernel {
                return Err(self.size_error());
            }
            side = (side - kernel) / 2 + 1;
        }
        let mut out = side;
        for (kernel, _) in DECODER_DECONVS {
            out = (out - 1) * 2 + kernel;
        }
        if out != self.image_size {
            return Err(self.size_error());
        }
        Ok(side)
    }

    fn size_error(&self) -> Error {
        Error::Config(format!(
            "image_size {} does not survive the encoder/decoder round trip; use 16·(s+1), e.g. 32 or 64",
            self.image_size
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_attributes == 0 || self.context_dim == 0 {
            return Err(Error::Config(
                "latent_dim, num_attributes and context_dim must be positive".into(),
            ));
        }
        self.bottleneck_side().map(|_| ())
    }

    fn flat_bottleneck(&self) -> Result<usize> {
        let s = self.bottleneck_side()?;
        Ok(BOTTLENECK_CHANNELS * s * s)
    }
}

/// All trainable and running state of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
    pub context: ParamStore,
    /// Batch-norm running statistics, `<net>.<bn>.running_stats`.
    pub buffers: BufferStore,
}

fn uniform(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound) as f32)
}

fn add_conv(store: &mut ParamStore, rng: &mut RngState, name: &str, shape: [usize; 4], fan_in: usize, out: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), uniform(rng, &shape, fan_in))?;
    store.insert(format!("{name}.bias"), uniform(rng, &[out], fan_in))
}

fn add_dense(store: &mut ParamStore, rng: &mut RngState, name: &str, n_in: usize, n_out: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), uniform(rng, &[n_in, n_out], n_in))?;
    store.insert(format!("{name}.bias"), uniform(rng, &[n_out], n_in))
}

fn add_bn(store: &mut ParamStore, buffers: &mut BufferStore, name: &str, channels: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
    let mut running = Tensor::zeros(&[2, channels]);
    running.data_mut()[channels..].fill(1.0);
    buffers.insert(format!("{name}.running_stats"), running);
    Ok(())
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (d, k, c) = (config.latent_dim, config.num_attributes, config.context_dim);
        let mut buffers = BufferStore::new();

        let mut encoder = ParamStore::new();
        let mut in_ch = 3;
        for (i, (kernel, out)) in ENCODER_CONVS.into_iter().enumerate() {
            let name = format!("encoder.conv{}", i + 1);
            add_conv(&mut encoder, rng, &name, [out, in_ch, kernel, kernel], in_ch * kernel * kernel, out)?;
            add_bn(&mut encoder, &mut buffers, &format!("encoder.bn{}", i + 1), out)?;
            in_ch = out;
        }
        add_dense(&mut encoder, rng, "encoder.fc1", config.flat_bottleneck()?, HIDDEN)?;
        add_bn(&mut encoder, &mut buffers, "encoder.bn5", HIDDEN)?;
        add_dense(&mut encoder, rng, "encoder.head", HIDDEN, (k + 2) * d)?;

        let mut decoder = ParamStore::new();
        add_dense(&mut decoder, rng, "decoder.fc1", (k + 1) * d, HIDDEN)?;
        add_bn(&mut decoder, &mut buffers, "decoder.bn1", HIDDEN)?;
        add_dense(&mut decoder, rng, "decoder.fc2", HIDDEN, config.flat_bottleneck()?)?;
        add_bn(&mut decoder, &mut buffers, "decoder.bn2", config.flat_bottleneck()?)?;
        let mut in_ch = BOTTLENECK_CHANNELS;
        for (i, (kernel, out)) in DECODER_DECONVS.into_iter().enumerate() {
            let name = format!("decoder.deconv{}", i + 1);
            add_conv(&mut decoder, rng, &name, [in_ch, out, kernel, kernel], in_ch * kernel * kernel, out)?;
            if i + 1 < DECODER_DECONVS.len() {
                add_bn(&mut decoder, &mut buffers, &format!("decoder.bn{}", i + 3), out)?;
            }
            in_ch = out;
        }

        let mut context = ParamStore::new();
        add_dense(&mut context, rng, "context.fc1", k * d, CONTEXT_HIDDEN)?;
        add_dense(&mut context, rng, "context.fc2", CONTEXT_HIDDEN, k * c)?;

        Ok(Self {
            config,
            encoder,
            decoder,
            context,
            buffers,
        })
    }

    /// Binds every parameter onto `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = tape.bind(&self.encoder);
        vars.extend(tape.bind(&self.decoder));
        vars.extend(tape.bind(&self.context));
        Bound {
            vars,
            config: self.config,
        }
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [&mut self.encoder, &mut self.decoder, &mut self.context]
    }

    pub fn num_values(&self) -> usize {
        self.encoder.num_values() + self.decoder.num_values() + self.context.num_values()
    }
}

/// Encoder outputs as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct CodeVars {
    /// `B×k×d`
    pub z_f: Var,
    pub mu_u: Var,
    pub logvar_u: Var,
    pub z_u: Var,
}

/// Model parameters bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: ParamVars,
    config: ModelConfig,
}

fn running<'a>(buffers: &'a mut BufferStore, name: &str) -> Result<&'a mut Tensor> {
    buffers
        .get_mut(&format!("{name}.running_stats"))
        .ok_or_else(|| contract_err!("missing running statistics for '{name}'"))
}

impl Bound {
    pub fn vars(&self) -> &ParamVars {
        &self.vars
    }

    fn dense(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.vars.get(&format!("{name}.weight"))?;
        let b = self.vars.get(&format!("{name}.bias"))?;
        tape.dense(x, w, b)
    }

    fn bn(&self, tape: &mut Tape, buffers: &mut BufferStore, x: Var, name: &str, mode: Mode) -> Result<Var> {
        let g = self.vars.get(&format!("{name}.gamma"))?;
        let b = self.vars.get(&format!("{name}.beta"))?;
        tape.batch_norm(x, g, b, running(buffers, name)?, mode)
    }

    /// Encodes `x` (`B×3×S×S`); `eps` (`B×d`) is the reparameterization noise.
    pub fn encode(
        &self,
        tape: &mut Tape,
        buffers: &mut BufferStore,
        x: Var,
        eps: &Tensor,
        mode: Mode,
    ) -> Result<CodeVars> {
        let cfg = self.config;
        let s = cfg.image_size;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(dim_err!("encoder expects B×3×{s}×{s} images, got {shape:?}"));
        }
        let b = shape[0];
        let (d, k) = (cfg.latent_dim, cfg.num_attributes);
        if eps.shape() != [b, d] {
            return Err(dim_err!("noise must be {b}×{d}, got {:?}", eps.shape()));
        }
        let mut h = x;
        for i in 1..=ENCODER_CONVS.len() {
            let w = self.vars.get(&format!("encoder.conv{i}.weight"))?;
            let bias = self.vars.get(&format!("encoder.conv{i}.bias"))?;
            h = tape.conv2d(h, w, bias, 2)?;
            h = tape.elu(h);
            h = self.bn(tape, buffers, h, &format!("encoder.bn{i}"), mode)?;
        }
        let flat = cfg.flat_bottleneck()?;
        h = tape.reshape(h, &[b, flat])?;
        h = self.dense(tape, h, "encoder.fc1")?;
        h = tape.elu(h);
        h = self.bn(tape, buffers, h, "encoder.bn5", mode)?;
        let out = self.dense(tape, h, "encoder.head")?;

        let z_f = tape.narrow(out, 1, 0, k * d)?;
        let z_f = tape.reshape(z_f, &[b, k, d])?;
        let mu_u = tape.narrow(out, 1, k * d, d)?;
        let logvar_u = tape.narrow(out, 1, (k + 1) * d, d)?;
        let half = tape.scale(logvar_u, 0.5);
        let std = tape.exp(half);
        let noise = tape.constant(eps.clone());
        let spread = tape.mul(std, noise)?;
        let z_u = tape.add(mu_u, spread)?;
        Ok(CodeVars {
            z_f,
            mu_u,
            logvar_u,
            z_u,
        })
    }

    /// Decodes `[z_f, z_u]` into `B×3×S×S` images in `[0, 1]`.
    pub fn decode(&self, tape: &mut Tape, buffers: &mut BufferStore, z_f: Var, z_u: Var, mode: Mode) -> Result<Var> {
        let cfg = self.config;
        let (d, k) = (cfg.latent_dim, cfg.num_attributes);
        let fs = tape.shape(z_f).to_vec();
        let b = fs[0];
        if fs != [b, k, d] || tape.shape(z_u) != [b, d] {
            return Err(dim_err!(
                "decoder expects z_f B×{k}×{d} and z_u B×{d}, got {fs:?} and {:?}",
                tape.shape(z_u)
            ));
        }
        let zf_flat = tape.reshape(z_f, &[b, k * d])?;
        let mut h = tape.concat(&[zf_flat, z_u], 1)?;
        h = self.dense(tape, h, "decoder.fc1")?;
        h = tape.relu(h);
        h = self.bn(tape, buffers, h, "decoder.bn1", mode)?;
        h = self.dense(tape, h, "decoder.fc2")?;
        h = tape.relu(h);
        h = self.bn(tape, buffers, h, "decoder.bn2", mode)?;
        let side = cfg.bottleneck_side()?;
        h = tape.reshape(h, &[b, BOTTLENECK_CHANNELS, side, side])?;
        for i in 1..=DECODER_DECONVS.len() {
            let w = self.vars.get(&format!("decoder.deconv{i}.weight"))?;
            let bias = self.vars.get(&format!("decoder.deconv{i}.bias"))?;
            h = tape.conv_transpose2d(h, w, bias, 2)?;
            if i < DECODER_DECONVS.len() {
                h = tape.relu(h);
                h = self.bn(tape, buffers, h, &format!("decoder.bn{}", i + 2), mode)?;
            } else {
                h = tape.sigmoid(h);
            }
        }
        Ok(h)
    }

    /// Applies Ψ to each row of a `R×(k·d)` matrix, giving `R×(k·c)`.
    fn psi(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let h = self.dense(tape, rows, "context.fc1")?;
        let h = tape.relu(h);
        let h = self.dense(tape, h, "context.fc2")?;
        Ok(tape.relu(h))
    }

    fn check_zf(&self, tape: &Tape, z_f: Var) -> Result<usize> {
        let (d, k) = (self.config.latent_dim, self.config.num_attributes);
        match *tape.shape(z_f) {
            [b, kk, dd] if kk == k && dd == d => Ok(b),
            ref s => Err(dim_err!("expected z_f of shape B×{k}×{d}, got {s:?}")),
        }
    }

    /// Context vectors `C` (`k×c`): Ψ of the batch-mean feature code.
    pub fn context_of_batch(&self, tape: &mut Tape, z_f: Var) -> Result<Var> {
        self.check_zf(tape, z_f)?;
        let (k, c) = (self.config.num_attributes, self.config.context_dim);
        let mean = tape.mean_rows(z_f);
        let flat = tape.reshape(mean, &[1, k * self.config.latent_dim])?;
        let out = self.psi(tape, flat)?;
        tape.reshape(out, &[k, c])
    }

    /// Per-sample projections `P` (`B×k×c`).
    pub fn context_per_sample(&self, tape: &mut Tape, z_f: Var) -> Result<Var> {
        let b = self.check_zf(tape, z_f)?;
        let (k, c) = (self.config.num_attributes, self.config.context_dim);
        let flat = tape.reshape(z_f, &[b, k * self.config.latent_dim])?;
        let out = self.psi(tape, flat)?;
        tape.reshape(out, &[b, k, c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    /// `B×k×d`
    pub z_f: Tensor,
    pub mu_u: Tensor,
    pub logvar_u: Tensor,
    /// `mu_u + exp(logvar_u / 2) ⊙ eps`
    pub z_u: Tensor,
    pub eps: Tensor,
}

impl LatentCode {
    pub fn batch_size(&self) -> usize {
        self.z_f.shape()[0]
    }

    pub fn all_finite(&self) -> bool {
        [&self.z_f, &self.mu_u, &self.logvar_u, &self.z_u]
            .iter()
            .all(|t| t.all_finite())
    }

    /// Rows `rows` of every field.
    pub fn select(&self, rows: &[usize]) -> Result<LatentCode> {
        Ok(LatentCode {
            z_f: self.z_f.select_rows(rows)?,
            mu_u: self.mu_u.select_rows(rows)?,
            logvar_u: self.logvar_u.select_rows(rows)?,
            z_u: self.z_u.select_rows(rows)?,
            eps: self.eps.select_rows(rows)?,
        })
    }
}

/// Draws `B×d` standard normal noise.
pub fn sample_eps(rng: &mut RngState, batch: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[batch, d], |_| rng.normal() as f32)
}

/// Gradient-free encoding in eval mode; noise is drawn from `rng`.
pub fn encode(x: &Tensor, params: &ModelParams, rng: &mut RngState) -> Result<LatentCode> {
    let b = x.shape().first().copied().unwrap_or(0);
    let eps = sample_eps(rng, b, params.config.latent_dim);
    encode_with_eps(x, params, &eps)
}

pub fn encode_with_eps(x: &Tensor, params: &ModelParams, eps: &Tensor) -> Result<LatentCode> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut buffers = params.buffers.clone();
    let xv = tape.constant(x.clone());
    let code = bound.encode(&mut tape, &mut buffers, xv, eps, Mode::Eval)?;
    Ok(LatentCode {
        z_f: tape.tensor(code.z_f),
        mu_u: tape.tensor(code.mu_u),
        logvar_u: tape.tensor(code.logvar_u),
        z_u: tape.tensor(code.z_u),
        eps: eps.clone(),
    })
}

/// Gradient-free decoding in eval mode.
pub fn decode(z_f: &Tensor, z_u: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut buffers = params.buffers.clone();
    let zf = tape.constant(z_f.clone());
    let zu = tape.constant(z_u.clone());
    let out = bound.decode(&mut tape, &mut buffers, zf, zu, Mode::Eval)?;
    Ok(tape.tensor(out))
}

pub fn context_of_batch(z_f: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zf = tape.constant(z_f.clone());
    let out = bound.context_of_batch(&mut tape, zf)?;
    Ok(tape.tensor(out))
}

/// Ψ applied to one sample's `k×d` feature code.
pub fn context_of_sample(z_f_j: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let (k, d) = (params.config.num_attributes, params.config.latent_dim);
    if z_f_j.shape() != [k, d] {
        return Err(dim_err!("expected a {k}×{d} sample code, got {:?}", z_f_j.shape()));
    }
    let batch = z_f_j.clone().reshape(&[1, k, d])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zf = tape.constant(batch);
    let out = bound.context_per_sample(&mut tape, zf)?;
    tape.tensor(out).reshape(&[k, params.config.context_dim])
}

/// `code_a` with feature chunk `attribute` (1-based) taken from `code_b`.
pub fn swap_attribute(code_a: &LatentCode, code_b: &LatentCode, attribute: usize) -> Result<LatentCode> {
    let shape = code_a.z_f.shape();
    let (b, k, d) = (shape[0], shape[1], shape[2]);
    if code_b.z_f.shape() != shape {
        return Err(contract_err!(
            "codes have different feature shapes {shape:?} and {:?}",
            code_b.z_f.shape()
        ));
    }
    if attribute == 0 || attribute > k {
        return Err(contract_err!("attribute index {attribute} outside 1..={k}"));
    }
    let mut out = code_a.clone();
    let i = attribute - 1;
    for row in 0..b {
        let span = (row * k + i) * d..(row * k + i + 1) * d;
        out.z_f.data_mut()[span.clone()].copy_from_slice(&code_b.z_f.data()[span]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(image_size: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            latent_dim: 8,
            num_attributes: 2,
            context_dim: 5,
        }
    }

    fn images(rng: &mut RngState, b: usize, s: usize) -> Tensor {
        Tensor::from_fn(&[b, 3, s, s], |_| rng.uniform() as f32)
    }

    #[test]
    fn shape_chain_matches_the_reference_architecture() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.bottleneck_side().unwrap(), 3);
        assert_eq!(cfg.flat_bottleneck().unwrap(), 4608);
        let p = ModelParams::init(cfg, &mut RngState::new(0)).unwrap();
        assert_eq!(p.encoder.get("encoder.fc1.weight").unwrap().shape(), &[4608, 1024]);
        assert_eq!(p.encoder.get("encoder.head.weight").unwrap().shape(), &[1024, 4 * 32]);
        assert_eq!(p.decoder.get("decoder.fc1.weight").unwrap().shape(), &[3 * 32, 1024]);
        assert_eq!(p.decoder.get("decoder.fc2.weight").unwrap().shape(), &[1024, 4608]);
        assert_eq!(p.context.get("context.fc1.weight").unwrap().shape(), &[64, 4096]);
        assert_eq!(p.context.get("context.fc2.weight").unwrap().shape(), &[4096, 200]);
        assert!(p.decoder.get("decoder.bn6.gamma").is_none());

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let mut buffers = p.buffers.clone();
        let x = tape.constant(images(&mut RngState::new(1), 2, 64));
        let eps = Tensor::zeros(&[2, 32]);
        let code = bound.encode(&mut tape, &mut buffers, x, &eps, Mode::Train).unwrap();
        assert_eq!(tape.shape(code.z_f), &[2, 2, 32]);
        assert_eq!(tape.shape(code.z_u), &[2, 32]);
        let out = bound.decode(&mut tape, &mut buffers, code.z_f, code.z_u, Mode::Train).unwrap();
        assert_eq!(tape.shape(out), &[2, 3, 64, 64]);
    }

    #[test]
    fn image_size_validation() {
        assert_eq!(small(32).bottleneck_side().unwrap(), 1);
        assert_eq!(small(48).bottleneck_side().unwrap(), 2);
        for bad in [0, 16, 31, 33, 50, 100] {
            assert!(matches!(small(bad).validate(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn wrong_spatial_size_names_the_expected_size() {
        let p = ModelParams::init(small(32), &mut RngState::new(2)).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let err = encode(&x, &p, &mut RngState::new(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("32×32")), "{err}");
    }

    #[test]
    fn zero_noise_gives_the_mean_and_encoding_is_deterministic() {
        let p = ModelParams::init(small(32), &mut RngState::new(4)).unwrap();
        let x = images(&mut RngState::new(5), 3, 32);
        let code = encode_with_eps(&x, &p, &Tensor::zeros(&[3, 8])).unwrap();
        assert_eq!(code.z_u, code.mu_u);
        let a = encode(&x, &p, &mut RngState::new(6)).unwrap();
        let b = encode(&x, &p, &mut RngState::new(6)).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn reparameterized_samples_average_to_the_mean() {
        let p = ModelParams::init(small(32), &mut RngState::new(7)).unwrap();
        let x = images(&mut RngState::new(8), 1, 32);
        let base = encode_with_eps(&x, &p, &Tensor::zeros(&[1, 8])).unwrap();
        let n = 10_000;
        let mut rng = RngState::new(9);
        let mut sum = vec![0.0f64; 8];
        for _ in 0..n {
            let eps = sample_eps(&mut rng, 1, 8);
            for (j, s) in sum.iter_mut().enumerate() {
                let std = (0.5 * base.logvar_u.data()[j] as f64).exp();
                *s += base.mu_u.data()[j] as f64 + std * eps.data()[j] as f64;
            }
        }
        for (j, s) in sum.iter().enumerate() {
            let std = (0.5 * base.logvar_u.data()[j] as f64).exp();
            let mean = s / n as f64;
            assert!((mean - base.mu_u.data()[j] as f64).abs() < 3.0 * std / (n as f64).sqrt());
        }
    }

    #[test]
    fn decoder_output_is_a_valid_image() {
        let p = ModelParams::init(small(32), &mut RngState::new(10)).unwrap();
        let out = decode(&Tensor::zeros(&[2, 2, 8]), &Tensor::zeros(&[2, 8]), &p).unwrap();
        assert_eq!(out.shape(), &[2, 3, 32, 32]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut rng = RngState::new(11);
        let zf = Tensor::from_fn(&[4, 2, 8], |_| 3.0 * rng.normal() as f32);
        let zu = Tensor::from_fn(&[4, 8], |_| 3.0 * rng.normal() as f32);
        let out = decode(&zf, &zu, &p).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(decode(&zf, &Tensor::zeros(&[4, 7]), &p).is_err());
    }

    #[test]
    fn context_of_copies_equals_context_of_sample() {
        let p = ModelParams::init(small(32), &mut RngState::new(12)).unwrap();
        let mut rng = RngState::new(13);
        for _ in 0..5 {
            let s = Tensor::from_fn(&[2, 8], |_| rng.normal() as f32);
            let copies = Tensor::concat_rows(&vec![s.clone().reshape(&[1, 2, 8]).unwrap(); 7]).unwrap();
            let c = context_of_batch(&copies, &p).unwrap();
            let ps = context_of_sample(&s, &p).unwrap();
            assert_eq!(c.shape(), &[2, 5]);
            assert!(c.max_abs_diff(&ps) < 1e-6);
            let single = context_of_batch(&s.clone().reshape(&[1, 2, 8]).unwrap(), &p).unwrap();
            assert_eq!(single, ps);
        }
    }

    #[test]
    fn context_of_batch_ignores_order() {
        let p = ModelParams::init(small(32), &mut RngState::new(14)).unwrap();
        let mut rng = RngState::new(15);
        let z = Tensor::from_fn(&[6, 2, 8], |_| rng.normal() as f32);
        let shuffled = z.select_rows(&[3, 1, 5, 0, 4, 2]).unwrap();
        let a = context_of_batch(&z, &p).unwrap();
        let b = context_of_batch(&shuffled, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn context_per_sample_rows_match_single_samples() {
        let p = ModelParams::init(small(32), &mut RngState::new(16)).unwrap();
        let mut rng = RngState::new(17);
        let z = Tensor::from_fn(&[3, 2, 8], |_| rng.normal() as f32);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let all = bound.context_per_sample(&mut tape, zv).unwrap();
        let all = tape.tensor(all);
        assert_eq!(all.shape(), &[3, 2, 5]);
        for j in 0..3 {
            let s = z.row(j).unwrap().reshape(&[2, 8]).unwrap();
            let want = context_of_sample(&s, &p).unwrap();
            let got = all.row(j).unwrap().reshape(&[2, 5]).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-6);
        }
    }

    #[test]
    fn swap_attribute_properties() {
        let p = ModelParams::init(small(32), &mut RngState::new(18)).unwrap();
        let a = encode(&images(&mut RngState::new(19), 2, 32), &p, &mut RngState::new(20)).unwrap();
        let b = encode(&images(&mut RngState::new(21), 2, 32), &p, &mut RngState::new(22)).unwrap();
        assert_eq!(swap_attribute(&a, &a, 1).unwrap(), a);
        let s = swap_attribute(&a, &b, 2).unwrap();
        assert_eq!(swap_attribute(&s, &a, 2).unwrap(), a);
        for row in 0..2 {
            let chunk = |c: &LatentCode, i: usize| c.z_f.data()[(row * 2 + i) * 8..(row * 2 + i + 1) * 8].to_vec();
            assert_eq!(chunk(&s, 1), chunk(&b, 1));
            assert_eq!(chunk(&s, 0), chunk(&a, 0));
        }
        assert_eq!(s.z_u, a.z_u);
        assert!(matches!(swap_attribute(&a, &b, 0), Err(Error::Contract(_))));
        assert!(matches!(swap_attribute(&a, &b, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_reach_every_network() {
        let mut p = ModelParams::init(small(32), &mut RngState::new(23)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(images(&mut RngState::new(24), 4, 32));
        let eps = sample_eps(&mut RngState::new(25), 4, 8);
        let code = bound.encode(&mut tape, &mut p.buffers, x, &eps, Mode::Train).unwrap();
        let out = bound.decode(&mut tape, &mut p.buffers, code.z_f, code.z_u, Mode::Train).unwrap();
        let ctx = bound.context_of_batch(&mut tape, code.z_f).unwrap();
        let a = tape.sum(out);
        let b = tape.sum(ctx);
        let loss = tape.add(a, b).unwrap();
        let [e, d, c] = p.stores_mut();
        crate::diffcore::backward(&tape, loss, &mut [e, d, c]).unwrap();
        for store in [&p.encoder, &p.decoder, &p.context] {
            let nonzero = store
                .iter()
                .filter(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)))
                .count();
            assert!(nonzero > 0);
        }
    }
}
