use super::bitstream::{Bitstream, NO_LAMBDA};
use super::maps::BitMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{Gabic, HYPER_STRIDE, LATENT_STRIDE};
use crate::prob;
use crate::range_coder::{
    build_logistic_cdf, CdfTable, Decoder, Encoder, ScaleTables, DEFAULT_PRECISION, DEFAULT_TAIL_MASS,
};
use crate::tensor::{Graph, Tensor, Var};

/// A trained model together with its frozen coding tables.
#[derive(Clone, Debug)]
pub struct Codec {
    model: Gabic<f32>,
    scales: ScaleTables,
    z_tables: Vec<CdfTable>,
}

/// Result of [`Codec::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// What any decoder of `bitstream` reproduces.
    pub reconstruction: Image,
    /// Model rate of the coded symbols, in bits.
    pub estimated_bits: f64,
    /// Per-position model bits of the latent (summed over channels) and of
    /// the hyper latent, row-major on their own grids.
    pub y_bits: Tensor<f64>,
    pub z_bits: Tensor<f64>,
}

impl Encoded {
    pub fn bytes(&self) -> Vec<u8> {
        self.bitstream.to_bytes()
    }

    /// Bits per original pixel of the whole container.
    pub fn bpp(&self) -> f64 {
        8.0 * self.bitstream.byte_len() as f64 / self.pixels()
    }

    /// Bits per original pixel of the range-coded payloads only.
    pub fn payload_bpp(&self) -> f64 {
        8.0 * self.bitstream.payload_len() as f64 / self.pixels()
    }

    pub fn estimated_bpp(&self) -> f64 {
        self.estimated_bits / self.pixels()
    }

    pub fn allocation_map(&self) -> BitMap {
        BitMap::from_latent_bits(
            &self.y_bits,
            &self.z_bits,
            self.bitstream.width as usize,
            self.bitstream.height as usize,
        )
    }

    fn pixels(&self) -> f64 {
        self.bitstream.width as f64 * self.bitstream.height as f64
    }
}

impl Codec {
    pub fn new(model: Gabic<f32>) -> Result<Self> {
        let prior = model.prior();
        let z_tables = prior
            .loc
            .iter()
            .zip(&prior.scale)
            .map(|(&l, &s)| build_logistic_cdf(l, s, DEFAULT_PRECISION, DEFAULT_TAIL_MASS))
            .collect::<Result<_>>()?;
        Ok(Codec {
            model,
            scales: ScaleTables::new(DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?,
            z_tables,
        })
    }

    pub fn model(&self) -> &Gabic<f32> {
        &self.model
    }

    /// Compress `img` (grey input is coded as RGB). `lambda_index` is
    /// recorded in the header only.
    pub fn encode(&self, img: &Image, lambda_index: Option<u8>) -> Result<Encoded> {
        let img = img.clone().into_rgb();
        let padded = img.pad_to_multiple(HYPER_STRIDE)?;
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let x = g.constant(padded.to_tensor());
        let y = self.model.analysis(&mut g, &p, x)?;
        let y_val = g.value(y).clone();
        let z = self.model.hyper_analysis(&mut g, &p, y)?;

        let prior = self.model.prior();
        let z_t = g.value(z).clone();
        let (_, cz, zh, zw) = z_t.dims4()?;
        let z_sym = to_symbols(z_t.data().iter().map(|&v| v.round()), "hyper latent")?;
        let mut z_bits = Tensor::<f64>::zeros(&[zh, zw]);
        let mut est = 0.0;
        let mut enc = Encoder::new();
        for (i, &s) in z_sym.iter().enumerate() {
            let c = i / (zh * zw);
            enc.encode(s, &self.z_tables[c]);
            let b = prob::logistic_bits(s as f64, prior.loc[c], prior.scale[c]);
            z_bits.data_mut()[i % (zh * zw)] += b;
            est += b;
        }
        debug_assert_eq!(cz, self.z_tables.len());
        let z_payload = enc.finish();

        let (_, _, yh, yw) = y_val.dims4()?;
        let mut y_bits = Tensor::<f64>::zeros(&[yh, yw]);
        let ranges = self.model.config().slice_ranges();
        let mut y_syms = Vec::with_capacity(ranges.len());
        let mut y_payloads = Vec::with_capacity(ranges.len());
        let x_hat = self.reconstruct(&mut g, &p, &z_sym, [cz, zh, zw], |i, mu, sigma| {
            let (start, len) = ranges[i];
            let yi = y_val.channels(start, len)?;
            let sym = to_symbols(
                yi.data().iter().zip(mu.data()).map(|(&v, &m)| (v - m).round()),
                "latent",
            )?;
            let mut enc = Encoder::new();
            for (j, (&s, &sg)) in sym.iter().zip(sigma.data()).enumerate() {
                enc.encode(s, self.scales.for_sigma(sg as f64));
                let b = prob::gaussian_bits(s as f64, sg as f64);
                y_bits.data_mut()[j % (yh * yw)] += b;
                est += b;
            }
            y_payloads.push(enc.finish());
            let y_hat = add_symbols(mu, &sym);
            y_syms.push(sym);
            Ok(y_hat)
        })?;

        let mut bitstream = Bitstream {
            config_hash: self.model.config().hash(),
            width: img.width as u32,
            height: img.height as u32,
            padded_width: padded.width as u32,
            padded_height: padded.height as u32,
            lambda_index: lambda_index.unwrap_or(NO_LAMBDA),
            z_payload,
            y_payloads,
            checksum: 0,
        };
        bitstream.checksum = bitstream.compute_checksum(&z_sym, &y_syms);
        let reconstruction = Image::from_tensor(&x_hat, 0)?.crop(0, 0, img.width, img.height)?;
        Ok(Encoded {
            bitstream,
            reconstruction,
            estimated_bits: est,
            y_bits,
            z_bits,
        })
    }

    pub fn decode_bytes(&self, bytes: &[u8]) -> Result<Image> {
        self.decode(&Bitstream::parse(bytes)?)
    }

    pub fn decode(&self, bs: &Bitstream) -> Result<Image> {
        let cfg = self.model.config();
        if bs.config_hash != cfg.hash() {
            return Err(Error::ConfigMismatch {
                stream: bs.config_hash,
                model: cfg.hash(),
            });
        }
        let (w, h) = (bs.width as usize, bs.height as usize);
        let (pw, ph) = (bs.padded_width as usize, bs.padded_height as usize);
        if pw != w.div_ceil(HYPER_STRIDE) * HYPER_STRIDE || ph != h.div_ceil(HYPER_STRIDE) * HYPER_STRIDE {
            return Err(Error::Corrupt(format!("padded size {pw}x{ph} does not match {w}x{h}")));
        }
        if bs.y_payloads.len() != cfg.slices {
            return Err(Error::Corrupt(format!(
                "{} slice payloads for a {}-slice model",
                bs.y_payloads.len(),
                cfg.slices
            )));
        }
        let (zh, zw) = (ph / HYPER_STRIDE, pw / HYPER_STRIDE);
        let cz = self.z_tables.len();
        let mut dec = Decoder::new(&bs.z_payload)?;
        let z_sym = (0..cz * zh * zw)
            .map(|i| dec.decode(&self.z_tables[i / (zh * zw)]))
            .collect::<Result<Vec<i32>>>()?;
        dec.finish()?;

        let mut y_syms = Vec::with_capacity(cfg.slices);
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let mut checked = false;
        let x_hat = self.reconstruct(&mut g, &p, &z_sym, [cz, zh, zw], |i, mu, sigma| {
            let mut dec = Decoder::new(&bs.y_payloads[i])?;
            let sym = sigma
                .data()
                .iter()
                .map(|&sg| dec.decode(self.scales.for_sigma(sg as f64)))
                .collect::<Result<Vec<i32>>>()?;
            dec.finish()?;
            let y_hat = add_symbols(mu, &sym);
            y_syms.push(sym);
            if i + 1 == cfg.slices {
                let computed = bs.compute_checksum(&z_sym, &y_syms);
                if computed != bs.checksum {
                    return Err(Error::Checksum {
                        stored: bs.checksum,
                        computed,
                    });
                }
                checked = true;
            }
            Ok(y_hat)
        })?;
        debug_assert!(checked);
        Image::from_tensor(&x_hat, 0)?.crop(0, 0, w, h)
    }

    /// Hyper decoder, slice-by-slice latent reconstruction and synthesis.
    /// `slice(i, mu_i, sigma_i)` supplies the quantized slice `y_hat_i`; the
    /// encoder and decoder differ only there.
    fn reconstruct(
        &self,
        g: &mut Graph<f32>,
        p: &crate::network::Bound,
        z_sym: &[i32],
        [cz, zh, zw]: [usize; 3],
        mut slice: impl FnMut(usize, &Tensor<f32>, &Tensor<f32>) -> Result<Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let z_hat = Tensor::new(&[1, cz, zh, zw], z_sym.iter().map(|&s| s as f32).collect())?;
        let z_hat = g.constant(z_hat);
        let d = self.model.hyper_synthesis(g, p, z_hat)?;
        let n = self.model.config().slices;
        let mut prev: Vec<Var> = Vec::with_capacity(n);
        for i in 0..n {
            let (mu, sigma) = self.model.slice_params(g, p, i, d, &prev)?;
            let y_hat = slice(i, g.value(mu), g.value(sigma))?;
            let y_hat = g.constant(y_hat);
            let r = self.model.slice_residual(g, p, i, d, &prev, y_hat)?;
            prev.push(g.add(y_hat, r)?);
        }
        let y_bar = if n == 1 { prev[0] } else { g.concat_channels(&prev)? };
        debug_assert_eq!(g.shape(y_bar)[2], zh * HYPER_STRIDE / LATENT_STRIDE);
        let x_hat = self.model.synthesis(g, p, y_bar)?;
        Ok(g.value(x_hat).clone())
    }
}

fn to_symbols(values: impl Iterator<Item = f32>, what: &'static str) -> Result<Vec<i32>> {
    values
        .map(|v| {
            if v.is_finite() && v.abs() < i32::MAX as f32 {
                Ok(v as i32)
            } else {
                Err(Error::NonFinite(what))
            }
        })
        .collect()
}

fn add_symbols(mu: &Tensor<f32>, sym: &[i32]) -> Tensor<f32> {
    let mut out = mu.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(sym) {
        *o += s as f32;
    }
    out
}

/// [`Codec::encode`] with a one-off codec.
pub fn encode_image(img: &Image, model: &Gabic<f32>, lambda_index: Option<u8>) -> Result<Encoded> {
    Codec::new(model.clone())?.encode(img, lambda_index)
}

pub fn decode_image(bytes: &[u8], model: &Gabic<f32>) -> Result<Image> {
    Codec::new(model.clone())?.decode_bytes(bytes)
}
