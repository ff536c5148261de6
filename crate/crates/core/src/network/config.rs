use crate::attention::{AttentionMode, GwamConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Lower bound applied to every predicted scale.
pub const SIGMA_MIN: f64 = 0.04;

/// Spatial downsampling of the analysis transform.
pub const LATENT_STRIDE: usize = 16;

/// Spatial downsampling of the hyper latent relative to the image.
pub const HYPER_STRIDE: usize = 64;

/// Architecture hyper-parameters. Two models with equal configs have
/// interchangeable checkpoints and bitstreams.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the intermediate transform layers.
    pub channels: usize,
    /// `C_y`.
    pub latent_channels: usize,
    /// `C_z`.
    pub hyper_channels: usize,
    pub slices: usize,
    /// Width of the hidden 1x1 layers in each slice network.
    pub slice_hidden: usize,
    /// Residual blocks after the first stride-2 stage of the analysis
    /// transform (and before the last stage of the synthesis transform).
    pub full_res_blocks: bool,
    /// Window sizes of the first and second attention block.
    pub windows: [usize; 2],
    /// Neighbours per node; `None` means `M^2 / 2` per block.
    pub k: Option<usize>,
    pub heads: usize,
    pub attention: AttentionMode,
    pub include_self: bool,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 32,
            latent_channels: 32,
            hyper_channels: 16,
            slices: 4,
            slice_hidden: 48,
            full_res_blocks: false,
            windows: [8, 4],
            k: None,
            heads: 1,
            attention: AttentionMode::Knn,
            include_self: false,
        }
    }

    /// Tiny model for finite-difference checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 4,
            slices: 2,
            slice_hidden: 8,
            full_res_blocks: true,
            ..Self::toy()
        }
    }

    /// Full-size channel counts; too large to train here.
    pub fn full() -> Self {
        ModelConfig {
            channels: 192,
            latent_channels: 320,
            hyper_channels: 192,
            slices: 10,
            slice_hidden: 224,
            full_res_blocks: true,
            ..Self::toy()
        }
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.attention = mode;
        self
    }

    pub fn gwam(&self, block: usize) -> GwamConfig {
        let window = self.windows[block];
        let mut cfg = GwamConfig::new(window);
        if let Some(k) = self.k {
            cfg.k = k;
        }
        cfg.heads = self.heads;
        cfg.mode = self.attention;
        cfg.include_self = self.include_self;
        cfg
    }

    /// `(start, len)` of every slice; the remainder goes to the last one.
    pub fn slice_ranges(&self) -> Vec<(usize, usize)> {
        let base = self.latent_channels / self.slices;
        (0..self.slices)
            .map(|i| {
                let len = if i + 1 == self.slices {
                    self.latent_channels - base * i
                } else {
                    base
                };
                (base * i, len)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("latent_channels", self.latent_channels),
            ("hyper_channels", self.hyper_channels),
            ("slices", self.slices),
            ("slice_hidden", self.slice_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be positive")));
            }
        }
        if self.slices > self.latent_channels {
            return Err(Error::invalid(format!(
                "{} slices over {} latent channels",
                self.slices, self.latent_channels
            )));
        }
        // Window 0 runs on the H/4 map, window 1 on the H/16 latent; both
        // must tile a 64x64 input.
        if 16 % self.windows[0] != 0 || 4 % self.windows[1] != 0 {
            return Err(Error::invalid(format!(
                "windows {:?} do not tile 16x16 and 4x4 maps",
                self.windows
            )));
        }
        self.gwam(0).validate(self.channels)?;
        self.gwam(1).validate(self.latent_channels)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.channels", self.channels);
        kv.set("model.latent_channels", self.latent_channels);
        kv.set("model.hyper_channels", self.hyper_channels);
        kv.set("model.slices", self.slices);
        kv.set("model.slice_hidden", self.slice_hidden);
        kv.set("model.full_res_blocks", self.full_res_blocks);
        kv.set("model.windows", format!("{},{}", self.windows[0], self.windows[1]));
        kv.set("model.k", self.k.map_or("auto".to_string(), |k| k.to_string()));
        kv.set("model.heads", self.heads);
        kv.set("model.attention", self.attention.as_str());
        kv.set("model.include_self", self.include_self);
        kv
    }

    /// Read `model.*` keys over `base`.
    pub fn from_kv(kv: &KeyValues, base: ModelConfig) -> Result<Self> {
        let mut cfg = base;
        cfg.channels = kv.parse_or("model.channels", cfg.channels)?;
        cfg.latent_channels = kv.parse_or("model.latent_channels", cfg.latent_channels)?;
        cfg.hyper_channels = kv.parse_or("model.hyper_channels", cfg.hyper_channels)?;
        cfg.slices = kv.parse_or("model.slices", cfg.slices)?;
        cfg.slice_hidden = kv.parse_or("model.slice_hidden", cfg.slice_hidden)?;
        cfg.full_res_blocks = kv.parse_or("model.full_res_blocks", cfg.full_res_blocks)?;
        if let Some(w) = kv.get("model.windows") {
            let parts: Vec<usize> = w
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("bad model.windows `{w}`")))?;
            cfg.windows = parts
                .try_into()
                .map_err(|_| Error::invalid(format!("model.windows needs two sizes, got `{w}`")))?;
        }
        match kv.get("model.k") {
            None => {}
            Some("auto") => cfg.k = None,
            Some(_) => cfg.k = Some(kv.parse_or("model.k", 0)?),
        }
        cfg.heads = kv.parse_or("model.heads", cfg.heads)?;
        cfg.attention = kv.parse_or("model.attention", cfg.attention)?;
        cfg.include_self = kv.parse_or("model.include_self", cfg.include_self)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn canonical_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// CRC-32 of the canonical text; carried by bitstreams and checkpoints.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.canonical_text().as_bytes())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
