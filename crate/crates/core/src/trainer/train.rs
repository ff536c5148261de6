use std::io::Write;
use std::path::PathBuf;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::dataset::{BatchIter, Dataset, IterState};
use super::schedule::Plateau;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{Checkpoint, Gabic, ModelConfig, QuantMode};
use crate::tensor::{Graph, Real, Rng, Tensor};

/// The four operating points of a rate family, low to high rate.
pub const RATE_LAMBDAS: [f64; 4] = [0.0067, 0.0130, 0.025, 0.0483];

/// Seed of the fixed held-out synthetic set.
pub const VALIDATION_SEED: u64 = 0x7661_6c69_6400;
pub const VALIDATION_IMAGES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub crop: usize,
    pub batch: usize,
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    /// Optimizer steps between validation passes.
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Quantization used by the training forward pass.
    pub quant: QuantMode,
    pub clip: f64,
}

impl TrainConfig {
    /// Full-size protocol; far beyond a CPU budget.
    pub fn full(lambda: f64) -> Self {
        TrainConfig {
            model: ModelConfig::full(),
            lambda,
            crop: 256,
            batch: 16,
            lr0: 1e-4,
            plateau_factor: 0.3,
            plateau_patience: 10,
            epochs: 200,
            steps_per_epoch: 300_000 / 16,
            seed: 0,
            quant: QuantMode::SteRound,
            clip: 1.0,
        }
    }

    /// Desk-scale protocol: 25 epochs of 20 steps.
    pub fn toy(lambda: f64) -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            crop: 64,
            batch: 8,
            lr0: 1e-3,
            epochs: 25,
            steps_per_epoch: 20,
            ..Self::full(lambda)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::invalid(format!("lambda {} outside (0, 1)", self.lambda)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!("plateau factor {} outside (0, 1)", self.plateau_factor)));
        }
        if self.crop == 0 || self.crop % crate::network::HYPER_STRIDE != 0 {
            return Err(Error::invalid(format!("crop {} must be a positive multiple of 64", self.crop)));
        }
        if self.batch == 0 || self.steps_per_epoch == 0 || !(self.lr0 > 0.0) || !(self.clip > 0.0) {
            return Err(Error::invalid("batch, steps_per_epoch, lr0 and clip must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("train.lambda", self.lambda);
        kv.set("train.crop", self.crop);
        kv.set("train.batch", self.batch);
        kv.set("train.lr0", self.lr0);
        kv.set("train.plateau_factor", self.plateau_factor);
        kv.set("train.plateau_patience", self.plateau_patience);
        kv.set("train.epochs", self.epochs);
        kv.set("train.steps_per_epoch", self.steps_per_epoch);
        kv.set("train.seed", self.seed);
        kv.set("train.quant", self.quant.as_str());
        kv.set("train.clip", self.clip);
        kv
    }

    pub fn from_kv(kv: &KeyValues, base: TrainConfig) -> Result<Self> {
        let cfg = TrainConfig {
            model: ModelConfig::from_kv(kv, base.model.clone())?,
            lambda: kv.parse_or("train.lambda", base.lambda)?,
            crop: kv.parse_or("train.crop", base.crop)?,
            batch: kv.parse_or("train.batch", base.batch)?,
            lr0: kv.parse_or("train.lr0", base.lr0)?,
            plateau_factor: kv.parse_or("train.plateau_factor", base.plateau_factor)?,
            plateau_patience: kv.parse_or("train.plateau_patience", base.plateau_patience)?,
            epochs: kv.parse_or("train.epochs", base.epochs)?,
            steps_per_epoch: kv.parse_or("train.steps_per_epoch", base.steps_per_epoch)?,
            seed: kv.parse_or("train.seed", base.seed)?,
            quant: kv.parse_or("train.quant", base.quant)?,
            clip: kv.parse_or("train.clip", base.clip)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The fixed 16-image held-out set.
pub fn validation_set() -> Dataset {
    Dataset::synthetic(VALIDATION_IMAGES, 64, VALIDATION_SEED).expect("non-empty")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub lr: f64,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,loss,bpp_est,mse,psnr,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.8},{:.4},{:e}",
            self.step, self.loss, self.bpp, self.mse, self.psnr, self.lr
        )
    }
}

/// Held-out metrics with exact rounding; PSNR on 8-bit reconstructions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValStats {
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Estimated-rate evaluation of a model on a batch at `lambda`.
pub fn evaluate<S: Real>(model: &Gabic<S>, images: &Tensor<S>, lambda: f64) -> Result<ValStats> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, &p, x, QuantMode::Round, lambda, &mut Rng::new(0))?;
    let bpp = g.value(out.rd.bpp).item().f64();
    let (n, ..) = images.dims4()?;
    let xh = g.value(out.x_hat);
    let mut se = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        let a = Image::from_tensor(images, b)?;
        let r = Image::from_tensor(xh, b)?;
        for (&u, &v) in a.data.iter().zip(&r.data) {
            se += (u as f64 - v as f64).powi(2);
        }
        count += a.data.len();
    }
    let mse = se / count as f64 / (255.0 * 255.0);
    Ok(ValStats {
        loss: bpp + lambda * crate::network::DISTORTION_SCALE * mse,
        bpp,
        mse,
        psnr: psnr_from_mse(mse),
    })
}

/// Optimizer, schedule and data position around a model.
#[derive(Clone, Debug)]
pub struct Trainer<S: Real = f32> {
    config: TrainConfig,
    model: Gabic<S>,
    adam: AdamState<S>,
    adam_config: AdamConfig,
    plateau: Plateau,
    step: u64,
    epoch: u64,
    data: IterState,
    noise_counter: u64,
    best_val: f64,
}

impl<S: Real> Trainer<S> {
    /// Fresh optimizer state around `model`, whose config must match.
    pub fn new(config: TrainConfig, model: Gabic<S>) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::ConfigMismatch {
                stream: config.model.hash(),
                model: model.config().hash(),
            });
        }
        let adam = AdamState::zeros_like(model.params().tensors());
        Ok(Trainer {
            adam_config: AdamConfig {
                clip: Some(config.clip),
                ..AdamConfig::default()
            },
            plateau: Plateau::new(config.lr0, config.plateau_factor, config.plateau_patience),
            config,
            model,
            adam,
            step: 0,
            epoch: 0,
            data: IterState::default(),
            noise_counter: 0,
            best_val: f64::INFINITY,
        })
    }

    /// Fresh model initialised from the training seed.
    pub fn from_scratch(config: TrainConfig) -> Result<Self> {
        let model = Gabic::new(config.model.clone(), config.seed)?;
        Self::new(config, model)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Gabic<S> {
        &self.model
    }

    pub fn into_model(self) -> Gabic<S> {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.plateau.lr
    }

    /// Extend (or shorten) the run, e.g. after resuming.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn best_validation(&self) -> f64 {
        self.best_val
    }

    /// One optimizer step on the next batch of `data`.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        let cfg = &self.config;
        let mut it = BatchIter::resume(data, cfg.crop, cfg.batch, cfg.seed, self.data)?;
        let x = it.next_batch::<S>();
        let mut rng = Rng::with_counter(Rng::new(cfg.seed).fork(1).seed(), self.noise_counter);

        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true);
        let xv = g.constant(x);
        let out = self.model.forward(&mut g, &p, xv, cfg.quant, cfg.lambda, &mut rng)?;
        let loss = g.value(out.rd.loss).item().f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let bpp = g.value(out.rd.bpp).item().f64();
        let mse = g.value(out.rd.mse).item().f64();
        g.backward(out.rd.loss)?;
        let grads = self.model.params().grads(&g, &p);
        drop(g);
        let lr = self.plateau.lr;
        adam_step(self.model.params_mut().tensors_mut(), &grads, &mut self.adam, lr, &self.adam_config)?;

        self.data = it.state();
        self.noise_counter = rng.counter();
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            bpp,
            mse,
            psnr: psnr_from_mse(mse),
            lr,
        })
    }

    /// Close an epoch: validate, update the schedule. Returns the metrics and
    /// whether they are the best so far.
    pub fn end_epoch(&mut self, val: &Tensor<S>) -> Result<(ValStats, bool)> {
        let stats = evaluate(&self.model, val, self.config.lambda)?;
        self.plateau.step(stats.loss);
        self.epoch += 1;
        let improved = stats.loss < self.best_val;
        if improved {
            self.best_val = stats.loss;
        }
        Ok((stats, improved))
    }

    /// Train until `config.epochs`, writing CSV rows to `log` and the best
    /// checkpoint to `checkpoint`.
    pub fn run(&mut self, data: &Dataset, val: &Tensor<S>, mut opts: RunOptions<'_>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        if let Some(w) = opts.log.as_mut() {
            writeln!(w, "{}", StepStats::CSV_HEADER)?;
        }
        while self.epoch < self.config.epochs as u64 {
            for _ in 0..self.config.steps_per_epoch {
                let s = self.train_step(data)?;
                if let Some(w) = opts.log.as_mut() {
                    writeln!(w, "{}", s.csv_row())?;
                }
                report.steps.push(s);
            }
            let (v, improved) = self.end_epoch(val)?;
            if improved {
                report.best_epoch = self.epoch;
                if let Some(path) = &opts.checkpoint {
                    self.checkpoint().save(path)?;
                }
            }
            report.epochs.push(v);
        }
        Ok(report)
    }

    /// Everything needed to continue training bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        let kv = self.config.to_kv();
        for k in kv.keys().filter(|k| k.starts_with("train.")) {
            ck.meta.insert(k.to_string(), kv.get(k).unwrap().to_string());
        }
        let mut put = |k: &str, v: String| ck.meta.insert(format!("state.{k}"), v);
        put("step", self.step.to_string());
        put("epoch", self.epoch.to_string());
        put("lr", hex(self.plateau.lr));
        put("plateau_best", hex(self.plateau.best));
        put("plateau_bad", self.plateau.bad_epochs.to_string());
        put("best_val", hex(self.best_val));
        put("noise_counter", self.noise_counter.to_string());
        put("data_epoch", self.data.epoch.to_string());
        put("data_cursor", self.data.cursor.to_string());
        put("data_crop_counter", self.data.crop_counter.to_string());
        put("adam_t", self.adam.t.to_string());
        for (i, (name, _)) in self.model.params().iter().enumerate() {
            ck.push(&format!("adam.m.{name}"), &self.adam.m[i]);
            ck.push(&format!("adam.v.{name}"), &self.adam.v[i]);
        }
        ck
    }

    /// Restore a state written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (k, v) in &ck.meta {
            kv.set(k, v);
        }
        if kv.get("state.step").is_none() {
            return Err(Error::invalid("checkpoint holds no training state"));
        }
        let mut base = TrainConfig::toy(0.025);
        base.model = ck.config.clone();
        let config = TrainConfig::from_kv(&kv, base)?;
        let model = ck.to_model::<S>()?;
        let mut t = Trainer::new(config, model)?;
        let num = |k: &str| -> Result<u64> {
            kv.parse_opt::<u64>(&format!("state.{k}"))?
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks state.{k}")))
        };
        let flt = |k: &str| -> Result<f64> {
            let v = kv.get(&format!("state.{k}")).ok_or_else(|| Error::invalid(format!("checkpoint lacks state.{k}")))?;
            unhex(v)
        };
        t.step = num("step")?;
        t.epoch = num("epoch")?;
        t.plateau.lr = flt("lr")?;
        t.plateau.best = flt("plateau_best")?;
        t.plateau.bad_epochs = num("plateau_bad")? as usize;
        t.best_val = flt("best_val")?;
        t.noise_counter = num("noise_counter")?;
        t.data = IterState {
            epoch: num("data_epoch")?,
            cursor: num("data_cursor")? as usize,
            crop_counter: num("data_crop_counter")?,
        };
        t.adam.t = num("adam_t")?;
        let names: Vec<String> = t.model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (slot, prefix) in [(&mut t.adam.m[i], "adam.m."), (&mut t.adam.v[i], "adam.v.")] {
                let stored = ck
                    .tensor::<S>(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks {prefix}{name}")))?;
                if stored.shape() != slot.shape() {
                    return Err(Error::shape("from_checkpoint", format!("{prefix}{name}")));
                }
                *slot = stored;
            }
        }
        Ok(t)
    }
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::invalid(format!("bad float field `{s}`")))
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub epochs: Vec<ValStats>,
    /// 1-based epoch of the best validation loss.
    pub best_epoch: u64,
}

impl TrainReport {
    /// Mean training loss over steps `[from, from + len)`.
    pub fn mean_loss(&self, from: usize, len: usize) -> f64 {
        let s = &self.steps[from..(from + len).min(self.steps.len())];
        s.iter().map(|s| s.loss).sum::<f64>() / s.len() as f64
    }
}
