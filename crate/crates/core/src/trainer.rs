//! Training loop: draw `t_i` from the pool, synthesize `x_{t_i}` with the
//! frozen network, then fit the network's prediction from `x_{t_i}` under
//! the total loss.
//!
//! Randomness is derived from `(seed, step)` for steps and `(seed, epoch)`
//! for shuffling and augmentation, so a run resumed from a checkpoint
//! continues exactly like the uninterrupted one.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{diffusion_step, pool_sample, BridgeConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{AcmtError, Result};
use crate::image::Image;
use crate::net::{Mode, NetworkConfig, TranslatorNet};
use crate::objectives::{
    boundary_loss, sb_loss, texture_loss, LossHeads, LossReport, LossWeights, SbProjection,
    MIN_ENTROPY_SAMPLES, SB_PROJECTION_DIM,
};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::{augment_pair, Augmentation, PairedSample};
use crate::rng;

/// Time at which the encoder is evaluated for the feature losses.
pub const FEATURE_TIME: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub bridge: BridgeConfig,
    pub weights: LossWeights,
    pub network: NetworkConfig,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 4,
            learning_rate: 2e-4,
            seed: 0,
            bridge: BridgeConfig::default(),
            weights: LossWeights::default(),
            network: NetworkConfig::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bridge.validate()?;
        self.weights.validate()?;
        self.network.validate()?;
        if self.epochs == 0 {
            return Err(AcmtError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AcmtError::Config("batch_size must be >= 1".into()));
        }
        if self.bridge.sigma > 0.0 && self.batch_size < MIN_ENTROPY_SAMPLES {
            return Err(AcmtError::Config(format!(
                "batch_size must be >= {MIN_ENTROPY_SAMPLES} when sigma > 0"
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(AcmtError::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_i: f64,
    pub report: LossReport,
}

impl StepRecord {
    /// `{step, t_i, texture, boundary, sb, total}` as one JSON line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "t_i": self.t_i,
            "texture": self.report.texture,
            "boundary": self.report.boundary(),
            "sb": self.report.sb(),
            "total": self.report.total,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Parameter fingerprint after each completed epoch.
    pub epoch_fingerprints: Vec<String>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.steps {
            writeln!(out, "{}", r.to_json_line())?;
        }
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.report.total).collect()
    }
}

/// Carries `x0` from `t_0 = 0` to `pool[i]` with Eq. (4) steps, anchoring
/// each step on the frozen network's own prediction.
pub fn synthesize_state<R: Rng + ?Sized>(
    x0: &Image,
    i: usize,
    net: &TranslatorNet,
    bridge: &BridgeConfig,
    rng: &mut R,
) -> Result<Image> {
    let pool = &bridge.timestep_pool;
    if i >= pool.len() {
        return Err(AcmtError::invalid(format!(
            "pool index {i} out of range for a pool of {}",
            pool.len()
        )));
    }
    let mut x = x0.clone();
    for j in 0..i {
        let pred = net.predict(&x, pool[j])?;
        x = diffusion_step(&x, &pred, pool[j], pool[j + 1], bridge.sigma, rng)?;
    }
    Ok(x)
}

/// Gradients of one step, before the optimizer update.
pub struct StepGradients {
    pub t_i: f64,
    pub report: LossReport,
    pub grads: Vec<f32>,
}

pub struct Trainer {
    config: TrainConfig,
    net: TranslatorNet,
    heads: LossHeads,
    projection: SbProjection,
    optimizer: Adam,
    step: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = TranslatorNet::new(config.network.clone(), rng::derive_seed(config.seed, "net", 0))?;
        let optimizer = Adam::new(AdamConfig::with_lr(config.learning_rate), net.param_count());
        Ok(Self::assemble(config, net, optimizer, 0, 0))
    }

    /// Continues from a checkpoint; its configs must match `config`.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if checkpoint.net.config() != &config.network
            || checkpoint.bridge != config.bridge
            || checkpoint.weights != config.weights
            || checkpoint.seed != config.seed
        {
            return Err(AcmtError::Config(
                "checkpoint configs or seed differ from the training config".into(),
            ));
        }
        let optimizer = match checkpoint.optimizer {
            Some(mut o) => {
                o.config = AdamConfig::with_lr(config.learning_rate);
                o
            }
            None => Adam::new(AdamConfig::with_lr(config.learning_rate), checkpoint.net.param_count()),
        };
        Ok(Self::assemble(config, checkpoint.net, optimizer, checkpoint.step, checkpoint.epoch))
    }

    fn assemble(config: TrainConfig, net: TranslatorNet, optimizer: Adam, step: u64, epoch: usize) -> Self {
        let shallow = config.network.level_shape(config.network.shallow_tap_level).0;
        let deep = config.network.level_shape(config.network.deep_tap_level).0;
        let heads = LossHeads::new(rng::derive_seed(config.seed, "heads", 0), shallow, deep);
        let [h, w] = config.network.image_size;
        let projection = SbProjection::new(rng::derive_seed(config.seed, "projection", 0), h * w, SB_PROJECTION_DIM);
        Trainer {
            config,
            net,
            heads,
            projection,
            optimizer,
            step,
            epoch,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &TranslatorNet {
        &self.net
    }

    pub fn heads(&self) -> &LossHeads {
        &self.heads
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            bridge: self.config.bridge.clone(),
            weights: self.config.weights.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Loss and parameter gradients of one step on a batch of pairs, with
    /// the randomness of step number `step`.
    pub fn gradients(&self, batch: &[PairedSample], step: u64) -> Result<StepGradients> {
        if batch.is_empty() {
            return Err(AcmtError::invalid("empty batch"));
        }
        let bridge = &self.config.bridge;
        let lw = &self.config.weights;
        let mut r = rng::stream(self.config.seed, "train/step", step);
        let (i, t_i) = pool_sample(&bridge.timestep_pool, &mut r)?;

        // Step 2: frozen synthesis of x_{t_i} for both modalities.
        let mut xt_mr = Vec::with_capacity(batch.len());
        let mut xt_us = Vec::with_capacity(batch.len());
        for pair in batch {
            pair.mr.ensure_same_shape(&pair.us, "training pair")?;
            xt_mr.push(synthesize_state(&pair.mr, i, &self.net, bridge, &mut r)?);
            xt_us.push(synthesize_state(&pair.us, i, &self.net, bridge, &mut r)?);
        }

        // Step 3: train-mode predictions.
        let mut x1_mr = Vec::with_capacity(batch.len());
        let mut x1_us = Vec::with_capacity(batch.len());
        let mut traces = Vec::with_capacity(2 * batch.len());
        for (a, b) in xt_mr.iter().zip(&xt_us) {
            let fa = self.net.forward(a, t_i, Mode::Train)?;
            let fb = self.net.forward(b, t_i, Mode::Train)?;
            x1_mr.push(fa.x1_pred);
            x1_us.push(fb.x1_pred);
            traces.push((fa.trace.expect("train trace"), fb.trace.expect("train trace")));
        }

        let bn = batch.len() as f64;
        let (sb_mr, g_sb_mr) = sb_loss(&xt_mr, &x1_mr, t_i, bridge.sigma, &self.projection)?;
        let (sb_us, g_sb_us) = sb_loss(&xt_us, &x1_us, t_i, bridge.sigma, &self.projection)?;

        let mut texture = 0.0;
        let mut boundary_mr = 0.0;
        let mut boundary_us = 0.0;
        let mut d_x1: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(batch.len());
        for (b, pair) in batch.iter().enumerate() {
            let (f_mr1, tr_mr) = self.net.extract_features_traced(&x1_mr[b], FEATURE_TIME)?;
            let (f_us1, tr_us) = self.net.extract_features_traced(&x1_us[b], FEATURE_TIME)?;
            let f_mr0 = self.net.extract_features(&pair.mr, FEATURE_TIME)?;
            let f_us0 = self.net.extract_features(&pair.us, FEATURE_TIME)?;

            let (tex, dtex_mr, dtex_us) = texture_loss(&f_mr1.shallow, &f_us1.shallow, &self.heads)?;
            let (bmr, dbmr) = boundary_loss(&f_mr1.deep, &f_mr0.deep, &self.heads)?;
            let (bus, dbus) = boundary_loss(&f_us1.deep, &f_us0.deep, &self.heads)?;
            texture += tex / bn;
            boundary_mr += bmr / bn;
            boundary_us += bus / bn;

            let ct = lw.lambda_texture / bn;
            let cb = 0.5 * lw.lambda_boundary / bn;
            let mut g_mr = self.net.feature_input_grad(&tr_mr, &(dtex_mr * ct), &(dbmr * cb))?;
            let mut g_us = self.net.feature_input_grad(&tr_us, &(dtex_us * ct), &(dbus * cb))?;
            g_mr.scaled_add(0.5 * lw.lambda_sb, &g_sb_mr[b]);
            g_us.scaled_add(0.5 * lw.lambda_sb, &g_sb_us[b]);
            d_x1.push((g_mr, g_us));
        }

        let report = LossReport::compose(texture, boundary_mr, boundary_us, sb_mr, sb_us, lw)?;
        let mut grads = vec![0.0f32; self.net.param_count()];
        for ((tr_mr, tr_us), (g_mr, g_us)) in traces.iter().zip(&d_x1) {
            self.net.backward(tr_mr, g_mr, &mut grads)?;
            self.net.backward(tr_us, g_us, &mut grads)?;
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(AcmtError::NonFinite {
                component: "parameter gradient".into(),
                detail: format!("index {k} at step {step}"),
            });
        }
        Ok(StepGradients { t_i, report, grads })
    }

    /// One optimization step on a batch; returns the logged record.
    pub fn train_step(&mut self, batch: &[PairedSample]) -> Result<StepRecord> {
        let g = self.gradients(batch, self.step)?;
        self.optimizer.update(self.net.params_mut(), &g.grads)?;
        let record = StepRecord {
            step: self.step,
            t_i: g.t_i,
            report: g.report,
        };
        self.step += 1;
        Ok(record)
    }

    /// Shuffled, optionally augmented batches for the current epoch. The
    /// trailing partial batch is dropped.
    pub fn epoch_batches(&self, data: &[PairedSample]) -> Result<Vec<Vec<PairedSample>>> {
        let mut r = rng::stream(self.config.seed, "train/epoch", self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        let ops: &[Option<Augmentation>] = &[
            None,
            Some(Augmentation::FlipH),
            Some(Augmentation::FlipV),
            Some(Augmentation::Rot90),
            Some(Augmentation::Rot180),
            Some(Augmentation::Rot270),
        ];
        let mut items = Vec::with_capacity(data.len());
        for &k in &order {
            let pair = &data[k];
            let (h, w) = pair.shape();
            let choices = if h == w { ops } else { &ops[..3] };
            let op = choices[r.random_range(0..choices.len())];
            items.push(match (self.config.augment, op) {
                (true, Some(op)) => augment_pair(pair, op)?,
                _ => pair.clone(),
            });
        }
        let bs = self.config.batch_size;
        let full = items.len() / bs;
        let mut batches = Vec::with_capacity(full);
        let mut it = items.into_iter();
        for _ in 0..full {
            batches.push(it.by_ref().take(bs).collect());
        }
        Ok(batches)
    }

    pub fn run_epoch(&mut self, data: &[PairedSample], log: &mut TrainLog) -> Result<()> {
        let start = Instant::now();
        for batch in self.epoch_batches(data)? {
            let rec = self.train_step(&batch)?;
            log::debug!("step {} t={:.2} total={:.5}", rec.step, rec.t_i, rec.report.total);
            log.steps.push(rec);
        }
        self.epoch += 1;
        log.epoch_fingerprints.push(self.net.fingerprint());
        log.wall_clock_secs += start.elapsed().as_secs_f64();
        if let Some(last) = log.steps.last() {
            log::info!("epoch {} done, step {}, total {:.5}", self.epoch, self.step, last.report.total);
        }
        Ok(())
    }

    /// Runs epochs until `config.epochs` have completed, calling `on_epoch`
    /// after each one (e.g. to save a checkpoint).
    pub fn fit_with<F>(&mut self, data: &[PairedSample], log: &mut TrainLog, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &TrainLog) -> Result<()>,
    {
        if data.is_empty() {
            return Err(AcmtError::invalid("training set is empty"));
        }
        if data.len() < self.config.batch_size {
            return Err(AcmtError::invalid(format!(
                "training set of {} pairs is smaller than one batch of {}",
                data.len(),
                self.config.batch_size
            )));
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(data, log)?;
            on_epoch(self, log)?;
        }
        Ok(())
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn fit(data: &[PairedSample], config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = TrainLog::default();
    trainer.fit_with(data, &mut log, |_, _| Ok(()))?;
    Ok((trainer.checkpoint(), log))
}
