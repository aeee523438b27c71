//! The training loop: PK-sampled batches of frame windows, an optional
//! input-erasing augmentation, one fresh graph per iteration, and Adam
//! updates for every parameter that received a gradient.
//!
//! All randomness comes from three fixed streams of one seeded generator
//! (initialization, data sampling, feature perturbation), so a (seed,
//! config, dataset) triple pins the whole trajectory and two runs produce
//! byte-identical loss logs.

use gaitrm_tensor::{Graph, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{pk_sample_batch, BatchSpec};
use crate::data::{sample_frames, Dataset};
use crate::error::{CoreError, Result};
use crate::loss::{ba_plus_triplet, TripletConfig};
use crate::masking::random_erase_input;
use crate::model::{forward_train, ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig, LrSchedule};

/// Stream indices of the seeded generator; part of the format.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_REG: u64 = 2;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: BatchSpec,
    /// Frames per sequence in a training window.
    pub frames: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub triplet: TripletConfig,
    /// Probability of erasing a random rectangle from a sampled window.
    pub erase_prob: f64,
    pub log_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.adam.validate()?;
        self.triplet.validate()?;
        if self.iterations == 0 || self.frames == 0 {
            return Err(CoreError::InvalidConfig(
                "training needs at least one iteration and one frame".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(CoreError::InvalidConfig(format!(
                "erase probability {} outside [0, 1]",
                self.erase_prob
            )));
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub loss: f32,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub optimizer: Adam,
    pub rows: Vec<LossRow>,
}

/// Stream `n` of the run's generator.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initialize parameters from the run seed (stream 0), exactly as
/// [`run_training`] does.
pub fn init_params(model_cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    let mut rng = stream_rng(seed, STREAM_INIT);
    ModelParams::init(model_cfg, &mut rng)
}

/// Train from scratch on `data`. `config_hash` only decorates diagnostics;
/// `checkpoint_cb`, when given, runs every `every` iterations and at the
/// end.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    config_hash: &str,
    mut checkpoint_cb: Option<(u64, &mut dyn FnMut(u64, &ModelParams<f32>, &Adam) -> Result<()>)>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut params = init_params(model_cfg, cfg.seed)?;
    let mut data_rng = stream_rng(cfg.seed, STREAM_DATA);
    let mut reg_rng = stream_rng(cfg.seed, STREAM_REG);
    let mut opt = Adam::new(cfg.adam.clone())?;
    let index = data.subject_index();
    if index.is_empty() {
        return Err(CoreError::Data("training dataset is empty".into()));
    }
    let (h, w) = (data.h, data.w);
    let plane = h * w;
    let window = cfg.frames * plane;
    let b = cfg.batch.batch_size();

    let mut rows = Vec::with_capacity(cfg.iterations as usize);
    for iteration in 1..=cfg.iterations {
        let lr = cfg.schedule.lr_at(iteration);
        let picks = pk_sample_batch(&index, &cfg.batch, &mut data_rng)?;
        let mut labels = Vec::with_capacity(b);
        let mut buf = vec![0.0f32; b * window];
        for (bi, (subject, seq_idx)) in picks.iter().enumerate() {
            labels.push(*subject);
            let seq = &data.sequences[*seq_idx];
            let frame_ids = sample_frames(seq.n(), cfg.frames, Mode::Train, &mut data_rng)?;
            let dst = &mut buf[bi * window..(bi + 1) * window];
            for (fi, &src) in frame_ids.iter().enumerate() {
                seq.frame_f32(src, &mut dst[fi * plane..(fi + 1) * plane]);
            }
            if cfg.erase_prob > 0.0 {
                random_erase_input(dst, cfg.frames, h, w, cfg.erase_prob, &mut data_rng)?;
            }
        }

        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![b, cfg.frames, 1, h, w], buf)?);
        let out = forward_train(&mut g, x, model_cfg, &mut params, &mut reg_rng)?;
        let loss_id = ba_plus_triplet(&mut g, out.pre_bn, &labels, &cfg.triplet)?;
        let loss = g.value(loss_id).data()[0];
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                loss: loss as f64,
                iteration,
                seed: cfg.seed,
                config_hash: config_hash.to_string(),
            });
        }
        g.backward(loss_id)?;

        opt.begin_step();
        let mut named = params.named_tensors_mut();
        for (name, node) in &out.bound {
            let Some(grad) = g.grad(*node) else {
                continue;
            };
            let param = named
                .iter_mut()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .expect("bound node without a matching parameter");
            opt.update(name, lr, param, grad)?;
        }
        drop(named);

        rows.push(LossRow {
            iteration,
            loss,
            lr,
        });
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            log::info!("iter {iteration}: loss {loss:.5}, lr {lr:e}");
        }
        if let Some((every, cb)) = checkpoint_cb.as_mut() {
            if (*every > 0 && iteration % *every == 0) || iteration == cfg.iterations {
                cb(iteration, &params, &opt)?;
            }
        }
    }
    Ok(TrainOutput {
        params,
        optimizer: opt,
        rows,
    })
}

/// Render loss rows as the canonical CSV (header plus one row per
/// iteration). The shortest-round-trip float formatting keeps the file
/// byte-stable across runs of the same trajectory.
pub fn loss_csv(rows: &[LossRow], seed: u64, config_hash: &str) -> String {
    let mut out = format!("# seed {seed} config {config_hash}\niteration,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.lr));
    }
    out
}
