//! Pretraining loop, schedules, presets and checkpoints.

mod config;
mod optim;
mod presets;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DataSource, TrainConfig, KEYS};
pub use optim::{adamw_update, lr_schedule, momentum_schedule, AdamState, AdamWConfig};
pub use presets::{preset, PRESETS};

use crate::data::{generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::pairwise_mean_cosine;
use crate::io::{Checkpoint, TensorData};
use crate::losses::total_loss;
use crate::model::{Batch, Model, ParamStore, TargetEncoderState, TargetStrategy};
use crate::ndtensor::{Graph, Tensor};
use crate::patching::{augment, extract_noncontiguous_grid, grid_pos_table, sample_mask};

// Independent ChaCha streams under one seed. Step streams use the step index.
const PERM_STREAM: u64 = 1 << 40;
const INIT_STREAM: u64 = 1 << 41;

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "lr",
    "loss",
    "recon",
    "reg",
    "grad_norm",
    "pooled_pair_cos",
    "gamma_t",
    "nan_flag",
];

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub model: Model<f32>,
    pub target: TargetEncoderState<f32>,
    pub adam: AdamState<f32>,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub recon: f64,
    pub reg: f64,
    pub grad_norm: f64,
    pub pooled_pair_cos: f64,
    pub gamma_t: f64,
    pub nan_flag: bool,
    /// Operation that produced the non-finite value, when `nan_flag` is set.
    pub nan_op: Option<&'static str>,
}

impl StepMetrics {
    pub fn record(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.lr.to_string(),
            self.loss.to_string(),
            self.recon.to_string(),
            self.reg.to_string(),
            self.grad_norm.to_string(),
            self.pooled_pair_cos.to_string(),
            self.gamma_t.to_string(),
            (self.nan_flag as u8).to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    NanAbort { step: usize, op: &'static str },
}

/// Loads or generates the images named by the configuration.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => generate(spec),
        DataSource::Dir(dir) => Dataset::load(dir),
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub data: Dataset,
    pub state: TrainState,
    steps_per_epoch: usize,
    pos_table: Tensor<f32>,
}

impl Trainer {
    /// Fresh model and optimizer for `data` (the training split).
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, INIT_STREAM);
        let model = Model::<f32>::init(&cfg.model, &mut rng)?;
        let target = model.new_target(cfg.target_strategy, cfg.target_depth, cfg.momentum, &mut rng)?;
        let adam = AdamState::zeros_like(model.params.tensors());
        let state = TrainState {
            step: 0,
            model,
            target,
            adam,
        };
        Self::with_state(cfg, data, state)
    }

    fn with_state(cfg: TrainConfig, data: Dataset, state: TrainState) -> Result<Self> {
        let steps_per_epoch = data.len() / cfg.batch_size;
        if steps_per_epoch == 0 {
            return Err(Error::InvalidKey {
                key: "batch_size".into(),
                reason: format!("{} exceeds the {} training images", cfg.batch_size, data.len()),
            });
        }
        if data.images.iter().any(|i| i.channels() != cfg.model.channels) {
            return Err(Error::config(format!("images must have {} channels", cfg.model.channels)));
        }
        let pos_table = grid_pos_table(cfg.grid, cfg.model.dim)?;
        Ok(Trainer {
            cfg,
            data,
            state,
            steps_per_epoch,
            pos_table,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs
    }

    /// Image indices of `step`'s minibatch.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, PERM_STREAM + epoch as u64));
        let k = step % self.steps_per_epoch;
        order[k * self.cfg.batch_size..(k + 1) * self.cfg.batch_size].to_vec()
    }

    /// Augmented, patchified and masked minibatch of `step`. Depends only on
    /// the seed and the step index.
    pub fn prepare_batch(&self, step: usize) -> Result<Batch<f32>> {
        let cfg = &self.cfg;
        let mut rng = stream(cfg.seed, step as u64);
        let canvas = cfg.canvas();
        let (mut xv, mut xt, mut cv, mut ct) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let idx = self.batch_indices(step);
        for &i in &idx {
            let img = &self.data.images[i];
            let img = if cfg.augment {
                augment(img, canvas, cfg.min_crop_area, &mut rng)
            } else {
                img.resize(canvas)
            };
            let ps = extract_noncontiguous_grid(&img, cfg.model.patch_size, cfg.gap, &mut rng)?;
            let mask = sample_mask(ps.len(), cfg.mask_ratio, &mut rng)?;
            let cells = ps.cell_indices();
            for &j in &mask.visible {
                ps.push_normalized(j, &mut xv);
                cv.push(cells[j]);
            }
            for &j in &mask.target {
                ps.push_normalized(j, &mut xt);
                ct.push(cells[j]);
            }
        }
        let pd = cfg.model.patch_dim();
        Ok(Batch {
            groups: idx.len(),
            visible: Tensor::new(vec![cv.len(), pd], xv)?,
            target: Tensor::new(vec![ct.len(), pd], xt)?,
            pos_v: self.pos_table.gather_rows(&cv)?,
            pos_t: self.pos_table.gather_rows(&ct)?,
        })
    }

    /// One optimisation step. A non-finite value anywhere leaves the state
    /// untouched and comes back as a flagged metrics row.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let total = self.total_steps();
        let warmup = self.steps_per_epoch * self.cfg.warmup_epochs;
        let lr = lr_schedule(step, warmup, total, self.cfg.lr());
        let gamma_t = crate::losses::gamma_schedule(step, total, self.cfg.loss.gamma_start, self.cfg.loss.gamma_end);
        let batch = self.prepare_batch(step)?;
        match self.try_step(&batch, lr) {
            Ok(m) => Ok(m),
            Err(Error::NonFinite { op }) | Err(Error::DegenerateVector { op }) => Ok(StepMetrics {
                step,
                lr,
                loss: f64::NAN,
                recon: f64::NAN,
                reg: f64::NAN,
                grad_norm: f64::NAN,
                pooled_pair_cos: f64::NAN,
                gamma_t,
                nan_flag: true,
                nan_op: Some(op),
            }),
            Err(e) => Err(e),
        }
    }

    fn try_step(&mut self, batch: &Batch<f32>, lr: f64) -> Result<StepMetrics> {
        let step = self.state.step;
        let total = self.total_steps();
        let st = &self.state;
        let mut g = Graph::new();
        let fwd = st.model.forward(&mut g, &st.target, batch)?;
        let terms = total_loss(&mut g, fwd.z_hat, fwd.z_t, fwd.z_v, &self.cfg.loss, step, total, batch.groups)?;
        let grads = g.backward(terms.total)?;
        let grads: Vec<Tensor<f32>> = fwd.params.vars().iter().map(|&v| grads.get(v)).collect();
        let grad_norm = grads
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let pooled_pair_cos = pooled_cosine(g.value(fwd.z_v), batch.groups)?;
        let scalar = |v| g.value(v).item() as f64;
        let (loss, recon) = (scalar(terms.total), scalar(terms.recon));
        let reg = terms.reg.map_or(0.0, scalar);

        let mut params = st.model.params.clone();
        let mut adam = st.adam.clone();
        adam.step(params.tensors_mut(), &grads, lr, &self.cfg.optim)?;
        let mut target = st.target.clone();
        if target.strategy == TargetStrategy::Momentum {
            target.ema_update(&params, momentum_schedule(step, total, self.cfg.momentum))?;
        }
        self.state.model.params = params;
        self.state.adam = adam;
        self.state.target = target;
        self.state.step += 1;
        Ok(StepMetrics {
            step,
            lr,
            loss,
            recon,
            reg,
            grad_norm,
            pooled_pair_cos,
            gamma_t: terms.gamma,
            nan_flag: false,
            nan_op: None,
        })
    }

    /// Trains until `until` steps are done (capped at the schedule length),
    /// stopping early at the first non-finite step.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<RunOutcome> {
        let until = until.min(self.total_steps());
        while self.state.step < until {
            let m = self.train_step()?;
            on_step(self, &m)?;
            if m.nan_flag {
                return Ok(RunOutcome::NanAbort {
                    step: m.step,
                    op: m.nan_op.unwrap_or("unknown"),
                });
            }
        }
        Ok(RunOutcome::Completed)
    }

    pub fn run(&mut self, on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<RunOutcome> {
        self.run_until(self.total_steps(), on_step)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let st = &self.state;
        let mut ck = Checkpoint::new(self.cfg.model_digest(), st.step as u64);
        ck.push("meta.config", vec![0], TensorData::U8(Vec::new()))?;
        let text = self.cfg.to_text().into_bytes();
        ck.tensors[0].shape = vec![text.len()];
        ck.tensors[0].data = TensorData::U8(text);
        push_store(&mut ck, "online", &st.model.params)?;
        if let Some(t) = &st.target.params {
            push_store(&mut ck, "target", t)?;
        }
        for (i, (name, _)) in st.model.params.iter().enumerate() {
            ck.push_tensor(format!("adam.m/{name}"), &st.adam.m[i])?;
            ck.push_tensor(format!("adam.v/{name}"), &st.adam.v[i])?;
        }
        ck.push("adam.t", vec![1], TensorData::I64(vec![st.adam.t as i64]))?;
        Ok(ck)
    }

    /// Rebuilds a trainer from a checkpoint written under the same model
    /// shape. Data order and randomness resume exactly.
    pub fn resume(cfg: TrainConfig, data: Dataset, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.digest != cfg.model_digest() {
            return Err(Error::DigestMismatch);
        }
        let mut fresh = Trainer::new(cfg, data)?;
        let st = &mut fresh.state;
        load_store(ck, "online", &mut st.model.params)?;
        if let Some(t) = st.target.params.as_mut() {
            load_store(ck, "target", t)?;
        }
        let names: Vec<String> = st.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            st.adam.m[i] = checked(ck.tensor(&format!("adam.m/{name}"))?, &st.adam.m[i])?;
            st.adam.v[i] = checked(ck.tensor(&format!("adam.v/{name}"))?, &st.adam.v[i])?;
        }
        st.adam.t = match ck.get("adam.t").map(|t| &t.data) {
            Some(TensorData::I64(v)) if v.len() == 1 && v[0] >= 0 => v[0] as u64,
            _ => return Err(Error::Checkpoint("missing or malformed adam.t".into())),
        };
        st.step = ck.step as usize;
        Ok(fresh)
    }
}

/// Configuration stored inside a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    match ck.get("meta.config").map(|t| &t.data) {
        Some(TensorData::U8(bytes)) => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
            let cfg = TrainConfig::parse(text)?;
            if cfg.model_digest() != ck.digest {
                return Err(Error::DigestMismatch);
            }
            Ok(cfg)
        }
        _ => Err(Error::Checkpoint("missing meta.config".into())),
    }
}

/// Online model held by a checkpoint, checked against `cfg`'s digest.
pub fn load_model(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Model<f32>> {
    if ck.digest != cfg.model_digest() {
        return Err(Error::DigestMismatch);
    }
    let mut model = Model::<f32>::init(&cfg.model, &mut stream(cfg.seed, INIT_STREAM))?;
    load_store(ck, "online", &mut model.params)?;
    Ok(model)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean over image pairs of the cosine between mean-pooled latents.
fn pooled_cosine(z: &Tensor<f32>, groups: usize) -> Result<f64> {
    let (rows, d) = z.dims2("pooled_cosine")?;
    let per = rows / groups;
    let mut pooled = vec![0.0f64; groups * d];
    for (r, row) in z.data().chunks(d).enumerate() {
        let dst = &mut pooled[(r / per) * d..(r / per + 1) * d];
        dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64 / per as f64);
    }
    pairwise_mean_cosine(&Tensor::new(vec![groups, d], pooled)?)
}

fn push_store(ck: &mut Checkpoint, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
    for (name, t) in store.iter() {
        ck.push_tensor(format!("{prefix}/{name}"), t)?;
    }
    Ok(())
}

fn load_store(ck: &Checkpoint, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}/{}", store.name(id));
        let t = checked(ck.tensor(&name)?, store.get(id))?;
        *store.get_mut(id) = t;
    }
    Ok(())
}

fn checked(t: Tensor<f32>, like: &Tensor<f32>) -> Result<Tensor<f32>> {
    if t.shape() != like.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor shape {:?} does not match the model's {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t)
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub steps: usize,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.lmim";

/// Full pretraining run into `out`: resolved config, per-step metrics CSV,
/// periodic and final checkpoints. The final checkpoint is written even
/// after a non-finite abort so the run can be inspected.
pub fn run_experiment(cfg: &TrainConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let (train, _) = load_dataset(cfg)?.split();
    let mut trainer = Trainer::new(cfg.clone(), train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let csv_path = out.join(METRICS_FILE);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    csv.write_record(METRICS_HEADER).map_err(|e| csv_err(&csv_path, e))?;
    let mut metrics = Vec::new();
    let spe = trainer.steps_per_epoch();
    let every = cfg.checkpoint_every;
    let outcome = trainer.run(|t, m| {
        csv.write_record(m.record()).map_err(|e| csv_err(&csv_path, e))?;
        metrics.push(m.clone());
        let done = t.state.step;
        if every > 0 && !m.nan_flag && done % (spe * every) == 0 && done < t.total_steps() {
            let p = out.join(format!("checkpoint_epoch{}.lmim", done / spe));
            t.checkpoint()?.save(&p)?;
        }
        Ok(())
    })?;
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.checkpoint()?.save(&checkpoint)?;
    Ok(RunReport {
        outcome,
        steps: trainer.state.step,
        metrics,
        checkpoint,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
