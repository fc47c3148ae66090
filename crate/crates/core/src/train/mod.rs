//! The two-step training procedure, optimization, checkpoints and inference.

mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crossdsr_tensor::{GaussianWindow, Grads, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DepthMap, Scale, TrainingSample};
use crate::distill::{affinity_space_loss_var, distill_loss_var, output_space_loss_var, select_roles, Role, RoleAssignment};
use crate::error::{Error, Result};
use crate::losses::{de_loss_var, dsr_loss_var, total_student_loss_var};
use crate::networks::{bind, depth_tensor, tensor_to_depth, Bound, DeNet, DsrNet, FeatureStack, NetworkParams, SpNet, UncertaintyConvs};
use crate::supervision::{attention_fuse_var, structure_loss_var, uncertainty_var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{Ablation, Components, DataConfig, DistillConfig, OutputConfig, RoleErrorSource, ScheduleConfig, TrainConfig};
pub use optim::{lr_at_epoch, optimizer_step, AdamConfig, AdamState};

/// The networks described by one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Models {
    pub dsr: DsrNet,
    pub de: DeNet,
    pub sp: SpNet,
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let m = &cfg.model;
        let scale = m.scale()?;
        Ok(Models {
            dsr: DsrNet::new(m.stage_count, m.channels, scale),
            de: DeNet::new(m.stage_count, m.channels, m.residual_units, scale),
            sp: SpNet::new(m.channels, m.sp_width),
        })
    }
}

/// Errors used to pick the roles of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleRecord {
    pub epoch: usize,
    pub e_dsr: f64,
    pub e_de: f64,
    pub teacher: Role,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub dsr: NetworkParams<f32>,
    pub de: NetworkParams<f32>,
    pub sp: Option<NetworkParams<f32>>,
    pub uncertainty: Option<NetworkParams<f32>>,
    pub opt_dsr: AdamState<f32>,
    pub opt_de: AdamState<f32>,
    pub opt_sp: AdamState<f32>,
    pub opt_uncertainty: AdamState<f32>,
    /// Mean recovery errors of the last completed epoch.
    pub e_dsr: Option<f64>,
    pub e_de: Option<f64>,
    pub role_history: Vec<RoleRecord>,
}

/// Seeds of the parameter initializers live far away from epoch streams.
fn init_rng(seed: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - which);
    rng
}

impl TrainState {
    /// Freshly initialized super-resolution and depth-estimation networks.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let models = Models::new(cfg)?;
        Ok(TrainState {
            epoch: 0,
            dsr: models.dsr.init(&mut init_rng(cfg.seed, 1)),
            de: models.de.init(&mut init_rng(cfg.seed, 2)),
            sp: None,
            uncertainty: None,
            opt_dsr: AdamState::new(),
            opt_de: AdamState::new(),
            opt_sp: AdamState::new(),
            opt_uncertainty: AdamState::new(),
            e_dsr: None,
            e_de: None,
            role_history: Vec::new(),
        })
    }

    fn ensure_structure_params(&mut self, cfg: &TrainConfig, models: &Models) -> Result<()> {
        let scale = cfg.model.scale()?;
        if self.sp.is_none() {
            self.sp = Some(models.sp.init(&mut init_rng(cfg.seed, 3), scale));
        }
        if self.uncertainty.is_none() {
            self.uncertainty = Some(UncertaintyConvs.init(scale));
        }
        Ok(())
    }
}

/// Loss components of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub losses: BTreeMap<String, f64>,
}

/// Summary of one epoch, written as one log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub e_dsr: Option<f64>,
    pub e_de: Option<f64>,
    pub teacher: Option<Role>,
    pub wall_time_s: f64,
}

/// Hooks called by the training loops.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Observer that keeps every record in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, record: &StepRecord) {
        self.steps.push(record.clone());
    }

    fn on_epoch(&mut self, record: &EpochRecord, _state: &TrainState) -> Result<()> {
        self.epochs.push(record.clone());
        Ok(())
    }
}

/// Training samples converted once into flat `f32` rasters.
#[derive(Debug, Clone)]
pub struct Dataset {
    lr: Vec<Vec<f32>>,
    hr: Vec<Vec<f32>>,
    rgb: Vec<Vec<f32>>,
    structure: Vec<Vec<f32>>,
    lr_dims: (usize, usize),
    hr_dims: (usize, usize),
    scale: Scale,
}

/// One mini-batch as `[n, c, h, w]` tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub rgb: Tensor<f32>,
    pub structure: Tensor<f32>,
}

fn flat(values: impl Iterator<Item = f64>) -> Vec<f32> {
    values.map(|v| v as f32).collect()
}

/// Copies `plane_len`-sized planes of `src`, reversing each one if `rotate`.
fn push_planes(dst: &mut Vec<f32>, src: &[f32], plane_len: usize, rotate: bool) {
    for plane in src.chunks_exact(plane_len) {
        if rotate {
            dst.extend(plane.iter().rev());
        } else {
            dst.extend_from_slice(plane);
        }
    }
}

impl Dataset {
    pub fn new(samples: &[TrainingSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
        let hr_dims = first.d_hr.dims();
        let lr_dims = first.d_lr.dims();
        let scale = first.scale;
        let mut ds = Dataset {
            lr: Vec::new(),
            hr: Vec::new(),
            rgb: Vec::new(),
            structure: Vec::new(),
            lr_dims,
            hr_dims,
            scale,
        };
        for (i, s) in samples.iter().enumerate() {
            if s.d_hr.dims() != hr_dims || s.scale != scale {
                return Err(Error::Dimension(format!(
                    "sample {i} is {:?} at {}, expected {hr_dims:?} at {scale}",
                    s.d_hr.dims(),
                    s.scale
                )));
            }
            ds.lr.push(flat(s.d_lr.values().iter().copied()));
            ds.hr.push(flat(s.d_hr.values().iter().copied()));
            ds.rgb.push(flat(s.rgb.values().iter().copied()));
            ds.structure.push(flat(s.s_gt.values().iter().copied()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    /// Gathers `indices`, rotating sample `k` by 180° when `rotate[k]`.
    pub fn batch(&self, indices: &[usize], rotate: &[bool]) -> Batch {
        let n = indices.len();
        let (lh, lw) = self.lr_dims;
        let (h, w) = self.hr_dims;
        let mut lr = Vec::with_capacity(n * lh * lw);
        let mut hr = Vec::with_capacity(n * h * w);
        let mut rgb = Vec::with_capacity(n * 3 * h * w);
        let mut st = Vec::with_capacity(n * h * w);
        for (k, &i) in indices.iter().enumerate() {
            let r = rotate.get(k).copied().unwrap_or(false);
            push_planes(&mut lr, &self.lr[i], lh * lw, r);
            push_planes(&mut hr, &self.hr[i], h * w, r);
            push_planes(&mut rgb, &self.rgb[i], h * w, r);
            push_planes(&mut st, &self.structure[i], h * w, r);
        }
        Batch {
            lr: Tensor::from_vec(&[n, 1, lh, lw], lr).expect("shape"),
            hr: Tensor::from_vec(&[n, 1, h, w], hr).expect("shape"),
            rgb: Tensor::from_vec(&[n, 3, h, w], rgb).expect("shape"),
            structure: Tensor::from_vec(&[n, 1, h, w], st).expect("shape"),
        }
    }

    /// Sample order and rotation flags of one epoch, a pure function of
    /// `(seed, epoch)`.
    pub fn epoch_plan(&self, seed: u64, epoch: usize, batch_size: usize) -> Vec<(Vec<usize>, Vec<bool>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..self.len()).map(|_| rng.random::<bool>()).collect();
        order
            .chunks(batch_size.max(1))
            .zip(flips.chunks(batch_size.max(1)))
            .map(|(o, f)| (o.to_vec(), f.to_vec()))
            .collect()
    }
}

/// Running sum of per-sample mean absolute errors.
#[derive(Debug, Clone, Copy, Default)]
struct ErrorAccumulator {
    sum: f64,
    count: usize,
}

impl ErrorAccumulator {
    fn add(&mut self, pred: &Tensor<f32>, gt: &Tensor<f32>) {
        let n = pred.shape()[0];
        let per = pred.numel() / n.max(1);
        for (p, t) in pred.data().chunks_exact(per).zip(gt.data().chunks_exact(per)) {
            let e: f64 = p.iter().zip(t).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
            self.sum += e / per as f64;
            self.count += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Debug, Default)]
struct LossMeans {
    sums: BTreeMap<String, f64>,
    steps: usize,
}

impl LossMeans {
    fn add(&mut self, losses: &BTreeMap<String, f64>) {
        for (k, v) in losses {
            *self.sums.entry(k.clone()).or_default() += v;
        }
        self.steps += 1;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        self.sums.iter().map(|(k, v)| (k.clone(), v / self.steps.max(1) as f64)).collect()
    }
}

fn take_grads(grads: &mut Grads<f32>, bound: &Bound) -> BTreeMap<String, Tensor<f32>> {
    bound
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
        .collect()
}

fn check_finite(epoch: usize, batch: usize, losses: &BTreeMap<String, f64>) -> Result<()> {
    if losses.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    let parts: Vec<String> = losses.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, batch {batch}: {}", parts.join(", "))))
}

fn value(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Mean recovery errors of both networks over a held-out set.
pub fn score_networks(models: &Models, state: &TrainState, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut acc_dsr = ErrorAccumulator::default();
    let mut acc_de = ErrorAccumulator::default();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let b = data.batch(chunk, &[]);
        let mut g = Graph::new();
        let pd = bind(&mut g, &state.dsr, false);
        let pe = bind(&mut g, &state.de, false);
        let x = g.leaf(b.lr, false);
        let rgb = g.leaf(b.rgb, false);
        let fd = models.dsr.forward(&mut g, &pd, x)?;
        let fe = models.de.forward(&mut g, &pe, rgb)?;
        acc_dsr.add(g.value(fd.final_output), &b.hr);
        acc_de.add(g.value(fe.final_output), &b.hr);
    }
    Ok((acc_dsr.mean().unwrap_or(0.0), acc_de.mean().unwrap_or(0.0)))
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let scale = cfg.model.scale()?;
    if data.scale() != scale {
        return Err(Error::InvalidArgument(format!(
            "training data is prepared for {}, configuration expects {scale}",
            data.scale()
        )));
    }
    Ok(())
}

/// Independent pre-training: the super-resolution network on its L1 loss and
/// the depth-estimation network on its SSIM/L1 mix, for epochs
/// `state.epoch + 1 ..= step1_epochs`.
pub fn run_step1(
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    obs: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let models = Models::new(cfg)?;
    let window = cfg.ssim.gaussian();
    let train_de = cfg.components.cross_task;
    while state.epoch < cfg.schedule.step1_epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let s = &cfg.schedule;
        let lr = lr_at_epoch(epoch, s.initial_lr, s.lr_decay_factor, s.lr_decay_period);
        let mut acc_dsr = ErrorAccumulator::default();
        let mut acc_de = ErrorAccumulator::default();
        let mut means = LossMeans::default();
        for (bi, (idx, rot)) in data.epoch_plan(cfg.seed, epoch, s.batch_size).into_iter().enumerate() {
            let b = data.batch(&idx, &rot);
            let mut losses = BTreeMap::new();

            let mut g = Graph::new();
            let p = bind(&mut g, &state.dsr, true);
            let x = g.leaf(b.lr.clone(), false);
            let hr = g.leaf(b.hr.clone(), false);
            let out = models.dsr.forward(&mut g, &p, x)?;
            let loss = dsr_loss_var(&mut g, out.final_output, hr)?;
            losses.insert("dsr".to_string(), value(&g, loss));
            acc_dsr.add(g.value(out.final_output), &b.hr);
            check_finite(epoch, bi, &losses)?;
            let mut grads = g.backward(loss);
            let gd = take_grads(&mut grads, &p);
            drop(g);
            optimizer_step(&mut state.dsr, &gd, &mut state.opt_dsr, lr, &cfg.optimizer)?;

            if train_de {
                let mut g = Graph::new();
                let p = bind(&mut g, &state.de, true);
                let rgb = g.leaf(b.rgb.clone(), false);
                let hr = g.leaf(b.hr.clone(), false);
                let out = models.de.forward(&mut g, &p, rgb)?;
                let loss = de_loss_var(&mut g, out.final_output, hr, cfg.loss.lambda, &cfg.ssim, &window)?;
                losses.insert("de".to_string(), value(&g, loss));
                acc_de.add(g.value(out.final_output), &b.hr);
                check_finite(epoch, bi, &losses)?;
                let mut grads = g.backward(loss);
                let ge = take_grads(&mut grads, &p);
                drop(g);
                optimizer_step(&mut state.de, &ge, &mut state.opt_de, lr, &cfg.optimizer)?;
            }
            obs.on_step(&StepRecord {
                epoch,
                batch: bi,
                losses: losses.clone(),
            });
            means.add(&losses);
        }
        state.epoch = epoch;
        state.e_dsr = acc_dsr.mean();
        state.e_de = acc_de.mean();
        if let (RoleErrorSource::Validation, Some(v)) = (cfg.distill.role_errors, validation) {
            let (a, b) = score_networks(&models, &state, v, s.batch_size)?;
            state.e_dsr = Some(a);
            state.e_de = train_de.then_some(b);
        }
        let record = EpochRecord {
            epoch,
            phase: "step1".into(),
            lr,
            losses: means.means(),
            e_dsr: state.e_dsr,
            e_de: state.e_de,
            teacher: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        obs.on_epoch(&record, &state)?;
    }
    Ok(state)
}

/// Roles for the coming epoch from the previous epoch's errors.
fn roles_for_epoch(cfg: &TrainConfig, state: &TrainState) -> Result<RoleAssignment> {
    let e_dsr = state.e_dsr.unwrap_or(0.0);
    let e_de = state.e_de.unwrap_or(0.0);
    match cfg.distill.force_student {
        Some(student) => Ok(RoleAssignment::forced(student.other(), e_dsr, e_de)),
        None => match (state.e_dsr, state.e_de) {
            (Some(a), Some(b)) => select_roles(a, b),
            _ => Err(Error::Contract(
                "collaborative training needs the recovery errors of the previous epoch".into(),
            )),
        },
    }
}

struct StepTwoContext<'a> {
    cfg: &'a TrainConfig,
    models: Models,
    window: Arc<GaussianWindow>,
}

struct StepTwoOutcome {
    losses: BTreeMap<String, f64>,
    grads_student: BTreeMap<String, Tensor<f32>>,
    grads_sp: BTreeMap<String, Tensor<f32>>,
    grads_uncertainty: BTreeMap<String, Tensor<f32>>,
}

impl StepTwoContext<'_> {
    /// One forward/backward pass of the collaborative objective.
    fn pass(
        &self,
        state: &TrainState,
        roles: &RoleAssignment,
        b: &Batch,
        acc_dsr: &mut ErrorAccumulator,
        acc_de: &mut ErrorAccumulator,
    ) -> Result<StepTwoOutcome> {
        let cfg = self.cfg;
        let comp = cfg.components;
        let student_is_dsr = roles.student == Role::Dsr;
        let mut g = Graph::new();
        let pd = bind(&mut g, &state.dsr, student_is_dsr);
        let pe = bind(&mut g, &state.de, !student_is_dsr);
        let x = g.leaf(b.lr.clone(), false);
        let rgb = g.leaf(b.rgb.clone(), false);
        let hr = g.leaf(b.hr.clone(), false);
        let fd = self.models.dsr.forward(&mut g, &pd, x)?;
        let fe = self.models.de.forward(&mut g, &pe, rgb)?;
        acc_dsr.add(g.value(fd.final_output), &b.hr);
        acc_de.add(g.value(fe.final_output), &b.hr);

        let (student, teacher): (&FeatureStack<Var>, &FeatureStack<Var>) =
            if student_is_dsr { (&fd, &fe) } else { (&fe, &fd) };
        let task = if student_is_dsr {
            dsr_loss_var(&mut g, fd.final_output, hr)?
        } else {
            de_loss_var(&mut g, fe.final_output, hr, cfg.loss.lambda, &cfg.ssim, &self.window)?
        };
        let mut losses = BTreeMap::new();
        losses.insert("task".to_string(), value(&g, task));

        let mut distill = None;
        if comp.output_space {
            let l_o = output_space_loss_var(&mut g, &student.side_outputs, &teacher.side_outputs)?;
            losses.insert("output_space".to_string(), value(&g, l_o));
            let l_a = if comp.affinity_space {
                let l_a = affinity_space_loss_var(&mut g, &student.features, &teacher.features, cfg.distill.pool_size)?;
                losses.insert("affinity_space".to_string(), value(&g, l_a));
                Some(l_a)
            } else {
                None
            };
            distill = Some(distill_loss_var(&mut g, l_o, l_a, cfg.loss.gamma)?);
        } else if comp.affinity_space {
            let l_a = affinity_space_loss_var(&mut g, &student.features, &teacher.features, cfg.distill.pool_size)?;
            losses.insert("affinity_space".to_string(), value(&g, l_a));
            let scaled = g.weighted_sum(&[(l_a, cfg.loss.gamma)])?;
            distill = Some(scaled);
        }

        let mut structure = None;
        let mut bound_sp = None;
        let mut bound_unc = None;
        if comp.structure {
            let sp = state.sp.as_ref().expect("structure parameters initialized");
            let unc = state.uncertainty.as_ref().expect("uncertainty parameters initialized");
            let ps = bind(&mut g, sp, true);
            let pu = bind(&mut g, unc, true);
            let s_gt = g.leaf(b.structure.clone(), false);
            let u_sr = uncertainty_var(&mut g, &pu, UncertaintyConvs::SR, fd.final_output, hr)?;
            let u_de = uncertainty_var(&mut g, &pu, UncertaintyConvs::DE, fe.final_output, hr)?;
            let f_sr = *fd.features.last().expect("N ≥ 1");
            let f_de = *fe.features.last().expect("N ≥ 1");
            let fused = attention_fuse_var(&mut g, f_sr, f_de, u_sr, u_de)?;
            let s_pred = self.models.sp.forward(&mut g, &ps, fused)?;
            let l_s = structure_loss_var(&mut g, s_pred, s_gt)?;
            losses.insert("structure".to_string(), value(&g, l_s));
            structure = Some(l_s);
            bound_sp = Some(ps);
            bound_unc = Some(pu);
        }
        let total = total_student_loss_var(&mut g, task, structure, distill, &cfg.loss)?;
        losses.insert("total".to_string(), value(&g, total));
        if !losses.values().all(|v| v.is_finite()) {
            return Ok(StepTwoOutcome {
                losses,
                grads_student: BTreeMap::new(),
                grads_sp: BTreeMap::new(),
                grads_uncertainty: BTreeMap::new(),
            });
        }
        let mut grads = g.backward(total);
        let grads_student = take_grads(&mut grads, if student_is_dsr { &pd } else { &pe });
        let grads_sp = bound_sp.map(|p| take_grads(&mut grads, &p)).unwrap_or_default();
        let grads_uncertainty = bound_unc.map(|p| take_grads(&mut grads, &p)).unwrap_or_default();
        Ok(StepTwoOutcome {
            losses,
            grads_student,
            grads_sp,
            grads_uncertainty,
        })
    }
}

/// Plain task-loss training of the super-resolution network, used for the
/// second step when cross-task training is switched off.
fn dsr_only_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    models: &Models,
    data: &Dataset,
    epoch: usize,
    lr: f64,
    obs: &mut dyn TrainObserver,
) -> Result<(ErrorAccumulator, LossMeans)> {
    let mut acc = ErrorAccumulator::default();
    let mut means = LossMeans::default();
    for (bi, (idx, rot)) in data.epoch_plan(cfg.seed, epoch, cfg.schedule.batch_size).into_iter().enumerate() {
        let b = data.batch(&idx, &rot);
        let mut g = Graph::new();
        let p = bind(&mut g, &state.dsr, true);
        let x = g.leaf(b.lr, false);
        let hr = g.leaf(b.hr.clone(), false);
        let out = models.dsr.forward(&mut g, &p, x)?;
        let loss = dsr_loss_var(&mut g, out.final_output, hr)?;
        acc.add(g.value(out.final_output), &b.hr);
        let mut losses = BTreeMap::new();
        losses.insert("task".to_string(), value(&g, loss));
        losses.insert("total".to_string(), value(&g, loss));
        check_finite(epoch, bi, &losses)?;
        let mut grads = g.backward(loss);
        let gd = take_grads(&mut grads, &p);
        drop(g);
        optimizer_step(&mut state.dsr, &gd, &mut state.opt_dsr, lr, &cfg.optimizer)?;
        obs.on_step(&StepRecord {
            epoch,
            batch: bi,
            losses: losses.clone(),
        });
        means.add(&losses);
    }
    Ok((acc, means))
}

/// Collaborative training for epochs `state.epoch + 1 ..= max_epochs`: each
/// epoch the better network of the previous epoch teaches and stays frozen,
/// while the student, the structure network and the uncertainty
/// convolutions are updated.
pub fn run_step2(
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    obs: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    check_data(cfg, data)?;
    if state.epoch < cfg.schedule.step1_epochs {
        return Err(Error::Contract(format!(
            "collaborative training starts after epoch {}, state is at epoch {}",
            cfg.schedule.step1_epochs, state.epoch
        )));
    }
    let models = Models::new(cfg)?;
    let ctx = StepTwoContext {
        cfg,
        models,
        window: cfg.ssim.gaussian(),
    };
    if cfg.components.cross_task && cfg.components.structure {
        state.ensure_structure_params(cfg, &models)?;
    }
    while state.epoch < cfg.schedule.max_epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let s = &cfg.schedule;
        let lr = lr_at_epoch(epoch, s.initial_lr, s.lr_decay_factor, s.lr_decay_period);

        if !cfg.components.cross_task {
            let (acc, means) = dsr_only_epoch(&mut state, cfg, &models, data, epoch, lr, obs)?;
            state.epoch = epoch;
            state.e_dsr = acc.mean();
            state.e_de = None;
            let record = EpochRecord {
                epoch,
                phase: "step2".into(),
                lr,
                losses: means.means(),
                e_dsr: state.e_dsr,
                e_de: None,
                teacher: None,
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            obs.on_epoch(&record, &state)?;
            continue;
        }

        let roles = roles_for_epoch(cfg, &state)?;
        state.role_history.push(RoleRecord {
            epoch,
            e_dsr: roles.e_dsr,
            e_de: roles.e_de,
            teacher: roles.teacher,
        });
        let mut acc_dsr = ErrorAccumulator::default();
        let mut acc_de = ErrorAccumulator::default();
        let mut means = LossMeans::default();
        for (bi, (idx, rot)) in data.epoch_plan(cfg.seed, epoch, s.batch_size).into_iter().enumerate() {
            let b = data.batch(&idx, &rot);
            let out = ctx.pass(&state, &roles, &b, &mut acc_dsr, &mut acc_de)?;
            check_finite(epoch, bi, &out.losses)?;
            let (params, opt) = match roles.student {
                Role::Dsr => (&mut state.dsr, &mut state.opt_dsr),
                Role::De => (&mut state.de, &mut state.opt_de),
            };
            optimizer_step(params, &out.grads_student, opt, lr, &cfg.optimizer)?;
            if let Some(sp) = state.sp.as_mut() {
                optimizer_step(sp, &out.grads_sp, &mut state.opt_sp, lr, &cfg.optimizer)?;
            }
            if let Some(unc) = state.uncertainty.as_mut() {
                optimizer_step(unc, &out.grads_uncertainty, &mut state.opt_uncertainty, lr, &cfg.optimizer)?;
            }
            obs.on_step(&StepRecord {
                epoch,
                batch: bi,
                losses: out.losses.clone(),
            });
            means.add(&out.losses);
        }
        state.epoch = epoch;
        state.e_dsr = acc_dsr.mean();
        state.e_de = acc_de.mean();
        if let (RoleErrorSource::Validation, Some(v)) = (cfg.distill.role_errors, validation) {
            let (a, b) = score_networks(&models, &state, v, s.batch_size)?;
            state.e_dsr = Some(a);
            state.e_de = Some(b);
        }
        let record = EpochRecord {
            epoch,
            phase: "step2".into(),
            lr,
            losses: means.means(),
            e_dsr: state.e_dsr,
            e_de: state.e_de,
            teacher: Some(roles.teacher),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        obs.on_epoch(&record, &state)?;
    }
    Ok(state)
}

/// Both steps, continuing from whatever epoch `state` has reached.
pub fn train(
    state: TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    obs: &mut dyn TrainObserver,
) -> Result<TrainState> {
    let state = run_step1(state, cfg, data, validation, obs)?;
    run_step2(state, cfg, data, validation, obs)
}

/// Channel width of a super-resolution parameter set.
fn dsr_channels(params: &NetworkParams<f32>) -> Result<usize> {
    params
        .get("shallow.0.weight")
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Checkpoint("super-resolution parameters lack shallow.0.weight".into()))
}

/// Depth-only super-resolution with trained parameters.
pub fn infer(d_lr: &DepthMap, params: &NetworkParams<f32>, scale: Scale) -> Result<DepthMap> {
    if params.scale != scale {
        return Err(Error::InvalidArgument(format!(
            "parameters were trained for {}, {scale} was requested",
            params.scale
        )));
    }
    let net = DsrNet::new(params.stage_count, dsr_channels(params)?, scale);
    params.validate(&net.layers())?;
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let x = g.leaf(depth_tensor::<f32>(d_lr), false);
    let out = net.forward(&mut g, &p, x)?;
    tensor_to_depth(g.value(out.final_output), 0)
}
