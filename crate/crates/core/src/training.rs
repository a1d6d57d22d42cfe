//! Optimization loop, evaluation, inference and the ablation study.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::field::{AffineParams, FieldKind, VectorField};
use crate::graph::{Gradients, Graph};
use crate::losses::{loss_graph, LossBreakdown, LossWeights};
use crate::metrics::{evaluate_stage, summarize, write_eval_csv, write_stage_table, PairEval, Stage, StageSummary};
use crate::networks::{update_running_stats, AblationFlags, Ctx, Model, NetConfig};
use crate::params::ParamStore;
use crate::synth::{generate_pair, pair_seed, SynthConfig, SyntheticPair};
use crate::tensor::Tensor;
use crate::volume::{normalize_intensity, save_volume, SegMask, Volume};

/// Stream offsets for seeds derived from the run seed.
const MODEL_STREAM: u64 = u64::MAX;
const SAMPLER_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub network: NetConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Synthetic training pairs, drawn i.i.d. with replacement each step.
    pub train_pairs: usize,
    /// Held-out pairs evaluated after training.
    pub eval_pairs: usize,
    pub use_masks: bool,
    /// Checkpoint interval in steps; the last step is always saved. 0 saves
    /// only the last step.
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetConfig::default(),
            batch_size: 8,
            learning_rate: 1e-4,
            max_steps: 2000,
            seed: 7,
            train_pairs: 200,
            eval_pairs: 20,
            use_masks: true,
            checkpoint_every: 500,
            loss: LossWeights::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.network.problems();
        p.extend(self.loss.problems());
        p.extend(self.synth.problems());
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_steps > 0 && self.train_pairs == 0 {
            p.push("train_pairs must be at least 1 when max_steps > 0".into());
        }
        if self.network.dims.min_axis() < 8 {
            p.push(format!("dims must be at least 8 per axis, got {}", self.network.dims));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }

    pub fn model_seed(&self) -> u64 {
        pair_seed(self.seed, MODEL_STREAM)
    }

    /// Seed of training pair `i`; evaluation pairs follow the training ones.
    pub fn pair_seed(&self, i: usize) -> u64 {
        pair_seed(self.seed, i as u64)
    }

    pub fn eval_pair_seed(&self, i: usize) -> u64 {
        self.pair_seed(self.train_pairs + i)
    }
}

/// Adam with bias correction; moments follow the store's trainable order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = store.trainable_ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &mut Gradients<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.learning_rate / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let eps = self.eps as f32;
        let ids: Vec<_> = store.trainable_ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.take_param(id) else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Network-ready copies of a pair: intensities rescaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub id: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_mask: SegMask,
    pub moving_mask: SegMask,
}

impl PreparedPair {
    pub fn new(id: impl Into<String>, fixed: &Volume, moving: &Volume, fixed_mask: SegMask, moving_mask: SegMask) -> Self {
        Self {
            id: id.into(),
            fixed: normalize_intensity(fixed),
            moving: normalize_intensity(moving),
            fixed_mask,
            moving_mask,
        }
    }

    pub fn from_synthetic(id: impl Into<String>, p: &SyntheticPair) -> Self {
        Self::new(id, &p.fixed, &p.moving, p.fixed_mask.clone(), p.moving_mask.clone())
    }
}

fn stack(vols: &[&[f32]], dims: crate::volume::Dims) -> Tensor<f32> {
    let mut data = Vec::with_capacity(vols.len() * dims.len());
    for v in vols {
        data.extend_from_slice(v);
    }
    Tensor::from_vec(&dims.shape(vols.len(), 1), data).expect("volume sizes match dims")
}

/// Outputs of a single-pair forward pass in evaluation mode.
#[derive(Clone, Debug)]
pub struct Registration {
    pub affine: AffineParams,
    pub u_affine: VectorField,
    pub m_a: Volume,
    pub velocity: VectorField,
    pub phi: VectorField,
    pub m_d: Volume,
}

/// Registers `moving` to `fixed` (both already normalized).
pub fn infer(model: &Model, store: &ParamStore<f32>, fixed: &Volume, moving: &Volume) -> Result<Registration> {
    let dims = model.config.dims;
    for v in [fixed, moving] {
        if v.dims() != dims {
            return Err(Error::DimMismatch(format!("input {} vs network {}", v.dims(), dims)));
        }
    }
    let g = Graph::<f32>::new();
    let ctx = Ctx::new(&g, store, false);
    let f = g.constant(stack(&[fixed.data()], dims));
    let m = g.constant(stack(&[moving.data()], dims));
    let out = model.forward(&ctx, f, m);
    let field = |v, kind| VectorField::new(dims, kind, g.value(v).data().to_vec());
    let vol = |v| Volume::new(dims, fixed.spacing(), g.value(v).data().to_vec());
    let affine: Vec<f64> = g.value(out.affine).data().iter().map(|&x| x as f64).collect();
    Ok(Registration {
        affine: AffineParams::from_slice(&affine)?,
        u_affine: field(out.u_affine, FieldKind::Displacement)?,
        m_a: vol(out.m_a)?,
        velocity: field(out.v, FieldKind::Velocity)?,
        phi: field(out.phi, FieldKind::Displacement)?,
        m_d: vol(out.m_d)?,
    })
}

/// Reports at `stages` for each pair.
pub fn evaluate_pairs(model: &Model, store: &ParamStore<f32>, pairs: &[PreparedPair], stages: &[Stage]) -> Result<Vec<PairEval>> {
    let needs_model = stages.iter().any(|s| *s != Stage::Initial);
    pairs
        .iter()
        .map(|p| {
            let reg = if needs_model {
                Some(infer(model, store, &p.fixed, &p.moving)?)
            } else {
                None
            };
            let reports = stages
                .iter()
                .map(|&stage| {
                    let chain: Vec<&VectorField> = match (&reg, stage) {
                        (_, Stage::Initial) => vec![],
                        (Some(r), Stage::Affine) => vec![&r.u_affine],
                        (Some(r), Stage::Final) => vec![&r.u_affine, &r.phi],
                        (None, _) => unreachable!(),
                    };
                    evaluate_stage(&p.fixed_mask, &p.moving_mask, &chain, stage)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PairEval {
                pair_id: p.id.clone(),
                reports,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub label: String,
    pub config: TrainConfig,
    pub completed: bool,
    pub steps: u64,
    /// Paths relative to the run directory.
    pub loss_log: String,
    pub eval_csv: Option<String>,
    pub checkpoints: Vec<String>,
    pub final_loss: Option<LossBreakdown>,
    pub summary: Vec<StageSummary>,
    /// Front-end configuration that launched the run, echoed verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation: Option<serde_json::Value>,
}

pub const RUN_FILE: &str = "run.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const LOSS_CSV_HEADER: [&str; 7] = ["step", "l_a", "l_d", "l_smooth", "l_a_seg", "l_d_seg", "total"];

fn synth_pairs(cfg: &TrainConfig, seeds: impl Iterator<Item = (String, u64)>) -> Result<Vec<PreparedPair>> {
    seeds
        .map(|(id, s)| Ok(PreparedPair::from_synthetic(id, &generate_pair(s, cfg.network.dims, &cfg.synth)?)))
        .collect()
}

pub fn training_pairs(cfg: &TrainConfig) -> Result<Vec<PreparedPair>> {
    synth_pairs(cfg, (0..cfg.train_pairs).map(|i| (format!("train_{i:04}"), cfg.pair_seed(i))))
}

pub fn held_out_pairs(cfg: &TrainConfig) -> Result<Vec<PreparedPair>> {
    synth_pairs(cfg, (0..cfg.eval_pairs).map(|i| (format!("eval_{i:04}"), cfg.eval_pair_seed(i))))
}

/// One optimization step on a batch; returns the loss terms.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    cfg: &TrainConfig,
    batch: &[&PreparedPair],
    step: u64,
) -> Result<LossBreakdown> {
    let dims = cfg.network.dims;
    let col = |f: fn(&PreparedPair) -> Vec<f32>| -> Tensor<f32> {
        let vs: Vec<Vec<f32>> = batch.iter().map(|p| f(p)).collect();
        let refs: Vec<&[f32]> = vs.iter().map(|v| v.as_slice()).collect();
        stack(&refs, dims)
    };
    let (mut grads, breakdown, stats) = {
        let g = Graph::<f32>::new();
        let ctx = Ctx::new(&g, store, true);
        let f = g.constant(col(|p| p.fixed.data().to_vec()));
        let m = g.constant(col(|p| p.moving.data().to_vec()));
        let seg = cfg.use_masks.then(|| {
            (
                g.constant(col(|p| p.fixed_mask.as_f32())),
                g.constant(col(|p| p.moving_mask.as_f32())),
            )
        });
        let out = model.forward(&ctx, f, m);
        let losses = loss_graph(&g, &cfg.loss, f, &out, seg);
        let breakdown = losses.breakdown(&g, &cfg.loss).map_err(|e| match e {
            Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, step: Some(step) },
            other => other,
        })?;
        let grads = g.backward(losses.total);
        (grads, breakdown, ctx.take_stats())
    };
    adam.step(store, &mut grads);
    update_running_stats(store, &stats, cfg.network.bn_momentum);
    if let Some(name) = store.first_non_finite() {
        return Err(Error::NonFiniteParameter {
            name: name.to_string(),
            step,
        });
    }
    Ok(breakdown)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_run(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path,
        message: e.to_string(),
    })
}

/// Trains from scratch into `out_dir` (loss log, checkpoints, evaluation
/// and `run.json`).
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<RunManifest> {
    train_with(cfg, out_dir, None)
}

/// [`train`], recording `invocation` in `run.json`.
pub fn train_with(cfg: &TrainConfig, out_dir: &Path, invocation: Option<serde_json::Value>) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let label = cfg.network.flags.label();
    let (model, mut store) = Model::init::<f32>(&cfg.network, cfg.model_seed())?;
    let mut adam = Adam::new(&store, cfg.learning_rate);
    info!(
        "{label}: {} trainable parameters, {} steps of batch {}",
        store.num_trainable(),
        cfg.max_steps,
        cfg.batch_size
    );

    let train_set = if cfg.max_steps > 0 { training_pairs(cfg)? } else { Vec::new() };
    let loss_path = out_dir.join(LOSS_FILE);
    let mut log = csv::Writer::from_path(&loss_path)?;
    log.write_record(LOSS_CSV_HEADER)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, SAMPLER_STREAM));
    let mut checkpoints = Vec::new();
    let mut last = None;
    for step in 1..=cfg.max_steps {
        let batch: Vec<&PreparedPair> = (0..cfg.batch_size)
            .map(|_| &train_set[sampler.random_range(0..train_set.len())])
            .collect();
        let b = train_step(&model, &mut store, &mut adam, cfg, &batch, step)?;
        let mut row = vec![step.to_string()];
        row.extend(
            [b.l_a, b.l_d, b.l_smooth, b.l_a_seg, b.l_d_seg, b.total]
                .iter()
                .map(|v| v.to_string()),
        );
        log.write_record(&row)?;
        last = Some(b);
        if step % 50 == 0 || step == 1 {
            info!("{label}: step {step} total {:.5} l_d {:.5}", b.total, b.l_d);
        }
        let due = (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.max_steps;
        if due {
            log.flush().map_err(|e| Error::io(&loss_path, e))?;
            let name = format!("ckpt_{step}");
            Checkpoint {
                step,
                config: cfg.clone(),
                params: store.clone(),
                optimizer: Some(adam.clone()),
            }
            .save(out_dir.join(&name))?;
            checkpoints.push(name);
        }
    }
    log.flush().map_err(|e| Error::io(&loss_path, e))?;
    drop(log);

    let stages: &[Stage] = if cfg.max_steps == 0 { &[Stage::Initial] } else { &Stage::ALL };
    let eval_set = held_out_pairs(cfg)?;
    let pairs = evaluate_pairs(&model, &store, &eval_set, stages)?;
    write_eval_csv(out_dir.join(EVAL_FILE), &pairs)?;
    let manifest = RunManifest {
        label,
        config: cfg.clone(),
        completed: true,
        steps: cfg.max_steps,
        loss_log: LOSS_FILE.into(),
        eval_csv: Some(EVAL_FILE.into()),
        checkpoints,
        final_loss: last,
        summary: summarize(&pairs),
        invocation,
    };
    write_json(&out_dir.join(RUN_FILE), &manifest)?;
    Ok(manifest)
}

/// Directory name of an ablation variant.
pub fn variant_slug(flags: AblationFlags) -> &'static str {
    match (flags.use_sam, flags.use_cam, flags.use_gfm) {
        (false, false, _) => "base",
        (true, false, _) => "sam",
        (false, true, _) => "cam",
        (true, true, true) => "full",
        (true, true, false) => "sam_cam",
    }
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// Trains the four variants on identical data and seeds into
/// `out_dir/<variant>` and writes the comparison table. A variant whose
/// directory already holds a completed run of the same configuration is
/// reused.
pub fn run_ablation(base: &TrainConfig, out_dir: &Path) -> Result<Vec<RunManifest>> {
    run_ablation_with(base, out_dir, None)
}

/// [`run_ablation`], recording `invocation` in every fresh run.
pub fn run_ablation_with(base: &TrainConfig, out_dir: &Path, invocation: Option<serde_json::Value>) -> Result<Vec<RunManifest>> {
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs = Vec::new();
    for flags in AblationFlags::ablation_variants() {
        let mut cfg = base.clone();
        cfg.network.flags = flags;
        let dir = out_dir.join(variant_slug(flags));
        let reuse = read_run(&dir).ok().filter(|r| r.completed && r.config == cfg);
        let run = match reuse {
            Some(r) => {
                info!("{}: reusing completed run in {}", r.label, dir.display());
                r
            }
            None => train_with(&cfg, &dir, invocation.clone())?,
        };
        runs.push(run);
    }
    let rows: Vec<(String, Vec<StageSummary>)> = runs.iter().map(|r| (r.label.clone(), r.summary.clone())).collect();
    write_stage_table(out_dir.join(ABLATION_FILE), &rows)?;
    Ok(runs)
}

/// Files written by [`register`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterOutput {
    pub affine: AffineParams,
    pub files: Vec<PathBuf>,
    pub reports: Vec<crate::metrics::EvalReport>,
}

/// Registers one pair with a stored model and writes `m_a`, `m_d`, `phi`,
/// `v`, the affine parameters and, when masks are given, the stage reports.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    masks: Option<(&SegMask, &SegMask)>,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<RegisterOutput> {
    let (model, ckpt) = Checkpoint::load(checkpoint)?;
    let f = normalize_intensity(fixed);
    let m = normalize_intensity(moving);
    let reg = infer(&model, &ckpt.params, &f, &m)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spacing = fixed.spacing();
    let mut files = Vec::new();
    let mut out = |name: &str| {
        let p = out_dir.join(name);
        files.push(p.clone());
        p
    };
    save_volume(&reg.m_a, out("m_a.volr"))?;
    save_volume(&reg.m_d, out("m_d.volr"))?;
    reg.phi.save(out("phi.volr"), spacing)?;
    reg.velocity.save(out("v.volr"), spacing)?;
    write_json(&out("affine.json"), &reg.affine)?;
    let mut reports = Vec::new();
    if let Some((fs_, ms)) = masks {
        reports.push(evaluate_stage(fs_, ms, &[], Stage::Initial)?);
        reports.push(evaluate_stage(fs_, ms, &[&reg.u_affine], Stage::Affine)?);
        reports.push(evaluate_stage(fs_, ms, &[&reg.u_affine, &reg.phi], Stage::Final)?);
        write_json(&out("report.json"), &reports)?;
    }
    Ok(RegisterOutput {
        affine: reg.affine,
        files,
        reports,
    })
}
