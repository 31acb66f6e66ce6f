//! Two-stage training: supervised pretraining of the counting network on
//! source patches, then scale-aware adversarial adaption with alternating
//! discriminator and generator updates.
//!
//! Checkpoint layout (CKPT arrays):
//! - `cn.*` counting-network parameters, `d.*` discriminator parameters
//! - `optim.g.*`, `optim.d.*` Adam state (absent for SGD)
//! - `meta.stage` (1 or 2), `meta.step` (steps completed in that stage),
//!   `meta.backend_dilation`

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::config::TrainConfig;
use crate::dataset::Sample;
use crate::density::{self, SigmaMode};
use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::imageio::RoiMask;
use crate::kernels;
use crate::losses::{self, GeneratorTerms};
use crate::metrics::{self, EvalReport};
use crate::nets::{CountingNetConfig, ModelParams};
use crate::optim::{self, Optimizer};
use crate::pyramid::{self, PatchPyramid};
use crate::tape::{Tape, Var};

pub const GEN_PREFIX: &str = "cn.";
pub const DISC_PREFIX: &str = "d.";
pub const GEN_OPTIM_PREFIX: &str = "optim.g.";
pub const DISC_OPTIM_PREFIX: &str = "optim.d.";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: usize,
    pub l_dens: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_disc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_adv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_rank: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub mae: f64,
    pub mse: f64,
}

/// Receives log records as training proceeds.
pub trait LogSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()>;
}

impl LogSink for Vec<LogRecord> {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// JSON-lines log file, one object per step.
pub struct JsonlLog {
    path: PathBuf,
    file: fs::File,
}

impl JsonlLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::File::create(&path).map_err(|e| CodaError::io(&path, e))?;
        Ok(JsonlLog { path, file })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CodaError::io(&path, e))?;
        Ok(JsonlLog { path, file })
    }
}

impl LogSink for JsonlLog {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.file, "{line}").map_err(|e| CodaError::io(&self.path, e))
    }
}

/// Largest parameter change on the side that must stay frozen during each
/// half of one adaption step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlternationCheck {
    pub step: usize,
    /// Generator change caused by the discriminator update.
    pub generator_delta_in_d_step: f64,
    /// Discriminator change caused by the generator update.
    pub discriminator_delta_in_g_step: f64,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub alternation: Vec<AlternationCheck>,
}

/// Deterministic per-step randomness, independent of how many steps ran
/// before in this process.
fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(stage) << 56));
    rng.set_stream(step as u64);
    rng
}

fn check_finite(stage: &'static str, step: usize, named: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in named {
        if !v.is_finite() {
            return Err(CodaError::NonFinite {
                stage,
                step,
                quantity: format!("{name} = {v}"),
                dump: None,
            });
        }
    }
    Ok(())
}

/// Random patch of a random sample as a pyramid with the configured scales
/// (or just the patch when `full_pyramid` is false).
fn sample_pyramid(cfg: &TrainConfig, samples: &[Sample], rng: &mut ChaCha8Rng, full_pyramid: bool) -> Result<PatchPyramid> {
    let sample = &samples[rng.random_range(0..samples.len())];
    let img = &sample.image;
    let rect = pyramid::sample_rect(img.height(), img.width(), rng, cfg.patch_fraction);
    let scales = if full_pyramid { cfg.scales.clone() } else { vec![1.0] };
    pyramid::build_pyramid(img, rect, &scales, cfg.input_size, sample.annotation.as_ref())
}

fn stack_pyramids(pyrs: &[PatchPyramid]) -> Result<DenseGrid> {
    DenseGrid::stack(&pyrs.iter().map(|p| p.batch()).collect::<Result<Vec<_>>>()?)
}

fn stack_gt(pyrs: &[PatchPyramid], sigma: SigmaMode, stride: usize) -> Result<DenseGrid> {
    let maps = pyrs
        .iter()
        .map(|p| {
            p.gt_density(sigma, stride)?
                .ok_or_else(|| CodaError::invalid("train", "source sample without annotation"))
        })
        .collect::<Result<Vec<_>>>()?;
    DenseGrid::stack(&maps)
}

fn write_meta(ckpt: &mut Checkpoint, cfg: &TrainConfig, stage: u8, step: usize) {
    ckpt.insert("meta.stage", NamedArray::scalar(stage as f64));
    ckpt.insert("meta.step", NamedArray::scalar(step as f64));
    ckpt.insert(
        "meta.backend_dilation",
        NamedArray::scalar(cfg.counting_net.backend_dilation as f64),
    );
}

fn pretrain_checkpoint(cfg: &TrainConfig, params: &ModelParams, opt: &Optimizer, step: usize) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    write_meta(&mut ckpt, cfg, 1, step);
    params.write_to(&mut ckpt, GEN_PREFIX);
    opt.write_to(&mut ckpt, GEN_OPTIM_PREFIX, params);
    ckpt
}

/// Stage 1: minimize the density loss on random source patches.
pub fn pretrain(cfg: &TrainConfig, source: &[Sample], log: &mut dyn LogSink) -> Result<Checkpoint> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(CodaError::invalid("pretrain", "source dataset is empty"));
    }
    if source.iter().any(|s| s.annotation.is_none()) {
        return Err(CodaError::invalid("pretrain", "every source image needs an annotation"));
    }
    let net = &cfg.counting_net;
    let stride = net.output_stride();
    let mut params = net.init_params(cfg.seed)?;
    let mut opt = Optimizer::new(cfg.g_optimizer, &params);
    let lr = cfg.g_optimizer.lr();

    for step in 0..cfg.stage1_steps {
        let mut rng = step_rng(cfg.seed, 1, step);
        let pyrs = (0..cfg.batch_size)
            .map(|_| sample_pyramid(cfg, source, &mut rng, false))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(stack_pyramids(&pyrs)?);
        let gt = tape.constant(stack_gt(&pyrs, cfg.sigma, stride)?);
        let pred = net.forward(&mut tape, &bound, x)?;
        let loss = losses::density_loss(&mut tape, pred, gt)?;
        let l_dens = tape.scalar_value(loss);
        let grads = optim::collect_grads(&bound, &tape.backward(loss)?);
        if let Err(e) = check_finite("stage1", step, &[("L_dens", l_dens)]) {
            return Err(dump_state(cfg, e, || pretrain_checkpoint(cfg, &params, &opt, step)));
        }
        opt.step(&mut params, &grads, lr)?;
        if !params.all_finite() {
            let e = CodaError::NonFinite {
                stage: "stage1",
                step,
                quantity: "generator parameters".into(),
                dump: None,
            };
            return Err(dump_state(cfg, e, || pretrain_checkpoint(cfg, &params, &opt, step)));
        }
        log.record(&LogRecord {
            stage: 1,
            step,
            l_dens,
            l_disc: None,
            l_adv: None,
            l_rank: None,
            lr_d: None,
            eval: None,
        })?;
    }
    Ok(pretrain_checkpoint(cfg, &params, &opt, cfg.stage1_steps))
}

/// Attach a state dump to a non-finite error when `dump_dir` is configured.
fn dump_state(cfg: &TrainConfig, err: CodaError, state: impl FnOnce() -> Checkpoint) -> CodaError {
    let CodaError::NonFinite { stage, step, quantity, .. } = err else { return err };
    let Some(dir) = &cfg.dump_dir else {
        return CodaError::NonFinite { stage, step, quantity, dump: None };
    };
    let dir = PathBuf::from(dir);
    let path = dir.join(format!("nonfinite_{stage}_step{step}.ckpt"));
    let written = fs::create_dir_all(&dir)
        .map_err(|e| CodaError::io(&dir, e))
        .and_then(|_| state().save(&path))
        .and_then(|_| {
            let info = serde_json::json!({"stage": stage, "step": step, "quantity": quantity});
            let p = dir.join(format!("nonfinite_{stage}_step{step}.json"));
            fs::write(&p, info.to_string()).map_err(|e| CodaError::io(&p, e))
        });
    CodaError::NonFinite {
        stage,
        step,
        quantity,
        dump: written.ok().map(|_| path),
    }
}

/// Everything stage 2 carries between steps.
struct AdaptState {
    gen: ModelParams,
    disc: ModelParams,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
    step: usize,
}

impl AdaptState {
    fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        write_meta(&mut ckpt, cfg, 2, self.step);
        self.gen.write_to(&mut ckpt, GEN_PREFIX);
        self.disc.write_to(&mut ckpt, DISC_PREFIX);
        self.gen_opt.write_to(&mut ckpt, GEN_OPTIM_PREFIX, &self.gen);
        self.disc_opt.write_to(&mut ckpt, DISC_OPTIM_PREFIX, &self.disc);
        ckpt
    }

    fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let gen = ModelParams::read_from(ckpt, GEN_PREFIX)?;
        cfg.counting_net.check_params(&gen)?;
        if ckpt.scalar("meta.stage") == Some(2.0) {
            let disc = ModelParams::read_from(ckpt, DISC_PREFIX)?;
            cfg.discriminator.check_params(&disc)?;
            Ok(AdaptState {
                gen_opt: Optimizer::read_from(cfg.g_optimizer, ckpt, GEN_OPTIM_PREFIX, &gen)?,
                disc_opt: Optimizer::read_from(cfg.d_optimizer, ckpt, DISC_OPTIM_PREFIX, &disc)?,
                step: ckpt.scalar("meta.step").unwrap_or(0.0) as usize,
                gen,
                disc,
            })
        } else {
            let disc = cfg.discriminator.init_params(cfg.seed.wrapping_add(1))?;
            Ok(AdaptState {
                gen_opt: Optimizer::new(cfg.g_optimizer, &gen),
                disc_opt: Optimizer::new(cfg.d_optimizer, &disc),
                step: 0,
                gen,
                disc,
            })
        }
    }
}

/// Upsample density maps to the network input size for the discriminator.
fn disc_input(tape: &mut Tape, density: Var, input_size: (usize, usize)) -> Result<Var> {
    tape.resize_bilinear(density, input_size.0, input_size.1)
}

/// Stage 2. `target` images carry no annotations; `eval_set`, when given,
/// is only evaluated every `eval_every` steps and never trained on.
/// Resumes from a stage-2 checkpoint at its recorded step.
pub fn adapt(
    cfg: &TrainConfig,
    pretrained: &Checkpoint,
    source: &[Sample],
    target: &[DenseGrid],
    eval_set: Option<&[Sample]>,
    log: &mut dyn LogSink,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(CodaError::invalid("adapt", "source and target sets must be non-empty"));
    }
    if source.iter().any(|s| s.annotation.is_none()) {
        return Err(CodaError::invalid("adapt", "every source image needs an annotation"));
    }
    let targets: Vec<Sample> = target
        .iter()
        .map(|img| Sample {
            image: img.clone(),
            annotation: None,
        })
        .collect();
    let mut state = AdaptState::from_checkpoint(cfg, pretrained)?;
    let mut alternation = Vec::new();
    while state.step < cfg.stage2_steps {
        let (rec, check) = match adapt_step(cfg, &mut state, source, &targets) {
            Ok(r) => r,
            Err(e) => return Err(dump_state(cfg, e, || state.checkpoint(cfg))),
        };
        alternation.push(check);
        let mut rec = rec;
        state.step += 1;
        if let Some(eval) = eval_set {
            if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
                let model = CountingModel::new(cfg.counting_net.clone(), state.gen.clone());
                let report = evaluate_dataset(&model, eval, cfg.sigma, &[0], false, "eval")?;
                rec.eval = Some(EvalSnapshot {
                    mae: report.mae,
                    mse: report.mse,
                });
            }
        }
        log.record(&rec)?;
    }
    Ok(AdaptOutcome {
        checkpoint: state.checkpoint(cfg),
        alternation,
    })
}

fn adapt_step(
    cfg: &TrainConfig,
    state: &mut AdaptState,
    source: &[Sample],
    targets: &[Sample],
) -> Result<(LogRecord, AlternationCheck)> {
    let step = state.step;
    let net = &cfg.counting_net;
    let disc = &cfg.discriminator;
    let stride = net.output_stride();
    let levels = cfg.pyramid_scales().len();
    let w = cfg.weights;

    // (a) sample pyramids
    let mut rng = step_rng(cfg.seed, 2, step);
    let src_pyrs = (0..cfg.batch_size)
        .map(|_| sample_pyramid(cfg, source, &mut rng, true))
        .collect::<Result<Vec<_>>>()?;
    let tgt_pyrs = (0..cfg.batch_size)
        .map(|_| sample_pyramid(cfg, targets, &mut rng, true))
        .collect::<Result<Vec<_>>>()?;

    // (b) generator forward on every crop of both pyramids
    let mut g_tape = Tape::new();
    let g_bound = state.gen.bind(&mut g_tape, true);
    let src_x = g_tape.constant(stack_pyramids(&src_pyrs)?);
    let tgt_x = g_tape.constant(stack_pyramids(&tgt_pyrs)?);
    let src_pred = net.forward(&mut g_tape, &g_bound, src_x)?;
    let tgt_pred = net.forward(&mut g_tape, &g_bound, tgt_x)?;

    // (c) discriminator update on detached generator outputs
    let gen_before = state.gen.clone();
    let lr_d = optim::poly_decay(cfg.d_optimizer.lr(), step, cfg.stage2_steps, cfg.lr_decay_power);
    let l_disc = {
        let mut d_tape = Tape::new();
        let d_bound = state.disc.bind(&mut d_tape, true);
        let src_det = d_tape.constant(g_tape.value(src_pred).clone());
        let tgt_det = d_tape.constant(g_tape.value(tgt_pred).clone());
        let src_in = disc_input(&mut d_tape, src_det, cfg.input_size)?;
        let tgt_in = disc_input(&mut d_tape, tgt_det, cfg.input_size)?;
        let src_logits = disc.forward(&mut d_tape, &d_bound, src_in)?;
        let tgt_logits = disc.forward(&mut d_tape, &d_bound, tgt_in)?;
        let l_disc = losses::discriminator_loss(&mut d_tape, &[src_logits], &[tgt_logits])?;
        let weighted = d_tape.scale(l_disc, w.lambda_disc);
        let value = d_tape.scalar_value(l_disc);
        check_finite("stage2", step, &[("L_disc", value)])?;
        let grads = optim::collect_grads(&d_bound, &d_tape.backward(weighted)?);
        state.disc_opt.step(&mut state.disc, &grads, lr_d)?;
        value
    };
    let generator_delta_in_d_step = state.gen.max_abs_diff(&gen_before);

    // (d) generator update with the discriminator frozen
    let disc_before = state.disc.clone();
    let d_frozen = state.disc.bind(&mut g_tape, false);
    let tgt_in = disc_input(&mut g_tape, tgt_pred, cfg.input_size)?;
    let tgt_logits = disc.forward(&mut g_tape, &d_frozen, tgt_in)?;
    let l_adv = losses::adversarial_loss(&mut g_tape, &[tgt_logits])?;

    let gt = g_tape.constant(stack_gt(&src_pyrs, cfg.sigma, stride)?);
    let l_dens = losses::density_loss(&mut g_tape, src_pred, gt)?;

    let mut rank_terms = [None, None];
    for (slot, pred) in rank_terms.iter_mut().zip([src_pred, tgt_pred]) {
        let counts = losses::predicted_counts(&mut g_tape, pred)?;
        let mut total = g_tape.constant(DenseGrid::scalar(0.0));
        for group in counts.chunks(levels) {
            let r = losses::ranking_loss(&mut g_tape, group, w.epsilon)?;
            total = g_tape.add(total, r)?;
        }
        *slot = Some(total);
    }
    let [Some(rank_source), Some(rank_target)] = rank_terms else { unreachable!() };
    let terms = GeneratorTerms {
        density: l_dens,
        adversarial: l_adv,
        rank_source,
        rank_target,
    };
    let total = losses::combined_generator_loss(&mut g_tape, terms, &w)?;
    let values = [
        ("L_dens", g_tape.scalar_value(l_dens)),
        ("L_adv", g_tape.scalar_value(l_adv)),
        ("L_rank", g_tape.scalar_value(rank_source) + g_tape.scalar_value(rank_target)),
    ];
    check_finite("stage2", step, &values)?;
    let grads = optim::collect_grads(&g_bound, &g_tape.backward(total)?);
    state.gen_opt.step(&mut state.gen, &grads, cfg.g_optimizer.lr())?;
    let discriminator_delta_in_g_step = state.disc.max_abs_diff(&disc_before);

    if !state.gen.all_finite() || !state.disc.all_finite() {
        return Err(CodaError::NonFinite {
            stage: "stage2",
            step,
            quantity: "parameters".into(),
            dump: None,
        });
    }
    let rec = LogRecord {
        stage: 2,
        step,
        l_dens: values[0].1,
        l_disc: Some(l_disc),
        l_adv: Some(values[1].1),
        l_rank: Some(values[2].1),
        lr_d: Some(lr_d),
        eval: None,
    };
    let check = AlternationCheck {
        step,
        generator_delta_in_d_step,
        discriminator_delta_in_g_step,
    };
    Ok((rec, check))
}

/// Anything that maps a sample to a density map at `1/stride` resolution
/// (`⌈H/stride⌉ × ⌈W/stride⌉`).
pub trait DensityModel {
    fn stride(&self) -> usize;
    fn density(&self, sample: &Sample) -> Result<DenseGrid>;
}

/// A trained counting network.
#[derive(Clone, Debug)]
pub struct CountingModel {
    pub config: CountingNetConfig,
    pub params: ModelParams,
}

impl CountingModel {
    pub fn new(config: CountingNetConfig, params: ModelParams) -> Self {
        CountingModel { config, params }
    }

    /// Rebuild the architecture from the parameter names and shapes stored
    /// in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ModelParams::read_from(ckpt, GEN_PREFIX)?;
        let dilation = ckpt.scalar("meta.backend_dilation").unwrap_or(4.0) as usize;
        let config = infer_counting_config(&params, dilation)?;
        config.check_params(&params)?;
        Ok(CountingModel { config, params })
    }

    /// Density and count for one image, with reflection padding to the
    /// output stride. Output cells are weighted by the fraction of their
    /// input block that lies inside the image (and inside `roi`), so padding
    /// carries no mass. The count is the sum of the returned map.
    pub fn predict(&self, image: &DenseGrid, roi: Option<&RoiMask>) -> Result<(DenseGrid, f64)> {
        let stride = self.config.output_stride();
        let padded = reflect_pad(image, stride)?;
        let raw = self.config.predict(&self.params, &padded)?;
        let weights = coverage_weights(image.height(), image.width(), stride, roi)?;
        let density = DenseGrid::new(
            raw.shape(),
            raw.data().iter().zip(weights.data()).map(|(d, w)| d * w).collect(),
        )?;
        let count = metrics::map_count(&density, None);
        Ok((density, count))
    }
}

impl DensityModel for CountingModel {
    fn stride(&self) -> usize {
        self.config.output_stride()
    }

    fn density(&self, sample: &Sample) -> Result<DenseGrid> {
        Ok(self.predict(&sample.image, None)?.0)
    }
}

/// Returns the ground-truth map of each sample; every metric is zero.
#[derive(Clone, Copy, Debug)]
pub struct OracleModel {
    pub sigma: SigmaMode,
    pub stride: usize,
}

impl DensityModel for OracleModel {
    fn stride(&self) -> usize {
        self.stride
    }

    fn density(&self, sample: &Sample) -> Result<DenseGrid> {
        let ann = sample
            .annotation
            .as_ref()
            .ok_or_else(|| CodaError::invalid("oracle", "sample has no annotation"))?;
        Ok(density::generate_density(ann, self.sigma, self.stride)?.grid)
    }
}

fn infer_counting_config(params: &ModelParams, dilation: usize) -> Result<CountingNetConfig> {
    let bad = |d: &str| CodaError::Format {
        format: "CKPT",
        detail: format!("cannot infer counting network layout: {d}"),
    };
    let mut front: Vec<Vec<usize>> = vec![];
    let mut in_channels = None;
    for (name, grid) in params.iter() {
        let Some(rest) = name.strip_prefix("front").and_then(|r| r.strip_suffix(".weight")) else { continue };
        let (b, i) = rest.split_once('_').ok_or_else(|| bad(name))?;
        let (b, i): (usize, usize) = (b.parse().map_err(|_| bad(name))?, i.parse().map_err(|_| bad(name))?);
        if b == 0 && i == 0 {
            in_channels = Some(grid.shape()[1]);
        }
        if front.len() <= b {
            front.resize(b + 1, vec![]);
        }
        if front[b].len() != i {
            return Err(bad("front layers out of order"));
        }
        front[b].push(grid.shape()[0]);
    }
    let backend = params.get("back0.weight").ok_or_else(|| bad("no back0 layer"))?;
    Ok(CountingNetConfig {
        in_channels: in_channels.ok_or_else(|| bad("no front0_0 layer"))?,
        front_channels: front,
        backend_channels: backend.shape()[0],
        backend_dilation: dilation,
    })
}

/// Pad bottom and right by reflection so both sides are multiples of `multiple`.
pub fn reflect_pad(image: &DenseGrid, multiple: usize) -> Result<DenseGrid> {
    let [n, c, h, w] = image.shape();
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let reflect = |i: usize, len: usize| -> usize {
        if i < len {
            i
        } else if len == 1 {
            0
        } else {
            let r = 2 * (len - 1) as isize - i as isize;
            r.max(0) as usize
        }
    };
    let mut data = Vec::with_capacity(n * c * ph * pw);
    for plane in image.data().chunks_exact(h * w) {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                data.push(plane[sy * w + reflect(x, w)]);
            }
        }
    }
    DenseGrid::new([n, c, ph, pw], data)
}

/// Per output cell, the fraction of its `stride × stride` input block that is
/// inside the original image and the ROI.
fn coverage_weights(h: usize, w: usize, stride: usize, roi: Option<&RoiMask>) -> Result<DenseGrid> {
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    let mut inside = DenseGrid::zeros([1, 1, ph, pw]);
    if let Some(m) = roi {
        if (m.height(), m.width()) != (h, w) {
            return Err(CodaError::shape(
                "predict",
                format!("ROI {}×{} vs image {h}×{w}", m.height(), m.width()),
            ));
        }
    }
    for y in 0..h {
        for x in 0..w {
            let v = roi.map_or(1.0, |m| if m.contains(y, x) { 1.0 } else { 0.0 });
            inside.set(0, 0, y, x, v);
        }
    }
    let summed = kernels::block_sum_forward(&inside, stride)?;
    Ok(summed.map(|v| v / (stride * stride) as f64))
}

/// Evaluate `model` on annotated samples. With `use_roi`, each sample's ROI
/// (downsampled to the density resolution) weights both maps.
pub fn evaluate_dataset(
    model: &dyn DensityModel,
    samples: &[Sample],
    sigma: SigmaMode,
    levels: &[u32],
    use_roi: bool,
    name: &str,
) -> Result<EvalReport> {
    let stride = model.stride();
    let mut maps = Vec::with_capacity(samples.len());
    for s in samples {
        let ann = s
            .annotation
            .as_ref()
            .ok_or_else(|| CodaError::invalid("evaluate", "evaluation samples need annotations"))?;
        let gt = density::generate_density(ann, sigma, stride)?.grid;
        let pred = model.density(s)?;
        let mask = match (&ann.roi, use_roi) {
            (Some(roi), true) => Some(coverage_weights(ann.height, ann.width, stride, Some(&roi.mask))?),
            _ => None,
        };
        maps.push((pred, gt, mask));
    }
    EvalReport::from_maps(name, &maps, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::DiscriminatorConfig;
    use crate::synth::{generate_domain, preset_shift_pair};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            input_size: (32, 32),
            patch_fraction: 1.0,
            scales: vec![0.5],
            stage1_steps: 3,
            stage2_steps: 3,
            counting_net: CountingNetConfig {
                in_channels: 1,
                front_channels: vec![vec![4], vec![4]],
                backend_channels: 4,
                backend_dilation: 4,
            },
            discriminator: DiscriminatorConfig::with_width_divisor(32),
            g_optimizer: crate::optim::OptimizerConfig::adam(1e-3),
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> (Vec<Sample>, Vec<DenseGrid>) {
        let (mut s, mut t) = preset_shift_pair();
        s.image_size = (32, 32);
        t.image_size = (32, 32);
        let src = generate_domain(&s, n).unwrap().into_iter().map(Sample::from).collect();
        let tgt = generate_domain(&t, n).unwrap().into_iter().map(|x| x.image).collect();
        (src, tgt)
    }

    #[test]
    fn zero_pretrain_steps_returns_initialization() {
        let mut cfg = tiny_config();
        cfg.stage1_steps = 0;
        let (src, _) = tiny_data(1);
        let ckpt = pretrain(&cfg, &src, &mut Vec::new()).unwrap();
        let mut init = Checkpoint::default();
        cfg.counting_net.init_params(cfg.seed).unwrap().write_to(&mut init, GEN_PREFIX);
        for (name, arr) in init.arrays.iter() {
            assert_eq!(ckpt.get(name), Some(arr), "{name}");
        }
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        assert!(pretrain(&tiny_config(), &[], &mut Vec::new()).is_err());
    }

    #[test]
    fn adapt_logs_and_resumes_idempotently() {
        let cfg = tiny_config();
        let (src, tgt) = tiny_data(2);
        let pre = pretrain(&cfg, &src, &mut Vec::new()).unwrap();
        let mut log = Vec::new();
        let out = adapt(&cfg, &pre, &src, &tgt, None, &mut log).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.l_disc.is_some() && r.lr_d.is_some()));
        let again = adapt(&cfg, &out.checkpoint, &src, &tgt, None, &mut Vec::new()).unwrap();
        assert_eq!(again.checkpoint.to_bytes(), out.checkpoint.to_bytes());
        assert!(again.alternation.is_empty());
    }

    #[test]
    fn adapt_rejects_checkpoint_without_generator() {
        let cfg = tiny_config();
        let (src, tgt) = tiny_data(1);
        let err = adapt(&cfg, &Checkpoint::default(), &src, &tgt, None, &mut Vec::new());
        assert!(err.is_err());
    }

    #[test]
    fn reflect_pad_examples() {
        let g = DenseGrid::from_2d(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&g, 4).unwrap();
        assert_eq!(p.shape(), [1, 1, 4, 4]);
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[8..12], &[1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn coverage_weights_fraction_inside() {
        let w = coverage_weights(6, 4, 4, None).unwrap();
        assert_eq!(w.shape(), [1, 1, 2, 1]);
        assert_eq!(w.data(), &[1.0, 0.5]);
    }

    #[test]
    fn architecture_inferred_from_checkpoint() {
        let cfg = tiny_config();
        let (src, _) = tiny_data(1);
        let ckpt = pretrain(&cfg, &src, &mut Vec::new()).unwrap();
        let model = CountingModel::from_checkpoint(&ckpt).unwrap();
        assert_eq!(model.config, cfg.counting_net);
    }
}
