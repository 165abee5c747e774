//! Losses, optimization, and the two-phase training procedure.
//!
//! Phase 1 trains the K one-to-one streams and the many-to-one stream
//! independently (least-squares adversarial + L1 pixel objectives, one
//! discriminator update then one generator update per batch). Phase 2
//! trains the joint network and its discriminator while fine-tuning the
//! pre-fusion stream layers at a fraction of the joint learning rate;
//! post-fusion stream layers are never touched.

mod adam;
pub mod checkpoint;

pub use adam::{Adam, ADAM_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::MultiStreamModel;
use crate::nn::{Discriminator, Generator};
use crate::rng::substream;
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

/// Clamp bound for the log-likelihood adversarial form.
pub const LOG_LOSS_EPS: f64 = 1e-7;

/// Default ratio of the pre-fusion fine-tuning rate to the joint rate.
pub const FINETUNE_LR_RATIO: f64 = 0.5;

/// Learning-rate schedule over epochs (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Constant through `cutover`, then linear to zero at the final epoch.
    ConstantThenLinear { cutover: usize },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::ConstantThenLinear { cutover: 50 }
    }
}

/// Adversarial objective family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    LeastSquares,
    LogLikelihood,
}

fn default_lr() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_lambda() -> f64 {
    100.0
}
fn default_batch() -> usize {
    1
}
fn default_adv_weight() -> f64 {
    1.0
}
fn default_adv_form() -> AdvForm {
    AdvForm::LeastSquares
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_lambda")]
    pub lambda_pixel: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_adv_form")]
    pub adv_form: AdvForm,
    /// Weight on the adversarial generator term; 1 in normal use, 0 as a
    /// test hook to isolate the pixel loss.
    #[serde(default = "default_adv_weight")]
    pub adv_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            lambda_pixel: default_lambda(),
            batch_size: default_batch(),
            seed: 0,
            schedule: Schedule::default(),
            adv_form: default_adv_form(),
            adv_weight: default_adv_weight(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.lambda_pixel < 0.0 {
            return Err(Error::Config("lambda_pixel must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based epoch: constant through the cutover (or
/// through all epochs when the run is no longer than the cutover), then
/// linearly decayed to zero at the final epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::ConstantThenLinear { cutover } => {
            if cfg.epochs <= cutover || epoch <= cutover {
                cfg.lr
            } else {
                cfg.lr * (cfg.epochs - epoch) as f64 / (cfg.epochs - cutover) as f64
            }
        }
    }
}

// ---- adversarial losses -------------------------------------------------

/// Least-squares adversarial losses over raw patch maps:
/// `L_disc = mean (d_real - 1)^2 + mean d_fake^2`,
/// `L_gen = mean (d_fake - 1)^2`.
pub fn adv_losses_ls<E: Element>(
    tape: &mut Tape<E>,
    d_real: Var,
    d_fake: Var,
) -> Result<(Var, Var)> {
    let real_term = tape.sq_err_to(d_real, 1.0)?;
    let fake_term = tape.sq_err_to(d_fake, 0.0)?;
    let l_disc = tape.add(real_term, fake_term)?;
    let l_gen = tape.sq_err_to(d_fake, 1.0)?;
    Ok((l_disc, l_gen))
}

/// Log-likelihood adversarial losses over (0,1)-squashed patch maps,
/// clamped to `[eps, 1-eps]` before the logarithms:
/// `L_disc = -mean log d_real - mean log(1 - d_fake)`,
/// `L_gen = -mean log d_fake`.
pub fn adv_losses_log<E: Element>(
    tape: &mut Tape<E>,
    d_real: Var,
    d_fake: Var,
) -> Result<(Var, Var)> {
    let (lo, hi) = (LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS);
    let cr = tape.clamp(d_real, lo, hi)?;
    let ln_r = tape.ln(cr)?;
    let mean_r = tape.mean(ln_r)?;
    let term_r = tape.affine(mean_r, -1.0, 0.0)?;

    let cf = tape.clamp(d_fake, lo, hi)?;
    let one_minus = tape.affine(cf, -1.0, 1.0)?;
    let ln_om = tape.ln(one_minus)?;
    let mean_om = tape.mean(ln_om)?;
    let term_f = tape.affine(mean_om, -1.0, 0.0)?;

    let l_disc = tape.add(term_r, term_f)?;

    let ln_f = tape.ln(cf)?;
    let mean_f = tape.mean(ln_f)?;
    let l_gen = tape.affine(mean_f, -1.0, 0.0)?;
    Ok((l_disc, l_gen))
}

/// Discriminator-side loss for either form.
pub fn adv_disc_loss<E: Element>(
    tape: &mut Tape<E>,
    d_real: Var,
    d_fake: Var,
    form: AdvForm,
) -> Result<Var> {
    let (l_disc, _) = match form {
        AdvForm::LeastSquares => adv_losses_ls(tape, d_real, d_fake)?,
        AdvForm::LogLikelihood => adv_losses_log(tape, d_real, d_fake)?,
    };
    Ok(l_disc)
}

/// Generator-side adversarial term for either form.
pub fn adv_gen_loss<E: Element>(tape: &mut Tape<E>, d_fake: Var, form: AdvForm) -> Result<Var> {
    match form {
        AdvForm::LeastSquares => tape.sq_err_to(d_fake, 1.0),
        AdvForm::LogLikelihood => {
            let cf = tape.clamp(d_fake, LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS)?;
            let ln_f = tape.ln(cf)?;
            let mean_f = tape.mean(ln_f)?;
            tape.affine(mean_f, -1.0, 0.0)
        }
    }
}

/// Full generator objective of one stream: least-squares adversarial term
/// plus `lambda` times the mean absolute pixel difference.
pub fn stream_loss<E: Element>(
    tape: &mut Tape<E>,
    gen_out: Var,
    target: Var,
    d_fake: Var,
    lambda: f64,
) -> Result<Var> {
    let adv = tape.sq_err_to(d_fake, 1.0)?;
    let pixel = tape.l1_to(gen_out, target)?;
    let weighted = tape.affine(pixel, lambda, 0.0)?;
    tape.add(adv, weighted)
}

// ---- training data and logs ----------------------------------------------

/// One co-registered training example, already mapped to the network
/// range (-1, 1). `sources` are `[1,1,H,W]` tensors in stream order.
#[derive(Clone, Debug)]
pub struct TrainSample<E: Element> {
    pub sources: Vec<Tensor<E>>,
    pub target: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub stream: String,
    pub loss_disc: f64,
    pub loss_gen_adv: f64,
    pub loss_pixel: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }

    fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (a.epoch, a.batch, &a.stream).cmp(&(b.epoch, b.batch, &b.stream)));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,batch,stream,loss_disc,loss_gen_adv,loss_pixel\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.batch, r.stream, r.loss_disc, r.loss_gen_adv, r.loss_pixel
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

// ---- shared step helpers ---------------------------------------------------

fn apply_updates<E: Element>(
    opt: &mut Adam<E>,
    lr: f64,
    grads: &Gradients<E>,
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<E>)),
) -> Result<()> {
    let mut failure: Option<Error> = None;
    visit(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        match grads.wrt(p) {
            Some(g) => {
                if let Err(e) = opt.update(&name, p, g, lr) {
                    failure = Some(e);
                }
            }
            None => {
                failure = Some(Error::InvalidArg(format!(
                    "missing gradient for parameter {name}"
                )))
            }
        }
    });
    failure.map_or(Ok(()), Err)
}

fn numeric_guard(value: f64, epoch: usize, batch: usize, stream: &str, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            epoch,
            batch,
            stream: stream.to_string(),
            detail: format!("{what} is {value}"),
        })
    }
}

fn grads_guard<E: Element>(
    grads: &Gradients<E>,
    epoch: usize,
    batch: usize,
    stream: &str,
    what: &str,
) -> Result<()> {
    if grads.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            epoch,
            batch,
            stream: stream.to_string(),
            detail: format!("non-finite {what} gradient"),
        })
    }
}

fn squash_if_log<E: Element>(tape: &mut Tape<E>, v: Var, form: AdvForm) -> Result<Var> {
    match form {
        AdvForm::LeastSquares => Ok(v),
        AdvForm::LogLikelihood => tape.sigmoid(v),
    }
}

// ---- batch assembly --------------------------------------------------------

struct Batch<E: Element> {
    sources: Vec<Tensor<E>>, // per source position, stacked over the batch
    target: Tensor<E>,
}

fn make_batches<E: Element>(
    data: &[TrainSample<E>],
    order: &[usize],
    batch_size: usize,
    k: usize,
) -> Result<Vec<Batch<E>>> {
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut per_source: Vec<Vec<Tensor<E>>> = vec![Vec::new(); k];
        let mut targets = Vec::new();
        for &idx in chunk {
            let s = &data[idx];
            if s.sources.len() != k {
                return Err(Error::Data(format!(
                    "sample {idx} carries {} sources, expected {k}",
                    s.sources.len()
                )));
            }
            for (pos, src) in s.sources.iter().enumerate() {
                per_source[pos].push(src.clone());
            }
            targets.push(s.target.clone());
        }
        batches.push(Batch {
            sources: per_source
                .into_iter()
                .map(|parts| Tensor::stack_batch(&parts))
                .collect::<Result<_>>()?,
            target: Tensor::stack_batch(&targets)?,
        });
    }
    Ok(batches)
}

fn shuffle(order: &mut [usize], seed: u64, tags: &[u64]) {
    use rand::seq::SliceRandom;
    let mut rng = substream(seed, tags);
    order.shuffle(&mut rng);
}

// ---- phase 1: independent streams ------------------------------------------

/// Optimizer state of one stream (generator + discriminator).
#[derive(Clone, Debug)]
pub struct StreamTrainState<E: Element> {
    pub gen_opt: Adam<E>,
    pub disc_opt: Adam<E>,
}

/// Phase-1 state: one entry per stream (index K is the many-to-one
/// stream) plus the next epoch to run.
#[derive(Clone, Debug)]
pub struct StreamsTrainState<E: Element> {
    pub per_stream: Vec<StreamTrainState<E>>,
    pub next_epoch: usize,
}

impl<E: Element> StreamsTrainState<E> {
    pub fn fresh(n_streams: usize, cfg: &TrainConfig) -> Self {
        StreamsTrainState {
            per_stream: (0..n_streams)
                .map(|_| StreamTrainState {
                    gen_opt: Adam::new(cfg.beta1, cfg.beta2),
                    disc_opt: Adam::new(cfg.beta1, cfg.beta2),
                })
                .collect(),
            next_epoch: 1,
        }
    }
}

/// Stream label used in loss logs: `stream{m}` or `many`.
pub fn stream_label(idx: usize, k: usize) -> String {
    if idx == k {
        "many".to_string()
    } else {
        format!("stream{}", idx + 1)
    }
}

/// Trains all K+1 streams independently for `cfg.epochs` epochs.
pub fn train_streams<E: Element>(
    model: &mut MultiStreamModel<E>,
    data: &[TrainSample<E>],
    cfg: &TrainConfig,
) -> Result<(TrainLog, StreamsTrainState<E>)> {
    let mut state = StreamsTrainState::fresh(model.k() + 1, cfg);
    let log = train_streams_resume(model, data, cfg, &mut state, cfg.epochs)?;
    Ok((log, state))
}

/// Continues phase-1 training up to `until_epoch` (inclusive). Streams
/// are mutually independent and run as parallel jobs with disjoint state.
pub fn train_streams_resume<E: Element>(
    model: &mut MultiStreamModel<E>,
    data: &[TrainSample<E>],
    cfg: &TrainConfig,
    state: &mut StreamsTrainState<E>,
    until_epoch: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if until_epoch > cfg.epochs {
        return Err(Error::InvalidArg(format!(
            "cannot train to epoch {until_epoch}: config covers {} epochs",
            cfg.epochs
        )));
    }
    let k = model.k();
    if state.per_stream.len() != k + 1 {
        return Err(Error::InvalidArg(format!(
            "optimizer state covers {} streams, model has {}",
            state.per_stream.len(),
            k + 1
        )));
    }
    let from_epoch = state.next_epoch;
    if from_epoch > until_epoch {
        return Ok(TrainLog::default());
    }

    let mut jobs = Vec::new();
    {
        let mut stream_refs: Vec<&mut crate::model::Stream<E>> =
            model.streams.iter_mut().collect();
        stream_refs.push(&mut model.many);
        for ((idx, stream), st) in stream_refs
            .into_iter()
            .enumerate()
            .zip(state.per_stream.iter_mut())
        {
            let cfg = *cfg;
            jobs.push(move || {
                train_single_stream(stream, st, idx, k, data, &cfg, from_epoch, until_epoch)
            });
        }
    }
    let results = exec::run_jobs(jobs);

    let mut log = TrainLog::default();
    for res in results {
        log.extend(res?);
    }
    log.sort();
    state.next_epoch = until_epoch + 1;
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn train_single_stream<E: Element>(
    stream: &mut crate::model::Stream<E>,
    st: &mut StreamTrainState<E>,
    idx: usize,
    k: usize,
    data: &[TrainSample<E>],
    cfg: &TrainConfig,
    from_epoch: usize,
    until_epoch: usize,
) -> Result<TrainLog> {
    let label = stream_label(idx, k);
    let mut log = TrainLog::default();
    for epoch in from_epoch..=until_epoch {
        let lr = lr_at_epoch(cfg, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, cfg.seed, &[0x706831, idx as u64 + 1, epoch as u64]);
        for (batch_no, batch) in make_batches(data, &order, cfg.batch_size, k)?
            .into_iter()
            .enumerate()
        {
            let gen_input = if idx == k {
                Tensor::concat_channels(&batch.sources)?
            } else {
                batch.sources[idx].clone()
            };
            let conditioning: Vec<Tensor<E>> = if idx == k {
                batch.sources.clone()
            } else {
                vec![batch.sources[idx].clone()]
            };
            let crate::model::Stream { gen, disc } = stream;
            let row = gan_step(
                gen,
                disc,
                st,
                &gen_input,
                &conditioning,
                &batch.target,
                cfg,
                lr,
                epoch,
                batch_no + 1,
                &label,
            )?;
            log.rows.push(row);
        }
    }
    Ok(log)
}

/// One alternated step: discriminator update on (real, detached fake),
/// then generator update through the freshly updated discriminator.
#[allow(clippy::too_many_arguments)]
fn gan_step<E: Element>(
    gen: &mut Generator<E>,
    disc: &mut Discriminator<E>,
    st: &mut StreamTrainState<E>,
    gen_input: &Tensor<E>,
    conditioning: &[Tensor<E>],
    target: &Tensor<E>,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    batch: usize,
    label: &str,
) -> Result<LogRow> {
    // generator forward on the main tape
    let mut tape = Tape::new();
    let x = tape.constant(gen_input.clone());
    let y_hat = gen.forward(&mut tape, x, true)?;
    let y_hat_detached = tape.value(y_hat).clone();

    // discriminator step
    let loss_disc = disc_step(
        disc,
        &mut st.disc_opt,
        conditioning,
        target,
        &y_hat_detached,
        cfg,
        lr,
        epoch,
        batch,
        label,
    )?;

    // generator step against the updated discriminator
    let cond: Vec<Var> = conditioning
        .iter()
        .map(|c| tape.constant(c.clone()))
        .collect();
    let fake_raw = disc.forward(&mut tape, &cond, y_hat, false)?;
    let fake = squash_if_log(&mut tape, fake_raw, cfg.adv_form)?;
    let adv = adv_gen_loss(&mut tape, fake, cfg.adv_form)?;
    let tgt = tape.constant(target.clone());
    let pixel = tape.l1_to(y_hat, tgt)?;
    let adv_val = numeric_guard(
        tape.value(adv).item()?.to_f64(),
        epoch,
        batch,
        label,
        "generator adversarial loss",
    )?;
    let pixel_val = numeric_guard(
        tape.value(pixel).item()?.to_f64(),
        epoch,
        batch,
        label,
        "pixel loss",
    )?;
    let weighted_adv = tape.affine(adv, cfg.adv_weight, 0.0)?;
    let weighted_pix = tape.affine(pixel, cfg.lambda_pixel, 0.0)?;
    let total = tape.add(weighted_adv, weighted_pix)?;
    let grads = tape.backward(total)?;
    grads_guard(&grads, epoch, batch, label, "generator")?;
    st.gen_opt.begin_step();
    apply_updates(&mut st.gen_opt, lr, &grads, |f| gen.visit_params_mut(f))?;

    Ok(LogRow {
        epoch,
        batch,
        stream: label.to_string(),
        loss_disc,
        loss_gen_adv: adv_val,
        loss_pixel: pixel_val,
    })
}

/// Discriminator update on its own tape; the candidate fake is detached.
#[allow(clippy::too_many_arguments)]
fn disc_step<E: Element>(
    disc: &mut Discriminator<E>,
    opt: &mut Adam<E>,
    conditioning: &[Tensor<E>],
    target: &Tensor<E>,
    fake_detached: &Tensor<E>,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    batch: usize,
    label: &str,
) -> Result<f64> {
    let mut dt = Tape::new();
    let cond: Vec<Var> = conditioning
        .iter()
        .map(|c| dt.constant(c.clone()))
        .collect();
    let real_in = dt.constant(target.clone());
    let real_raw = disc.forward(&mut dt, &cond, real_in, true)?;
    let fake_in = dt.constant(fake_detached.clone());
    let fake_raw = disc.forward(&mut dt, &cond, fake_in, true)?;
    let real = squash_if_log(&mut dt, real_raw, cfg.adv_form)?;
    let fake = squash_if_log(&mut dt, fake_raw, cfg.adv_form)?;
    let l_disc = adv_disc_loss(&mut dt, real, fake, cfg.adv_form)?;
    let val = numeric_guard(
        dt.value(l_disc).item()?.to_f64(),
        epoch,
        batch,
        label,
        "discriminator loss",
    )?;
    let grads = dt.backward(l_disc)?;
    grads_guard(&grads, epoch, batch, label, "discriminator")?;
    opt.begin_step();
    apply_updates(opt, lr, &grads, |f| disc.visit_params_mut(f))?;
    Ok(val)
}

// ---- phase 2: joint network --------------------------------------------------

/// Phase-2 optimizer state: the generator-side optimizer hosts both the
/// joint parameters (at the full rate) and the pre-fusion stream
/// parameters (at the fine-tune rate).
#[derive(Clone, Debug)]
pub struct JointTrainState<E: Element> {
    pub gen_opt: Adam<E>,
    pub disc_opt: Adam<E>,
    pub next_epoch: usize,
}

impl<E: Element> JointTrainState<E> {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        JointTrainState {
            gen_opt: Adam::new(cfg.beta1, cfg.beta2),
            disc_opt: Adam::new(cfg.beta1, cfg.beta2),
            next_epoch: 1,
        }
    }
}

fn visit_prefusion_params_mut<E: Element>(
    model: &mut MultiStreamModel<E>,
    f: &mut dyn FnMut(String, &mut Tensor<E>),
) {
    let i = model.fusion.i;
    let k = model.fusion.k;
    for (m, s) in model.streams.iter_mut().enumerate() {
        for (idx, layer) in s.gen.layers_mut().iter_mut().enumerate().take(i) {
            for (name, t) in layer.params_mut() {
                f(format!("stream{}/layer{}/{}", m + 1, idx + 1, name), t);
            }
        }
    }
    for (idx, layer) in model.many.gen.layers_mut().iter_mut().enumerate().take(i) {
        for (name, t) in layer.params_mut() {
            f(format!("stream{}/layer{}/{}", k + 1, idx + 1, name), t);
        }
    }
}

/// Trains the joint network with Eq.-20-style objectives (log form by
/// default via `cfg.adv_form`) for `cfg.epochs` epochs, fine-tuning the
/// pre-fusion stream layers at `finetune_lr_ratio` times the joint rate.
pub fn train_joint<E: Element>(
    model: &mut MultiStreamModel<E>,
    data: &[TrainSample<E>],
    cfg: &TrainConfig,
    finetune_lr_ratio: f64,
) -> Result<(TrainLog, JointTrainState<E>)> {
    let mut state = JointTrainState::fresh(cfg);
    let log = train_joint_resume(model, data, cfg, finetune_lr_ratio, &mut state, cfg.epochs)?;
    Ok((log, state))
}

/// Continues phase-2 training up to `until_epoch` (inclusive). The
/// learning-rate schedule is evaluated against `cfg.epochs`, so stopping
/// early and resuming reproduces the uninterrupted trajectory.
pub fn train_joint_resume<E: Element>(
    model: &mut MultiStreamModel<E>,
    data: &[TrainSample<E>],
    cfg: &TrainConfig,
    finetune_lr_ratio: f64,
    state: &mut JointTrainState<E>,
    until_epoch: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if until_epoch > cfg.epochs {
        return Err(Error::InvalidArg(format!(
            "cannot train to epoch {until_epoch}: config covers {} epochs",
            cfg.epochs
        )));
    }
    if !(0.0..=1.0).contains(&finetune_lr_ratio) {
        return Err(Error::InvalidArg(format!(
            "finetune_lr_ratio must be in [0,1], got {finetune_lr_ratio}"
        )));
    }
    let k = model.k();
    let mut log = TrainLog::default();
    for epoch in state.next_epoch..=until_epoch {
        let lr = lr_at_epoch(cfg, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, cfg.seed, &[0x706832, epoch as u64]);
        for (batch_no, batch) in make_batches(data, &order, cfg.batch_size, k)?
            .into_iter()
            .enumerate()
        {
            let row = joint_step(
                model,
                state,
                &batch,
                cfg,
                lr,
                finetune_lr_ratio,
                epoch,
                batch_no + 1,
            )?;
            log.rows.push(row);
        }
        state.next_epoch = epoch + 1;
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn joint_step<E: Element>(
    model: &mut MultiStreamModel<E>,
    state: &mut JointTrainState<E>,
    batch: &Batch<E>,
    cfg: &TrainConfig,
    lr: f64,
    finetune_lr_ratio: f64,
    epoch: usize,
    batch_no: usize,
) -> Result<LogRow> {
    let label = "joint";

    // fused forward on the main tape (pre-fusion stream layers and the
    // joint network receive gradients; post-fusion stream layers are not
    // part of this graph at all)
    let mut tape = Tape::new();
    let src_vars: Vec<Var> = batch
        .sources
        .iter()
        .map(|s| tape.constant(s.clone()))
        .collect();
    let y_hat = model.synthesize_on(&mut tape, &src_vars, true, true)?;
    let y_hat_detached = tape.value(y_hat).clone();

    // joint discriminator step (conditions on all source images)
    let loss_disc = {
        let mut dt = Tape::new();
        let cond: Vec<Var> = batch
            .sources
            .iter()
            .map(|s| dt.constant(s.clone()))
            .collect();
        let real_in = dt.constant(batch.target.clone());
        let real_raw = model.joint_disc.forward(&mut dt, &cond, real_in, true)?;
        let fake_in = dt.constant(y_hat_detached);
        let fake_raw = model.joint_disc.forward(&mut dt, &cond, fake_in, true)?;
        let real = squash_if_log(&mut dt, real_raw, cfg.adv_form)?;
        let fake = squash_if_log(&mut dt, fake_raw, cfg.adv_form)?;
        let l_disc = adv_disc_loss(&mut dt, real, fake, cfg.adv_form)?;
        let val = numeric_guard(
            dt.value(l_disc).item()?.to_f64(),
            epoch,
            batch_no,
            label,
            "joint discriminator loss",
        )?;
        let grads = dt.backward(l_disc)?;
        grads_guard(&grads, epoch, batch_no, label, "joint discriminator")?;
        state.disc_opt.begin_step();
        apply_updates(&mut state.disc_opt, lr, &grads, |f| {
            model.joint_disc.visit_params_mut(f)
        })?;
        val
    };

    // generator-side step against the updated joint discriminator
    let fake_raw = model.joint_disc.forward(&mut tape, &src_vars, y_hat, false)?;
    let fake = squash_if_log(&mut tape, fake_raw, cfg.adv_form)?;
    let adv = adv_gen_loss(&mut tape, fake, cfg.adv_form)?;
    let tgt = tape.constant(batch.target.clone());
    let pixel = tape.l1_to(y_hat, tgt)?;
    let adv_val = numeric_guard(
        tape.value(adv).item()?.to_f64(),
        epoch,
        batch_no,
        label,
        "joint adversarial loss",
    )?;
    let pixel_val = numeric_guard(
        tape.value(pixel).item()?.to_f64(),
        epoch,
        batch_no,
        label,
        "joint pixel loss",
    )?;
    let weighted_adv = tape.affine(adv, cfg.adv_weight, 0.0)?;
    let weighted_pix = tape.affine(pixel, cfg.lambda_pixel, 0.0)?;
    let total = tape.add(weighted_adv, weighted_pix)?;
    let grads = tape.backward(total)?;
    grads_guard(&grads, epoch, batch_no, label, "joint generator")?;

    state.gen_opt.begin_step();
    apply_updates(&mut state.gen_opt, lr, &grads, |f| {
        model.joint.visit_params_mut(&mut |n, t| f(format!("joint/{n}"), t))
    })?;
    apply_updates(&mut state.gen_opt, lr * finetune_lr_ratio, &grads, |f| {
        visit_prefusion_params_mut(model, f)
    })?;

    Ok(LogRow {
        epoch,
        batch: batch_no,
        stream: label.to_string(),
        loss_disc,
        loss_gen_adv: adv_val,
        loss_pixel: pixel_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionConfig;
    use crate::nn::GeneratorSpec;

    fn scalar_tape_value<E: Element>(
        f: impl FnOnce(&mut Tape<E>) -> Result<Var>,
    ) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item().unwrap().to_f64()
    }

    #[test]
    fn least_squares_losses_match_hand_values() {
        // d_real = 1, d_fake = 0 -> L_disc = 0
        let v = scalar_tape_value::<f64>(|t| {
            let r = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap());
            let f = t.constant(Tensor::zeros(vec![1, 1, 2, 2]).unwrap());
            Ok(adv_losses_ls(t, r, f)?.0)
        });
        assert_eq!(v, 0.0);

        // d_real = d_fake = 0.5 -> L_disc = 0.25 + 0.25
        let v = scalar_tape_value::<f64>(|t| {
            let r = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5).unwrap());
            let f = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5).unwrap());
            Ok(adv_losses_ls(t, r, f)?.0)
        });
        assert!((v - 0.5).abs() < 1e-15);

        // d_fake = 0.5 -> L_gen = 0.25
        let v = scalar_tape_value::<f64>(|t| {
            let r = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5).unwrap());
            let f = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5).unwrap());
            Ok(adv_losses_ls(t, r, f)?.1)
        });
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn log_losses_match_hand_values() {
        // near-perfect discriminator: L_disc ~ 2e-7
        let v = scalar_tape_value::<f64>(|t| {
            let r = t.constant(Tensor::full(vec![2, 2], 1.0 - 1e-7).unwrap());
            let f = t.constant(Tensor::full(vec![2, 2], 1e-7).unwrap());
            Ok(adv_losses_log(t, r, f)?.0)
        });
        assert!((v - 2e-7).abs() < 1e-9, "got {v}");

        // both at 0.5: L_disc = 2 ln 2
        let v = scalar_tape_value::<f64>(|t| {
            let r = t.constant(Tensor::full(vec![2, 2], 0.5).unwrap());
            let f = t.constant(Tensor::full(vec![2, 2], 0.5).unwrap());
            Ok(adv_losses_log(t, r, f)?.0)
        });
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // L_gen at 0.5 = ln 2
        let v = scalar_tape_value::<f64>(|t| {
            let r = t.constant(Tensor::full(vec![2, 2], 0.5).unwrap());
            let f = t.constant(Tensor::full(vec![2, 2], 0.5).unwrap());
            Ok(adv_losses_log(t, r, f)?.1)
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn stream_loss_matches_hand_values() {
        // gen_out == target and d_fake == 1 -> 0
        let v = scalar_tape_value::<f64>(|t| {
            let out = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.3).unwrap());
            let tgt = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.3).unwrap());
            let df = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap());
            stream_loss(t, out, tgt, df, 100.0)
        });
        assert_eq!(v, 0.0);

        // |out - target| = 0.01 everywhere, d_fake = 1, lambda 100 -> 1.0
        let v = scalar_tape_value::<f64>(|t| {
            let out = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.31).unwrap());
            let tgt = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.30).unwrap());
            let df = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap());
            stream_loss(t, out, tgt, df, 100.0)
        });
        assert!((v - 1.0).abs() < 1e-12, "got {v}");

        // hand-computed mixed 2x2 case:
        // d_fake = [0.2, 0.4, 0.6, 0.8] -> mean (d-1)^2 = (0.64+0.36+0.16+0.04)/4 = 0.3
        // |out-tgt| = [0.1, 0.2, 0.3, 0.4] -> mean = 0.25, lambda 2 -> 0.5
        let v = scalar_tape_value::<f64>(|t| {
            let out = t.constant(
                Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            );
            let tgt = t.constant(Tensor::zeros(vec![1, 1, 2, 2]).unwrap());
            let df = t.constant(
                Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap(),
            );
            stream_loss(t, out, tgt, df, 2.0)
        });
        assert!((v - 0.8).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn lr_schedule_matches_contract() {
        let cfg = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(&cfg, 25), 2e-4);
        assert!((lr_at_epoch(&cfg, 75) - 1e-4).abs() < 1e-12);
        assert_eq!(lr_at_epoch(&cfg, 100), 0.0);
        // non-increasing
        let mut prev = f64::INFINITY;
        for e in 1..=100 {
            let lr = lr_at_epoch(&cfg, e);
            assert!(lr <= prev);
            prev = lr;
        }

        let short = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        for e in 1..=40 {
            assert_eq!(lr_at_epoch(&short, e), 2e-4);
        }
    }

    fn tiny_model(seed: u64, i: usize) -> MultiStreamModel<f32> {
        let spec = GeneratorSpec {
            base_channels: 2,
            n_res: 2,
            ..GeneratorSpec::default()
        };
        MultiStreamModel::assemble(2, spec, FusionConfig::new(i, 2), seed).unwrap()
    }

    fn tiny_data(n: usize) -> Vec<TrainSample<f32>> {
        (0..n)
            .map(|s| {
                let a = Tensor::from_fn(vec![1, 1, 16, 16], |j| {
                    (((j + s * 7) % 11) as f32 / 11.0) * 1.6 - 0.8
                })
                .unwrap();
                let b = Tensor::from_fn(vec![1, 1, 16, 16], |j| {
                    (((j * 3 + s) % 13) as f32 / 13.0) * 1.6 - 0.8
                })
                .unwrap();
                let t = Tensor::from_fn(vec![1, 1, 16, 16], |j| {
                    ((a.data()[j] + b.data()[j]) * 0.5).clamp(-0.9, 0.9)
                })
                .unwrap();
                TrainSample {
                    sources: vec![a, b],
                    target: t,
                }
            })
            .collect()
    }

    #[test]
    fn one_epoch_updates_every_stream() {
        let mut model = tiny_model(3, 4);
        let before = model.stream_param_hash();
        let data = tiny_data(4);
        let cfg = TrainConfig {
            epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let (log, _) = train_streams(&mut model, &data, &cfg).unwrap();
        assert_ne!(model.stream_param_hash(), before);
        // one disc and one gen update per batch per stream: 3 streams x 4 batches
        assert_eq!(log.rows.len(), 12);
        for label in ["stream1", "stream2", "many"] {
            assert_eq!(log.rows.iter().filter(|r| r.stream == label).count(), 4);
        }
    }

    #[test]
    fn pixel_only_overfits_one_sample() {
        let mut model = tiny_model(7, 4);
        let data = tiny_data(1);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 2e-3,
            adv_weight: 0.0,
            seed: 1,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        let (log, _) = train_streams(&mut model, &data, &cfg).unwrap();
        let pix = |epoch: usize| {
            log.rows
                .iter()
                .filter(|r| r.stream == "stream1" && r.epoch == epoch)
                .map(|r| r.loss_pixel)
                .next()
                .unwrap()
        };
        assert!(
            pix(200) < pix(1) * 0.5,
            "pixel loss did not decrease: {} -> {}",
            pix(1),
            pix(200)
        );
    }

    #[test]
    fn fixed_seed_gives_bit_identical_logs() {
        let data = tiny_data(3);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 42,
            ..TrainConfig::default()
        };
        let mut csvs = Vec::new();
        for _ in 0..2 {
            let mut model = tiny_model(9, 4);
            let (log, _) = train_streams(&mut model, &data, &cfg).unwrap();
            csvs.push(log.to_csv());
        }
        assert_eq!(csvs[0], csvs[1]);
    }

    #[test]
    fn joint_phase_respects_fusion_boundary() {
        let i = 4;
        let mut model = tiny_model(11, i);
        let data = tiny_data(2);
        let cfg = TrainConfig {
            epochs: 1,
            seed: 2,
            adv_form: AdvForm::LogLikelihood,
            ..TrainConfig::default()
        };
        // snapshot post-fusion parameters
        let post_before = collect_layer_bytes(&model, i + 1);
        let pre_before = collect_layer_bytes_upto(&model, i);
        let joint_before = model.full_param_hash();
        let (log, state) = train_joint(&mut model, &data, &cfg, 0.5).unwrap();
        assert_eq!(log.rows.len(), 2);
        assert!(state.gen_opt.step_count() > 0);

        let post_after = collect_layer_bytes(&model, i + 1);
        let pre_after = collect_layer_bytes_upto(&model, i);
        assert_eq!(post_before, post_after, "post-fusion layers must stay bit-identical");
        assert_ne!(pre_before, pre_after, "pre-fusion layers must be fine-tuned");
        assert_ne!(model.full_param_hash(), joint_before);
    }

    fn collect_layer_bytes(model: &MultiStreamModel<f32>, from_layer: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for s in model.streams.iter().chain(std::iter::once(&model.many)) {
            for layer in s.gen.layers().iter().skip(from_layer - 1) {
                for p in layer.params() {
                    for &v in p.tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    fn collect_layer_bytes_upto(model: &MultiStreamModel<f32>, upto: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for s in model.streams.iter().chain(std::iter::once(&model.many)) {
            for layer in s.gen.layers().iter().take(upto) {
                for p in layer.params() {
                    for &v in p.tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    #[test]
    fn joint_resume_matches_uninterrupted_run() {
        let data = tiny_data(2);
        let cfg = TrainConfig {
            epochs: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut straight = tiny_model(21, 4);
        let (_, _) = train_joint(&mut straight, &data, &cfg, 0.5).unwrap();

        let mut resumed = tiny_model(21, 4);
        let mut st = JointTrainState::fresh(&cfg);
        train_joint_resume(&mut resumed, &data, &cfg, 0.5, &mut st, 2).unwrap();
        train_joint_resume(&mut resumed, &data, &cfg, 0.5, &mut st, 4).unwrap();

        assert_eq!(straight.full_param_hash(), resumed.full_param_hash());
    }

    #[test]
    fn nan_data_aborts_with_location() {
        let mut model = tiny_model(3, 4);
        let mut data = tiny_data(2);
        data[1].target = Tensor::full(vec![1, 1, 16, 16], f32::NAN).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let err = train_streams(&mut model, &data, &cfg).unwrap_err();
        match err {
            Error::Numeric { epoch, stream, .. } => {
                assert_eq!(epoch, 1);
                assert!(!stream.is_empty());
            }
            other => panic!("expected numeric abort, got {other}"),
        }
    }
}
