//! Quantitative evaluation: PSNR, SSIM, the paired Wilcoxon signed-rank
//! test, and model-level report generation with pairwise win proportions.
//!
//! All metrics are pure functions over `[0,1]`-ranged images. PSNR of
//! identical images is reported as a `+inf` sentinel and excluded from
//! means with an explicit count, never silently capped.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MultiStreamModel;
use crate::nn::{from_model_range, to_model_range};
use crate::tensor::{Element, Tape, Tensor};

/// 10*log10(1/MSE) over co-shaped `[0,1]` images; `+inf` when identical.
pub fn psnr<E: Element>(reference: &Tensor<E>, candidate: &Tensor<E>) -> Result<f64> {
    if reference.shape() != candidate.shape() {
        return Err(Error::Shape(format!(
            "psnr needs co-shaped images: {:?} vs {:?}",
            reference.shape(),
            candidate.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&r, &c) in reference.data().iter().zip(candidate.data()) {
        let d = r.to_f64() - c.to_f64();
        acc += d * d;
    }
    let mse = acc / reference.numel() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        // 10*log10(MAX^2/MSE) with MAX = 1
        Ok(-10.0 * mse.log10())
    }
}

/// SSIM window: Gaussian, 11 taps, sigma 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -half..=half {
        for x in -half..=half {
            let r2 = (x * x + y * y) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over valid (fully interior) sliding
/// windows, with the luminance-contrast-structure product, `C1=(K1*L)^2`,
/// `C2=(K2*L)^2`, `L=1`.
pub fn ssim<E: Element>(reference: &Tensor<E>, candidate: &Tensor<E>) -> Result<f64> {
    if reference.shape() != candidate.shape() {
        return Err(Error::Shape(format!(
            "ssim needs co-shaped images: {:?} vs {:?}",
            reference.shape(),
            candidate.shape()
        )));
    }
    let (b, c, h, w) = reference.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs extents of at least {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for plane in 0..b * c {
        let base = plane * h * w;
        let rp = &reference.data()[base..base + h * w];
        let cp = &candidate.data()[base..base + h * w];
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let mut mu_r = 0.0;
                let mut mu_c = 0.0;
                let mut rr = 0.0;
                let mut cc = 0.0;
                let mut rc = 0.0;
                let mut wi = 0usize;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[wi];
                        wi += 1;
                        let rv = rp[(wy + dy) * w + wx + dx].to_f64();
                        let cv = cp[(wy + dy) * w + wx + dx].to_f64();
                        mu_r += g * rv;
                        mu_c += g * cv;
                        rr += g * rv * rv;
                        cc += g * cv * cv;
                        rc += g * rv * cv;
                    }
                }
                let var_r = rr - mu_r * mu_r;
                let var_c = cc - mu_c * mu_c;
                let cov = rc - mu_r * mu_c;
                let val = ((2.0 * mu_r * mu_c + c1) * (2.0 * cov + c2))
                    / ((mu_r * mu_r + mu_c * mu_c + c1) * (var_r + var_c + c2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Wilcoxon evaluation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact enumeration for n <= 12, normal approximation beyond.
    Auto,
    Exact,
    NormalApprox,
}

/// Two-sided paired Wilcoxon signed-rank p-value. Zero differences are
/// dropped; if every difference is zero the p-value is 1 by convention;
/// otherwise at least 5 non-zero differences are required.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArg(format!(
            "wilcoxon needs equal-length pairs, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InvalidArg(format!(
            "wilcoxon needs at least 5 non-zero differences, got {n}"
        )));
    }
    // midranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut tie_groups: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        tie_groups.push(j - i + 1);
        i = j + 1;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let exact = match method {
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::NormalApprox => false,
        WilcoxonMethod::Auto => n <= 12,
    };
    if exact {
        if n > 25 {
            return Err(Error::InvalidArg(format!(
                "exact wilcoxon enumeration limited to 25 pairs, got {n}"
            )));
        }
        Ok(wilcoxon_exact_two_sided(&ranks, w_plus))
    } else {
        Ok(wilcoxon_normal_two_sided(n, &tie_groups, w_plus))
    }
}

/// Exact two-sided p by enumerating all 2^n sign assignments of the rank
/// values and counting tail weights of W+.
fn wilcoxon_exact_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let total = 1u64 << n;
    let eps = 1e-9;
    let mut ge = 0u64;
    let mut le = 0u64;
    for mask in 0..total {
        let mut w = 0.0;
        for (bit, r) in ranks.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                w += r;
            }
        }
        if w >= w_plus - eps {
            ge += 1;
        }
        if w <= w_plus + eps {
            le += 1;
        }
    }
    let tail = ge.min(le) as f64 / total as f64;
    (2.0 * tail).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
fn wilcoxon_normal_two_sided(n: usize, tie_groups: &[usize], w_plus: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_groups
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let d = w_plus - mean;
    let cc = if d.abs() > 0.5 { 0.5 } else { d.abs() };
    let z = (d.abs() - cc) / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2);
    p.min(1.0)
}

// ---- evaluation pipeline -----------------------------------------------------

/// One evaluation example in `[0,1]` intensity range.
#[derive(Clone, Debug)]
pub struct EvalSample<E: Element> {
    pub subject_id: usize,
    pub slice_id: usize,
    pub sources: Vec<Tensor<E>>,
    pub target: Tensor<E>,
}

/// Anything that can propose a `[0,1]` candidate for a sample.
pub trait Synthesizer<E: Element> {
    fn name(&self) -> String;
    fn synthesize(&self, sample: &EvalSample<E>) -> Result<Tensor<E>>;
}

/// Which part of a multi-stream model acts as the synthesizer.
#[derive(Clone, Copy, Debug)]
pub enum StreamChoice {
    /// One-to-one stream m (0-based source index).
    OneToOne(usize),
    /// The many-to-one stream.
    Many,
}

pub struct StreamSynthesizer<'a, E: Element> {
    pub model: &'a MultiStreamModel<E>,
    pub choice: StreamChoice,
    pub name: String,
}

impl<'a, E: Element> StreamSynthesizer<'a, E> {
    pub fn one_to_one(model: &'a MultiStreamModel<E>, m: usize) -> Self {
        StreamSynthesizer {
            model,
            choice: StreamChoice::OneToOne(m),
            name: format!("stream{}[{}]", m + 1, model.sources.get(m).cloned().unwrap_or_default()),
        }
    }

    pub fn many(model: &'a MultiStreamModel<E>) -> Self {
        StreamSynthesizer {
            model,
            choice: StreamChoice::Many,
            name: "many".into(),
        }
    }
}

impl<E: Element> Synthesizer<E> for StreamSynthesizer<'_, E> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn synthesize(&self, sample: &EvalSample<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let out = match self.choice {
            StreamChoice::OneToOne(m) => {
                let src = sample.sources.get(m).ok_or_else(|| {
                    Error::InvalidArg(format!("sample lacks source index {m}"))
                })?;
                let x = tape.constant(to_model_range(src));
                self.model.streams[m].gen.forward(&mut tape, x, false)?
            }
            StreamChoice::Many => {
                let stacked = Tensor::concat_channels(
                    &sample.sources.iter().map(to_model_range).collect::<Vec<_>>(),
                )?;
                let x = tape.constant(stacked);
                self.model.many.gen.forward(&mut tape, x, false)?
            }
        };
        Ok(from_model_range(tape.value(out)))
    }
}

/// The fused multi-stream model as a synthesizer.
pub struct ModelSynthesizer<'a, E: Element> {
    pub model: &'a MultiStreamModel<E>,
    pub name: String,
}

impl<'a, E: Element> ModelSynthesizer<'a, E> {
    pub fn new(model: &'a MultiStreamModel<E>) -> Self {
        ModelSynthesizer {
            model,
            name: format!("mustgan_i{}", model.fusion.i),
        }
    }
}

impl<E: Element> Synthesizer<E> for ModelSynthesizer<'_, E> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn synthesize(&self, sample: &EvalSample<E>) -> Result<Tensor<E>> {
        let sources: Vec<Tensor<E>> = sample.sources.iter().map(to_model_range).collect();
        let out = self.model.synthesize(&sources)?;
        Ok(from_model_range(&out))
    }
}

/// Test hook: the candidate is the ground truth itself.
pub struct IdentityOracle;

impl<E: Element> Synthesizer<E> for IdentityOracle {
    fn name(&self) -> String {
        "identity".into()
    }

    fn synthesize(&self, sample: &EvalSample<E>) -> Result<Tensor<E>> {
        Ok(sample.target.clone())
    }
}

/// How per-sample metrics are aggregated into the headline mean and std.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    PerSlice,
    PerSubject,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub aggregate: Aggregate,
    /// Re-normalize candidate and reference volumes to max 1 per subject
    /// before measuring.
    pub renormalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            aggregate: Aggregate::PerSlice,
            renormalize: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelScores {
    pub name: String,
    /// Per-sample metrics, in sample order (`+inf` serializes as null).
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// Samples excluded from the PSNR mean because they were identical
    /// to the reference.
    pub psnr_inf_count: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    /// Proportion of samples where `a` has strictly higher PSNR.
    pub a_wins_psnr: f64,
    pub b_wins_psnr: f64,
    pub ties_psnr: f64,
    /// Two-sided Wilcoxon p-values; absent when the preconditions fail
    /// (fewer than 5 non-zero differences).
    pub p_psnr: Option<f64>,
    pub p_ssim: Option<f64>,
    /// p < 0.05 flags.
    pub significant_psnr: Option<bool>,
    pub significant_ssim: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub aggregate: Aggregate,
    pub models: Vec<ModelScores>,
    pub pairwise: Vec<PairwiseComparison>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_values(
    values: &[f64],
    subjects: &[usize],
    aggregate: Aggregate,
) -> (f64, f64, usize) {
    match aggregate {
        Aggregate::PerSlice => {
            let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
            let inf = values.len() - finite.len();
            let (m, s) = mean_std(&finite);
            (m, s, inf)
        }
        Aggregate::PerSubject => {
            let mut ids: Vec<usize> = subjects.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let mut per_subject = Vec::with_capacity(ids.len());
            let mut inf = 0usize;
            for id in ids {
                let vals: Vec<f64> = values
                    .iter()
                    .zip(subjects)
                    .filter(|(v, s)| **s == id && v.is_finite())
                    .map(|(v, _)| *v)
                    .collect();
                inf += values
                    .iter()
                    .zip(subjects)
                    .filter(|(v, s)| **s == id && !v.is_finite())
                    .count();
                if !vals.is_empty() {
                    per_subject.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            let (m, s) = mean_std(&per_subject);
            (m, s, inf)
        }
    }
}

/// Runs every synthesizer over the samples and assembles per-model
/// scores, pairwise win proportions, and significance tests.
pub fn evaluate<E: Element>(
    models: &[&dyn Synthesizer<E>],
    samples: &[EvalSample<E>],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if models.is_empty() {
        return Err(Error::InvalidArg("no models to evaluate".into()));
    }

    let subjects: Vec<usize> = samples.iter().map(|s| s.subject_id).collect();

    // references, re-normalized per subject volume when requested
    let mut references: Vec<Tensor<E>> = samples.iter().map(|s| s.target.clone()).collect();
    if opts.renormalize {
        renormalize_by_subject(&mut references, &subjects)?;
    }

    let mut scores = Vec::with_capacity(models.len());
    for model in models {
        let mut candidates = Vec::with_capacity(samples.len());
        for sample in samples {
            let c = model.synthesize(sample)?;
            if c.shape() != sample.target.shape() {
                return Err(Error::Shape(format!(
                    "model {} produced shape {:?} for target {:?}",
                    model.name(),
                    c.shape(),
                    sample.target.shape()
                )));
            }
            candidates.push(c);
        }
        if opts.renormalize {
            renormalize_by_subject(&mut candidates, &subjects)?;
        }
        let mut psnrs = Vec::with_capacity(samples.len());
        let mut ssims = Vec::with_capacity(samples.len());
        for (r, c) in references.iter().zip(&candidates) {
            psnrs.push(psnr(r, c)?);
            ssims.push(ssim(r, c)?);
        }
        let (psnr_mean, psnr_std, psnr_inf_count) =
            aggregate_values(&psnrs, &subjects, opts.aggregate);
        let (ssim_mean, ssim_std, _) = aggregate_values(&ssims, &subjects, opts.aggregate);
        scores.push(ModelScores {
            name: model.name(),
            psnr: psnrs,
            ssim: ssims,
            psnr_mean,
            psnr_std,
            psnr_inf_count,
            ssim_mean,
            ssim_std,
        });
    }

    let mut pairwise = Vec::new();
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            pairwise.push(compare_pair(&scores[i], &scores[j]));
        }
    }

    Ok(MetricsReport {
        n_samples: samples.len(),
        aggregate: opts.aggregate,
        models: scores,
        pairwise,
    })
}

fn compare_pair(a: &ModelScores, b: &ModelScores) -> PairwiseComparison {
    let n = a.psnr.len() as f64;
    let a_wins = a.psnr.iter().zip(&b.psnr).filter(|(x, y)| x > y).count() as f64 / n;
    let b_wins = a.psnr.iter().zip(&b.psnr).filter(|(x, y)| x < y).count() as f64 / n;
    let ties = 1.0 - a_wins - b_wins;
    let p_psnr = wilcoxon_on_finite(&a.psnr, &b.psnr);
    let p_ssim = wilcoxon_on_finite(&a.ssim, &b.ssim);
    PairwiseComparison {
        a: a.name.clone(),
        b: b.name.clone(),
        a_wins_psnr: a_wins,
        b_wins_psnr: b_wins,
        ties_psnr: ties,
        significant_psnr: p_psnr.map(|p| p < 0.05),
        significant_ssim: p_ssim.map(|p| p < 0.05),
        p_psnr,
        p_ssim,
    }
}

/// Wilcoxon over the pairs where both entries are finite; infinite PSNR
/// sentinels on both sides count as ties and drop out naturally.
fn wilcoxon_on_finite(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .collect();
    if pairs.iter().all(|(x, y)| x == y) {
        return Some(1.0);
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    wilcoxon_signed_rank(&xs, &ys).ok()
}

fn renormalize_by_subject<E: Element>(
    images: &mut [Tensor<E>],
    subjects: &[usize],
) -> Result<()> {
    let mut ids: Vec<usize> = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let mut max = E::zero();
        for (img, s) in images.iter().zip(subjects) {
            if *s == id {
                for &v in img.data() {
                    if v > max {
                        max = v;
                    }
                }
            }
        }
        if !(max > E::zero()) {
            // an all-zero candidate volume stays as-is; PSNR will reflect it
            continue;
        }
        if max == E::one() {
            continue;
        }
        for (img, s) in images.iter_mut().zip(subjects) {
            if *s == id {
                *img = img.map(|v| v / max);
            }
        }
    }
    Ok(())
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text table: one row per model, mean +/- std.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .models
            .iter()
            .map(|m| m.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!(
            "{:<name_w$}  {:>18}  {:>18}\n",
            "model", "PSNR (dB)", "SSIM"
        ));
        for m in &self.models {
            let psnr_cell = format!("{:.3} +/- {:.3}", m.psnr_mean, m.psnr_std);
            let ssim_cell = format!("{:.4} +/- {:.4}", m.ssim_mean, m.ssim_std);
            out.push_str(&format!(
                "{:<name_w$}  {:>18}  {:>18}\n",
                m.name, psnr_cell, ssim_cell
            ));
            if m.psnr_inf_count > 0 {
                out.push_str(&format!(
                    "{:<name_w$}  ({} identical samples excluded from the PSNR mean)\n",
                    "", m.psnr_inf_count
                ));
            }
        }
        if !self.pairwise.is_empty() {
            out.push('\n');
            for p in &self.pairwise {
                out.push_str(&format!(
                    "{} vs {}: wins {:.1}% / {:.1}% (ties {:.1}%), p_psnr={}, p_ssim={}\n",
                    p.a,
                    p.b,
                    100.0 * p.a_wins_psnr,
                    100.0 * p.b_wins_psnr,
                    100.0 * p.ties_psnr,
                    p.p_psnr.map_or("n/a".into(), |v| format!("{v:.4}")),
                    p.p_ssim.map_or("n/a".into(), |v| format!("{v:.4}")),
                ));
            }
        }
        out
    }
}
