//! Deterministic multi-contrast phantom generation.
//!
//! Each subject gets a procedural anatomy (nested ellipses plus random
//! smooth blobs over a shared tissue-label map); every contrast renders
//! the same anatomy through its own intensity lookup, multiplicative bias
//! field, and additive Gaussian noise. Lesion-like blobs are always
//! visible in the generation-target contrast (the last listed one) and,
//! with probability `unique_feature_rate`, in exactly one source
//! contrast; otherwise they appear in all contrasts. All randomness comes
//! from per-(subject, slice, contrast) derived streams, so generation is
//! reproducible regardless of scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{read_mtns, write_mtns, Element, Tensor};

pub type ContrastId = String;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    /// K source contrasts followed by the generation-target contrast.
    pub contrasts: Vec<ContrastId>,
    pub tissue_count: usize,
    /// Per-contrast tissue -> mean intensity in [0,1].
    pub intensity: BTreeMap<ContrastId, Vec<f64>>,
    /// Probability that a lesion blob is visible in exactly one source
    /// contrast (and the target) instead of all contrasts.
    pub unique_feature_rate: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let mut intensity = BTreeMap::new();
        intensity.insert("A".into(), vec![0.02, 0.85, 0.35, 0.15, 0.55, 0.95]);
        intensity.insert("B".into(), vec![0.02, 0.25, 0.65, 0.90, 0.30, 0.90]);
        intensity.insert("T".into(), vec![0.02, 0.55, 0.45, 0.70, 0.75, 0.92]);
        PhantomSpec {
            image_size: 64,
            n_subjects: 12,
            slices_per_subject: 10,
            contrasts: vec!["A".into(), "B".into(), "T".into()],
            tissue_count: 6,
            intensity,
            unique_feature_rate: 0.5,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomSpec {
    pub fn k(&self) -> usize {
        self.contrasts.len().saturating_sub(1)
    }

    /// The generation-target contrast (lesions are always visible here).
    pub fn target_contrast(&self) -> &str {
        self.contrasts.last().map(|s| s.as_str()).unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.n_subjects < 1 || self.slices_per_subject < 1 {
            return Err(Error::Config("need at least one subject and one slice".into()));
        }
        if self.contrasts.len() < 2 {
            return Err(Error::Config(
                "need at least one source contrast plus the target".into(),
            ));
        }
        if self.tissue_count < 4 {
            return Err(Error::Config(
                "tissue_count must be >= 4 (background, ring, interior, lesion)".into(),
            ));
        }
        for c in &self.contrasts {
            let table = self.intensity.get(c).ok_or_else(|| {
                Error::Config(format!("missing intensity lookup for contrast '{c}'"))
            })?;
            if table.len() < self.tissue_count {
                return Err(Error::Config(format!(
                    "intensity lookup for '{c}' covers {} tissues, tissue_count is {}",
                    table.len(),
                    self.tissue_count
                )));
            }
            if table.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "intensity lookup for '{c}' must lie in [0,1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.unique_feature_rate) {
            return Err(Error::Config("unique_feature_rate must be in [0,1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Co-registered images of one cross-section: one image per contrast
/// (aligned with `spec.contrasts`), plus the shared tissue-label map. The
/// map records the full anatomy (every lesion is visible in the target by
/// construction) and is never shown to models.
#[derive(Clone, Debug)]
pub struct PhantomSample<E: Element> {
    pub subject_id: usize,
    pub slice_id: usize,
    pub images: Vec<Tensor<E>>,
    pub tissue_map: Tensor<E>,
}

impl<E: Element> PhantomSample<E> {
    /// Images of the K source contrasts under the generation-default
    /// role assignment (all but the last contrast).
    pub fn sources(&self) -> &[Tensor<E>] {
        &self.images[..self.images.len() - 1]
    }

    /// Image of the generation-target contrast.
    pub fn target(&self) -> &Tensor<E> {
        self.images.last().expect("at least two contrasts")
    }

    /// Image of a named contrast.
    pub fn image(&self, spec: &PhantomSpec, contrast: &str) -> Result<&Tensor<E>> {
        let idx = spec
            .contrasts
            .iter()
            .position(|c| c == contrast)
            .ok_or_else(|| Error::Data(format!("unknown contrast '{contrast}'")))?;
        Ok(&self.images[idx])
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<E: Element> {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub samples: Vec<PhantomSample<E>>,
}

// ---- geometry ---------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    }

    fn scaled(&self, s: f64) -> Self {
        Ellipse {
            a: self.a * s,
            b: self.b * s,
            ..*self
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

struct Blob {
    shape: Ellipse,
    label: usize,
}

struct Lesion {
    shape: Ellipse,
    /// Contrast indices the lesion is rendered in.
    visible_in: Vec<usize>,
}

struct SliceAnatomy {
    head: Ellipse,
    ring_scale: f64,
    inner: Ellipse,
    deep: Option<Ellipse>,
    blobs: Vec<Blob>,
    lesions: Vec<Lesion>,
}

fn subject_anatomy(spec: &PhantomSpec, seed: u64, subject: usize, slice: usize) -> SliceAnatomy {
    let mut rs = substream(seed, &[0x7375626a, subject as u64]);
    let cx = 0.5 + rs.gen_range(-0.02..0.02);
    let cy = 0.5 + rs.gen_range(-0.02..0.02);
    let base_a = rs.gen_range(0.38..0.44);
    let base_b = rs.gen_range(0.32..0.38);
    let theta = rs.gen_range(-0.25..0.25);
    let ring_scale = 1.0 - rs.gen_range(0.06..0.10);
    let inner = Ellipse::new(
        cx + rs.gen_range(-0.05..0.05),
        cy + rs.gen_range(-0.05..0.05),
        rs.gen_range(0.08..0.14),
        rs.gen_range(0.12..0.18),
        rs.gen_range(-0.6..0.6),
    );
    let deep = if spec.tissue_count >= 6 {
        Some(Ellipse::new(
            cx + rs.gen_range(-0.12..0.12),
            cy + rs.gen_range(0.05..0.18),
            rs.gen_range(0.06..0.11),
            rs.gen_range(0.05..0.09),
            rs.gen_range(-0.6..0.6),
        ))
    } else {
        None
    };

    // slice profile: the head tapers toward the first and last slices
    let t = if spec.slices_per_subject > 1 {
        (slice - 1) as f64 / (spec.slices_per_subject - 1) as f64
    } else {
        0.5
    };
    let profile = (1.0 - 0.5 * (2.0 * t - 1.0).powi(2)).sqrt();
    let head = Ellipse::new(cx, cy, base_a * profile, base_b * profile, theta);

    let mut rsl = substream(seed, &[0x736c6963, subject as u64, slice as u64]);
    let interior = head.scaled(ring_scale * 0.92);
    let blob_labels: Vec<usize> = (2..spec.tissue_count - 1).collect();
    let n_blobs = rsl.gen_range(2..=5usize);
    let blobs = (0..n_blobs)
        .map(|_| {
            let (bx, by) = point_inside(&interior, &mut rsl);
            Blob {
                shape: Ellipse::new(
                    bx,
                    by,
                    rsl.gen_range(0.04..0.12),
                    rsl.gen_range(0.04..0.12),
                    rsl.gen_range(-1.2..1.2),
                ),
                label: blob_labels[rsl.gen_range(0..blob_labels.len())],
            }
        })
        .collect();

    let k = spec.k();
    let target_idx = spec.contrasts.len() - 1;
    let n_lesions = rsl.gen_range(1..=2usize);
    let lesions = (0..n_lesions)
        .map(|_| {
            let (lx, ly) = point_inside(&interior, &mut rsl);
            let shape = Ellipse::new(
                lx,
                ly,
                rsl.gen_range(0.03..0.07),
                rsl.gen_range(0.03..0.07),
                rsl.gen_range(-1.2..1.2),
            );
            let unique = rsl.gen_bool(spec.unique_feature_rate);
            let visible_in = if unique {
                vec![rsl.gen_range(0..k), target_idx]
            } else {
                (0..spec.contrasts.len()).collect()
            };
            Lesion { shape, visible_in }
        })
        .collect();

    SliceAnatomy {
        head,
        ring_scale,
        inner,
        deep,
        blobs,
        lesions,
    }
}

fn point_inside(e: &Ellipse, rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let x = e.cx + rng.gen_range(-e.a..e.a);
        let y = e.cy + rng.gen_range(-e.b..e.b);
        if e.scaled(0.85).contains(x, y) {
            return (x, y);
        }
    }
}

/// Tissue label of one pixel as seen by contrast `contrast_idx`;
/// `None` renders the full map (every lesion visible).
fn label_at(
    spec: &PhantomSpec,
    anatomy: &SliceAnatomy,
    x: f64,
    y: f64,
    contrast_idx: Option<usize>,
) -> usize {
    if !anatomy.head.contains(x, y) {
        return 0;
    }
    let interior = anatomy.head.scaled(anatomy.ring_scale);
    if !interior.contains(x, y) {
        return 1; // outer ring
    }
    let mut label = 2; // base interior tissue
    if anatomy.inner.contains(x, y) {
        label = 3;
    }
    if let Some(deep) = &anatomy.deep {
        if deep.contains(x, y) {
            label = spec.tissue_count - 2;
        }
    }
    for blob in &anatomy.blobs {
        if blob.shape.contains(x, y) {
            label = blob.label;
        }
    }
    for lesion in &anatomy.lesions {
        let visible = match contrast_idx {
            Some(ci) => lesion.visible_in.contains(&ci),
            None => true,
        };
        if visible && lesion.shape.contains(x, y) {
            label = spec.tissue_count - 1;
        }
    }
    label
}

fn render_contrast<E: Element>(
    spec: &PhantomSpec,
    anatomy: &SliceAnatomy,
    seed: u64,
    subject: usize,
    slice: usize,
    contrast_idx: usize,
) -> Tensor<E> {
    let s = spec.image_size;
    let contrast = &spec.contrasts[contrast_idx];
    let table = &spec.intensity[contrast];

    let mut rb = substream(seed, &[0x62696173, subject as u64, contrast_idx as u64]);
    let (b1, b2, b3) = (
        rb.gen_range(-0.15..0.15),
        rb.gen_range(-0.15..0.15),
        rb.gen_range(-0.15..0.15),
    );
    let mut rn = substream(
        seed,
        &[0x6e6f6973, subject as u64, slice as u64, contrast_idx as u64],
    );
    let normal = Normal::new(0.0, 1.0).unwrap();

    Tensor::from_fn(vec![1, 1, s, s], |idx| {
        let py = idx / s;
        let px = idx % s;
        let x = (px as f64 + 0.5) / s as f64;
        let y = (py as f64 + 0.5) / s as f64;
        let label = label_at(spec, anatomy, x, y, Some(contrast_idx));
        let mut val = table[label];
        let bias = 1.0 + b1 * (x - 0.5) + b2 * (y - 0.5) + b3 * (x - 0.5) * (y - 0.5);
        val *= bias;
        val += spec.noise_sigma * normal.sample(&mut rn);
        E::from_f64(val.max(0.0))
    })
    .expect("non-empty image")
}

/// Normalizes one subject volume of one contrast: divides every voxel by
/// the volume maximum so the new maximum is exactly 1.
pub fn normalize<E: Element>(volume: &mut [Tensor<E>]) -> Result<()> {
    let mut max = E::zero();
    for img in volume.iter() {
        for &v in img.data() {
            if v > max {
                max = v;
            }
        }
    }
    if !(max > E::zero()) {
        return Err(Error::Data(
            "cannot normalize an all-zero volume (max intensity is 0)".into(),
        ));
    }
    if max == E::one() {
        return Ok(());
    }
    for img in volume.iter_mut() {
        *img = img.map(|v| v / max);
    }
    Ok(())
}

/// Generates the full dataset: per-subject anatomies, per-contrast
/// renderings, then per-(subject, contrast) volume normalization.
pub fn generate<E: Element>(spec: &PhantomSpec, seed: u64) -> Result<Dataset<E>> {
    spec.validate()?;
    let n_contrasts = spec.contrasts.len();
    let mut samples = Vec::with_capacity(spec.n_subjects * spec.slices_per_subject);
    for subject in 1..=spec.n_subjects {
        let mut per_contrast: Vec<Vec<Tensor<E>>> = vec![Vec::new(); n_contrasts];
        let mut tissue_maps = Vec::with_capacity(spec.slices_per_subject);
        for slice in 1..=spec.slices_per_subject {
            let anatomy = subject_anatomy(spec, seed, subject, slice);
            for ci in 0..n_contrasts {
                per_contrast[ci].push(render_contrast(spec, &anatomy, seed, subject, slice, ci));
            }
            let s = spec.image_size;
            tissue_maps.push(
                Tensor::from_fn(vec![1, 1, s, s], |idx| {
                    let py = idx / s;
                    let px = idx % s;
                    let x = (px as f64 + 0.5) / s as f64;
                    let y = (py as f64 + 0.5) / s as f64;
                    E::from_f64(label_at(spec, &anatomy, x, y, None) as f64)
                })
                .expect("non-empty map"),
            );
        }
        for vol in per_contrast.iter_mut() {
            normalize(vol)?;
        }
        for slice in 1..=spec.slices_per_subject {
            samples.push(PhantomSample {
                subject_id: subject,
                slice_id: slice,
                images: per_contrast
                    .iter()
                    .map(|vol| vol[slice - 1].clone())
                    .collect(),
                tissue_map: tissue_maps[slice - 1].clone(),
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

// ---- splitting ----------------------------------------------------------------

/// Subject-level sequential split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SplitSubjects {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sequential subject-level assignment: subjects `1..=train` go to train,
/// the next `val` to validation, the next `test` to test. No subject
/// straddles splits.
pub fn split<E: Element>(ds: &Dataset<E>, counts: SplitCounts) -> Result<SplitSubjects> {
    let total = counts.train + counts.val + counts.test;
    if total > ds.spec.n_subjects {
        return Err(Error::Config(format!(
            "split counts ({} + {} + {}) exceed {} subjects",
            counts.train, counts.val, counts.test, ds.spec.n_subjects
        )));
    }
    let ids: Vec<usize> = (1..=ds.spec.n_subjects).collect();
    Ok(SplitSubjects {
        train: ids[..counts.train].to_vec(),
        val: ids[counts.train..counts.train + counts.val].to_vec(),
        test: ids[counts.train + counts.val..total].to_vec(),
    })
}

impl<E: Element> Dataset<E> {
    /// Samples belonging to the given subjects, in dataset order.
    pub fn subset(&self, subjects: &[usize]) -> Vec<&PhantomSample<E>> {
        self.samples
            .iter()
            .filter(|s| subjects.contains(&s.subject_id))
            .collect()
    }
}

// ---- dataset I/O -----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub splits: SplitSubjects,
}

/// Writes `dir/manifest.json` plus one MTNS file per image
/// (`dir/sub{S}/slice{I}/{contrast}.mtns` and `tissue.mtns`), with
/// optional PGM siblings for human inspection.
pub fn write_dataset<E: Element>(
    ds: &Dataset<E>,
    dir: impl AsRef<Path>,
    splits: &SplitSubjects,
    pgm: bool,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for sample in &ds.samples {
        let sdir = dir.join(format!("sub{}/slice{}", sample.subject_id, sample.slice_id));
        for (ci, img) in sample.images.iter().enumerate() {
            let name = &ds.spec.contrasts[ci];
            write_mtns(sdir.join(format!("{name}.mtns")), img)?;
            if pgm {
                write_pgm(sdir.join(format!("{name}.pgm")), img)?;
            }
        }
        write_mtns(sdir.join("tissue.mtns"), &sample.tissue_map)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        seed: ds.seed,
        spec: ds.spec.clone(),
        splits: splits.clone(),
    };
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&mpath, format!("manifest serialization: {e}")))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Reads a dataset directory back; missing or corrupt files are named
/// individually.
pub fn read_dataset<E: Element>(dir: impl AsRef<Path>) -> Result<(Dataset<E>, SplitSubjects)> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&mpath, format!("invalid manifest: {e}")))?;
    manifest.spec.validate()?;
    let spec = manifest.spec;
    let mut samples = Vec::new();
    for subject in 1..=spec.n_subjects {
        for slice in 1..=spec.slices_per_subject {
            let sdir = dir.join(format!("sub{subject}/slice{slice}"));
            let mut images = Vec::with_capacity(spec.contrasts.len());
            for name in &spec.contrasts {
                images.push(read_mtns(sdir.join(format!("{name}.mtns")))?);
            }
            let tissue_map = read_mtns(sdir.join("tissue.mtns"))?;
            samples.push(PhantomSample {
                subject_id: subject,
                slice_id: slice,
                images,
                tissue_map,
            });
        }
    }
    Ok((
        Dataset {
            spec,
            seed: manifest.seed,
            samples,
        },
        manifest.splits,
    ))
}

/// Binary PGM ("P5", maxval 255) with intensity `round(255 * v)`.
pub fn write_pgm<E: Element>(path: impl AsRef<Path>, img: &Tensor<E>) -> Result<()> {
    let path = path.as_ref();
    let (_, _, h, w) = img.dims4()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in img.data() {
        let x = (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(x);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
