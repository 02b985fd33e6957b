//! Image-quality and identity metrics, the six-mask benchmark, the mask-size
//! sweep and the top-K recognition experiment.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::{complete, CompletionRequest};
use crate::dataset::ImageSet;
use crate::error::{ensure_shape, Error, Result};
use crate::imaging::ImageTensor;
use crate::masking::{fill_noise, standard_eval_masks, sweep_mask, sweep_mask_sizes, MaskSpec, EVAL_MASK_NAMES};
use crate::networks::Generator;
use crate::nn::{init, Conv2d, Op, Sequential, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const TOP_K: [usize; 3] = [1, 3, 5];

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    ensure_shape!(a.same_shape(b), "{:?} vs {:?}", a.dims(), b.dims());
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.as_slice().len() as f64)
}

/// Peak signal-to-noise ratio over the full image, peak 1, capped at 99 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        let src = &plane[r * w..(r + 1) * w];
        for c in 0..wo {
            rows[r * wo + c] = taps.iter().zip(&src[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = taps.iter().enumerate().map(|(i, t)| t * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean local SSIM on Rec. 601 luma with an 11×11 Gaussian window (σ = 1.5)
/// over every window that fits inside the image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (a.luma(), b.luma());
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let xy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Maps a face to a unit-norm identity embedding.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// Squared Euclidean distance between unit embeddings, in `[0, 4]`.
pub fn identity_distance(a: &ImageTensor, b: &ImageTensor, embedder: &dyn Embedder) -> Result<f64> {
    let (ea, eb) = (embedder.embed(a)?, embedder.embed(b)?);
    embedding_distance(&ea, &eb)
}

pub fn embedding_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_shape!(a.len() == b.len(), "embedding dims {} vs {}", a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(d.clamp(0.0, 4.0))
}

pub fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Domain(format!("cannot normalize a vector of norm {norm}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// A fixed random convolutional projector: three strided convolutions,
/// 4×4 average pooling of the last feature map and a Gaussian projection to
/// `dim` values, normalized to unit length. Deterministic in its seed and
/// needs no downloaded weights.
#[derive(Debug, Clone)]
pub struct RandomConvEmbedder {
    net: Sequential,
    projection: Vec<f64>,
    features: usize,
    dim: usize,
}

const EMBED_GRID: usize = 4;
const EMBED_CHANNELS: [usize; 4] = [3, 16, 32, 32];

impl RandomConvEmbedder {
    pub const DEFAULT_DIM: usize = 128;
    pub const DEFAULT_SEED: u64 = 0x1d_e4_71_7e;

    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ops = Vec::new();
        for (i, pair) in EMBED_CHANNELS.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let mut conv = Conv2d::new(&format!("embed{i}"), cin, cout, 3, 2, 1, false);
            let fan_in = (cin * 9) as f32;
            conv.weight.value = init::normal(conv.weight.len(), 0.0, (2.0 / fan_in).sqrt(), &mut rng);
            ops.push(Op::Conv(conv));
            if i + 2 < EMBED_CHANNELS.len() {
                ops.push(Op::Relu);
            }
        }
        let features = EMBED_CHANNELS[3] * EMBED_GRID * EMBED_GRID;
        let projection = init::normal(dim * features, 0.0, 1.0, &mut rng).into_iter().map(f64::from).collect();
        Self {
            net: Sequential::new(ops),
            projection,
            features,
            dim,
        }
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, Self::DEFAULT_SEED)
    }
}

impl Embedder for RandomConvEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.height() < 8 * EMBED_GRID || img.width() < 8 * EMBED_GRID {
            return Err(Error::Argument(format!("embedder needs at least 32x32 images, got {:?}", img.dims())));
        }
        let x = Tensor::from_image(img).map(|v| v - 0.5);
        let fm = self.net.infer(&x);
        let [_, c, h, w] = fm.shape();
        let mut pooled = vec![0.0f64; self.features];
        for ch in 0..c {
            for gy in 0..EMBED_GRID {
                for gx in 0..EMBED_GRID {
                    let (r0, r1) = (gy * h / EMBED_GRID, (gy + 1) * h / EMBED_GRID);
                    let (c0, c1) = (gx * w / EMBED_GRID, (gx + 1) * w / EMBED_GRID);
                    let mut sum = 0.0;
                    for r in r0..r1 {
                        for col in c0..c1 {
                            sum += fm.data()[(ch * h + r) * w + col] as f64;
                        }
                    }
                    pooled[(ch * EMBED_GRID + gy) * EMBED_GRID + gx] = sum / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(self.features)
            .map(|row| row.iter().zip(&pooled).map(|(p, v)| p * v).sum())
            .collect();
        normalize(&mut out)?;
        Ok(out)
    }
}

/// Anything that fills a masked face: a trained model or a baseline.
pub trait Completer {
    fn tag(&self) -> &str;
    fn complete(&self, img: &ImageTensor, mask: &MaskSpec, seed: u64) -> Result<ImageTensor>;
}

/// Returns the original untouched, the best any completer can do.
#[derive(Debug, Clone)]
pub struct IdentityCompleter {
    pub tag: String,
}

impl Default for IdentityCompleter {
    fn default() -> Self {
        Self { tag: "identity".into() }
    }
}

impl Completer for IdentityCompleter {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, img: &ImageTensor, _mask: &MaskSpec, _seed: u64) -> Result<ImageTensor> {
        Ok(img.clone())
    }
}

/// Leaves the uniform noise in the hole.
#[derive(Debug, Clone)]
pub struct NoiseFillCompleter {
    pub tag: String,
}

impl Default for NoiseFillCompleter {
    fn default() -> Self {
        Self { tag: "noise".into() }
    }
}

impl Completer for NoiseFillCompleter {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, img: &ImageTensor, mask: &MaskSpec, seed: u64) -> Result<ImageTensor> {
        fill_noise(img, mask, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// A generator used through [`complete`], with or without blending.
#[derive(Debug, Clone)]
pub struct ModelCompleter {
    pub tag: String,
    pub generator: Generator,
    pub blend: bool,
}

impl Completer for ModelCompleter {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, img: &ImageTensor, mask: &MaskSpec, seed: u64) -> Result<ImageTensor> {
        let request = CompletionRequest {
            image: img.clone(),
            mask: mask.clone(),
            seed,
            blend: self.blend,
        };
        Ok(complete(&request, &self.generator)?.image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "PSNR")]
    Psnr,
    #[serde(rename = "identity")]
    Identity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ssim, Metric::Psnr, Metric::Identity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ssim => "SSIM",
            Metric::Psnr => "PSNR",
            Metric::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mask_id: String,
    pub metric: Metric,
    pub model_tag: String,
    pub value: f64,
}

/// Per-image noise seed shared by every completer so they see the same holes.
fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Images in ascending id order, so reductions do not depend on load order.
fn sorted(images: &ImageSet) -> Result<Vec<&ImageTensor>> {
    if images.is_empty() {
        return Err(Error::Argument("evaluation needs a non-empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| images.ids[a].cmp(&images.ids[b]));
    Ok(order.into_iter().map(|i| &images.images[i]).collect())
}

/// Mean of each metric between completions and originals, one mask per image.
fn score_masks(
    completer: &dyn Completer,
    images: &[&ImageTensor],
    masks: &[MaskSpec],
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<[f64; 3]> {
    let mut sums = [0.0; 3];
    for (i, (img, mask)) in images.iter().zip(masks).enumerate() {
        let out = completer.complete(img, mask, image_seed(seed, i))?;
        sums[0] += ssim(&out, img)?;
        sums[1] += psnr(&out, img)?;
        sums[2] += identity_distance(&out, img, embedder)?;
    }
    Ok(sums.map(|s| s / images.len() as f64))
}

fn push_rows(rows: &mut Vec<EvalRow>, mask_id: &str, tag: &str, scores: [f64; 3]) {
    for (metric, value) in Metric::ALL.into_iter().zip(scores) {
        rows.push(EvalRow {
            mask_id: mask_id.into(),
            metric,
            model_tag: tag.into(),
            value,
        });
    }
}

/// Scores every completer on the six standard masks.
pub fn evaluate_masks(
    completers: &[&dyn Completer],
    images: &ImageSet,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let ordered = sorted(images)?;
    let masks = standard_eval_masks(images.image_size())?;
    let mut rows = Vec::new();
    for (name, mask) in EVAL_MASK_NAMES.iter().zip(&masks) {
        let per_image = vec![mask.clone(); ordered.len()];
        for c in completers {
            let scores = score_masks(*c, &ordered, &per_image, embedder, seed)?;
            push_rows(&mut rows, name, c.tag(), scores);
        }
    }
    Ok(rows)
}

/// Side of the sweep square on an `image_size` face for nominal size `size`,
/// which refers to a 128-pixel face.
pub fn scaled_sweep_size(size: usize, image_size: usize) -> usize {
    (size * image_size / crate::imaging::CANONICAL_SIZE).max(1)
}

/// Scores every completer on random squares of each sweep size. Mask
/// positions are drawn once per size from `seed` and shared by all completers.
pub fn mask_size_sweep(
    completers: &[&dyn Completer],
    images: &ImageSet,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let ordered = sorted(images)?;
    let side = images.image_size();
    let mut rows = Vec::new();
    for size in sweep_mask_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
        let masks = ordered
            .iter()
            .map(|_| sweep_mask(&mut rng, side, scaled_sweep_size(size, side)))
            .collect::<Result<Vec<_>>>()?;
        for c in completers {
            let scores = score_masks(*c, &ordered, &masks, embedder, seed)?;
            push_rows(&mut rows, &size.to_string(), c.tag(), scores);
        }
    }
    Ok(rows)
}

/// One tab-separated table for `metric`: a row per mask, a column per model.
pub fn mask_table(rows: &[EvalRow], metric: Metric) -> String {
    let mut masks: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        if !masks.contains(&r.mask_id.as_str()) {
            masks.push(&r.mask_id);
        }
        if !models.contains(&r.model_tag.as_str()) {
            models.push(&r.model_tag);
        }
    }
    let mut out = format!("{}\t{}\n", metric.name(), models.join("\t"));
    for k in &masks {
        out.push_str(k);
        for m in &models {
            let v = rows
                .iter()
                .find(|r| r.metric == metric && r.model_tag == *m && r.mask_id == *k)
                .map(|r| r.value);
            match v {
                Some(v) => write!(out, "\t{v:.4}").unwrap(),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

/// Long-format rows: `mask, metric, model, value`.
pub fn rows_tsv(rows: &[EvalRow]) -> String {
    let mut out = String::from("mask\tmetric\tmodel\tvalue\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{:.6}", r.mask_id, r.metric.name(), r.model_tag, r.value).unwrap();
    }
    out
}

/// Gallery and probe faces for the recognition experiment.
#[derive(Debug, Clone)]
pub struct RecognitionSplit {
    gallery: Vec<(ImageTensor, usize)>,
    probe: Vec<(ImageTensor, usize)>,
}

impl RecognitionSplit {
    /// Rejects a split with an empty side or a probe identity absent from the gallery.
    pub fn new(gallery: Vec<(ImageTensor, usize)>, probe: Vec<(ImageTensor, usize)>) -> Result<Self> {
        if gallery.is_empty() || probe.is_empty() {
            return Err(Error::Split("gallery and probe must both be non-empty".into()));
        }
        let known: BTreeSet<usize> = gallery.iter().map(|(_, id)| *id).collect();
        if let Some((_, id)) = probe.iter().find(|(_, id)| !known.contains(id)) {
            return Err(Error::Split(format!("probe identity {id} has no gallery image")));
        }
        Ok(Self { gallery, probe })
    }

    /// Alternates each identity's images between gallery and probe, gallery
    /// first, so both sides hold about half of every identity.
    pub fn alternating(images: &[ImageTensor], identities: &[usize]) -> Result<Self> {
        if images.len() != identities.len() {
            return Err(Error::Split("image and identity counts differ".into()));
        }
        let mut seen = std::collections::BTreeMap::<usize, usize>::new();
        let (mut gallery, mut probe) = (Vec::new(), Vec::new());
        for (img, &id) in images.iter().zip(identities) {
            let n = seen.entry(id).or_insert(0);
            if *n % 2 == 0 {
                gallery.push((img.clone(), id));
            } else {
                probe.push((img.clone(), id));
            }
            *n += 1;
        }
        Self::new(gallery, probe)
    }

    pub fn gallery(&self) -> &[(ImageTensor, usize)] {
        &self.gallery
    }

    pub fn probe(&self) -> &[(ImageTensor, usize)] {
        &self.probe
    }
}

/// Whether `identity` is among the `k` nearest gallery entries: true when
/// fewer than `k` entries are strictly closer than its closest match. Ties
/// count in the probe's favour, which makes the result independent of
/// gallery order.
pub fn in_top_k(distances: &[f64], gallery_ids: &[usize], identity: usize, k: usize) -> bool {
    let best = distances
        .iter()
        .zip(gallery_ids)
        .filter(|(_, &g)| g == identity)
        .map(|(d, _)| *d)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return false;
    }
    distances.iter().filter(|&&d| d < best).count() < k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionRow {
    pub variant: String,
    pub mask_id: String,
    pub k: usize,
    pub accuracy: f64,
}

/// Top-K identification accuracy of probes completed by each variant under
/// each standard mask, against the untouched gallery.
pub fn recognition_experiment(
    variants: &[&dyn Completer],
    split: &RecognitionSplit,
    embedder: &dyn Embedder,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<RecognitionRow>> {
    let gallery: Vec<Vec<f64>> = split.gallery.iter().map(|(img, _)| embedder.embed(img)).collect::<Result<_>>()?;
    let gallery_ids: Vec<usize> = split.gallery.iter().map(|(_, id)| *id).collect();
    let side = split.probe[0].0.height();
    let masks = standard_eval_masks(side)?;
    let mut rows = Vec::new();
    for v in variants {
        for (name, mask) in EVAL_MASK_NAMES.iter().zip(&masks) {
            let mut hits = vec![0usize; ks.len()];
            for (i, (img, id)) in split.probe.iter().enumerate() {
                let done = v.complete(img, mask, image_seed(seed, i))?;
                let e = embedder.embed(&done)?;
                let d: Vec<f64> = gallery.iter().map(|g| embedding_distance(&e, g)).collect::<Result<_>>()?;
                for (h, &k) in hits.iter_mut().zip(ks) {
                    *h += in_top_k(&d, &gallery_ids, *id, k) as usize;
                }
            }
            for (&k, h) in ks.iter().zip(hits) {
                rows.push(RecognitionRow {
                    variant: v.tag().into(),
                    mask_id: (*name).into(),
                    k,
                    accuracy: h as f64 / split.probe.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn recognition_tsv(rows: &[RecognitionRow]) -> String {
    let mut out = String::from("variant\tmask\tk\taccuracy\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{:.6}", r.variant, r.mask_id, r.k, r.accuracy).unwrap();
    }
    out
}
