//! The translation generator G, patch discriminator D, fixed feature
//! extractor, and known-domain deblurrers, all parameterized as named tensor
//! collections over the autodiff tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImagePyramid};
use crate::wiener::WienerDeblurrer;

pub const LRELU_SLOPE: f64 = 0.2;
/// Discriminator logits are clamped here before the sigmoid so log-losses
/// stay finite.
pub const LOGIT_CLAMP: f64 = 15.0;

// ---------------------------------------------------------------------------
// Parameter collections
// ---------------------------------------------------------------------------

/// Flat collection of named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .1
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Put every tensor on the tape; returns vars in entry order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing bound parameter {name}"))
            .1
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }
}

fn he_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> Tensor {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let n = out_c * in_c * k * k;
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps us off rand_distr here so the init stream is
            // easy to reproduce elsewhere
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_vec(&[out_c, in_c, k, k], data)
}

// ---------------------------------------------------------------------------
// Image <-> tensor bridging
// ---------------------------------------------------------------------------

/// Stack images into an NCHW tensor. All images must share dimensions.
pub fn images_to_tensor(images: &[&ImageBuffer]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert!(img.same_shape(images[0]), "batch images differ in size");
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

pub fn tensor_to_images(t: &Tensor) -> Vec<ImageBuffer> {
    assert_eq!(t.shape.len(), 4);
    assert_eq!(t.shape[1], 3);
    let (n, h, w) = (t.shape[0], t.shape[2], t.shape[3]);
    (0..n)
        .map(|i| {
            ImageBuffer::from_planar(h, w, t.data[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Pyramid level count M.
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 3,
            base_channels: 8,
        }
    }
}

impl GeneratorConfig {
    fn ch(&self, level: usize) -> usize {
        if level == 1 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }
}

/// Multi-scale residual translation network. Output heads are zero-initialized
/// so the net is exactly the identity at init.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Self {
        assert!(config.levels >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let mut p = ParamSet::new();
        for l in 1..=config.levels {
            p.push(&format!("in{l}.w"), he_conv(&mut rng, c, 3, 3));
            p.push(&format!("in{l}.b"), Tensor::zeros(&[c]));
            let in_ch = if l == 1 { c } else { config.ch(l - 1) + c };
            p.push(&format!("enc{l}a.w"), he_conv(&mut rng, config.ch(l), in_ch, 3));
            p.push(&format!("enc{l}a.b"), Tensor::zeros(&[config.ch(l)]));
            p.push(
                &format!("enc{l}b.w"),
                he_conv(&mut rng, config.ch(l), config.ch(l), 3),
            );
            p.push(&format!("enc{l}b.b"), Tensor::zeros(&[config.ch(l)]));
        }
        for l in (1..config.levels).rev() {
            let in_ch = config.ch(l + 1) + config.ch(l);
            p.push(&format!("dec{l}a.w"), he_conv(&mut rng, config.ch(l), in_ch, 3));
            p.push(&format!("dec{l}a.b"), Tensor::zeros(&[config.ch(l)]));
            p.push(
                &format!("dec{l}b.w"),
                he_conv(&mut rng, config.ch(l), config.ch(l), 3),
            );
            p.push(&format!("dec{l}b.b"), Tensor::zeros(&[config.ch(l)]));
        }
        for l in 1..=config.levels {
            // zero init: residual identity at the start of training
            p.push(&format!("head{l}.w"), Tensor::zeros(&[3, config.ch(l), 3, 3]));
            p.push(&format!("head{l}.b"), Tensor::zeros(&[3]));
        }
        Generator { config, params: p }
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        self.params.bind(g, requires_grad)
    }

    /// Multi-scale forward pass: one input var per pyramid level (level 1
    /// first), one output image per level, each `clamp(y_l + tanh(r_l))`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.config.levels {
            return Err(Error::LevelMismatch {
                expected: self.config.levels,
                got: inputs.len(),
            });
        }
        let m = self.config.levels;
        let mut encoded = Vec::with_capacity(m);
        for l in 1..=m {
            let y = inputs[l - 1];
            let fin = {
                let w = p.get(&format!("in{l}.w"));
                let b = p.get(&format!("in{l}.b"));
                let c = g.conv2d(y, w, Some(b), 1, 1);
                g.leaky_relu(c, LRELU_SLOPE)
            };
            let x = if l == 1 {
                fin
            } else {
                let pooled = g.avg_pool2(encoded[l - 2]);
                g.concat_c(pooled, fin)
            };
            let a = {
                let w = p.get(&format!("enc{l}a.w"));
                let b = p.get(&format!("enc{l}a.b"));
                let c = g.conv2d(x, w, Some(b), 1, 1);
                g.leaky_relu(c, LRELU_SLOPE)
            };
            let e = {
                let w = p.get(&format!("enc{l}b.w"));
                let b = p.get(&format!("enc{l}b.b"));
                let c = g.conv2d(a, w, Some(b), 1, 1);
                g.leaky_relu(c, LRELU_SLOPE)
            };
            encoded.push(e);
        }
        let mut decoded = vec![None; m];
        decoded[m - 1] = Some(encoded[m - 1]);
        for l in (1..m).rev() {
            let coarse = decoded[l].unwrap();
            let (th, tw) = {
                let s = &g.value(encoded[l - 1]).shape;
                (s[2], s[3])
            };
            let up = g.upsample_nearest2(coarse, th, tw);
            let cat = g.concat_c(up, encoded[l - 1]);
            let a = {
                let w = p.get(&format!("dec{l}a.w"));
                let b = p.get(&format!("dec{l}a.b"));
                let c = g.conv2d(cat, w, Some(b), 1, 1);
                g.leaky_relu(c, LRELU_SLOPE)
            };
            let d = {
                let w = p.get(&format!("dec{l}b.w"));
                let b = p.get(&format!("dec{l}b.b"));
                let c = g.conv2d(a, w, Some(b), 1, 1);
                g.leaky_relu(c, LRELU_SLOPE)
            };
            decoded[l - 1] = Some(d);
        }
        let mut outputs = Vec::with_capacity(m);
        for l in 1..=m {
            let w = p.get(&format!("head{l}.w"));
            let b = p.get(&format!("head{l}.b"));
            let r = g.conv2d(decoded[l - 1].unwrap(), w, Some(b), 1, 1);
            let t = g.tanh(r);
            let sum = g.add(inputs[l - 1], t);
            outputs.push(g.clamp(sum, 0.0, 1.0));
        }
        Ok(outputs)
    }

    /// Convenience inference path: translate a batch of images at full
    /// resolution; returns the level-1 outputs.
    pub fn translate(&self, images: &[&ImageBuffer]) -> Result<Vec<ImageBuffer>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let inputs = pyramid_batch_vars(&mut g, images, self.config.levels)?;
        let outs = self.forward(&mut g, &p, &inputs)?;
        Ok(tensor_to_images(g.value(outs[0])))
    }
}

/// Build per-level batch input vars from images (constant leaves).
pub fn pyramid_batch_vars(
    g: &mut Graph,
    images: &[&ImageBuffer],
    levels: usize,
) -> Result<Vec<Var>> {
    let pyramids: Vec<ImagePyramid> = images
        .iter()
        .map(|im| crate::image::build_pyramid(im, levels))
        .collect::<Result<_>>()?;
    let mut vars = Vec::with_capacity(levels);
    for l in 0..levels {
        let level_imgs: Vec<&ImageBuffer> = pyramids.iter().map(|p| p.level(l)).collect();
        let t = images_to_tensor(&level_imgs);
        vars.push(g.constant(t));
    }
    Ok(vars)
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_channels: 8 }
    }
}

/// 4-layer strided patch discriminator; sigmoid scores on a coarse grid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
}

pub const DISCRIMINATOR_MIN_SIDE: usize = 16;

/// Orientation offsets (in pixels at half resolution) for the band filters.
/// Eight directions covering 180 degrees at roughly equal angular spacing.
pub const BAND_ORIENTATIONS: [(i64, i64); 8] = [
    (2, 0),
    (2, 1),
    (2, 2),
    (1, 2),
    (0, 2),
    (-1, 2),
    (-2, 2),
    (-2, 1),
];

/// Floor added inside the log compression of band energies; bounds the
/// magnitude of gradients flowing back through flat image regions.
pub const BAND_LOG_EPS: f64 = 1e-6;

/// Scale applied to log-domain feature channels to keep them near unit range.
pub const BAND_FEATURE_SCALE: f64 = 0.25;

/// Fixed differentiable input features that expose how an image's frequency
/// content falls off per orientation. Isotropic blur attenuates fine detail
/// equally in every direction; directional blur leaves one orientation sharp
/// and suppresses the rest, so the per-orientation ratio of fine-scale to
/// coarse-scale energy separates the two families while the scene's own
/// oriented content (present at both scales) largely cancels.
///
/// Per orientation: a second-difference stencil at offset d (fine) and 2d
/// (coarse) on the smoothed half-resolution luminance, squared, locally
/// averaged, and log-compressed. Emitted channels: RGB (3), per-pixel
/// fine-vs-coarse log ratios (8), per-pixel fine log energies (8), the
/// per-image mean of each ratio broadcast to every position (8), and the
/// min and max of those means (2). Input sides must be multiples of 4.
pub fn blur_cue_features(g: &mut Graph, x: Var) -> Var {
    let shape = g.value(x).shape.clone();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let lum_w = g.constant(Tensor::from_vec(&[1, 3, 1, 1], vec![0.299, 0.587, 0.114]));
    let lum = g.conv2d(x, lum_w, None, 1, 0);
    // half resolution + 3x3 box: suppresses sensor noise before measuring
    // band energies
    let lp = g.avg_pool2(lum);
    let box_w = g.constant(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]));
    let sm = g.conv2d(lp, box_w, None, 1, 1);
    let stencil = |ox: i64, oy: i64| -> Tensor {
        let r = ox.unsigned_abs().max(oy.unsigned_abs()) as usize;
        let side = 2 * r + 1;
        let mut k = vec![0.0; side * side];
        let c = r as i64;
        k[(c as usize) * side + c as usize] = -2.0;
        k[((c + oy) as usize) * side + (c + ox) as usize] = 1.0;
        k[((c - oy) as usize) * side + (c - ox) as usize] = 1.0;
        Tensor::from_vec(&[1, 1, side, side], k)
    };
    let (h4, w4) = (h / 4, w / 4);
    let inv_hw4 = 1.0 / (h4 * w4) as f64;
    let mut ratio_maps = Vec::new();
    let mut fine_maps = Vec::new();
    let mut ratio_means = Vec::new();
    for (ox, oy) in BAND_ORIENTATIONS {
        let band_log = |g: &mut Graph, kx: i64, ky: i64| {
            let r = kx.unsigned_abs().max(ky.unsigned_abs()) as usize;
            let k = stencil(kx, ky);
            let kw = g.constant(k);
            let d = g.conv2d(sm, kw, None, 1, r);
            let e = g.mul(d, d);
            let p = g.avg_pool2(e);
            let pe = g.add_scalar(p, BAND_LOG_EPS);
            g.log(pe)
        };
        let lf = band_log(g, ox, oy);
        let lc = band_log(g, 2 * ox, 2 * oy);
        let ratio = g.sub(lf, lc);
        let rsum = g.sum_per_sample(ratio);
        let rmean = g.mul_scalar(rsum, inv_hw4);
        ratio_means.push(rmean);
        let rs = g.mul_scalar(ratio, BAND_FEATURE_SCALE);
        let r1 = g.upsample_nearest2(rs, h / 2, w / 2);
        ratio_maps.push(g.upsample_nearest2(r1, h, w));
        // absolute fine energy, re-centered so typical values sit near zero
        let shifted = g.add_scalar(lf, 9.0);
        let fs = g.mul_scalar(shifted, 0.1);
        let f1 = g.upsample_nearest2(fs, h / 2, w / 2);
        fine_maps.push(g.upsample_nearest2(f1, h, w));
    }
    // min and max of the per-image mean ratios across orientations, via
    // min(a,b) = (a + b - |a - b|) / 2
    let pair = |g: &mut Graph, a: Var, b: Var, max: bool| {
        let s = g.add(a, b);
        let d = g.sub(a, b);
        let ad = g.abs(d);
        let comb = if max { g.add(s, ad) } else { g.sub(s, ad) };
        g.mul_scalar(comb, 0.5)
    };
    let mut rmin = ratio_means[0];
    let mut rmax = ratio_means[0];
    for &m in &ratio_means[1..] {
        rmin = pair(g, rmin, m, false);
        rmax = pair(g, rmax, m, true);
    }
    let mut out = x;
    for m in ratio_maps.into_iter().chain(fine_maps) {
        out = g.concat_c(out, m);
    }
    for m in ratio_means {
        let s = g.mul_scalar(m, BAND_FEATURE_SCALE);
        let b = g.broadcast_per_sample(s, &[n, 1, h, w]);
        out = g.concat_c(out, b);
    }
    for m in [rmin, rmax] {
        let s = g.mul_scalar(m, BAND_FEATURE_SCALE);
        let b = g.broadcast_per_sample(s, &[n, 1, h, w]);
        out = g.concat_c(out, b);
    }
    out
}

/// Input channels of the first discriminator conv: RGB plus the channels
/// emitted by [`blur_cue_features`].
pub const DISCRIMINATOR_IN_CHANNELS: usize = 3 + 8 + 8 + 8 + 2;

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let mut p = ParamSet::new();
        p.push("c1.w", he_conv(&mut rng, c, DISCRIMINATOR_IN_CHANNELS, 3));
        p.push("c1.b", Tensor::zeros(&[c]));
        p.push("c2.w", he_conv(&mut rng, 2 * c, c, 3));
        p.push("c2.b", Tensor::zeros(&[2 * c]));
        p.push("c3.w", he_conv(&mut rng, 4 * c, 2 * c, 3));
        p.push("c3.b", Tensor::zeros(&[4 * c]));
        p.push("c4.w", he_conv(&mut rng, 1, 4 * c, 3));
        p.push("c4.b", Tensor::zeros(&[1]));
        Discriminator { config, params: p }
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        self.params.bind(g, requires_grad)
    }

    /// Patch score grid in (0,1), shape [N,1,h,w].
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let logits = self.forward_logits(g, p, x)?;
        Ok(g.sigmoid(logits))
    }

    /// Clamped pre-sigmoid patch logit grid, shape [N,1,h,w].
    pub fn forward_logits(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = g.value(x).shape.clone();
        if shape[2] < DISCRIMINATOR_MIN_SIDE
            || shape[3] < DISCRIMINATOR_MIN_SIDE
            || shape[2] % 4 != 0
            || shape[3] % 4 != 0
        {
            return Err(Error::TooSmall(format!(
                "discriminator needs at least {DISCRIMINATOR_MIN_SIDE} px on a side \
                 and sides divisible by 4, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let mut h = blur_cue_features(g, x);
        for (i, stride) in [(1, 2), (2, 2), (3, 2)] {
            let w = p.get(&format!("c{i}.w"));
            let b = p.get(&format!("c{i}.b"));
            let c = g.conv2d(h, w, Some(b), stride, 1);
            h = g.leaky_relu(c, LRELU_SLOPE);
        }
        let logits = {
            let w = p.get("c4.w");
            let b = p.get("c4.b");
            g.conv2d(h, w, Some(b), 1, 1)
        };
        Ok(g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
    }

    /// Per-sample mean patch score, shape [N].
    pub fn mean_score_per_sample(&self, g: &mut Graph, scores: Var) -> Var {
        let shape = g.value(scores).shape.clone();
        let per = (shape[1] * shape[2] * shape[3]) as f64;
        let s = g.sum_per_sample(scores);
        g.mul_scalar(s, 1.0 / per)
    }

    /// Image-level score in (0,1): sigmoid of the mean patch logit. Unlike
    /// the mean of patch sigmoids, this behaves as a single logistic readout
    /// per image and does not get diluted by uninformative patches.
    pub fn image_score_per_sample(&self, g: &mut Graph, logits: Var) -> Var {
        let mean = self.mean_score_per_sample(g, logits);
        g.sigmoid(mean)
    }

    /// Score a batch of plain images (inference): mean patch score.
    pub fn score_images(&self, images: &[&ImageBuffer]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images_to_tensor(images));
        let scores = self.forward(&mut g, &p, x)?;
        let mean = self.mean_score_per_sample(&mut g, scores);
        Ok(g.value(mean).data.clone())
    }

    /// Classify a batch of plain images (inference): image-level score.
    pub fn classify_images(&self, images: &[&ImageBuffer]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images_to_tensor(images));
        let logits = self.forward_logits(&mut g, &p, x)?;
        let score = self.image_score_per_sample(&mut g, logits);
        Ok(g.value(score).data.clone())
    }
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// Where the fixed feature weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureBackend {
    /// Deterministic seeded random convolutional stack (hermetic default).
    SeededRandom { seed: u64 },
    /// Externally supplied weights in the parameter-archive format.
    External { path: std::path::PathBuf },
}

/// Frozen feature pyramid: three conv stages at decreasing resolution.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub params: ParamSet,
    /// (channels, downsample factor) per emitted map.
    pub manifest: Vec<(usize, usize)>,
}

const FEATURE_MANIFEST: [(usize, usize); 3] = [(8, 1), (16, 2), (16, 4)];

impl FeatureExtractor {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("f1.w", he_conv(&mut rng, 8, 3, 3));
        p.push("f1.b", Tensor::zeros(&[8]));
        p.push("f2.w", he_conv(&mut rng, 16, 8, 3));
        p.push("f2.b", Tensor::zeros(&[16]));
        p.push("f3.w", he_conv(&mut rng, 16, 16, 3));
        p.push("f3.b", Tensor::zeros(&[16]));
        FeatureExtractor {
            params: p,
            manifest: FEATURE_MANIFEST.to_vec(),
        }
    }

    pub fn from_backend(backend: &FeatureBackend) -> Result<Self> {
        match backend {
            FeatureBackend::SeededRandom { seed } => Ok(Self::seeded(*seed)),
            FeatureBackend::External { path } => {
                let archive = ParamArchive::load(path)?;
                let reference = Self::seeded(0);
                let params = archive.into_param_set("feature-extractor")?;
                for (name, t) in reference.params.entries() {
                    let loaded = params
                        .entries()
                        .iter()
                        .find(|(n, _)| n == name)
                        .ok_or_else(|| {
                            Error::ArchiveMismatch(format!("missing tensor {name}"))
                        })?;
                    if loaded.1.shape != t.shape {
                        return Err(Error::ArchiveMismatch(format!(
                            "tensor {name}: shape {:?}, expected {:?}",
                            loaded.1.shape, t.shape
                        )));
                    }
                }
                Ok(FeatureExtractor {
                    params,
                    manifest: FEATURE_MANIFEST.to_vec(),
                })
            }
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        // frozen: never requires grad
        self.params.bind(g, false)
    }

    /// Fixed feature maps at decreasing resolution.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Vec<Var> {
        let c1 = {
            let w = p.get("f1.w");
            let b = p.get("f1.b");
            let c = g.conv2d(x, w, Some(b), 1, 1);
            g.leaky_relu(c, LRELU_SLOPE)
        };
        let p1 = g.avg_pool2(c1);
        let c2 = {
            let w = p.get("f2.w");
            let b = p.get("f2.b");
            let c = g.conv2d(p1, w, Some(b), 1, 1);
            g.leaky_relu(c, LRELU_SLOPE)
        };
        let p2 = g.avg_pool2(c2);
        let c3 = {
            let w = p.get("f3.w");
            let b = p.get("f3.b");
            let c = g.conv2d(p2, w, Some(b), 1, 1);
            g.leaky_relu(c, LRELU_SLOPE)
        };
        vec![c1, c2, c3]
    }

    pub fn extract(&self, img: &ImageBuffer) -> Vec<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(images_to_tensor(&[img]));
        let maps = self.forward(&mut g, &p, x);
        maps.into_iter().map(|m| g.value(m).clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Known-domain deblurrers
// ---------------------------------------------------------------------------

/// Small residual refinement net used as the trainable known-domain
/// deblurrer.
#[derive(Debug, Clone)]
pub struct LearnedDeblurrer {
    pub channels: usize,
    pub params: ParamSet,
}

impl LearnedDeblurrer {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("c1.w", he_conv(&mut rng, channels, 3, 3));
        p.push("c1.b", Tensor::zeros(&[channels]));
        p.push("c2.w", he_conv(&mut rng, channels, channels, 3));
        p.push("c2.b", Tensor::zeros(&[channels]));
        p.push("head.w", Tensor::zeros(&[3, channels, 3, 3]));
        p.push("head.b", Tensor::zeros(&[3]));
        LearnedDeblurrer { channels, params: p }
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        self.params.bind(g, requires_grad)
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let c1 = {
            let w = p.get("c1.w");
            let b = p.get("c1.b");
            let c = g.conv2d(x, w, Some(b), 1, 1);
            g.leaky_relu(c, LRELU_SLOPE)
        };
        let c2 = {
            let w = p.get("c2.w");
            let b = p.get("c2.b");
            let c = g.conv2d(c1, w, Some(b), 1, 1);
            g.leaky_relu(c, LRELU_SLOPE)
        };
        let r = {
            let w = p.get("head.w");
            let b = p.get("head.b");
            g.conv2d(c2, w, Some(b), 1, 1)
        };
        let t = g.tanh(r);
        let sum = g.add(x, t);
        g.clamp(sum, 0.0, 1.0)
    }
}

/// The pretrained deblurrer for the known blur domain.
#[derive(Debug, Clone)]
pub enum KnownDeblurrer {
    Wiener(WienerDeblurrer),
    Learned(LearnedDeblurrer),
}

impl KnownDeblurrer {
    pub fn deblur(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        match self {
            KnownDeblurrer::Wiener(w) => w.deblur(img),
            KnownDeblurrer::Learned(net) => {
                let mut g = Graph::new();
                let p = net.bind(&mut g, false);
                let x = g.constant(images_to_tensor(&[img]));
                let out = net.forward(&mut g, &p, x);
                Ok(tensor_to_images(g.value(out)).remove(0))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter archives
// ---------------------------------------------------------------------------

pub const ARCHIVE_VERSION: u32 = 1;

/// Versioned container for named tensors plus an architecture tag and the
/// hash of the config that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamArchive {
    pub version: u32,
    pub arch: String,
    pub config_hash: String,
    pub entries: Vec<ArchiveEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArchive {
    pub fn from_params(params: &ParamSet, arch: &str, config_hash: &str) -> Self {
        ParamArchive {
            version: ARCHIVE_VERSION,
            arch: arch.to_string(),
            config_hash: config_hash.to_string(),
            entries: params
                .entries()
                .iter()
                .map(|(n, t)| ArchiveEntry {
                    name: n.clone(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        }
    }

    pub fn into_param_set(self, expected_arch: &str) -> Result<ParamSet> {
        if self.version != ARCHIVE_VERSION {
            return Err(Error::ArchiveMismatch(format!(
                "version {} (expected {ARCHIVE_VERSION})",
                self.version
            )));
        }
        if self.arch != expected_arch {
            return Err(Error::ArchiveMismatch(format!(
                "arch {:?} (expected {expected_arch:?})",
                self.arch
            )));
        }
        let mut p = ParamSet::new();
        for e in self.entries {
            p.push(&e.name, Tensor::from_vec(&e.shape, e.data));
        }
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn texture(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuffer::zeros(h, w);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn generator_is_identity_at_init() {
        let gen = Generator::new(GeneratorConfig::default(), 3);
        let img = texture(32, 32, 0);
        let mut g = Graph::new();
        let p = gen.bind(&mut g, false);
        let inputs = pyramid_batch_vars(&mut g, &[&img], 3).unwrap();
        let outs = gen.forward(&mut g, &p, &inputs).unwrap();
        for (l, out) in outs.iter().enumerate() {
            let got = g.value(*out);
            let want = g.value(inputs[l]);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn generator_output_dims_match_input() {
        let gen = Generator::new(GeneratorConfig::default(), 4);
        let img = texture(48, 40, 1);
        let mut g = Graph::new();
        let p = gen.bind(&mut g, false);
        let inputs = pyramid_batch_vars(&mut g, &[&img, &img], 3).unwrap();
        let outs = gen.forward(&mut g, &p, &inputs).unwrap();
        for (l, out) in outs.iter().enumerate() {
            assert_eq!(g.value(*out).shape, g.value(inputs[l]).shape);
        }
    }

    #[test]
    fn generator_rejects_level_mismatch() {
        let gen = Generator::new(GeneratorConfig::default(), 4);
        let img = texture(64, 64, 1);
        let mut g = Graph::new();
        let p = gen.bind(&mut g, false);
        let inputs = pyramid_batch_vars(&mut g, &[&img], 2).unwrap();
        assert!(matches!(
            gen.forward(&mut g, &p, &inputs),
            Err(Error::LevelMismatch { .. })
        ));
    }

    #[test]
    fn generator_deterministic() {
        let gen = Generator::new(GeneratorConfig::default(), 9);
        let img = texture(32, 32, 2);
        let a = gen.translate(&[&img]).unwrap();
        let b = gen.translate(&[&img]).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn discriminator_zero_final_layer_scores_half() {
        let mut d = Discriminator::new(DiscriminatorConfig::default(), 5);
        for (name, t) in d.params.entries_mut() {
            if name.starts_with("c4") {
                t.data.fill(0.0);
            }
        }
        let img = texture(32, 32, 3);
        let scores = d.score_images(&[&img]).unwrap();
        assert_abs_diff_eq!(scores[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn discriminator_scores_strictly_inside_unit_interval() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 6);
        let img = texture(64, 64, 4);
        let mut g = Graph::new();
        let p = d.bind(&mut g, false);
        let x = g.constant(images_to_tensor(&[&img]));
        let s = d.forward(&mut g, &p, x).unwrap();
        for v in &g.value(s).data {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn discriminator_rejects_tiny_input() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 6);
        let img = texture(8, 8, 4);
        assert!(matches!(
            d.score_images(&[&img]),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn feature_extractor_deterministic_and_manifest_shapes() {
        let phi = FeatureExtractor::seeded(11);
        let img = texture(32, 32, 5);
        let a = phi.extract(&img);
        let b = phi.extract(&img);
        assert_eq!(a.len(), phi.manifest.len());
        for (i, (t1, t2)) in a.iter().zip(&b).enumerate() {
            assert_eq!(t1, t2);
            let (ch, down) = phi.manifest[i];
            assert_eq!(t1.shape, vec![1, ch, 32 / down, 32 / down]);
        }
    }

    #[test]
    fn feature_extractor_continuous_under_small_perturbation() {
        let phi = FeatureExtractor::seeded(12);
        let img = texture(16, 16, 6);
        let base = phi.extract(&img);
        let mut shifted = img.clone();
        for v in shifted.data_mut() {
            *v = (*v + 1e-6).min(1.0);
        }
        let moved = phi.extract(&shifted);
        let mut l1 = 0.0;
        let mut n = 0usize;
        for (a, b) in base.iter().zip(&moved) {
            for (x, y) in a.data.iter().zip(&b.data) {
                l1 += (x - y).abs();
                n += 1;
            }
        }
        assert!(l1 / n as f64 <= 1e-5);
    }

    #[test]
    fn param_count_reported_exactly() {
        let gen = Generator::new(GeneratorConfig::default(), 0);
        let manual: usize = gen.params.entries().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(gen.params.num_scalars(), manual);
        assert!(manual > 10_000, "generator unexpectedly tiny: {manual}");
    }

    #[test]
    fn archive_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.json");
        let gen = Generator::new(GeneratorConfig::default(), 7);
        ParamArchive::from_params(&gen.params, "generator", "cfg123")
            .save(&path)
            .unwrap();
        let loaded = ParamArchive::load(&path).unwrap();
        assert_eq!(loaded.config_hash, "cfg123");
        let params = loaded.clone().into_param_set("generator").unwrap();
        assert_eq!(&params, &gen.params);
        assert!(matches!(
            loaded.into_param_set("discriminator"),
            Err(Error::ArchiveMismatch(_))
        ));
    }

    /// Finite-difference probe over randomly selected parameters of each
    /// network against a scalar loss.
    fn gradient_probe<FB>(params: &ParamSet, build: FB, probes: usize, tol: f64)
    where
        FB: Fn(&ParamSet, &mut Graph) -> (Var, Vec<(String, Var)>),
    {
        let mut g = Graph::new();
        let (loss, vars) = build(params, &mut g);
        let grads = g.backward(loss).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let mut checked = 0usize;
        let mut good = 0usize;
        while checked < probes {
            let (pi, _) = {
                let i = rng.gen_range(0..params.entries().len());
                (i, ())
            };
            let (name, tensor) = &params.entries()[pi];
            let ei = rng.gen_range(0..tensor.len());
            let var = vars.iter().find(|(n, _)| n == name).unwrap().1;
            let analytic = match grads[var.0] {
                Some(gv) => g.value(gv).data[ei],
                None => 0.0,
            };
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut p2 = params.clone();
                for (n, t) in p2.entries_mut() {
                    if n == name {
                        t.data[ei] += delta;
                    }
                }
                let mut g2 = Graph::new();
                let (l2, _) = build(&p2, &mut g2);
                g2.value(l2).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-4);
            if ((fd - analytic).abs() / denom) < tol {
                good += 1;
            }
            checked += 1;
        }
        assert!(
            good * 100 >= probes * 95,
            "only {good}/{probes} probes within tolerance"
        );
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let mut gen = Generator::new(GeneratorConfig { levels: 2, base_channels: 4 }, 21);
        // nudge heads off zero so head gradients are informative
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for (name, t) in gen.params.entries_mut() {
            if name.starts_with("head") {
                for v in &mut t.data {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
        let img = texture(16, 16, 7);
        let target = texture(16, 16, 8);
        let build = |params: &ParamSet, g: &mut Graph| {
            let net = Generator {
                config: GeneratorConfig { levels: 2, base_channels: 4 },
                params: params.clone(),
            };
            let p = net.bind(g, true);
            let inputs = pyramid_batch_vars(g, &[&img], 2).unwrap();
            let outs = net.forward(g, &p, &inputs).unwrap();
            let tgt = g.constant(images_to_tensor(&[&target]));
            let d = g.sub(outs[0], tgt);
            let sq = g.mul(d, d);
            let loss = g.mean_all(sq);
            (loss, p.vars().to_vec())
        };
        gradient_probe(&gen.params, build, 100, 1e-3);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let d = Discriminator::new(DiscriminatorConfig { base_channels: 4 }, 23);
        let img = texture(16, 16, 9);
        let build = |params: &ParamSet, g: &mut Graph| {
            let net = Discriminator {
                config: DiscriminatorConfig { base_channels: 4 },
                params: params.clone(),
            };
            let p = net.bind(g, true);
            let x = g.constant(images_to_tensor(&[&img]));
            let s = net.forward(g, &p, x).unwrap();
            let loss = g.mean_all(s);
            (loss, p.vars().to_vec())
        };
        gradient_probe(&d.params, build, 100, 1e-3);
    }

    #[test]
    fn learned_deblurrer_identity_at_init_and_gradients() {
        let net = LearnedDeblurrer::new(6, 31);
        let img = texture(16, 16, 10);
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(images_to_tensor(&[&img]));
        let out = net.forward(&mut g, &p, x);
        for (a, b) in g.value(out).data.iter().zip(img.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let target = texture(16, 16, 11);
        let build = |params: &ParamSet, g: &mut Graph| {
            let net = LearnedDeblurrer {
                channels: 6,
                params: params.clone(),
            };
            let p = net.bind(g, true);
            let x = g.constant(images_to_tensor(&[&img]));
            let out = net.forward(g, &p, x);
            let tgt = g.constant(images_to_tensor(&[&target]));
            let d = g.sub(out, tgt);
            let sq = g.mul(d, d);
            let loss = g.mean_all(sq);
            (loss, p.vars().to_vec())
        };
        gradient_probe(&net.params, build, 60, 1e-3);
    }
}
