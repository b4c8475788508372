//! Evaluation: the two-stage deblurring pipeline, per-image metrics against
//! the direct-deblur baseline, the training-ratio ablation harness, and
//! converter validation via blur-domain classifiers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::blur::{apply_blur, sample_kernel_with, BlurDomainSpec};
use crate::data::{
    apply_augment, AugmentParams, AugmentationPolicy, Sample, TestSample, UnpairedDataBundle,
};
use crate::error::{Error, Result};
use crate::image::{laplacian_variance, psnr, ssim, ImageBuffer};
use crate::losses::adversarial_loss;
use crate::nets::{
    images_to_tensor, Discriminator, DiscriminatorConfig, Generator, KnownDeblurrer,
};
use crate::train::{AdamConfig, AdamState, TrainConfig, TrainState};

// ---------------------------------------------------------------------------
// The pipeline
// ---------------------------------------------------------------------------

/// Translate into the known blur domain, then deblur there. Returns
/// (converted, restored).
pub fn deblur_pipeline(
    gen: &Generator,
    deblurrer: &KnownDeblurrer,
    blurry: &ImageBuffer,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let converted = gen.translate(&[blurry])?.remove(0);
    let restored = deblurrer.deblur(&converted)?;
    Ok((converted, restored))
}

// ---------------------------------------------------------------------------
// Metrics over a test set
// ---------------------------------------------------------------------------

/// One test image's worth of numbers. `direct` is the baseline that skips
/// translation and deblurs the raw input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr_input: f64,
    pub ssim_input: f64,
    pub psnr_direct: f64,
    pub ssim_direct: f64,
    pub psnr_pipeline: f64,
    pub ssim_pipeline: f64,
    /// How much the converter changed the image.
    pub psnr_converted_vs_input: f64,
    pub laplacian_var_input: f64,
    pub laplacian_var_converted: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub mean_psnr_input: f64,
    pub mean_ssim_input: f64,
    pub mean_psnr_direct: f64,
    pub mean_ssim_direct: f64,
    pub mean_psnr_pipeline: f64,
    pub mean_ssim_pipeline: f64,
    pub mean_psnr_converted_vs_input: f64,
    pub mean_laplacian_var_input: f64,
    pub mean_laplacian_var_converted: f64,
    /// Pipeline PSNR advantage over the direct baseline, in dB.
    pub psnr_gain_over_direct: f64,
    pub config_hash: String,
}

/// Run the pipeline and the direct baseline over every test pair.
pub fn evaluate_set(
    gen: &Generator,
    deblurrer: &KnownDeblurrer,
    test: &[TestSample],
    config_hash: &str,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluation test set".into()));
    }
    let mut rows = Vec::with_capacity(test.len());
    for t in test {
        let (converted, restored) = deblur_pipeline(gen, deblurrer, &t.blurry)?;
        let direct = deblurrer.deblur(&t.blurry)?;
        rows.push(EvalRow {
            image_id: format!("s{:04}_f{:02}", t.scene, t.frame),
            psnr_input: psnr(&t.blurry, &t.sharp)?,
            ssim_input: ssim(&t.blurry, &t.sharp)?,
            psnr_direct: psnr(&direct, &t.sharp)?,
            ssim_direct: ssim(&direct, &t.sharp)?,
            psnr_pipeline: psnr(&restored, &t.sharp)?,
            ssim_pipeline: ssim(&restored, &t.sharp)?,
            psnr_converted_vs_input: psnr(&converted, &t.blurry)?,
            laplacian_var_input: laplacian_variance(&t.blurry)?,
            laplacian_var_converted: laplacian_variance(&converted)?,
        });
    }
    let summary = summarize(&rows, config_hash);
    Ok((rows, summary))
}

pub fn summarize(rows: &[EvalRow], config_hash: &str) -> EvalSummary {
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_psnr_direct = mean(|r| r.psnr_direct);
    let mean_psnr_pipeline = mean(|r| r.psnr_pipeline);
    EvalSummary {
        images: rows.len(),
        mean_psnr_input: mean(|r| r.psnr_input),
        mean_ssim_input: mean(|r| r.ssim_input),
        mean_psnr_direct,
        mean_ssim_direct: mean(|r| r.ssim_direct),
        mean_psnr_pipeline,
        mean_ssim_pipeline: mean(|r| r.ssim_pipeline),
        mean_psnr_converted_vs_input: mean(|r| r.psnr_converted_vs_input),
        mean_laplacian_var_input: mean(|r| r.laplacian_var_input),
        mean_laplacian_var_converted: mean(|r| r.laplacian_var_converted),
        psnr_gain_over_direct: mean_psnr_pipeline - mean_psnr_direct,
        config_hash: config_hash.to_string(),
    }
}

pub fn write_eval_rows(path: &Path, rows: &[EvalRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summary: &EvalSummary) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json =
        serde_json::to_string_pretty(summary).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Ratio ablation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioOutcome {
    pub ratio: String,
    pub train_blurry: usize,
    pub train_sharp: usize,
    pub summary: EvalSummary,
}

/// Train one model per blurry:sharp ratio with identical configuration and
/// seeds, then evaluate each on the shared test set.
pub fn ratio_ablation(
    bundle: &UnpairedDataBundle,
    base: &TrainConfig,
    deblurrer: &KnownDeblurrer,
    ratios: &[(u32, u32)],
    subset_seed: u64,
    config_hash: &str,
    mut progress: impl FnMut(&str, usize),
) -> Result<Vec<RatioOutcome>> {
    let mut out = Vec::with_capacity(ratios.len());
    for &(rb, rs) in ratios {
        let sub = crate::data::apply_ratio(bundle, rb, rs, subset_seed)?;
        let mut state = TrainState::init(base.clone())?;
        let order = crate::data::SharpnessOrder::rank(&sub.sharp)?;
        let phi = crate::nets::FeatureExtractor::seeded(base.feature_seed);
        let label = format!("{rb}:{rs}");
        while state.iteration < base.iterations {
            crate::train::train_step(&mut state, &sub, &order, &phi)?;
            progress(&label, state.iteration);
        }
        let gen = Generator {
            config: base.generator,
            params: state.generator,
        };
        let (_, summary) = evaluate_set(&gen, deblurrer, sub.test_samples(), config_hash)?;
        out.push(RatioOutcome {
            ratio: label,
            train_blurry: sub.blurry.len(),
            train_sharp: sub.sharp.len(),
            summary,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Converter validation
// ---------------------------------------------------------------------------

/// Train an independent blur-domain classifier on synthetically labeled
/// crops: sharp scene content blurred into the known domain (label 1) or the
/// unknown domain (label 0). It never sees converter outputs.
pub fn train_domain_classifier(
    sharp: &[Sample],
    known: &BlurDomainSpec,
    unknown: &BlurDomainSpec,
    config: DiscriminatorConfig,
    crop: usize,
    iterations: usize,
    batch_per_class: usize,
    lr: f64,
    seed: u64,
) -> Result<Discriminator> {
    if sharp.is_empty() {
        return Err(Error::EmptyInput("classifier training set".into()));
    }
    let mut disc = Discriminator::new(config, seed);
    let mut adam = AdamState::for_params(&disc.params);
    let acfg = AdamConfig::default();
    let policy = AugmentationPolicy {
        crop,
        hflip: true,
        vflip: false,
        rot90: true,
        jitter: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for it in 0..iterations {
        let batch = |spec: &BlurDomainSpec, rng: &mut ChaCha8Rng| -> Result<Vec<ImageBuffer>> {
            (0..batch_per_class)
                .map(|_| {
                    let s = &sharp[rng.gen_range(0..sharp.len())];
                    let kernel = sample_kernel_with(spec, rng)?;
                    let p =
                        AugmentParams::sample(&policy, s.image.height(), s.image.width(), rng)?;
                    let crop_img = apply_augment(&s.image, &policy, &p);
                    apply_blur(&crop_img, &kernel, spec.noise_sigma, rng.gen())
                })
                .collect()
        };
        let known_imgs = batch(known, &mut rng)?;
        let unknown_imgs = batch(unknown, &mut rng)?;
        let mut g = Graph::new();
        let dp = disc.bind(&mut g, true);
        let kx = g.constant(images_to_tensor(&known_imgs.iter().collect::<Vec<_>>()));
        let ux = g.constant(images_to_tensor(&unknown_imgs.iter().collect::<Vec<_>>()));
        let ks = disc.forward_logits(&mut g, &dp, kx)?;
        let us = disc.forward_logits(&mut g, &dp, ux)?;
        // image-level binary cross-entropy (known=1, unknown=0) on the
        // sigmoid of the mean patch logit, matching the decision rule used
        // at classification time
        let ks_img = disc.image_score_per_sample(&mut g, ks);
        let us_img = disc.image_score_per_sample(&mut g, us);
        let adv = adversarial_loss(&mut g, ks_img, us_img)?;
        let loss = g.mul_scalar(adv, -1.0);
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("classifier loss at iteration {it}")));
        }
        let grads = g.backward(loss)?;
        let grad_tensors: Vec<_> = dp
            .vars()
            .iter()
            .map(|(_, v)| grads[v.0].map(|gv| g.value(gv).clone()))
            .collect();
        // constant lr over the first half, then linear decay, matching the
        // converter trainer's schedule shape
        let lr_t = if 2 * it < iterations {
            lr
        } else {
            lr * (iterations - it) as f64 / (iterations - iterations / 2) as f64
        };
        adam.step(&mut disc.params, &grad_tensors, lr_t, &acfg)?;
    }
    // The cross-entropy objective separates the two score distributions but
    // does not guarantee the decision boundary sits between them. Re-centre
    // it: shift the final bias so the midpoint of the two classes' median
    // image logits maps to a score of exactly 1/2, measured on a freshly
    // synthesized labeled calibration set (still no converter outputs).
    let calib_n = 96;
    let class_logits = |spec: &BlurDomainSpec, rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        (0..calib_n)
            .map(|_| {
                let s = &sharp[rng.gen_range(0..sharp.len())];
                let kernel = sample_kernel_with(spec, rng)?;
                let p = AugmentParams::sample(&policy, s.image.height(), s.image.width(), rng)?;
                let crop_img = apply_augment(&s.image, &policy, &p);
                let img = apply_blur(&crop_img, &kernel, spec.noise_sigma, rng.gen())?;
                let score = disc.classify_images(&[&img])?[0];
                Ok((score / (1.0 - score)).ln())
            })
            .collect()
    };
    let mut known_logits = class_logits(known, &mut rng)?;
    let mut unknown_logits = class_logits(unknown, &mut rng)?;
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[(v.len() - 1) / 2] + v[v.len() / 2])
    };
    let shift = -0.5 * (median(&mut known_logits) + median(&mut unknown_logits));
    for (name, t) in disc.params.entries_mut() {
        if name == "c4.b" {
            t.data[0] += shift;
        }
    }
    Ok(disc)
}

/// Fraction of images the classifier labels known-domain: per image, the
/// scores of `crops_per_image` random crops (each averaged over its four
/// quarter-turn rotations to cut orientation noise) are pooled and the
/// image counts as known if the mean score exceeds 1/2. When `crop` covers
/// the whole image this degenerates to a rotation-averaged full-image
/// decision.
fn known_label_fraction(
    disc: &Discriminator,
    images: &[&ImageBuffer],
    crop: usize,
    crops_per_image: usize,
    seed: u64,
) -> Result<f64> {
    let policy = AugmentationPolicy {
        crop,
        hflip: false,
        vflip: false,
        rot90: false,
        jitter: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled_known = 0usize;
    for img in images {
        let mut sum = 0.0;
        for _ in 0..crops_per_image {
            let mut p = AugmentParams::sample(&policy, img.height(), img.width(), &mut rng)?;
            for q in 0..4u8 {
                p.quarter_turns = q;
                let c = apply_augment(img, &policy, &p);
                sum += disc.classify_images(&[&c])?[0];
            }
        }
        if sum / (4 * crops_per_image) as f64 > 0.5 {
            labeled_known += 1;
        }
    }
    Ok(labeled_known as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConverterReport {
    pub images: usize,
    /// Adversarial discriminator: fraction of converted images scored as
    /// known-domain.
    pub acc1_converted: f64,
    pub acc1_raw: f64,
    /// Independent classifier (never trained on converter outputs).
    pub acc2_converted: f64,
    pub acc2_raw: f64,
}

/// Score converted vs raw blurry images with both the training-time
/// discriminator and the independent classifier.
pub fn validate_converter(
    gen: &Generator,
    training_disc: &Discriminator,
    classifier: &Discriminator,
    blurry: &[&ImageBuffer],
    crop: usize,
    seed: u64,
) -> Result<ConverterReport> {
    if blurry.is_empty() {
        return Err(Error::EmptyInput("converter validation set".into()));
    }
    let converted: Vec<ImageBuffer> = blurry
        .iter()
        .map(|b| Ok(gen.translate(&[b])?.remove(0)))
        .collect::<Result<_>>()?;
    let converted_refs: Vec<&ImageBuffer> = converted.iter().collect();
    let crops = 4;
    Ok(ConverterReport {
        images: blurry.len(),
        acc1_converted: known_label_fraction(training_disc, &converted_refs, crop, crops, seed)?,
        acc1_raw: known_label_fraction(training_disc, blurry, crop, crops, seed)?,
        acc2_converted: known_label_fraction(classifier, &converted_refs, crop, crops, seed)?,
        acc2_raw: known_label_fraction(classifier, blurry, crop, crops, seed)?,
    })
}
