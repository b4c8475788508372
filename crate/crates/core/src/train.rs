//! Adversarial training of the blur translation network, plus the Adam
//! optimizer and the supervised routine for the learned known-domain
//! deblurrer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::blur::BlurPair;
use crate::data::{
    apply_augment, AugmentParams, AugmentationPolicy, CurriculumSchedule, SharpnessOrder,
    UnpairedDataBundle,
};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{
    adversarial_loss, generator_adversarial_term, gradient_penalty,
    perceptual_reconstruction_loss, total_losses, LossReport, LossWeights,
};
use crate::nets::{
    images_to_tensor, pyramid_batch_vars, Discriminator, DiscriminatorConfig, FeatureExtractor,
    Generator, GeneratorConfig, LearnedDeblurrer, ParamSet,
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, index-aligned with a `ParamSet`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(&t.shape))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam step with bias correction. `grads` is index-aligned with the
    /// parameter entries; `None` gradients leave the parameter untouched but
    /// still decay its moments.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Tensor>],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        assert_eq!(grads.len(), params.entries().len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.entries_mut().iter_mut().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => {
                    if g.shape != p.shape {
                        return Err(Error::ShapeMismatch(format!(
                            "gradient shape {:?} for parameter shape {:?}",
                            g.shape, p.shape
                        )));
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(&p.shape);
                    &zero
                }
            };
            for j in 0..p.data.len() {
                let gj = g.data[j];
                if !gj.is_finite() {
                    return Err(Error::NonFinite("gradient".into()));
                }
                self.m[i].data[j] = cfg.beta1 * self.m[i].data[j] + (1.0 - cfg.beta1) * gj;
                self.v[i].data[j] = cfg.beta2 * self.v[i].data[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = self.m[i].data[j] / bc1;
                let vhat = self.v[i].data[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub augment: AugmentationPolicy,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub feature_seed: u64,
    pub seed: u64,
    /// Use the non-saturating generator objective instead of the minimax one.
    pub non_saturating: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 8,
            lr: 2e-4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            curriculum: CurriculumSchedule::default(),
            augment: AugmentationPolicy::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            feature_seed: 17,
            seed: 0,
            non_saturating: false,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        self.curriculum.validate()?;
        if self.augment.crop < crate::nets::DISCRIMINATOR_MIN_SIDE {
            return Err(Error::Config(format!(
                "crop {} below the discriminator minimum {}",
                self.augment.crop,
                crate::nets::DISCRIMINATOR_MIN_SIDE
            )));
        }
        Ok(())
    }

    /// First iteration (0-based) at which the learning rate starts decaying:
    /// the midpoint, rounded up.
    pub fn decay_start(&self) -> usize {
        self.iterations.div_ceil(2)
    }

    /// Learning rate for iteration `t` (0-based): constant through the first
    /// half, then linear to zero at `iterations`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.iterations {
            return Err(Error::IterOutOfRange {
                t,
                total: self.iterations,
            });
        }
        let ds = self.decay_start();
        if t < ds {
            Ok(self.lr)
        } else {
            Ok(self.lr * (self.iterations - t) as f64 / (self.iterations - ds) as f64)
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed iterations.
    pub iteration: usize,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: ChaCha8Rng,
    pub last_report: Option<LossReport>,
}

impl TrainState {
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator, config.seed.wrapping_add(1)).params;
        let discriminator =
            Discriminator::new(config.discriminator, config.seed.wrapping_add(2)).params;
        Ok(TrainState {
            iteration: 0,
            adam_g: AdamState::for_params(&generator),
            adam_d: AdamState::for_params(&discriminator),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3)),
            generator,
            discriminator,
            last_report: None,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: TrainState =
            serde_json::from_str(&json).map_err(|e| Error::Serde(e.to_string()))?;
        state.config.validate()?;
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// The training step
// ---------------------------------------------------------------------------

fn augmented_batch(
    images: &[&ImageBuffer],
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageBuffer>> {
    images
        .iter()
        .map(|im| {
            let p = AugmentParams::sample(policy, im.height(), im.width(), rng)?;
            Ok(apply_augment(im, policy, &p))
        })
        .collect()
}

/// One alternating update: discriminator first (adversarial + gradient
/// penalty), then generator (adversarial + perceptual reconstruction).
pub fn train_step(
    state: &mut TrainState,
    bundle: &UnpairedDataBundle,
    order: &SharpnessOrder,
    phi: &FeatureExtractor,
) -> Result<LossReport> {
    let cfg = state.config.clone();
    let t = state.iteration;
    let lr = cfg.lr_at(t)?;
    let n = cfg.batch_size;

    // batch selection: blurry uniformly, known through the curriculum
    let blur_idx: Vec<usize> = (0..n)
        .map(|_| state.rng.gen_range(0..bundle.blurry.len()))
        .collect();
    let known_idx = crate::data::curriculum_sample(order, &cfg.curriculum, t, n, &mut state.rng)?;

    let blur_imgs: Vec<&ImageBuffer> = blur_idx.iter().map(|&i| &bundle.blurry[i].image).collect();
    let known_imgs: Vec<&ImageBuffer> =
        known_idx.iter().map(|&i| &bundle.known[i].image).collect();
    let blur_crops = augmented_batch(&blur_imgs, &cfg.augment, &mut state.rng)?;
    let known_crops = augmented_batch(&known_imgs, &cfg.augment, &mut state.rng)?;
    let eps: Vec<f64> = (0..n).map(|_| state.rng.gen_range(0.0..1.0)).collect();

    let blur_refs: Vec<&ImageBuffer> = blur_crops.iter().collect();
    let known_refs: Vec<&ImageBuffer> = known_crops.iter().collect();
    let real_t = images_to_tensor(&known_refs);

    let gen = Generator {
        config: cfg.generator,
        params: state.generator.clone(),
    };
    let disc = Discriminator {
        config: cfg.discriminator,
        params: state.discriminator.clone(),
    };

    // ---- discriminator update ----
    let (adv_value, gp_value) = {
        let mut g = Graph::new();
        let gp_bound = gen.bind(&mut g, false);
        let dp = disc.bind(&mut g, true);
        let inputs = pyramid_batch_vars(&mut g, &blur_refs, cfg.generator.levels)?;
        let outs = gen.forward(&mut g, &gp_bound, &inputs)?;
        let fake_t = g.value(outs[0]).clone();
        let real = g.constant(real_t.clone());
        let fake = g.constant(fake_t.clone());
        let real_scores = disc.forward(&mut g, &dp, real)?;
        let fake_scores = disc.forward(&mut g, &dp, fake)?;
        let adv = adversarial_loss(&mut g, real_scores, fake_scores)?;
        let gp = gradient_penalty(&mut g, &real_t, &fake_t, &eps, |g, y| {
            let scores = disc.forward(g, &dp, y)?;
            Ok(disc.mean_score_per_sample(g, scores))
        })?;
        let neg_adv = g.mul_scalar(adv, -1.0);
        let gp_w = g.mul_scalar(gp, cfg.weights.lambda_grad);
        let total_d = g.add(neg_adv, gp_w);
        let grads = g.backward(total_d)?;
        let grad_tensors: Vec<Option<Tensor>> = dp
            .vars()
            .iter()
            .map(|(_, v)| grads[v.0].map(|gv| g.value(gv).clone()))
            .collect();
        let mut d_params = state.discriminator.clone();
        state
            .adam_d
            .step(&mut d_params, &grad_tensors, lr, &cfg.adam)?;
        state.discriminator = d_params;
        (g.value(adv).item(), g.value(gp).item())
    };

    // ---- generator update (against the freshly updated discriminator) ----
    let disc = Discriminator {
        config: cfg.discriminator,
        params: state.discriminator.clone(),
    };
    let rec_value = {
        let mut g = Graph::new();
        let gp_bound = gen.bind(&mut g, true);
        let dp = disc.bind(&mut g, false);
        let pp = phi.bind(&mut g);
        let inputs = pyramid_batch_vars(&mut g, &blur_refs, cfg.generator.levels)?;
        let outs = gen.forward(&mut g, &gp_bound, &inputs)?;
        let fake_scores = disc.forward(&mut g, &dp, outs[0])?;
        let adv_term = generator_adversarial_term(&mut g, fake_scores, cfg.non_saturating)?;
        let rec = perceptual_reconstruction_loss(&mut g, phi, &pp, &inputs, &outs)?;
        let rec_w = g.mul_scalar(rec, cfg.weights.lambda_rec);
        let total_g = g.add(adv_term, rec_w);
        let grads = g.backward(total_g)?;
        let grad_tensors: Vec<Option<Tensor>> = gp_bound
            .vars()
            .iter()
            .map(|(_, v)| grads[v.0].map(|gv| g.value(gv).clone()))
            .collect();
        let mut g_params = state.generator.clone();
        state
            .adam_g
            .step(&mut g_params, &grad_tensors, lr, &cfg.adam)?;
        state.generator = g_params;
        g.value(rec).item()
    };

    state.iteration += 1;
    let report = total_losses(adv_value, rec_value, gp_value, &cfg.weights);
    report.check_finite()?;
    state.last_report = Some(report);
    Ok(report)
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Per-iteration CSV log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub adv: f64,
    pub rec: f64,
    pub grad_pen: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub curriculum_fraction: f64,
    pub lr: f64,
}

/// Run (or resume) training to completion. Writes `checkpoint.json` and
/// appends to `train_log.csv` under `out_dir`. On a non-finite loss the
/// current state is dumped to `diverged_state.json` and the error returned.
pub fn run_training(
    state: &mut TrainState,
    bundle: &UnpairedDataBundle,
    out_dir: &Path,
    mut progress: impl FnMut(usize, &LossReport),
) -> Result<()> {
    state.config.validate()?;
    bundle.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let order = SharpnessOrder::rank(&bundle.sharp)?;
    let phi = FeatureExtractor::seeded(state.config.feature_seed);
    let log_path = out_dir.join("train_log.csv");
    let fresh_log = !log_path.exists();
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new()
        .has_headers(fresh_log)
        .from_writer(log_file);

    while state.iteration < state.config.iterations {
        let t = state.iteration;
        let report = match train_step(state, bundle, &order, &phi) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                let dump = out_dir.join("diverged_state.json");
                state.save(&dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.serialize(LogRow {
            iteration: t + 1,
            adv: report.adv,
            rec: report.rec,
            grad_pen: report.grad_pen,
            total_g: report.total_g,
            total_d: report.total_d,
            curriculum_fraction: state.config.curriculum.fraction_at(t),
            lr: state.config.lr_at(t)?,
        })
        .map_err(|e| Error::Serde(e.to_string()))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        progress(state.iteration, &report);
        if state.iteration % state.config.checkpoint_every == 0
            || state.iteration == state.config.iterations
        {
            state.save(&out_dir.join("checkpoint.json"))?;
        }
    }
    state.save(&out_dir.join("checkpoint.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Supervised training of the learned known-domain deblurrer
// ---------------------------------------------------------------------------

/// Fit the small residual deblurrer on known-domain pairs (blurry -> sharp
/// crops) with an L2 objective.
pub fn train_learned_deblurrer(
    pairs: &[BlurPair],
    channels: usize,
    crop: usize,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<LearnedDeblurrer> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("deblurrer training pairs".into()));
    }
    let mut net = LearnedDeblurrer::new(channels, seed);
    let mut adam = AdamState::for_params(&net.params);
    let acfg = AdamConfig::default();
    let policy = AugmentationPolicy {
        crop,
        hflip: true,
        vflip: false,
        rot90: false,
        jitter: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for _ in 0..iterations {
        let mut xs = Vec::with_capacity(batch_size);
        let mut ys = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let p = &pairs[rng.gen_range(0..pairs.len())];
            let ap = AugmentParams::sample(&policy, p.blurry.height(), p.blurry.width(), &mut rng)?;
            xs.push(apply_augment(&p.blurry, &policy, &ap));
            ys.push(apply_augment(&p.sharp, &policy, &ap));
        }
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let x = g.constant(images_to_tensor(&xs.iter().collect::<Vec<_>>()));
        let y = g.constant(images_to_tensor(&ys.iter().collect::<Vec<_>>()));
        let out = net.forward(&mut g, &bound, x);
        let d = g.sub(out, y);
        let sq = g.mul(d, d);
        let loss = g.mean_all(sq);
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite("deblurrer loss".into()));
        }
        let grads = g.backward(loss)?;
        let grad_tensors: Vec<Option<Tensor>> = bound
            .vars()
            .iter()
            .map(|(_, v)| grads[v.0].map(|gv| g.value(gv).clone()))
            .collect();
        adam.step(&mut net.params, &grad_tensors, lr, &acfg)?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_bundle, SynthSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch_size: 2,
            lr: 1e-3,
            curriculum: CurriculumSchedule {
                start_fraction: 0.5,
                ramp_start: 2,
                ramp_end: 4,
            },
            augment: AugmentationPolicy {
                crop: 16,
                jitter: 0.02,
                ..AugmentationPolicy::default()
            },
            generator: GeneratorConfig {
                levels: 2,
                base_channels: 4,
            },
            discriminator: DiscriminatorConfig { base_channels: 4 },
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_bundle() -> UnpairedDataBundle {
        synthesize_bundle(&SynthSpec {
            seed: 5,
            train_scenes: 6,
            test_scenes: 1,
            frames_per_scene: 2,
            height: 32,
            width: 32,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // loss = 0.5 * a * x^2, gradient a*x; independent reference update
        let a = 3.0;
        let mut x = 1.0f64;
        let cfg = AdamConfig::default();
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let lr = 0.01;

        let mut params = ParamSet::new();
        params.push("x", Tensor::from_vec(&[1], vec![x]));
        let mut adam = AdamState::for_params(&params);
        for t in 1..=25 {
            let g = a * x;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + cfg.eps);

            let gp = a * params.get("x").data[0];
            adam.step(
                &mut params,
                &[Some(Tensor::from_vec(&[1], vec![gp]))],
                lr,
                &cfg,
            )
            .unwrap();
            assert_abs_diff_eq!(params.get("x").data[0], x, epsilon = 1e-12);
        }
        // and it actually descends
        assert!(x.abs() < 1.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = ParamSet::new();
        params.push("x", Tensor::from_vec(&[1], vec![0.0]));
        let mut adam = AdamState::for_params(&params);
        let err = adam.step(
            &mut params,
            &[Some(Tensor::from_vec(&[1], vec![f64::NAN]))],
            0.01,
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn lr_schedule_flat_then_linear_to_zero() {
        let cfg = TrainConfig {
            iterations: 1000,
            lr: 2e-4,
            ..tiny_config()
        };
        assert_eq!(cfg.decay_start(), 500);
        assert_eq!(cfg.lr_at(0).unwrap(), 2e-4);
        assert_eq!(cfg.lr_at(499).unwrap(), 2e-4);
        assert_eq!(cfg.lr_at(500).unwrap(), 2e-4);
        assert_abs_diff_eq!(cfg.lr_at(750).unwrap(), 1e-4, epsilon = 1e-18);
        assert_eq!(cfg.lr_at(1000).unwrap(), 0.0);
        assert!(matches!(
            cfg.lr_at(1001),
            Err(Error::IterOutOfRange { .. })
        ));
        // odd totals round the decay start up
        let odd = TrainConfig {
            iterations: 7,
            ..tiny_config()
        };
        assert_eq!(odd.decay_start(), 4);
        assert_eq!(odd.lr_at(4).unwrap(), odd.lr);
        assert!(odd.lr_at(5).unwrap() < odd.lr);
    }

    #[test]
    fn train_step_reports_hold_weighted_identities() {
        let bundle = tiny_bundle();
        let mut state = TrainState::init(tiny_config()).unwrap();
        let order = SharpnessOrder::rank(&bundle.sharp).unwrap();
        let phi = FeatureExtractor::seeded(state.config.feature_seed);
        let before = state.generator.clone();
        let r = train_step(&mut state, &bundle, &order, &phi).unwrap();
        r.check_finite().unwrap();
        assert_eq!(r.total_g, r.adv + 0.8 * r.rec);
        assert_eq!(r.total_d, -r.adv + 0.005 * r.grad_pen);
        assert!(r.grad_pen >= 0.0);
        assert_eq!(state.iteration, 1);
        assert_ne!(state.generator, before, "generator should move");
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let bundle = tiny_bundle();
        let mut a = TrainState::init(tiny_config()).unwrap();
        let mut b = TrainState::init(tiny_config()).unwrap();
        let order = SharpnessOrder::rank(&bundle.sharp).unwrap();
        let phi = FeatureExtractor::seeded(a.config.feature_seed);
        for _ in 0..3 {
            train_step(&mut a, &bundle, &order, &phi).unwrap();
            train_step(&mut b, &bundle, &order, &phi).unwrap();
        }
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.discriminator, b.discriminator);
        assert_eq!(a.rng, b.rng);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_identical() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let straight_dir = dir.path().join("straight");
        let resumed_dir = dir.path().join("resumed");

        let mut straight = TrainState::init(tiny_config()).unwrap();
        run_training(&mut straight, &bundle, &straight_dir, |_, _| {}).unwrap();

        // same run, but stop after 3 iterations, reload from disk, continue
        let mut first = TrainState::init(tiny_config()).unwrap();
        let order = SharpnessOrder::rank(&bundle.sharp).unwrap();
        let phi = FeatureExtractor::seeded(first.config.feature_seed);
        for _ in 0..3 {
            train_step(&mut first, &bundle, &order, &phi).unwrap();
        }
        let ckpt = resumed_dir.join("checkpoint.json");
        first.save(&ckpt).unwrap();
        let mut resumed = TrainState::load(&ckpt).unwrap();
        assert_eq!(resumed, first);
        run_training(&mut resumed, &bundle, &resumed_dir, |_, _| {}).unwrap();

        assert_eq!(straight.generator, resumed.generator);
        assert_eq!(straight.discriminator, resumed.discriminator);
        assert_eq!(straight.adam_g, resumed.adam_g);
        assert_eq!(straight.adam_d, resumed.adam_d);
        assert_eq!(straight.rng, resumed.rng);
    }

    #[test]
    fn run_training_writes_log_and_checkpoint() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::init(tiny_config()).unwrap();
        let mut seen = 0;
        run_training(&mut state, &bundle, dir.path(), |_, _| seen += 1).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(state.iteration, 6);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let mut lines = log.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,adv,rec,grad_pen,total_g,total_d,curriculum_fraction,lr"
        );
        assert_eq!(lines.count(), 6);
        assert!(dir.path().join("checkpoint.json").exists());
    }

    #[test]
    fn divergence_dumps_state_and_errors() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::init(tiny_config()).unwrap();
        // poison a generator weight
        for (name, t) in state.generator.entries_mut() {
            if name == "in1.w" {
                t.data[0] = f64::NAN;
            }
        }
        let err = run_training(&mut state, &bundle, dir.path(), |_, _| {});
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(dir.path().join("diverged_state.json").exists());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config();
        cfg.iterations = 0;
        assert!(TrainState::init(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.augment.crop = 8;
        assert!(TrainState::init(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.curriculum.ramp_end = 0;
        cfg.curriculum.ramp_start = 5;
        assert!(TrainState::init(cfg).is_err());
    }

    #[test]
    fn learned_deblurrer_beats_its_input() {
        use crate::blur::BlurKernel;
        use crate::data::render_scene_frames;
        use crate::image::psnr;
        let kernel = BlurKernel::gaussian(1.2);
        let pairs: Vec<BlurPair> = (0..6)
            .map(|i| {
                let sharp = render_scene_frames(100 + i, 1, 48, 48).remove(0);
                BlurPair::synthetic(sharp, kernel.clone(), 0.0, i).unwrap()
            })
            .collect();
        let net = train_learned_deblurrer(&pairs[..4], 8, 24, 120, 4, 2e-3, 0).unwrap();
        // held-out pairs: the net should make real progress over the input
        let mut gain = 0.0;
        for p in &pairs[4..] {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, false);
            let x = g.constant(images_to_tensor(&[&p.blurry]));
            let out = net.forward(&mut g, &bound, x);
            let img = crate::nets::tensor_to_images(g.value(out)).remove(0);
            gain += psnr(&img, &p.sharp).unwrap() - psnr(&p.blurry, &p.sharp).unwrap();
        }
        gain /= 2.0;
        assert!(gain > 0.5, "mean psnr gain {gain} dB");
    }
}
