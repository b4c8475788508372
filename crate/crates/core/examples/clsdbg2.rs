use blur2blur::blur::*;
use blur2blur::data::*;
use blur2blur::eval::train_domain_classifier;
use blur2blur::image::ImageBuffer;
use blur2blur::nets::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    // plenty of synthetic sharp content for the classifier
    let sharp: Vec<Sample> = (0..60u64)
        .map(|i| Sample { scene: i as u32, frame: 0, image: render_scene_frames(2000 + i, 1, 96, 96).remove(0) })
        .collect();
    let known = BlurDomainSpec::default_known();
    let unknown = BlurDomainSpec::default_unknown();
    for (crop, iters) in [(96usize, 10000usize)] {
        let t0 = std::time::Instant::now();
        let disc = train_domain_classifier(
            &sharp, &known, &unknown,
            DiscriminatorConfig { base_channels: 8 }, crop, iters, 6, 1e-3, 3,
        ).unwrap();
        let policy = AugmentationPolicy { crop, hflip: false, vflip: false, rot90: false, jitter: 0.0 };
        // rotation-averaged image score, matching the validation protocol
        let tta = |img: &ImageBuffer| -> f64 {
            let mut p = AugmentParams { y0: 0, x0: 0, hflip: false, vflip: false, quarter_turns: 0, jitter: 0.0 };
            let mut s = 0.0;
            for q in 0..4u8 {
                p.quarter_turns = q;
                let c = apply_augment(img, &policy, &p);
                s += disc.classify_images(&[&c]).unwrap()[0];
            }
            s / 4.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // train-scene accuracy (same scenes, fresh kernels)
        let (mut tk, mut tu) = (vec![], vec![]);
        for i in 0..40u64 {
            let s = render_scene_frames(2000 + (i % 60), 1, 96, 96).remove(0);
            let kb = apply_blur(&s, &sample_kernel_with(&known, &mut rng).unwrap(), 0.01, 500 + i).unwrap();
            let ub = apply_blur(&s, &sample_kernel_with(&unknown, &mut rng).unwrap(), 0.01, 600 + i).unwrap();
            tk.push(tta(&kb));
            tu.push(tta(&ub));
        }
        let (mut hk, mut hu) = (vec![], vec![]);
        for i in 0..40u64 {
            let s = render_scene_frames(800 + i, 1, 96, 96).remove(0);
            let kb = apply_blur(&s, &sample_kernel_with(&known, &mut rng).unwrap(), 0.01, i).unwrap();
            let ub = apply_blur(&s, &sample_kernel_with(&unknown, &mut rng).unwrap(), 0.01, 64 + i).unwrap();
            hk.push(tta(&kb));
            hu.push(tta(&ub));
        }
        let st = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().filter(|x| **x > 0.5).count(), v.len())
        };
        println!("crop {crop} iters {iters}: train known {:?} unknown {:?}", st(&tk), st(&tu));
        println!("crop {crop} iters {iters}: held known {:?} unknown {:?} ({:?})", st(&hk), st(&hu), t0.elapsed());
        let fmt = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
        };
        println!("held known scores:   {}", fmt(&mut hk.clone()));
        println!("held unknown scores: {}", fmt(&mut hu.clone()));
    }
}
