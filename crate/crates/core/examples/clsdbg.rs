use blur2blur::blur::*;
use blur2blur::data::*;
use blur2blur::image::ImageBuffer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// hand statistics on the pooled luminance: oriented second-difference band
// energies at three scales, plus structure-tensor summaries of the high-pass
fn stats(img: &ImageBuffer) -> Vec<f64> {
    let (h0, w0) = (img.height(), img.width());
    let mut lum0 = vec![0.0f64; h0 * w0];
    for y in 0..h0 {
        for x in 0..w0 {
            lum0[y * w0 + x] =
                0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x);
        }
    }
    let (h, w) = (h0 / 2, w0 / 2);
    let lum: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            0.25 * (lum0[(2 * y) * 2 * w + 2 * x]
                + lum0[(2 * y) * 2 * w + 2 * x + 1]
                + lum0[(2 * y + 1) * 2 * w + 2 * x]
                + lum0[(2 * y + 1) * 2 * w + 2 * x + 1])
        })
        .collect();
    let box3 = |src: &[f64]| {
        let mut out = vec![0.0f64; h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += src[(y + dy - 1) * w + (x + dx - 1)];
                    }
                }
                out[y * w + x] = s / 9.0;
            }
        }
        out
    };
    let sm = box3(&lum);
    let energy = |src: &[f64], d: i64| -> [f64; 4] {
        let offs: [(i64, i64); 4] = [(d, 0), (d, d), (0, d), (-d, d)];
        let mut es = [0.0f64; 4];
        for (k, (ox, oy)) in offs.iter().enumerate() {
            let (mut sum, mut n) = (0.0, 0.0);
            let m = (2 * d) as usize;
            for y in m..h - m {
                for x in m..w - m {
                    let c = src[y * w + x];
                    let a = src[((y as i64 + oy) as usize) * w + (x as i64 + ox) as usize];
                    let b = src[((y as i64 - oy) as usize) * w + (x as i64 - ox) as usize];
                    let v = a - 2.0 * c + b;
                    sum += v * v;
                    n += 1.0;
                }
            }
            es[k] = (sum / n + 1e-12).ln();
        }
        es
    };
    // 8 orientations: fine at offset o, coarse at offset 2o
    let offs8: [(i64, i64); 8] =
        [(2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (-1, 2), (-2, 2), (-2, 1)];
    let dir_energy = |src: &[f64], ox: i64, oy: i64| -> f64 {
        let (mut sum, mut n) = (0.0, 0.0);
        let m = 2 * (ox.unsigned_abs().max(oy.unsigned_abs()) as usize);
        for y in m..h - m {
            for x in m..w - m {
                let c = src[y * w + x];
                let a = src[((y as i64 + oy) as usize) * w + (x as i64 + ox) as usize];
                let b = src[((y as i64 - oy) as usize) * w + (x as i64 - ox) as usize];
                let v = a - 2.0 * c + b;
                sum += v * v;
                n += 1.0;
            }
        }
        sum / n
    };
    let mut r8 = [0.0f64; 8];
    let mut f8 = [0.0f64; 8];
    for (k, (ox, oy)) in offs8.iter().enumerate() {
        let fine = dir_energy(&sm, *ox, *oy);
        let coarse = dir_energy(&sm, 2 * ox, 2 * oy);
        f8[k] = (fine + 1e-12).ln();
        r8[k] = (fine + 1e-12).ln() - (coarse + 1e-12).ln();
    }
    let energy4 = |src: &[f64], d: i64| -> [f64; 4] {
        let offs: [(i64, i64); 4] = [(d, 0), (d, d), (0, d), (-d, d)];
        let mut es = [0.0f64; 4];
        for (k, (ox, oy)) in offs.iter().enumerate() {
            es[k] = (dir_energy(src, *ox, *oy) + 1e-12).ln();
        }
        es
    };
    let e1 = energy4(&sm, 1);
    let e2 = energy4(&sm, 2);
    let e4 = energy4(&sm, 4);
    let e8 = energy4(&sm, 8);
    let _ = energy;
    // structure tensor of high-pass
    let hp: Vec<f64> = lum.iter().zip(&sm).map(|(a, b)| a - b).collect();
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let gx = 0.5 * (hp[y * w + x + 1] - hp[y * w + x - 1]);
            let gy = 0.5 * (hp[(y + 1) * w + x] - hp[(y - 1) * w + x]);
            jxx += gx * gx;
            jyy += gy * gy;
            jxy += gx * gy;
        }
    }
    let n = ((h - 4) * (w - 4)) as f64;
    let (mxx, myy, mxy) = (jxx / n, jyy / n, jxy / n);
    let tr = mxx + myy;
    let disc = ((mxx - myy).powi(2) + 4.0 * mxy * mxy).sqrt();

    let mut v = Vec::new();
    v.extend_from_slice(&e1);
    v.extend_from_slice(&e2);
    v.extend_from_slice(&e4);
    v.extend_from_slice(&e8);
    // 8-orientation matched fine/coarse ratios, raw and sorted
    v.extend_from_slice(&r8);
    let mut rsorted = r8;
    rsorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.extend_from_slice(&rsorted);
    v.extend_from_slice(&f8);
    v.push((disc / (tr + 1e-12) + 1e-6).ln());
    v.push((tr + 1e-12).ln());
    v
}

fn main() {
    let known = BlurDomainSpec::default_known();
    let unknown = BlurDomainSpec::default_unknown();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n_train = 300usize;
    let n_test = 150usize;
    let mut xs: Vec<Vec<f64>> = vec![];
    let mut ys: Vec<f64> = vec![];
    let mut xt: Vec<Vec<f64>> = vec![];
    let mut yt: Vec<f64> = vec![];
    for i in 0..(n_train + n_test) as u64 {
        let s = render_scene_frames(3000 + i, 1, 96, 96).remove(0);
        let kb = apply_blur(&s, &sample_kernel_with(&known, &mut rng).unwrap(), 0.01, i).unwrap();
        let ub = apply_blur(&s, &sample_kernel_with(&unknown, &mut rng).unwrap(), 0.01, 9000 + i).unwrap();
        if (i as usize) < n_train {
            xs.push(stats(&kb));
            ys.push(1.0);
            xs.push(stats(&ub));
            ys.push(0.0);
        } else {
            xt.push(stats(&kb));
            yt.push(1.0);
            xt.push(stats(&ub));
            yt.push(0.0);
        }
    }
    let dim = xs[0].len();
    // standardize
    let mut mu = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for x in &xs {
        for j in 0..dim {
            mu[j] += x[j];
        }
    }
    for j in 0..dim {
        mu[j] /= xs.len() as f64;
    }
    for x in &xs {
        for j in 0..dim {
            sd[j] += (x[j] - mu[j]).powi(2);
        }
    }
    for j in 0..dim {
        sd[j] = (sd[j] / xs.len() as f64).sqrt().max(1e-9);
    }
    let norm = |x: &[f64], mu: &[f64], sd: &[f64]| -> Vec<f64> {
        x.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect()
    };
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &mu, &sd)).collect();
    let xt: Vec<Vec<f64>> = xt.iter().map(|x| norm(x, &mu, &sd)).collect();
    // tiny MLP: dim -> 16 (tanh) -> 1, full-batch Adam-ish GD
    let hid = 16usize;
    let mut rng2 = ChaCha8Rng::seed_from_u64(9);
    use rand::Rng;
    let mut w1 = vec![0.0f64; hid * dim];
    for v in w1.iter_mut() {
        *v = rng2.gen_range(-0.3..0.3);
    }
    let mut b1 = vec![0.0f64; hid];
    let mut w2 = vec![0.0f64; hid];
    for v in w2.iter_mut() {
        *v = rng2.gen_range(-0.3..0.3);
    }
    let mut b2 = 0.0f64;
    let lr = 0.05;
    let forward = |x: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: f64| -> (Vec<f64>, f64) {
        let mut hv = vec![0.0; hid];
        for k in 0..hid {
            let mut z = b1[k];
            for j in 0..dim {
                z += w1[k * dim + j] * x[j];
            }
            hv[k] = z.tanh();
        }
        let z2: f64 = b2 + hv.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>();
        (hv, z2)
    };
    for _ in 0..6000 {
        let mut gw1 = vec![0.0f64; hid * dim];
        let mut gb1 = vec![0.0f64; hid];
        let mut gw2 = vec![0.0f64; hid];
        let mut gb2 = 0.0f64;
        for (x, y) in xs.iter().zip(&ys) {
            let (hv, z2) = forward(x, &w1, &b1, &w2, b2);
            let p = 1.0 / (1.0 + (-z2).exp());
            let e = p - y;
            gb2 += e;
            for k in 0..hid {
                gw2[k] += e * hv[k];
                let dk = e * w2[k] * (1.0 - hv[k] * hv[k]);
                gb1[k] += dk;
                for j in 0..dim {
                    gw1[k * dim + j] += dk * x[j];
                }
            }
        }
        let n = xs.len() as f64;
        for j in 0..hid * dim {
            w1[j] -= lr * gw1[j] / n;
        }
        for k in 0..hid {
            b1[k] -= lr * gb1[k] / n;
            w2[k] -= lr * gw2[k] / n;
        }
        b2 -= lr * gb2 / n;
    }
    let acc = |xv: &[Vec<f64>], yv: &[f64]| {
        let (mut tp, mut tn, mut np, mut nn) = (0, 0, 0, 0);
        for (x, y) in xv.iter().zip(yv) {
            let (_, z2) = forward(x, &w1, &b1, &w2, b2);
            let lab = z2 > 0.0;
            if *y > 0.5 {
                np += 1;
                if lab {
                    tp += 1;
                }
            } else {
                nn += 1;
                if !lab {
                    tn += 1;
                }
            }
        }
        (tp, np, tn, nn)
    };
    println!("train (tp/np, tn/nn): {:?}", acc(&xs, &ys));
    println!("test  (tp/np, tn/nn): {:?}", acc(&xt, &yt));
}
