//! Acceptance suite. Prints one PASS, FAIL or SKIP line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 1-8 and 15 always run. Criteria 9-10 need the CIFAR-100 binary
//! archive under `DEEPBOW_DATA`; 11-14 additionally need `DEEPBOW_FULL=1`
//! because they train for hours.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use candle_core::{DType, Device, Tensor, Var};
use deepbow::backbone::{bow_predict, classify, Backbone, BackboneConfig, ClassifierHead, HeadKind, PoolMode};
use deepbow::codebook::{
    assign_nearest, build_bow_histogram, kmeans_objective, minibatch_kmeans_fit, Codebook, FeatureProvenance,
    FeatureVectorSet, KMeansConfig,
};
use deepbow::evaluation::{
    render_table, EvaluationResult, Metric, BOW_LOSS_EXPERIMENT, ORIGINAL_BOWNET_ROW, REFERENCE_ROWS,
    ROTATION_EXPERIMENT,
};
use deepbow::image::{make_rotation_batch, rotate_image, Image, RotationLabel};
use deepbow::losses::{hard_cross_entropy, mean_entropy, soft_cross_entropy};
use deepbow::nn::softmax_rows;
use deepbow::optim::{plateau_step, OptimizerConfig, PlateauConfig, PlateauSchedulerState, Sgd};
use deepbow::perturb::{perturb_image, PerturbConfig};
use deepbow::training::read_metrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn prov() -> FeatureProvenance {
    FeatureProvenance::default()
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = rng.random_range(1..24);
        let c = rng.random_range(1..9);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let cents: Vec<f32> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::from_centroids(cents, c, "t").map_err(e)?;
        let map: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hist = build_bow_histogram(&cb, "t", &map, (c, h, w)).map_err(e)?;
        let sum: f64 = hist.as_slice().iter().map(|&v| v as f64).sum();
        ensure((sum - 1.0).abs() <= 1e-6, || format!("histogram sums to {sum}"))?;
        let hw = (h * w) as f64;
        for &v in hist.as_slice() {
            let n = v as f64 * hw;
            ensure((n - n.round()).abs() < 1e-4, || {
                format!("entry {v} is not a multiple of 1/{hw}")
            })?;
        }
    }
    // one-hot: every location sits on word 2
    let cb = Codebook::from_centroids(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2, "t").map_err(e)?;
    let map = [vec![0.0f32; 9], vec![1.0f32; 9]].concat();
    let hist = build_bow_histogram(&cb, "t", &map, (2, 3, 3)).map_err(e)?;
    ensure(hist.as_slice() == [0.0, 0.0, 1.0, 0.0], || {
        format!("one-hot case gave {:?}", hist.as_slice())
    })?;
    // 50/50: two of four locations on word 1, two on word 3
    let map = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    let hist = build_bow_histogram(&cb, "t", &map, (2, 2, 2)).map_err(e)?;
    ensure(hist.as_slice() == [0.0, 0.5, 0.0, 0.5], || {
        format!("50/50 case gave {:?}", hist.as_slice())
    })?;
    Ok("1000 random maps, one-hot and 50/50 exact".into())
}

fn brute_force(cents: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in cents.chunks(dim).enumerate() {
        let d: f64 = c.iter().zip(v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ties = 0;
    for trial in 0..1000 {
        let k = rng.random_range(1..40);
        let dim = rng.random_range(1..20);
        // half the instances use small integers, which makes exact ties common
        let integer = trial % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if integer {
                rng.random_range(-3i32..=3) as f32
            } else {
                rng.random_range(-5.0f32..5.0)
            }
        };
        let mut cents: Vec<f32> = (0..k * dim).map(|_| draw(&mut rng)).collect();
        if k > 2 && trial % 5 == 0 {
            // engineered tie: duplicate a row at a later index
            let src = rng.random_range(0..k - 1);
            let dst = rng.random_range(src + 1..k);
            let row: Vec<f32> = cents[src * dim..(src + 1) * dim].to_vec();
            cents[dst * dim..(dst + 1) * dim].copy_from_slice(&row);
        }
        let v: Vec<f32> = (0..dim).map(|_| draw(&mut rng)).collect();
        let cb = Codebook::from_centroids(cents.clone(), dim, "t").map_err(e)?;
        let got = assign_nearest(&cb, &v).map_err(e)?;
        let want = brute_force(&cents, dim, &v);
        let dists: Vec<f64> = cents
            .chunks(dim)
            .map(|c| c.iter().zip(&v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
            .collect();
        if dists.iter().filter(|&&d| d == dists[want]).count() > 1 {
            ties += 1;
        }
        ensure(got == want, || {
            format!("trial {trial}: assign_nearest {got}, brute force {want}")
        })?;
    }
    // symmetric tie: the origin is equidistant from -e1 and +e1
    let cb = Codebook::from_centroids(vec![5.0, 5.0, -1.0, 0.0, 1.0, 0.0], 2, "t").map_err(e)?;
    ensure(assign_nearest(&cb, &[0.0, 0.0]).map_err(e)? == 1, || {
        "symmetric tie not lowest index".into()
    })?;
    ensure(ties > 50, || format!("only {ties} tied instances exercised"))?;
    Ok(format!("1000 instances agree, {ties} with tied minima"))
}

fn mean_sq_distance(points: &[f32], dim: usize, cents: &[f32]) -> f64 {
    let n = points.len() / dim;
    points
        .chunks(dim)
        .map(|p| {
            cents
                .chunks(dim)
                .map(|c| {
                    c.iter()
                        .zip(p)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / n as f64
}

/// Plain Lloyd iterations from the best of several random starts.
fn lloyd(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let mut best: Option<(f64, Vec<f32>)> = None;
    for _ in 0..10 {
        let mut cents: Vec<f32> = (0..k)
            .flat_map(|_| {
                let i = rng.random_range(0..n);
                points[i * dim..(i + 1) * dim].to_vec()
            })
            .collect();
        for _ in 0..100 {
            let mut sums = vec![0f64; k * dim];
            let mut counts = vec![0usize; k];
            for p in points.chunks(dim) {
                let j = brute_force(&cents, dim, p);
                counts[j] += 1;
                for d in 0..dim {
                    sums[j * dim + d] += p[d] as f64;
                }
            }
            let next: Vec<f32> = (0..k * dim)
                .map(|i| {
                    let j = i / dim;
                    if counts[j] == 0 {
                        cents[i]
                    } else {
                        (sums[i] / counts[j] as f64) as f32
                    }
                })
                .collect();
            if next == cents {
                break;
            }
            cents = next;
        }
        let obj = mean_sq_distance(points, dim, &cents);
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, cents));
        }
    }
    best.unwrap().1
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0f32, 0.5).unwrap();
    let mut points = Vec::new();
    for &(cx, cy) in &[(-3.0f32, 0.0f32), (3.0, 1.0)] {
        for _ in 0..500 {
            points.push(cx + noise.sample(&mut rng));
            points.push(cy + noise.sample(&mut rng));
        }
    }
    let set = FeatureVectorSet::from_rows(points.clone(), 2, prov()).map_err(e)?;
    let cfg = KMeansConfig {
        k: 2,
        batch_size: 100,
        epochs: 20,
        seed: 7,
        max_vectors: None,
        init_size: None,
    };
    let cb = minibatch_kmeans_fit(&set, &cfg).map_err(e)?;
    let oracle = lloyd(&points, 2, 2, &mut rng);
    let mut worst: f64 = 0.0;
    for c in cb.centroids().chunks(2) {
        let d = oracle
            .chunks(2)
            .map(|o| ((c[0] - o[0]) as f64).hypot((c[1] - o[1]) as f64))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(d);
    }
    ensure(worst < 0.2, || format!("centroid error {worst:.4} >= 0.2"))?;
    let fitted = mean_sq_distance(&points, 2, cb.centroids());
    let optimum = mean_sq_distance(&points, 2, &oracle);
    let lib_obj = kmeans_objective(&cb, &set).map_err(e)?;
    ensure(fitted <= optimum * 1.05, || {
        format!("objective {fitted:.5} vs Lloyd {optimum:.5}")
    })?;
    let per_point = lib_obj / (points.len() / 2) as f64;
    ensure((per_point - fitted).abs() <= 1e-9 * fitted, || {
        format!("kmeans_objective {per_point} per point disagrees with direct {fitted}")
    })?;

    // K = 1 recovers the global mean
    let dim = 5;
    let data: Vec<f32> = (0..1000 * dim).map(|_| rng.random_range(-4.0f32..6.0)).collect();
    let set = FeatureVectorSet::from_rows(data.clone(), dim, prov()).map_err(e)?;
    let cb = minibatch_kmeans_fit(&set, &KMeansConfig { k: 1, ..cfg.clone() }).map_err(e)?;
    for d in 0..dim {
        let mean = data.iter().skip(d).step_by(dim).map(|&v| v as f64).sum::<f64>() / 1000.0;
        let got = cb.centroids()[d] as f64;
        ensure((got - mean).abs() < 1e-4, || {
            format!("K=1 centroid {got} vs mean {mean}")
        })?;
    }

    // K = N drives the objective to zero
    let n = 30;
    let data: Vec<f32> = (0..n * 3).map(|i| (i * i % 17) as f32 + i as f32 * 0.01).collect();
    let set = FeatureVectorSet::from_rows(data.clone(), 3, prov()).map_err(e)?;
    let cb = minibatch_kmeans_fit(
        &set,
        &KMeansConfig {
            k: n,
            batch_size: 10,
            ..cfg
        },
    )
    .map_err(e)?;
    let zero = kmeans_objective(&cb, &set).map_err(e)?;
    ensure(zero == 0.0 && mean_sq_distance(&data, 3, cb.centroids()) == 0.0, || {
        format!("K=N objective {zero}")
    })?;
    Ok(format!(
        "centroid error {worst:.4}, objective {fitted:.4} vs Lloyd {optimum:.4}, K=1 mean and K=N zero"
    ))
}

fn tensor(v: Vec<f64>, shape: (usize, usize)) -> Result<Tensor, String> {
    Tensor::from_vec(v, shape, &Device::Cpu).map_err(e)
}

fn scalar(t: Tensor) -> Result<f64, String> {
    t.to_dtype(DType::F64).map_err(e)?.to_scalar::<f64>().map_err(e)
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, m) = (16, 10);
    let logits: Vec<f64> = (0..b * m).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<u32> = (0..b).map(|_| rng.random_range(0..m as u32)).collect();
    let mut onehot = vec![0f64; b * m];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * m + l as usize] = 1.0;
    }
    let lt = tensor(logits, (b, m))?;
    let hard = scalar(hard_cross_entropy(&lt, &labels).map_err(e)?)?;
    let soft = scalar(soft_cross_entropy(&softmax_rows(&lt).map_err(e)?, &tensor(onehot, (b, m))?).map_err(e)?)?;
    ensure((hard - soft).abs() <= 1e-6, || {
        format!("one-hot soft {soft} vs hard {hard}")
    })?;

    let k = 2048;
    let u = tensor(vec![1.0 / k as f64; 2 * k], (2, k))?;
    let uu = scalar(soft_cross_entropy(&u, &u).map_err(e)?)?;
    ensure((uu - 7.6246).abs() <= 1e-4, || format!("uniform vs uniform {uu}"))?;

    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let k = rng.random_range(2..64);
        let draw = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = tensor(draw(&mut rng), (1, k))?;
        let q = tensor(draw(&mut rng), (1, k))?;
        let cross = scalar(soft_cross_entropy(&q, &p).map_err(e)?)?;
        let entropy = scalar(mean_entropy(&p).map_err(e)?)?;
        worst = worst.min(cross - entropy);
    }
    ensure(worst >= -1e-9, || format!("Gibbs inequality violated by {worst}"))?;
    Ok(format!(
        "|soft-hard| <= 1e-6, ln 2048 = {uu:.6}, min H(p,q)-H(p) = {worst:.2e}"
    ))
}

fn criterion_5() -> Check {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, c, k) = (3, 4, 8);
    let feat: Vec<f64> = (0..b * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weight: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gamma = vec![2.5f64];
    let mut target = vec![0f64; b * k];
    for row in target.chunks_mut(k) {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (t, r) in row.iter_mut().zip(raw) {
            *t = r / s;
        }
    }
    let target = tensor(target, (b, k))?;
    let loss_of = |f: &[f64], w: &[f64], g: f64| -> Result<f64, String> {
        let p = bow_predict(
            &tensor(f.to_vec(), (b, c))?,
            &tensor(w.to_vec(), (k, c))?,
            &Tensor::new(&[g], &dev).map_err(e)?,
        )
        .map_err(e)?;
        scalar(soft_cross_entropy(&p, &target).map_err(e)?)
    };

    let fv = Var::from_tensor(&tensor(feat.clone(), (b, c))?).map_err(e)?;
    let wv = Var::from_tensor(&tensor(weight.clone(), (k, c))?).map_err(e)?;
    let gv = Var::from_tensor(&Tensor::new(&[gamma[0]], &dev).map_err(e)?).map_err(e)?;
    let loss = soft_cross_entropy(
        &bow_predict(fv.as_tensor(), wv.as_tensor(), gv.as_tensor()).map_err(e)?,
        &target,
    )
    .map_err(e)?;
    let grads = loss.backward().map_err(e)?;
    let flat = |v: &Var| -> Result<Vec<f64>, String> {
        grads
            .get(v.as_tensor())
            .ok_or("missing gradient")?
            .flatten_all()
            .map_err(e)?
            .to_vec1::<f64>()
            .map_err(e)
    };
    let analytic = [flat(&fv)?, flat(&wv)?, flat(&gv)?].concat();

    let h = 1e-6;
    let mut numeric = Vec::new();
    for which in 0..3 {
        let base = [&feat, &weight, &gamma][which];
        for i in 0..base.len() {
            let mut plus = [feat.clone(), weight.clone(), gamma.clone()];
            let mut minus = plus.clone();
            plus[which][i] += h;
            minus[which][i] -= h;
            let lp = loss_of(&plus[0], &plus[1], plus[2][0])?;
            let lm = loss_of(&minus[0], &minus[1], minus[2][0])?;
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    let rel = diff / norm;
    ensure(rel < 1e-3, || format!("relative gradient error {rel:.3e}"))?;
    Ok(format!("relative error {rel:.2e} over {} coordinates", analytic.len()))
}

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(n, n, (0..n * n * 3).map(|_| rng.random()).collect()).unwrap()
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [1usize, 2, 5, 32] {
        let img = random_image(n, &mut rng);
        let q = RotationLabel::new(1).map_err(e)?;
        let quarter = rotate_image(&img, q).map_err(e)?;
        // counter-clockwise quarter turn: out[i][j] = in[j][n-1-i]
        for i in 0..n {
            for j in 0..n {
                ensure(quarter.pixel(i, j) == img.pixel(j, n - 1 - i), || {
                    format!("quarter turn wrong at {i},{j}")
                })?;
            }
        }
        for a in RotationLabel::ALL {
            let ra = rotate_image(&img, a).map_err(e)?;
            for b in RotationLabel::ALL {
                let lhs = rotate_image(&ra, b).map_err(e)?;
                let rhs = rotate_image(&img, a.compose(b)).map_err(e)?;
                ensure(lhs == rhs, || format!("rotate({a:?}) then {b:?} != compose"))?;
            }
        }
        ensure(rotate_image(&img, RotationLabel::ALL[0]).map_err(e)? == img, || {
            "identity rotation".into()
        })?;
        let mut four = img.clone();
        for _ in 0..4 {
            four = rotate_image(&four, q).map_err(e)?;
        }
        ensure(four == img, || "four quarter turns".into())?;
    }

    let img = random_image(32, &mut rng);
    for cfg in [PerturbConfig::default(), PerturbConfig::classifier_augmentation()] {
        let a = perturb_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).map_err(e)?;
        let b = perturb_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).map_err(e)?;
        ensure(a == b, || "perturbation differs under a fixed seed".into())?;
    }
    let id = perturb_image(&img, &PerturbConfig::identity(32), &mut rng).map_err(e)?;
    ensure(id == img, || "identity perturbation changed the image".into())?;
    let batch = vec![img.clone(), random_image(32, &mut rng)];
    let x = make_rotation_batch(&batch, &mut ChaCha8Rng::seed_from_u64(3)).map_err(e)?;
    let y = make_rotation_batch(&batch, &mut ChaCha8Rng::seed_from_u64(3)).map_err(e)?;
    ensure(x == y, || "rotation batch differs under a fixed seed".into())?;
    ensure(x.0.len() == 8, || "rotation batch size".into())?;
    Ok("group laws exact for n in {1,2,5,32}; perturbations deterministic".into())
}

fn run_schedule(initial: f64, losses: &[f64]) -> Result<Vec<f64>, String> {
    let mut state = PlateauSchedulerState::new(initial, PlateauConfig::default());
    let mut lrs = Vec::new();
    for &l in losses {
        let (next, lr) = plateau_step(state, l).map_err(e)?;
        state = next;
        ensure(state.epochs_since_improvement <= 10, || {
            "counter exceeded patience".into()
        })?;
        lrs.push(lr);
    }
    Ok(lrs)
}

fn criterion_7() -> Check {
    let approx =
        |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs());
    // flat loss: reductions on the 10th and 20th non-improving epoch
    let lrs = run_schedule(0.1, &[1.0; 21])?;
    let want: Vec<f64> = (0..21)
        .map(|i| {
            if i < 10 {
                0.1
            } else if i < 20 {
                0.01
            } else {
                0.001
            }
        })
        .collect();
    ensure(approx(&lrs, &want), || format!("flat sequence gave {lrs:?}"))?;

    // an improvement after 9 bad epochs resets the counter
    let mut seq = vec![1.0; 10];
    seq.extend([0.5; 11]);
    let lrs = run_schedule(0.1, &seq)?;
    let want: Vec<f64> = (0..21).map(|i| if i < 20 { 0.1 } else { 0.01 }).collect();
    ensure(approx(&lrs, &want), || format!("reset sequence gave {lrs:?}"))?;

    // improvements smaller than the relative threshold do not count
    let seq: Vec<f64> = (0..11).map(|i| 1.0 - 1e-6 * i as f64).collect();
    let lrs = run_schedule(0.1, &seq)?;
    ensure((lrs[10] - 0.01).abs() < 1e-15 && lrs[9] == 0.1, || {
        format!("threshold sequence gave {lrs:?}")
    })?;

    // the minimum learning rate is a floor
    let lrs = run_schedule(1e-4, &[1.0; 31])?;
    ensure(lrs[10] == 1e-5 && lrs[30] == 1e-5, || {
        format!("floor sequence gave {lrs:?}")
    })?;
    Ok("flat, reset, threshold and floor sequences reproduced exactly".into())
}

fn criterion_8() -> Check {
    let dev = Device::Cpu;
    let cfg = BackboneConfig::default();
    let mut bb = Backbone::new(&cfg, 8, &dev).map_err(e)?;
    bb.freeze("resblock2_128b").map_err(e)?;
    let tap = "resblock3_256b";
    let head = ClassifierHead::new(
        bb.tap_shape(tap).map_err(e)?,
        PoolMode::Flatten,
        HeadKind::Linear,
        100,
        8,
        &dev,
    )
    .map_err(e)?;
    let frozen_names: Vec<String> = bb
        .params()
        .iter()
        .filter(|p| !p.name.starts_with("backbone.resblock3"))
        .map(|p| p.name.clone())
        .collect();
    let before: HashMap<String, Tensor> = bb.params().to_tensors().map_err(e)?;
    let head_before = head.params().to_tensors().map_err(e)?;
    let mut vars = bb.trainable_vars();
    vars.extend(head.params().trainable().map(|p| (p.name.clone(), p.var.clone())));
    ensure(!vars.iter().any(|(n, _)| frozen_names.contains(n)), || {
        "frozen variable handed to optimizer".into()
    })?;
    let mut sgd = Sgd::new(vars, &OptimizerConfig::rotnet()).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let x: Vec<f32> = (0..4 * 3 * 32 * 32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(x, (4, 3, 32, 32), &dev).map_err(e)?;
        let labels: Vec<u32> = (0..4).map(|_| rng.random_range(0..100)).collect();
        let loss = hard_cross_entropy(&classify(&bb, &head, &x, tap, true).map_err(e)?, &labels).map_err(e)?;
        sgd.backward_step(&loss).map_err(e)?;
    }
    let after = bb.params().to_tensors().map_err(e)?;
    let bits = |t: &Tensor| -> Result<Vec<u32>, String> {
        Ok(t.flatten_all()
            .map_err(e)?
            .to_vec1::<f32>()
            .map_err(e)?
            .iter()
            .map(|v| v.to_bits())
            .collect())
    };
    for name in &frozen_names {
        ensure(bits(&before[name])? == bits(&after[name])?, || {
            format!("{name} changed")
        })?;
    }
    let moved = |a: &HashMap<String, Tensor>, b: &HashMap<String, Tensor>| -> Result<bool, String> {
        for (k, v) in a {
            if bits(v)? != bits(&b[k])? {
                return Ok(true);
            }
        }
        Ok(false)
    };
    let trained_before: HashMap<String, Tensor> = before
        .iter()
        .filter(|(k, _)| !frozen_names.contains(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    ensure(moved(&trained_before, &after)?, || {
        "unfrozen block did not train".into()
    })?;
    ensure(moved(&head_before, &head.params().to_tensors().map_err(e)?)?, || {
        "head did not train".into()
    })?;
    Ok(format!(
        "{} frozen tensors bit-identical after 10 steps",
        frozen_names.len()
    ))
}

fn criterion_15() -> Check {
    ensure(!REFERENCE_ROWS.iter().any(|(_, v)| *v == ORIGINAL_BOWNET_ROW.1), || {
        "71.5 listed as a reproduction target".into()
    })?;
    let results = vec![EvaluationResult {
        experiment: ROTATION_EXPERIMENT.into(),
        tap: None,
        head_kind: None,
        metric: Metric::Accuracy,
        value: 0.5,
        sample_count: 40000,
        checkpoint_hash: "0".repeat(64),
    }];
    let table = render_table(&results);
    let (measured, reference_only) = table
        .split_once("Reference only, not a reproduction target:")
        .ok_or("no reference-only section")?;
    ensure(!measured.contains("71.5"), || "71.5 appears among measured rows".into())?;
    ensure(
        reference_only.contains(&format!("| {} | 71.5% |", ORIGINAL_BOWNET_ROW.0)),
        || "reference-only row missing".into(),
    )?;
    Ok("71.5% rendered only in the reference-only table".into())
}

// Smoke and full-scale criteria drive the CLI binary on real data.

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("DEEPBOW_DATA").map(PathBuf::from)
}

fn cli(args: &[&str], data: &Path, out: &Path) -> Result<PathBuf, String> {
    let res = Command::new(env!("CARGO_BIN_EXE_deepbow"))
        .args(args)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(e)?;
    let stdout = String::from_utf8_lossy(&res.stdout);
    if !res.status.success() {
        return Err(format!(
            "deepbow {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&res.stderr).trim()
        ));
    }
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .map(PathBuf::from)
        .ok_or_else(|| "no run directory printed".into())
}

fn results_of(run: &Path) -> Result<Vec<EvaluationResult>, String> {
    serde_json::from_slice(&fs::read(run.join("evaluation.json")).map_err(e)?).map_err(e)
}

fn value_of(run: &Path, metric: Metric) -> Result<f64, String> {
    results_of(run)?
        .into_iter()
        .find(|r| r.metric == metric)
        .map(|r| r.value)
        .ok_or_else(|| format!("no {metric:?} in {}", run.display()))
}

fn ck(run: &Path) -> String {
    run.join("checkpoints/final.safetensors").display().to_string()
}

fn has_provenance(run: &Path) -> Result<(), String> {
    for f in ["manifest.json", "completion.json"] {
        ensure(run.join(f).exists(), || format!("{} lacks {f}", run.display()))?;
    }
    Ok(())
}

struct Smoke {
    out: PathBuf,
    data: PathBuf,
    rotnet: Option<PathBuf>,
}

fn criterion_9(s: &mut Smoke) -> Check {
    let run = cli(&["train-rotnet", "--smoke", "--seed", "0"], &s.data, &s.out)?;
    s.rotnet = Some(run.clone());
    let records = read_metrics(&run.join("metrics.jsonl")).map_err(e)?;
    let first = records.first().ok_or("no metrics")?.first_batch_loss;
    let acc = value_of(&run, Metric::Accuracy)?;
    ensure((first - 4f64.ln()).abs() <= 0.15, || {
        format!("first-batch loss {first:.4}")
    })?;
    ensure(acc >= 0.40, || format!("rotation accuracy {:.2}% < 40%", acc * 100.0))?;
    Ok(format!(
        "rotation accuracy {:.2}%, first-batch loss {first:.4}",
        acc * 100.0
    ))
}

fn criterion_10(s: &Smoke) -> Check {
    let rot = s.rotnet.as_ref().ok_or("criterion 9 produced no checkpoint")?;
    let cb = cli(
        &["build-codebook", "--smoke", "--checkpoint", &ck(rot), "--k", "64"],
        &s.data,
        &s.out,
    )?;
    let codebook = cb.join("codebook.bin").display().to_string();
    let targets = cb.join("targets_train.bin").display().to_string();
    let bow = cli(
        &[
            "train-bownet",
            "--smoke",
            "--codebook",
            &codebook,
            "--targets",
            &targets,
        ],
        &s.data,
        &s.out,
    )?;
    let probe = cli(
        &["train-classifier", "--smoke", "--checkpoint", &ck(&bow)],
        &s.data,
        &s.out,
    )?;
    for run in [rot, &cb, &bow, &probe] {
        has_provenance(run)?;
    }
    let loss = value_of(&bow, Metric::CrossEntropy)?;
    let acc = value_of(&probe, Metric::Accuracy)?;
    ensure(loss < 64f64.ln(), || format!("BowNet loss {loss:.4} >= ln 64"))?;
    ensure(acc >= 0.03, || format!("probe accuracy {:.2}% < 3%", acc * 100.0))?;
    Ok(format!(
        "BowNet loss {loss:.4} < {:.4}, probe accuracy {:.2}%",
        64f64.ln(),
        acc * 100.0
    ))
}

struct Full {
    out: PathBuf,
    data: PathBuf,
    rotnet: Option<PathBuf>,
    bownet: Option<PathBuf>,
}

fn within(name: &str, measured: f64, target: f64, tol: f64) -> Result<String, String> {
    let pct = measured * 100.0;
    ensure((pct - target).abs() <= tol, || {
        format!("{name} {pct:.2}% vs {target} +- {tol}")
    })?;
    Ok(format!("{name} {pct:.2}%"))
}

fn criterion_11(f: &mut Full) -> Check {
    let run = cli(&["train-rotnet", "--seed", "0"], &f.data, &f.out)?;
    f.rotnet = Some(run.clone());
    within("rotation accuracy", value_of(&run, Metric::Accuracy)?, 78.53, 2.0)
}

fn probe(f: &Full, source: &Path, tap: &str) -> Result<f64, String> {
    let run = cli(
        &["train-classifier", "--checkpoint", &ck(source), "--tap", tap],
        &f.data,
        &f.out,
    )?;
    value_of(&run, Metric::Accuracy)
}

fn criterion_12(f: &Full) -> Check {
    let rot = f.rotnet.as_ref().ok_or("criterion 11 produced no checkpoint")?;
    let a = within("resblock2_128b", probe(f, rot, "resblock2_128b")?, 55.67, 2.5)?;
    let b = within("resblock3_256b", probe(f, rot, "resblock3_256b")?, 53.26, 2.5)?;
    Ok(format!("{a}, {b}"))
}

fn criterion_13(f: &Full) -> Check {
    let lin = cli(
        &["train-classifier", "--supervised", "--head", "linear"],
        &f.data,
        &f.out,
    )?;
    let non = cli(
        &["train-classifier", "--supervised", "--head", "nonlinear"],
        &f.data,
        &f.out,
    )?;
    let a = within("linear", value_of(&lin, Metric::Accuracy)?, 60.24, 2.5)?;
    let b = within("nonlinear", value_of(&non, Metric::Accuracy)?, 66.06, 2.5)?;
    Ok(format!("{a}, {b}"))
}

fn criterion_14(f: &mut Full) -> Check {
    let rot = f.rotnet.as_ref().ok_or("criterion 11 produced no checkpoint")?;
    let cb = cli(&["build-codebook", "--checkpoint", &ck(rot)], &f.data, &f.out)?;
    let codebook = cb.join("codebook.bin").display().to_string();
    let targets = cb.join("targets_train.bin").display().to_string();
    let bow = cli(
        &["train-bownet", "--codebook", &codebook, "--targets", &targets],
        &f.data,
        &f.out,
    )?;
    f.bownet = Some(bow.clone());
    let loss = value_of(&bow, Metric::CrossEntropy)?;
    let a = within("resblock3_256b", probe(f, &bow, "resblock3_256b")?, 47.49, 3.0)?;
    let b = within("resblock2_128b", probe(f, &bow, "resblock2_128b")?, 51.10, 3.0)?;
    ensure((4.0..=7.0).contains(&loss), || {
        format!("BowNet cross-entropy {loss:.3} outside [4, 7]")
    })?;
    Ok(format!("{a}, {b}, cross-entropy {loss:.3} ({BOW_LOSS_EXPERIMENT})"))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let mut failures = 0;
    let mut report = |id: u32, name: &str, outcome: Option<Check>| match outcome {
        Some(Ok(detail)) => println!("PASS [{id:>2}] {name}: {detail}"),
        Some(Err(why)) => {
            failures += 1;
            println!("FAIL [{id:>2}] {name}: {why}");
        }
        None => println!("SKIP [{id:>2}] {name}"),
    };

    report(1, "BoW histograms", Some(criterion_1()));
    report(2, "nearest-word assignment vs brute force", Some(criterion_2()));
    report(3, "mini-batch K-means vs Lloyd", Some(criterion_3()));
    report(4, "loss identities", Some(criterion_4()));
    report(5, "gradient check", Some(criterion_5()));
    report(
        6,
        "rotation group laws and perturbation determinism",
        Some(criterion_6()),
    );
    report(7, "plateau scheduler", Some(criterion_7()));
    report(8, "freezing", Some(criterion_8()));

    let full = std::env::var("DEEPBOW_FULL").is_ok_and(|v| v == "1");
    match data_dir() {
        Some(data) => {
            let tmp = tempfile::tempdir().expect("temporary directory");
            let mut smoke = Smoke {
                out: tmp.path().join("smoke"),
                data: data.clone(),
                rotnet: None,
            };
            report(9, "smoke rotnet", Some(criterion_9(&mut smoke)));
            report(10, "smoke chain", Some(criterion_10(&smoke)));
            if full {
                let mut f = Full {
                    out: tmp.path().join("full"),
                    data,
                    rotnet: None,
                    bownet: None,
                };
                report(11, "RotNet rotation accuracy", Some(criterion_11(&mut f)));
                report(12, "RotNet frozen linear probes", Some(criterion_12(&f)));
                report(13, "supervised baselines", Some(criterion_13(&f)));
                report(14, "BowNet frozen probes and loss", Some(criterion_14(&mut f)));
            } else {
                for (id, name) in [
                    (11, "RotNet rotation accuracy"),
                    (12, "RotNet frozen linear probes"),
                    (13, "supervised baselines"),
                    (14, "BowNet frozen probes and loss"),
                ] {
                    report(id, &format!("{name} (set DEEPBOW_FULL=1)"), None);
                }
            }
        }
        None => {
            for (id, name) in [
                (9, "smoke rotnet"),
                (10, "smoke chain"),
                (11, "RotNet rotation accuracy"),
                (12, "RotNet frozen linear probes"),
                (13, "supervised baselines"),
                (14, "BowNet frozen probes and loss"),
            ] {
                report(id, &format!("{name} (set DEEPBOW_DATA to the CIFAR-100 root)"), None);
            }
        }
    }
    report(15, "original BowNet figure is reference only", Some(criterion_15()));

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
