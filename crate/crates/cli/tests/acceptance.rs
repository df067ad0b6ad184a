//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

// NaN must fail every bound, hence `!(x <= bound)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use odid_core::descriptor::{
    assign_orientation, compute_gradients, normalize_descriptor, raw_descriptor, Descriptor, DESCRIPTOR_LEN,
};
use odid_core::detector::{detect, detect_in_pyramid, refine_subpixel, RawExtremum, Rejection};
use odid_core::features::{extract_features, nearest_level, Feature, FeatureParams};
use odid_core::gallery::{
    entry_from_image, evaluate_images, read_index, write_index, GalleryEntry, GalleryIndex, Gates, IndexedFeature,
};
use odid_core::imgio::{encode_png, rotate90, GrayImage, Plane};
use odid_core::matcher::{approx_knn, brute_force_knn, descriptor_distance, lowe_similarity, MatchParams};
use odid_core::scalespace::{build_dog_pyramid, build_gaussian_pyramid, gaussian_blur, DogPyramid, PyramidParams};
use odid_core::synth::{blob_texture, gaussian_blob, noise_image, random_descriptors, rng, step_edge, warp_similarity};
use odid_core::Error;
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_odid");

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn descriptors(features: &[Feature]) -> Vec<Descriptor> {
    features.iter().map(|f| f.descriptor).collect()
}

fn convolution_oracle() -> Outcome {
    let start = Instant::now();
    let (w, h) = (64usize, 64usize);
    let img = noise_image(w, h, 0.0, 1.0, 2024);
    let mut worst = 0.0f64;
    for sigma in [0.5, 1.6, 3.2] {
        let fast = gaussian_blur(&img, sigma).map_err(|e| e.to_string())?;
        let r = (4.0 * sigma).ceil() as i64;
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                total += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        // interior: the full 2-D footprint lies inside the image
        for y in r..h as i64 - r {
            for x in r..w as i64 - r {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / total;
                        acc += wgt * img.get((x + dx) as usize, (y + dy) as usize) as f64;
                    }
                }
                worst = worst.max((acc - fast.get(x as usize, y as usize) as f64).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-5, "max deviation {worst:.2e} > 1e-5");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("max deviation {worst:.2e}, {elapsed:.2?}"))
}

fn pyramid_shape() -> Outcome {
    let img = blob_texture(96, 96, 7);
    let mut worst = 0.0f64;
    for s in [2, 3, 5] {
        let p = PyramidParams {
            intervals: s,
            ..Default::default()
        };
        let gp = build_gaussian_pyramid(&img, &p).map_err(|e| e.to_string())?;
        let dog = build_dog_pyramid(&gp);
        for (o, oct) in gp.octaves.iter().enumerate() {
            ensure!(oct.levels.len() == s + 3, "s={s} octave {o}: {} Gaussian levels", oct.levels.len());
            ensure!(dog.octaves[o].len() == s + 2, "s={s} octave {o}: {} DoG levels", dog.octaves[o].len());
        }
        // blurring level 0 once by the combined amount matches the incremental chain
        let oct = &gp.octaves[0];
        for i in 1..oct.levels.len() {
            let combined = (oct.sigmas[i].powi(2) - oct.sigmas[0].powi(2)).sqrt();
            let direct = gaussian_blur(&oct.levels[0], combined).map_err(|e| e.to_string())?;
            let margin = (4.0 * oct.sigmas[i]).ceil() as usize * 2;
            let (w, h) = (direct.width(), direct.height());
            for y in margin..h.saturating_sub(margin) {
                for x in margin..w.saturating_sub(margin) {
                    worst = worst.max((direct.get(x, y) - oct.levels[i].get(x, y)).abs() as f64);
                }
            }
        }
    }
    ensure!(worst <= 1e-4, "semigroup deviation {worst:.2e} > 1e-4");
    Ok(format!("s in {{2,3,5}} shapes ok, semigroup deviation {worst:.2e}"))
}

fn subpixel_refinement() -> Outcome {
    let (w, h, levels) = (17usize, 17usize, 5usize);
    let mut r = rng(33);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let truth = [r.gen_range(5.0..11.0), r.gen_range(5.0..11.0), r.gen_range(1.5..2.5)];
        // negative-definite Hessian: -(L L^T + 0.5 I)
        let l: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| r.gen_range(-0.5..0.5)));
        let hess: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let dot: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                -(dot + if i == j { 0.5 } else { 0.0 })
            })
        });
        let peak = 0.8;
        let value = |x: f64, y: f64, z: f64| {
            let d = [x - truth[0], y - truth[1], z - truth[2]];
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += d[i] * hess[i][j] * d[j];
                }
            }
            peak + 0.5 * q
        };
        let octave: Vec<Plane> = (0..levels)
            .map(|lv| Plane::from_fn(w, h, |x, y| value(x as f64, y as f64, lv as f64) as f32))
            .collect();
        let dog = DogPyramid::from_octaves(vec![octave]);
        let start = RawExtremum {
            octave: 0,
            level: truth[2].round() as usize,
            x: truth[0].round() as usize,
            y: truth[1].round() as usize,
            is_max: true,
        };
        let refined = refine_subpixel(&dog, &start).map_err(|e| format!("rejected {e:?} at {truth:?}"))?;
        let found = [
            refined.extremum.x as f64 + refined.offset[0],
            refined.extremum.y as f64 + refined.offset[1],
            refined.extremum.level as f64 + refined.offset[2],
        ];
        for k in 0..3 {
            worst = worst.max((found[k] - truth[k]).abs());
        }
    }
    ensure!(worst <= 1e-3, "position error {worst:.2e} > 1e-3");

    // constant along the level axis, and fully flat
    let ridge: Vec<Plane> = (0..levels)
        .map(|_| Plane::from_fn(w, h, |x, y| -(((x as f32 - 8.0).powi(2) + (y as f32 - 8.0).powi(2)) * 0.01)))
        .collect();
    let flat: Vec<Plane> = (0..levels).map(|_| Plane::zeros(w, h)).collect();
    for octave in [ridge, flat] {
        let dog = DogPyramid::from_octaves(vec![octave]);
        let e = RawExtremum {
            octave: 0,
            level: 2,
            x: 8,
            y: 8,
            is_max: true,
        };
        let got = refine_subpixel(&dog, &e);
        ensure!(got == Err(Rejection::Singular), "singular volume gave {got:?}");
    }
    Ok(format!("50 quadratics, max position error {worst:.2e}; singular volumes rejected"))
}

fn edge_rejection() -> Outcome {
    let p = PyramidParams::default();
    let edge = step_edge(96, 96, 48, 0.2, 0.8);
    let near: Vec<_> = detect(&edge, &p, None)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|k| (k.x - 47.5).abs() <= 3.0)
        .collect();
    ensure!(near.is_empty(), "{} keypoints within 3 px of the edge", near.len());
    let blob = gaussian_blob(64, 64, 32.0, 32.0, 4.0, 0.6, 0.2);
    let kps = detect(&blob, &p, None).map_err(|e| e.to_string())?;
    let centered = kps
        .iter()
        .filter(|k| (k.x - 32.0).abs() <= 1.0 && (k.y - 32.0).abs() <= 1.0)
        .count();
    ensure!(centered >= 1, "no keypoint at the blob center ({} total)", kps.len());
    Ok(format!("0 keypoints near the edge, {centered} at the blob center"))
}

fn descriptor_contract() -> Outcome {
    let params = FeatureParams::default();
    let (mut checked, mut worst_norm, mut worst_clamp) = (0usize, 0.0f64, 0.0f32);
    for seed in 0..4 {
        let img = blob_texture(128, 128, 60 + seed);
        for f in extract_features(&img, &params).map_err(|e| e.to_string())? {
            ensure!(f.descriptor.values().len() == DESCRIPTOR_LEN, "wrong length");
            worst_norm = worst_norm.max((f.descriptor.l2_norm() - 1.0).abs());
            checked += 1;
        }
        // instrumented path: inspect the clamped intermediate of every keypoint
        let gp = build_gaussian_pyramid(&img, &params.pyramid).map_err(|e| e.to_string())?;
        let dog = build_dog_pyramid(&gp);
        for kp in detect_in_pyramid(&gp, &dog, &params.pyramid, None) {
            let levels = &gp.octaves[kp.octave].levels;
            let field = compute_gradients(&levels[nearest_level(&kp, levels.len())]);
            let scale = gp.octave_scale(kp.octave);
            let Some(okp) = assign_orientation(&kp, &field, scale) else { continue };
            let Some(raw) = raw_descriptor(&okp, &field, scale) else { continue };
            let trace = normalize_descriptor(&raw, params.descriptor.clamp);
            worst_clamp = trace.clamped.iter().copied().fold(worst_clamp, f32::max);
        }
    }
    ensure!(checked > 0, "no descriptors produced");
    ensure!(worst_norm <= 1e-6, "norm deviation {worst_norm:.2e} > 1e-6");
    ensure!(worst_clamp <= 0.2, "clamped component {worst_clamp} > 0.2");
    Ok(format!(
        "{checked} descriptors, norm deviation {worst_norm:.1e}, max clamped component {worst_clamp:.3}"
    ))
}

fn nearest(q: &Descriptor, train: &[Feature]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, f) in train.iter().enumerate() {
        let d = descriptor_distance(q, &f.descriptor);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn rotation_invariance() -> Outcome {
    let params = FeatureParams::default();
    let (mut paired, mut mutual, mut worst_angle) = (0usize, 0usize, 0.0f32);
    for seed in 0..3 {
        let img = blob_texture(257, 257, 70 + seed);
        let a = extract_features(&img, &params).map_err(|e| e.to_string())?;
        let b = extract_features(&rotate90(&img), &params).map_err(|e| e.to_string())?;
        let h = img.height() as f32;
        for (i, fa) in a.iter().enumerate() {
            let (ex, ey) = (h - 1.0 - fa.keypoint.y, fa.keypoint.x);
            let Some(j) = b.iter().position(|fb| {
                (fb.keypoint.x - ex).abs() < 0.5
                    && (fb.keypoint.y - ey).abs() < 0.5
                    && (fb.keypoint.sigma / fa.keypoint.sigma - 1.0).abs() < 0.05
            }) else {
                continue;
            };
            paired += 1;
            if nearest(&fa.descriptor, &b) == j && nearest(&b[j].descriptor, &a) == i {
                mutual += 1;
            }
            let turn = (b[j].keypoint.orientation - fa.keypoint.orientation)
                .to_degrees()
                .rem_euclid(360.0);
            worst_angle = worst_angle.max((turn - 90.0).abs());
        }
    }
    ensure!(paired > 0, "no position-paired keypoints");
    let frac = mutual as f64 / paired as f64;
    ensure!(frac >= 0.9, "mutual nearest neighbours {mutual}/{paired} = {frac:.3} < 0.9");
    ensure!(worst_angle <= 10.0, "orientation off by {worst_angle:.2} deg from 90");
    Ok(format!(
        "{mutual}/{paired} mutual nearest neighbours, max orientation error {worst_angle:.3} deg"
    ))
}

fn matching_oracle() -> Outcome {
    let query = random_descriptors(200, 1);
    let train = random_descriptors(200, 2);
    let got = brute_force_knn(&query, &train);
    for (qi, q) in query.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let mut acc = 0.0f64;
                for k in 0..DESCRIPTOR_LEN {
                    let d = q.values()[k] as f64 - t.values()[k] as f64;
                    acc += d * d;
                }
                (acc.sqrt(), ti)
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let p = &got.pairs[qi];
        ensure!(
            p.query_idx == qi
                && p.train_idx == dists[0].1
                && p.dist_best.to_bits() == dists[0].0.to_bits()
                && p.dist_second.to_bits() == dists[1].0.to_bits(),
            "query {qi} differs from the double-loop oracle"
        );
    }

    let defaults = MatchParams::default();
    let query = random_descriptors(1000, 3);
    let train = random_descriptors(1000, 4);
    let exact = brute_force_knn(&query, &train);
    let approx = approx_knn(&query, &train, Some(defaults.leaf_budget), defaults.leaf_size);
    let agree = exact
        .pairs
        .iter()
        .zip(&approx.pairs)
        .filter(|(e, a)| e.train_idx == a.train_idx)
        .count();
    let frac = agree as f64 / exact.pairs.len() as f64;
    ensure!(frac >= 0.95, "approximate agreement {frac:.3} < 0.95");
    Ok(format!("200x200 bit-identical; approx agreement {frac:.3} on 1000x1000"))
}

fn lowe_score_properties() -> Outcome {
    let fp = FeatureParams::default();
    let mp = MatchParams::default();
    for seed in 0..4 {
        let a = descriptors(&extract_features(&blob_texture(128, 128, 80 + seed), &fp).map_err(|e| e.to_string())?);
        ensure!(a.len() >= 2, "texture {seed} has {} keypoints", a.len());
        let s = lowe_similarity(&a, &a, &mp).value;
        ensure!(s == 1.0, "self-similarity {s}");
    }
    for seed in 0..4 {
        let img = blob_texture(128, 128, 90 + seed);
        let a = descriptors(&extract_features(&img, &fp).map_err(|e| e.to_string())?);
        for other in [warp_similarity(&img, 0.2, 0.95, 0.5), blob_texture(128, 128, 190 + seed)] {
            let b = descriptors(&extract_features(&other, &fp).map_err(|e| e.to_string())?);
            let (ab, ba) = (lowe_similarity(&a, &b, &mp), lowe_similarity(&b, &a, &mp));
            ensure!(ab.value == ba.value, "asymmetric: {} vs {}", ab.value, ba.value);
        }
    }
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let a = descriptors(&extract_features(&blob_texture(256, 256, seed), &fp).map_err(|e| e.to_string())?);
        let b = descriptors(&extract_features(&blob_texture(256, 256, seed + 1000), &fp).map_err(|e| e.to_string())?);
        worst = worst.max(lowe_similarity(&a, &b, &mp).value);
    }
    ensure!(worst <= 0.1, "unrelated textures scored {worst:.3} > 0.1");
    Ok(format!("self = 1, symmetric, worst unrelated score {worst:.3}"))
}

fn open_set_identification() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let start = Instant::now();
        let fp = FeatureParams::default();
        let entries = (0..20u64)
            .map(|s| entry_from_image(&format!("S{s:02}"), &blob_texture(256, 256, 100 + s), &fp))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let index = GalleryIndex::from_entries(entries).map_err(|e| e.to_string())?;
        let mut probes: Vec<(GrayImage, Option<String>)> = (0..20u64)
            .map(|s| {
                let warped = warp_similarity(&blob_texture(256, 256, 100 + s), 10f64.to_radians(), 0.9, 0.5);
                (warped, Some(format!("S{s:02}")))
            })
            .collect();
        probes.extend((0..10u64).map(|s| (blob_texture(256, 256, 500 + s), None)));
        let eval = evaluate_images(&probes, &index, &Gates::default(), &fp, &MatchParams::default())
            .map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let c = eval.confusion;
        let detail = format!(
            "precision {:?} recall {:?} (tp {} fp {} fn {} tn {}), {elapsed:.1?} single-threaded",
            eval.precision, eval.recall, c.tp, c.fp, c.fn_, c.tn
        );
        ensure!(eval.errors.is_empty(), "probe errors: {:?}", eval.errors);
        ensure!(eval.precision.is_some_and(|p| p >= 0.9), "{detail}");
        ensure!(eval.recall.is_some_and(|r| r >= 0.9), "{detail}");
        ensure!(elapsed < Duration::from_secs(120), "{detail}");
        Ok(detail)
    })
}

fn persistence() -> Outcome {
    let feature = |i: usize, d: Descriptor| IndexedFeature {
        x: 10.0 + i as f32 * 0.37,
        y: 3.0 - i as f32 * 1.1,
        sigma: 1.6 * (1.0 + i as f32 / 7.0),
        orientation: (i as f32 * 0.9) % std::f32::consts::TAU,
        response: 0.5 / (1 + i) as f32,
        descriptor: d,
    };
    let entries = vec![
        GalleryEntry {
            code: "A-001".into(),
            source_digest: [0xab; 32],
            features: random_descriptors(25, 5).into_iter().enumerate().map(|(i, d)| feature(i, d)).collect(),
        },
        GalleryEntry {
            code: "empty".into(),
            source_digest: [0; 32],
            features: Vec::new(),
        },
        GalleryEntry {
            code: "Ü-3".into(),
            source_digest: [7; 32],
            features: random_descriptors(3, 6).into_iter().enumerate().map(|(i, d)| feature(i, d)).collect(),
        },
    ];
    for index in [GalleryIndex::from_entries(entries).map_err(|e| e.to_string())?, GalleryIndex::new()] {
        let mut first = Vec::new();
        write_index(&index, &mut first).map_err(|e| e.to_string())?;
        let loaded = read_index(&first).map_err(|e| e.to_string())?;
        ensure!(loaded == index, "loaded index differs");
        let mut second = Vec::new();
        write_index(&loaded, &mut second).map_err(|e| e.to_string())?;
        ensure!(first == second, "re-encoded bytes differ");
    }

    let mut bytes = Vec::new();
    write_index(&GalleryIndex::new(), &mut bytes).map_err(|e| e.to_string())?;
    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    for (what, corrupt) in [("magic", bad_magic), ("version", bad_version)] {
        ensure!(
            matches!(read_index(&corrupt), Err(Error::Format { .. })),
            "corrupted {what} not reported as a format error"
        );
    }
    Ok("bit-exact round trips (incl. empty index and 0-keypoint entry); corrupt magic/version rejected".into())
}

fn run_identify(probe: &Path, index: &Path) -> Result<(Option<i32>, Vec<u8>), String> {
    let out = Command::new(BIN)
        .args(["identify", probe.to_str().unwrap(), index.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    Ok((out.status.code(), out.stdout))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("gallery");
    std::fs::create_dir(&dir).map_err(|e| e.to_string())?;
    let mut codes = String::new();
    for i in 0..4u64 {
        encode_png(&blob_texture(128, 128, 300 + i), &[], dir.join(format!("{i}.png"))).map_err(|e| e.to_string())?;
        codes.push_str(&format!("{i}.png,C{i}\n"));
    }
    let codes_path = tmp.path().join("codes.csv");
    std::fs::write(&codes_path, codes).map_err(|e| e.to_string())?;
    let index = tmp.path().join("gallery.odid");
    let status = Command::new(BIN)
        .args(["index", dir.to_str().unwrap(), codes_path.to_str().unwrap(), index.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?
        .status;
    ensure!(status.success(), "index failed: {status}");
    let probe = tmp.path().join("probe.png");
    encode_png(&warp_similarity(&blob_texture(128, 128, 302), 0.1, 0.95, 0.5), &[], &probe).map_err(|e| e.to_string())?;

    let (code_a, first) = run_identify(&probe, &index)?;
    let (code_b, second) = run_identify(&probe, &index)?;
    ensure!(!first.is_empty(), "no output");
    ensure!(code_a == code_b, "exit codes differ: {code_a:?} vs {code_b:?}");
    ensure!(first == second, "outputs differ");
    serde_json::from_slice::<serde_json::Value>(&first).map_err(|e| format!("not JSON: {e}"))?;
    Ok(format!("{} identical bytes, exit {:?}", first.len(), code_a))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("convolution oracle", convolution_oracle),
        ("pyramid shape", pyramid_shape),
        ("subpixel refinement", subpixel_refinement),
        ("edge rejection", edge_rejection),
        ("descriptor contract", descriptor_contract),
        ("rotation invariance", rotation_invariance),
        ("matching oracle", matching_oracle),
        ("similarity score properties", lowe_score_properties),
        ("open-set identification", open_set_identification),
        ("persistence", persistence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {:>2} {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2} {name}: {detail}", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
