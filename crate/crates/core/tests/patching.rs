use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsireport::patching::{
    dark_fraction, evaluate_patch, exposure_check, grayscale, grid_candidates, laplacian_variance, luma, sample_counts,
    stratified_sample, tissue_fraction, GrayImage, PatchRecord, QualityParams, RejectReason, Verdict,
};
use wsireport::pyramid::RgbImage;
use wsireport::segmentation::BinaryMask;

fn laplacian_oracle(g: &GrayImage) -> f64 {
    let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let mut responses = Vec::new();
    for y in 1..g.height - 1 {
        for x in 1..g.width - 1 {
            let mut acc = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                for (kx, w) in row.iter().enumerate() {
                    acc += w * f64::from(g.get(x + kx as u32 - 1, y + ky as u32 - 1));
                }
            }
            responses.push(acc);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n
}

fn random_gray(rng: &mut ChaCha8Rng, w: u32, h: u32) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.gen()).collect())
}

#[test]
fn laplacian_matches_convolution_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let g = random_gray(&mut rng, 64, 64);
        let (a, b) = (laplacian_variance(&g).unwrap(), laplacian_oracle(&g));
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
    let mut spike = GrayImage::new(5, 5, vec![0; 25]);
    spike.data[12] = 100;
    // Interior responses: -400 at the centre, +100 at its four neighbours, 0 at the corners; mean 0.
    let expected = laplacian_oracle(&spike);
    assert_eq!(expected, (400.0f64.powi(2) + 4.0 * 100.0f64.powi(2)) / 9.0);
    assert_eq!(laplacian_variance(&spike).unwrap(), expected);
    assert_eq!(laplacian_variance(&GrayImage::new(8, 8, vec![77; 64])).unwrap(), 0.0);
    assert!(laplacian_variance(&GrayImage::new(2, 9, vec![0; 18])).is_err());
}

#[test]
fn luma_examples() {
    assert_eq!(luma(255, 255, 255), 255);
    assert_eq!(luma(0, 0, 0), 0);
    assert_eq!(luma(255, 0, 0), 76);
    for _ in 0..1000 {
        let [r, g, b]: [u8; 3] = rand::random();
        let f = (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)).round();
        assert!((f64::from(luma(r, g, b)) - f).abs() <= 1.0);
    }
}

#[test]
fn grid_examples() {
    let p = QualityParams::default();
    assert_eq!(grid_candidates(512, 512, &p), vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
    assert_eq!(grid_candidates(300, 300, &p), vec![(0, 0)]);
    assert!(grid_candidates(255, 512, &p).is_empty());
}

#[test]
fn exposure_examples() {
    let p = QualityParams::default();
    assert_eq!(exposure_check(&RgbImage::filled(16, 16, [255, 255, 255]), &p), Err(RejectReason::Overexposed));
    assert_eq!(exposure_check(&RgbImage::filled(16, 16, [255, 0, 0]), &p), Err(RejectReason::Overexposed));
    assert_eq!(exposure_check(&RgbImage::filled(16, 16, [0, 0, 0]), &p), Err(RejectReason::Underexposed));
    let half = RgbImage::from_fn(16, 16, |x, _| if x < 8 { [255, 0, 0] } else { [128, 128, 128] });
    assert_eq!(exposure_check(&half, &p), Ok(()));
}

#[test]
fn dark_and_tissue_oracles() {
    let p = QualityParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g = random_gray(&mut rng, 256, 256);
        let dark = g.data.iter().filter(|&&v| v < 30).count() as f64 / 65536.0;
        assert_eq!(dark_fraction(&g, &p), dark);
        let m = BinaryMask::from_fn(256, 256, |_, _| rng.gen_bool(0.3));
        let ones = (0..256).flat_map(|y| (0..256).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y)).count();
        assert_eq!(tissue_fraction(&m, 256).unwrap(), ones as f64 / 65536.0);
    }
    assert_eq!(dark_fraction(&GrayImage::new(4, 4, vec![30; 16]), &p), 0.0);
    assert_eq!(dark_fraction(&GrayImage::new(4, 4, vec![0; 16]), &p), 1.0);
    assert!(tissue_fraction(&BinaryMask::ones(255, 256), 256).is_err());
}

fn textured(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(256, 256, |_, _| {
        let t: f64 = rng.gen();
        [(150.0 + 80.0 * t) as u8, (40.0 + 60.0 * t) as u8, (120.0 + 70.0 * t) as u8]
    })
}

#[test]
fn evaluate_patch_examples() {
    let p = QualityParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tissue = BinaryMask::ones(256, 256);
    let sharp = textured(&mut rng);
    let rec = evaluate_patch(&sharp, &tissue, &p, (3, 0, 0)).unwrap();
    assert_eq!(rec.verdict, Verdict::Accepted);

    // Box blur until the focus measure drops below the threshold.
    let mut blurred = sharp.clone();
    while laplacian_variance(&grayscale(&blurred)).unwrap() >= p.focus_min {
        blurred = RgbImage::from_fn(256, 256, |x, y| {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for yy in y.saturating_sub(1)..=(y + 1).min(255) {
                for xx in x.saturating_sub(1)..=(x + 1).min(255) {
                    let px = blurred.get(xx, yy);
                    (0..3).for_each(|c| acc[c] += u32::from(px[c]));
                    n += 1;
                }
            }
            [(acc[0] / n) as u8, (acc[1] / n) as u8, (acc[2] / n) as u8]
        });
    }
    let rec = evaluate_patch(&blurred, &tissue, &p, (3, 0, 0)).unwrap();
    assert_eq!(rec.verdict, Verdict::Rejected(RejectReason::Focus));

    let mut blob = sharp.clone();
    let black = (65536.0f64 * 0.3) as u32;
    for i in 0..black {
        blob.set(i % 256, i / 256, [0, 0, 0]);
    }
    let rec = evaluate_patch(&blob, &tissue, &p, (3, 0, 0)).unwrap();
    assert_eq!(rec.verdict, Verdict::Rejected(RejectReason::Dark));
    assert_eq!(rec.dark_fraction, f64::from(black) / 65536.0);
}

#[test]
fn verdict_is_first_failing_criterion() {
    let p = QualityParams { patch_size: 16, stride: 16, ..QualityParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..300 {
        let base: [u8; 3] = rng.gen();
        let noise = rng.gen_range(0..120u8);
        let img = RgbImage::from_fn(16, 16, |_, _| {
            let mut px = base;
            for c in px.iter_mut() {
                *c = c.saturating_add(rng.gen_range(0..=noise));
            }
            px
        });
        let density: f64 = rng.gen();
        let mask = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(density));
        let rec = evaluate_patch(&img, &mask, &p, (0, 0, 0)).unwrap();
        let checks = [
            (rec.tissue_fraction > p.min_tissue, RejectReason::Tissue),
            (rec.focus >= p.focus_min, RejectReason::Focus),
            (rec.mean_v >= p.v_min, RejectReason::Underexposed),
            (rec.mean_v <= p.v_max, RejectReason::Overexposed),
            (rec.mean_s >= p.s_min, RejectReason::LowSaturation),
            (rec.dark_fraction <= p.dark_frac_max, RejectReason::Dark),
        ];
        let expected = checks.iter().find(|(ok, _)| !ok).map_or(Verdict::Accepted, |&(_, r)| Verdict::Rejected(r));
        assert_eq!(rec.verdict, expected);
    }
}

fn records(level: u32, n: usize) -> Vec<PatchRecord> {
    (0..n)
        .map(|i| PatchRecord {
            level,
            x: (i as u32) * 256,
            y: 0,
            tissue_fraction: 1.0,
            focus: 100.0,
            mean_v: 100.0,
            mean_s: 50.0,
            dark_fraction: 0.0,
            verdict: Verdict::Accepted,
        })
        .collect()
}

#[test]
fn eq9_examples() {
    let counts = |v: &[(u32, usize)]| v.iter().cloned().collect::<BTreeMap<_, _>>();
    assert_eq!(sample_counts(&counts(&[(6, 500), (5, 500), (4, 500), (3, 500)]), 2500), counts(&[(6, 500), (5, 500), (4, 500), (3, 500)]));
    assert_eq!(
        sample_counts(&counts(&[(6, 3000), (5, 1000), (4, 500), (3, 500)]), 2500),
        counts(&[(6, 1500), (5, 500), (4, 250), (3, 250)])
    );
    assert_eq!(sample_counts(&counts(&[(6, 2501)]), 2500), counts(&[(6, 2500)]));
}

fn count_vec() -> impl Strategy<Value = BTreeMap<u32, usize>> {
    proptest::collection::btree_map(0u32..8, 0usize..6000, 1..5)
}

proptest! {
    #[test]
    fn eq9_budget_and_formula(valid in count_vec(), max in 1usize..4000) {
        let out = sample_counts(&valid, max);
        let total: usize = valid.values().sum();
        prop_assert!(out.values().sum::<usize>() <= max);
        for (l, &n) in &valid {
            let expected = if total <= max { n } else { n.min(max * n / total) };
            prop_assert_eq!(out[l], expected);
        }
    }

    #[test]
    fn sampling_is_a_seeded_subset(valid in proptest::collection::btree_map(3u32..7, 0usize..400, 1..4), seed in any::<u64>(), max in 1usize..600) {
        let input: BTreeMap<u32, Vec<PatchRecord>> = valid.iter().map(|(&l, &n)| (l, records(l, n))).collect();
        let p = QualityParams { max_patches: max, seed, ..QualityParams::default() };
        let a = stratified_sample(&input, &p);
        prop_assert_eq!(&a, &stratified_sample(&input, &p));
        let other = stratified_sample(&input, &QualityParams { seed: seed ^ 1, ..p.clone() });
        for (l, picked) in &a {
            prop_assert_eq!(picked.len(), other[l].len());
            let xs: Vec<u32> = picked.iter().map(|r| r.x).collect();
            prop_assert!(xs.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(picked.iter().all(|r| input[l].contains(r)));
        }
    }
}
