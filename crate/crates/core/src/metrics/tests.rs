use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{landmarks_to_pixels, render_face, video_params};
use crate::test_support::{rng, uniform};

fn image(seed: u64, n: usize) -> Tensor {
    uniform(&mut rng(seed), &[3, n, n], 0.0, 1.0)
}

fn offset(t: &Tensor, d: f64) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + d)
}

fn face(seed: u64) -> (Tensor, Vec<[f64; 2]>) {
    let p = video_params(seed, 2, seed + 9).remove(0);
    let (img, lm) = render_face(&p, 64, 64).unwrap();
    (img, landmarks_to_pixels(&lm, 64, 64))
}

#[test]
fn psnr_caps_identical_images_and_reads_twenty_db_at_offset_one_tenth() {
    let a = uniform(&mut rng(1), &[3, 16, 16], 0.0, 0.9);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let p = psnr(&a, &offset(&a, 0.1)).unwrap();
    assert!((p - 20.0).abs() <= 1e-9, "{p}");
    assert!((mse(&a, &offset(&a, 0.1)).unwrap() - 0.01).abs() <= 1e-12);
}

#[test]
fn psnr_matches_direct_formula() {
    let (a, b) = (image(2, 20), image(3, 20));
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y).powi(2);
    }
    let want = -10.0 * (s / a.numel() as f64).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() <= 1e-9);
}

#[test]
fn l1_reads_mean_absolute_difference() {
    let a = uniform(&mut rng(4), &[3, 8, 8], 0.0, 0.9);
    assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
    assert!((l1_distance(&a, &offset(&a, 0.1)).unwrap() - 0.1).abs() <= 1e-12);
    let b = image(5, 8);
    let mut s = 0.0;
    for i in 0..a.numel() {
        s += (a.data()[i] - b.data()[i]).abs();
    }
    assert!((l1_distance(&a, &b).unwrap() - s / a.numel() as f64).abs() <= 1e-12);
}

#[test]
fn shape_mismatch_is_rejected() {
    let (a, b) = (image(1, 16), image(1, 12));
    assert!(matches!(psnr(&a, &b), Err(MetricsError::Shape(..))));
    assert!(matches!(l1_distance(&a, &b), Err(MetricsError::Shape(..))));
    assert!(matches!(ssim(&a, &b), Err(MetricsError::Shape(..))));
    let small = image(1, 10);
    assert!(matches!(
        ssim(&small, &small),
        Err(MetricsError::TooSmall { .. })
    ));
}

#[test]
fn ssim_of_identical_images_is_one() {
    let (img, _) = face(6);
    assert!((ssim(&img, &img).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn ssim_of_a_negative_is_negative() {
    let n = 32;
    let stripes = Tensor::from_fn(
        vec![3, n, n],
        |i| if (i % n) / 2 % 2 == 0 { 1.0 } else { 0.0 },
    );
    let neg = Tensor::from_fn(stripes.shape().to_vec(), |i| 1.0 - stripes.data()[i]);
    assert!(ssim(&stripes, &neg).unwrap() < 0.0);
}

/// SSIM with the full 2-D window written out at every valid position.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let gray = |t: &Tensor, y: usize, x: usize| {
        (0..c).map(|ch| t.data()[(ch * h + y) * w + x]).sum::<f64>() / c as f64
    };
    let r = 5i64;
    let mut win = vec![vec![0.0; 11]; 11];
    let mut total_w = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as i64 - r, j as i64 - r);
            *v = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total_w;
                    ma += k * gray(a, y + i, x + j);
                    mb += k * gray(b, y + i, x + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total_w;
                    let (p, q) = (gray(a, y + i, x + j) - ma, gray(b, y + i, x + j) - mb);
                    va += k * p * p;
                    vb += k * q * q;
                    cov += k * p * q;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_windowed_oracle() {
    for seed in 0..3 {
        let (a, b) = (image(10 + seed, 24), image(20 + seed, 24));
        let want = ssim_oracle(&a, &b);
        assert!((ssim(&a, &b).unwrap() - want).abs() <= 1e-6);
    }
    let (f, _) = face(7);
    let g = offset(&f, 0.03);
    assert!((ssim(&f, &g).unwrap() - ssim_oracle(&f, &g)).abs() <= 1e-6);
}

#[test]
fn akd_of_a_three_four_shift_is_five() {
    let pts = vec![[10.0, 12.0], [30.5, 7.25], [0.0, 0.0]];
    assert_eq!(akd(&pts, &pts).unwrap(), 0.0);
    let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    assert!((akd(&moved, &pts).unwrap() - 5.0).abs() <= 1e-12);
    assert!(matches!(
        akd(&pts, &pts[..2]),
        Err(MetricsError::Count(3, 2))
    ));
}

#[test]
fn akd_matches_loop_oracle() {
    let mut r = rng(8);
    let a: Vec<[f64; 2]> = (0..10)
        .map(|_| [r.gen_range(0.0..64.0), r.gen_range(0.0..64.0)])
        .collect();
    let b: Vec<[f64; 2]> = (0..10)
        .map(|_| [r.gen_range(0.0..64.0), r.gen_range(0.0..64.0)])
        .collect();
    let mut s = 0.0;
    for i in 0..10 {
        s += ((a[i][0] - b[i][0]).powi(2) + (a[i][1] - b[i][1]).powi(2)).sqrt();
    }
    assert!((akd(&a, &b).unwrap() - s / 10.0).abs() <= 1e-9);
}

fn shift_image(t: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(vec![c, h, w], |i| {
        let (x, y, ch) = ((i % w) as i64, ((i / w) % h) as i64, i / (h * w));
        let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
        let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
        t.data()[(ch * h + sy) * w + sx]
    })
}

#[test]
fn landmarks_are_found_where_the_content_moved() {
    let (img, lm) = face(9);
    assert_eq!(landmark_akd(&img, &img, &lm).unwrap(), 0.0);
    let moved = shift_image(&img, 3, -2);
    let found = locate_landmarks(&img, &moved, &lm).unwrap();
    let mut errs = Vec::new();
    for (f, p) in found.iter().zip(&lm) {
        errs.push(((f[0] - p[0] - 3.0).powi(2) + (f[1] - p[1] + 2.0).powi(2)).sqrt());
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean <= 0.25, "{errs:?}");
    let d = landmark_akd(&img, &moved, &lm).unwrap();
    assert!((d - 13f64.sqrt()).abs() <= 0.25, "{d}");
}

#[test]
fn ncc_handles_flat_patches() {
    assert_eq!(ncc(&[0.5; 9], &[0.5; 9]), 1.0);
    assert_eq!(ncc(&[0.5; 9], &[0.2; 9]), 0.0);
    let a = [0.0, 1.0, 2.0, 3.0];
    assert!((ncc(&a, &[1.0, 3.0, 5.0, 7.0]) - 1.0).abs() <= 1e-12);
    assert!((ncc(&a, &[3.0, 2.0, 1.0, 0.0]) + 1.0).abs() <= 1e-12);
}

#[test]
fn metrics_accept_batched_single_images() {
    let a = image(11, 16);
    let b = Tensor::new(vec![1, 3, 16, 16], a.data().to_vec()).unwrap();
    assert!((ssim(&b, &b).unwrap() - 1.0).abs() <= 1e-12);
    assert!(matches!(
        ssim(
            &Tensor::zeros(vec![2, 3, 16, 16]),
            &Tensor::zeros(vec![2, 3, 16, 16])
        ),
        Err(MetricsError::NotImage(_))
    ));
}

#[test]
fn noise_of_growing_amplitude_lowers_ssim_and_psnr() {
    let (img, _) = face(12);
    let noise = uniform(&mut rng(13), img.shape(), -1.0, 1.0);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for amp in [0.02, 0.05, 0.1] {
        let noisy = Tensor::from_fn(img.shape().to_vec(), |i| {
            img.data()[i] + amp * noise.data()[i]
        });
        let s = ssim(&img, &noisy).unwrap();
        let p = psnr(&img, &noisy).unwrap();
        assert!(s < last.0 && p < last.1, "{amp}: {s} {p}");
        last = (s, p);
    }
}

#[test]
fn aggregate_is_the_mean_of_present_values() {
    let pairs = vec![
        PairMetrics {
            index: 0,
            ssim: Some(0.5),
            l1: Some(0.2),
            rectified_is_driving: true,
            ..PairMetrics::default()
        },
        PairMetrics {
            index: 1,
            ssim: Some(0.7),
            l1: None,
            ..PairMetrics::default()
        },
    ];
    let a = Aggregate::of(&pairs);
    assert!((a.ssim.unwrap() - 0.6).abs() <= 1e-15);
    assert_eq!(a.l1, Some(0.2));
    assert_eq!(a.psnr, None);
    assert_eq!(a.rectified_is_driving, 1);
}

#[test]
fn report_round_trips_through_json_without_absent_fields() {
    let pairs = vec![PairMetrics {
        index: 0,
        ssim: Some(0.9),
        psnr: Some(30.0),
        ..PairMetrics::default()
    }];
    let r = MetricsReport::new("cross-identity", 0.3, serde_json::json!({"seed": 1}), pairs);
    let text = r.to_json();
    assert!(!text.contains("\"akd\""));
    assert!(!text.contains("lpips"));
    let back: MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.pair_count, 1);
    assert_eq!(back.schema_version, REPORT_SCHEMA_VERSION);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_reflexive(seed in 0u64..1000) {
        let (a, b) = (image(seed, 12), image(seed + 1000, 12));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(l1_distance(&a, &b).unwrap(), l1_distance(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
