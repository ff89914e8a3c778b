//! PSNR, MS-SSIM and BD-rate against independent computations.

mod common;

use common::*;
use msnerv::metrics::{
    bd_rate, load_rd_curve, ms_ssim, ms_ssim_frame, psnr, psnr_frame, read_rd_csv, write_rd_csv, Quality, RdCurve,
    RdPoint, PSNR_CAP,
};
use msnerv::video_io::VideoTensor;
use msnerv::Tensor;
use proptest::prelude::*;

fn video(frames: Vec<Tensor<f64>>) -> VideoTensor {
    VideoTensor::new(frames.iter().map(|f| f.cast()).collect()).unwrap()
}

#[test]
fn psnr_examples() {
    let a = video(vec![Tensor::full(&[24, 24, 3], 0.5); 3]);
    let b = video(vec![Tensor::full(&[24, 24, 3], 0.4); 3]);
    // 0.5 - 0.4 in f32 is not exactly 0.1
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    let short = video(vec![Tensor::full(&[24, 24, 3], 0.5); 2]);
    assert!(psnr(&a, &short).is_err());
}

#[test]
fn psnr_is_global_not_per_frame() {
    let mut r = rng(1);
    let fa: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&[24, 48, 3], 0.0, 1.0, &mut r)).collect();
    let fb: Vec<Tensor<f64>> = fa
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let amp = 0.01 * (k + 1) as f64 * (k + 1) as f64;
            let n = uniform(f.shape(), -amp, amp, &mut r);
            Tensor::from_fn(f.shape(), |i| (f.data()[i] + n.data()[i]).clamp(0.0, 1.0))
        })
        .collect();
    let (va, vb) = (video(fa), video(fb));
    let (mut se, mut n, mut per) = (0.0, 0.0, 0.0);
    for (x, y) in va.frames().iter().zip(vb.frames()) {
        let mse: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>();
        se += mse;
        n += x.len() as f64;
        per += 10.0 * (x.len() as f64 / mse).log10();
        assert!((psnr_frame(x, y).unwrap() - 10.0 * (x.len() as f64 / mse).log10()).abs() < 1e-9);
    }
    let global = 10.0 * (n / se).log10();
    let per = per / 4.0;
    let got = psnr(&va, &vb).unwrap();
    assert!((got - global).abs() < 1e-9);
    assert!((got - per).abs() > 0.1, "the two averages should differ on this clip");
}

#[test]
fn ms_ssim_examples() {
    let a = uniform(&[40, 40, 3], 0.0, 1.0, &mut rng(2));
    assert!((ms_ssim_frame(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let zero = Tensor::full(&[40, 40, 3], 0.0);
    let one = Tensor::full(&[40, 40, 3], 1.0);
    let v = ms_ssim_frame(&zero, &one).unwrap();
    assert!((0.0..0.01).contains(&v), "{v}");
    assert!(ms_ssim_frame(&Tensor::zeros(&[10, 40, 3]), &Tensor::zeros(&[10, 40, 3])).is_err());
}

#[test]
fn ms_ssim_matches_direct_window_reference() {
    let mut r = rng(3);
    for (h, w) in [(48, 64), (90, 96), (200, 176)] {
        let a = uniform(&[h, w, 3], 0.0, 1.0, &mut r);
        let n = uniform(&[h, w, 3], -0.3, 0.3, &mut r);
        let b = Tensor::from_fn(a.shape(), |i| (0.7 * a.data()[i] + 0.15 + n.data()[i]).clamp(0.0, 1.0));
        let want = naive_ms_ssim(&a, &b);
        let got = ms_ssim_frame(&a, &b).unwrap();
        println!("{h}x{w}: {got} vs {want}");
        assert!((got - want).abs() < 1e-4);
    }
    let a = uniform(&[48, 48, 3], 0.0, 1.0, &mut r);
    let b = uniform(&[48, 48, 3], 0.0, 1.0, &mut r);
    let (va, vb) = (video(vec![a.clone(), b.clone()]), video(vec![b.clone(), a.clone()]));
    let want = 0.5 * (naive_ms_ssim(&a.cast::<f32>().cast(), &b.cast::<f32>().cast()) + naive_ms_ssim(&b.cast::<f32>().cast(), &a.cast::<f32>().cast()));
    assert!((ms_ssim(&va, &vb).unwrap() - want).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ms_ssim_in_unit_interval(seed in any::<u64>(), lo in 0.0f64..0.5, hi in 0.5f64..1.0) {
        let mut r = rng(seed);
        let a = uniform(&[24, 24, 3], lo, hi, &mut r);
        let b = uniform(&[24, 24, 3], 0.0, 1.0, &mut r);
        let v = ms_ssim_frame(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
    RdCurve::new(label, pts.iter().map(|&(bpp, q)| RdPoint { bpp, psnr: q, ms_ssim: 0.9 + q / 1000.0 }).collect()).unwrap()
}

fn anchor() -> RdCurve {
    curve("anchor", &[(0.02, 28.1), (0.05, 31.0), (0.1, 33.2), (0.2, 35.0), (0.4, 36.4)])
}

#[test]
fn identical_curves_give_zero() {
    let a = anchor();
    assert_eq!(bd_rate(&a, &a, Quality::Psnr).unwrap(), 0.0);
    assert_eq!(bd_rate(&a, &a, Quality::MsSsim).unwrap(), 0.0);
}

#[test]
fn doubled_rate_is_plus_one_hundred_percent() {
    let a = anchor();
    let b = RdCurve::new("b", a.points.iter().map(|p| RdPoint { bpp: 2.0 * p.bpp, ..*p }).collect()).unwrap();
    let d = bd_rate(&a, &b, Quality::Psnr).unwrap();
    assert!((d - 100.0).abs() < 1e-9, "{d}");
    let back = bd_rate(&b, &a, Quality::Psnr).unwrap();
    assert!((back + 50.0).abs() < 1e-9);
}

#[test]
fn antisymmetric_in_the_log_domain() {
    let a = anchor();
    let b = curve("b", &[(0.03, 29.0), (0.06, 31.5), (0.09, 33.0), (0.25, 35.9), (0.5, 37.0)]);
    for q in [Quality::Psnr, Quality::MsSsim] {
        let ab = bd_rate(&a, &b, q).unwrap();
        let ba = bd_rate(&b, &a, q).unwrap();
        assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn polynomial_curves_match_closed_form() {
    // log10(bpp) as exact cubics in PSNR, over different quality ranges.
    let pa = [-2.0, 0.09, 0.003, -0.0001];
    let pb = [-2.2, 0.11, 0.001, 0.00005];
    let eval = |c: &[f64; 4], q: f64| {
        let x = q - 30.0;
        c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x
    };
    let anti = |c: &[f64; 4], q: f64| {
        let x = q - 30.0;
        c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0
    };
    let qa = [26.0, 29.0, 32.0, 35.0, 38.0, 41.0];
    let qb = [28.0, 30.5, 33.0, 36.0, 39.5];
    let mk = |label: &str, c: &[f64; 4], qs: &[f64]| {
        RdCurve::new(label, qs.iter().map(|&q| RdPoint { bpp: 10f64.powf(eval(c, q)), psnr: q, ms_ssim: 0.5 }).collect()).unwrap()
    };
    let (a, b) = (mk("a", &pa, &qa), mk("b", &pb, &qb));
    let (lo, hi) = (28.0, 39.5);
    let delta = ((anti(&pb, hi) - anti(&pb, lo)) - (anti(&pa, hi) - anti(&pa, lo))) / (hi - lo);
    let want = 100.0 * (10f64.powf(delta) - 1.0);
    let got = bd_rate(&a, &b, Quality::Psnr).unwrap();
    let got_delta = (1.0 + got / 100.0).log10();
    println!("delta {delta} vs {got_delta}");
    assert!((got_delta - delta).abs() < 1e-6);
    assert!((got - want).abs() < 1e-4);
}

#[test]
fn curve_contracts() {
    let few = vec![RdPoint { bpp: 0.1, psnr: 30.0, ms_ssim: 0.9 }; 3];
    assert!(RdCurve::new("x", few).is_err());
    let dup = vec![
        RdPoint { bpp: 0.1, psnr: 30.0, ms_ssim: 0.9 },
        RdPoint { bpp: 0.1, psnr: 31.0, ms_ssim: 0.91 },
        RdPoint { bpp: 0.2, psnr: 32.0, ms_ssim: 0.92 },
        RdPoint { bpp: 0.3, psnr: 33.0, ms_ssim: 0.93 },
    ];
    assert!(RdCurve::new("x", dup).is_err());
    let far = curve("far", &[(0.5, 40.0), (0.6, 41.0), (0.7, 42.0), (0.8, 43.0)]);
    assert!(bd_rate(&anchor(), &far, Quality::Psnr).is_err());
    let shuffled = curve("s", &[(0.2, 35.0), (0.02, 28.1), (0.4, 36.4), (0.05, 31.0), (0.1, 33.2)]);
    assert_eq!(shuffled.points, anchor().points);
}

#[test]
fn csv_round_trip() {
    let a = anchor();
    let b = curve("b", &[(0.03, 29.0), (0.06, 31.5), (0.09, 33.0), (0.25, 35.9)]);
    let text = write_rd_csv(&[&a, &b]);
    let back = read_rd_csv(&text).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].points, a.points);
    assert_eq!(back[1].label, "b");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    std::fs::write(&path, write_rd_csv(&[&a])).unwrap();
    assert_eq!(load_rd_curve(&path).unwrap().points, a.points);
    std::fs::write(&path, &text).unwrap();
    assert!(load_rd_curve(&path).is_err());
    assert!(read_rd_csv("label,bpp,psnr,ms_ssim\nx,0.1,abc,0.9\n").is_err());
}
