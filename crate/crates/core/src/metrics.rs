//! MSE, PSNR and SSIM on `[0, 1]` images.
//!
//! PSNR of identical images is `f64::INFINITY`. Batch metrics are computed
//! on copies clamped to `[0, 1]`; infinite PSNR values are left out of the
//! mean and counted separately.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(1 / mse)`; `+inf` for `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(size * size);
    for &gy in &g {
        for &gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::dim(format!("ssim expects HW or CHW images, got {s:?}"))),
    }
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// Mean local SSIM over every valid window position and channel.
pub fn ssim_with(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = planes(a)?;
    let k = cfg.window;
    if k == 0 || h < k || w < k {
        return Err(Error::config(format!(
            "image {h}x{w} is smaller than the {k}x{k} ssim window; use a smaller window"
        )));
    }
    let win = gaussian_window(k, cfg.sigma);
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = win[dy * k + dx];
                        let va = pa[(y + dy) * w + x + dx];
                        let vb = pb[(y + dy) * w + x + dx];
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * (va * va);
                        sbb += wt * (vb * vb);
                        sab += wt * (va * vb);
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Ordered by ground-truth image.
    pub per_image: Vec<ImageMetrics>,
    /// `pairing[j]` is the recovered index scored against truth `j`.
    pub pairing: Vec<usize>,
    pub mean_mse: f64,
    /// Mean over finite PSNR values; `+inf` when every value is infinite.
    pub mean_psnr: f64,
    pub infinite_psnr: usize,
    pub mean_ssim: f64,
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn for_each_permutation(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        for_each_permutation(items, k + 1, f);
        items.swap(k, i);
    }
}

/// Pairing of recovered to true images maximizing total PSNR, by brute
/// force over all permutations. Infinite entries are compared by count
/// first, then the finite remainder. The first maximum found wins ties.
pub fn best_assignment(psnr_matrix: &[Vec<f64>]) -> Vec<usize> {
    let n = psnr_matrix.len();
    let mut best: Option<((usize, f64), Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    for_each_permutation(&mut perm, 0, &mut |p| {
        let vals = p.iter().enumerate().map(|(j, &r)| psnr_matrix[r][j]);
        let inf = vals.clone().filter(|v| *v == f64::INFINITY).count();
        let finite: f64 = vals.filter(|v| v.is_finite()).sum();
        let key = (inf, finite);
        if best.as_ref().map_or(true, |(b, _)| key.0 > b.0 || (key.0 == b.0 && key.1 > b.1)) {
            best = Some((key, p.to_vec()));
        }
    });
    best.map(|(_, p)| p).unwrap_or_default()
}

const MAX_ASSIGNMENT: usize = 8;

/// Scores `recovered` against `truth` (both NCHW). With `assignment`, the
/// pairing maximizes total PSNR; otherwise images are paired in order.
pub fn evaluate_batch(recovered: &Tensor, truth: &Tensor, assignment: bool) -> Result<MetricReport> {
    if recovered.rank() != 4 || truth.rank() != 4 {
        return Err(Error::dim("evaluate_batch expects NCHW tensors"));
    }
    if recovered.shape()[0] != truth.shape()[0] {
        return Err(Error::arg(format!(
            "batch sizes differ: {} recovered vs {} true",
            recovered.shape()[0],
            truth.shape()[0]
        )));
    }
    check_same(recovered, truth)?;
    let n = truth.shape()[0];
    if assignment && n > MAX_ASSIGNMENT {
        return Err(Error::arg(format!("assignment is exhaustive and limited to {MAX_ASSIGNMENT} images")));
    }
    let rec: Vec<Tensor> = (0..n).map(|i| recovered.select(i).map(|t| clamp01(&t))).collect::<Result<_>>()?;
    let tru: Vec<Tensor> = (0..n).map(|i| truth.select(i).map(|t| clamp01(&t))).collect::<Result<_>>()?;

    let pairing = if assignment && n > 1 {
        let m: Vec<Vec<f64>> =
            rec.iter().map(|r| tru.iter().map(|t| psnr(r, t)).collect::<Result<_>>()).collect::<Result<_>>()?;
        best_assignment(&m)
    } else {
        (0..n).collect()
    };

    let mut per_image = Vec::with_capacity(n);
    for (j, &r) in pairing.iter().enumerate() {
        let e = mse(&rec[r], &tru[j])?;
        per_image.push(ImageMetrics { mse: e, psnr: psnr_from_mse(e), ssim: ssim(&rec[r], &tru[j])? });
    }
    let finite: Vec<f64> = per_image.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
    let mean_psnr =
        if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    Ok(MetricReport {
        mean_mse: per_image.iter().map(|m| m.mse).sum::<f64>() / n as f64,
        mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n as f64,
        infinite_psnr: n - finite.len(),
        mean_psnr,
        per_image,
        pairing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_unit_values() {
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let a = img(1, 4, 4, |i| i as f64 / 16.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = img(1, 4, 4, |_| 0.0);
        let b = img(1, 4, 5, |_| 0.0);
        assert!(matches!(psnr(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_constant_images() {
        // μ_a = 0, μ_b = 1, σ = 0: (C1·C2) / ((1 + C1)·C2) = C1 / (1 + C1)
        let a = img(1, 16, 16, |_| 0.0);
        let b = img(1, 16, 16, |_| 1.0);
        let c1 = 1e-4;
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = img(3, 8, 8, |_| 0.5);
        assert!(matches!(ssim(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn assignment_on_permuted_truth() {
        let truth = Tensor::new(vec![3, 1, 11, 11], (0..363).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()).unwrap();
        let imgs: Vec<Tensor> = [2, 0, 1].iter().map(|&i| truth.select(i).unwrap()).collect();
        let rec = Tensor::stack(&imgs).unwrap();
        let r = evaluate_batch(&rec, &truth, true).unwrap();
        assert_eq!(r.pairing, vec![1, 2, 0]);
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert_eq!(r.infinite_psnr, 3);
        let single = evaluate_batch(&rec.select(0).unwrap().reshape(vec![1, 1, 11, 11]).unwrap(), &rec.select(0).unwrap().reshape(vec![1, 1, 11, 11]).unwrap(), true).unwrap();
        assert_eq!(single.pairing, vec![0]);
    }

    #[test]
    fn batch_size_mismatch() {
        let a = Tensor::zeros(vec![2, 1, 11, 11]).unwrap();
        let b = Tensor::zeros(vec![3, 1, 11, 11]).unwrap();
        assert!(matches!(evaluate_batch(&a, &b, true), Err(Error::Argument(_))));
    }

    fn pair_strategy(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(0.0..1.0f64, n), prop::collection::vec(0.0..1.0f64, n))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ssim_symmetric_and_bounded((a, b) in pair_strategy(2 * 12 * 12)) {
            let a = Tensor::new(vec![2, 12, 12], a).unwrap();
            let b = Tensor::new(vec![2, 12, 12], b).unwrap();
            let ab = ssim(&a, &b).unwrap();
            prop_assert_eq!(ab, ssim(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-6..10.0f64, m2 in 1e-6..10.0f64) {
            prop_assume!(m1 != m2);
            let (lo, hi) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
            prop_assert!(psnr_from_mse(lo) > psnr_from_mse(hi));
        }

        #[test]
        fn assignment_beats_identity_and_ignores_order(
            (a, b) in pair_strategy(4 * 11 * 11),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let rec = Tensor::new(vec![4, 1, 11, 11], a).unwrap();
            let truth = Tensor::new(vec![4, 1, 11, 11], b).unwrap();
            let best = evaluate_batch(&rec, &truth, true).unwrap();
            let ident = evaluate_batch(&rec, &truth, false).unwrap();
            prop_assert!(best.mean_psnr >= ident.mean_psnr);

            // brute-force oracle over all 24 pairings
            let mut brute = f64::NEG_INFINITY;
            for_each_permutation(&mut vec![0, 1, 2, 3], 0, &mut |p| {
                let s: f64 = p.iter().enumerate()
                    .map(|(j, &r)| psnr(&rec.select(r).unwrap(), &truth.select(j).unwrap()).unwrap())
                    .sum();
                brute = brute.max(s);
            });
            prop_assert!((best.mean_psnr * 4.0 - brute).abs() <= 1e-9);

            let shuffled: Vec<Tensor> = perm.iter().map(|&i| rec.select(i).unwrap()).collect();
            let other = evaluate_batch(&Tensor::stack(&shuffled).unwrap(), &truth, true).unwrap();
            prop_assert!((other.mean_psnr - best.mean_psnr).abs() <= 1e-12);
        }
    }
}
