//! Image quality metrics over `[h, w, c]` tensors with unit peak: PSNR with
//! a 99 dB cap for (near-)identical inputs, and mean SSIM over dense 8x8
//! windows.

use crate::numerics::{shape_err, NumericsError, Real, Tensor};

/// Peak signal-to-noise ratio in dB against peak 1.0, capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Real, NumericsError> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "psnr",
            "shape",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += (x - y) * (x - y);
    }
    let mse = acc / a.len() as Real;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

const C1: Real = 0.01 * 0.01;
const C2: Real = 0.03 * 0.03;

/// Mean SSIM over all dense square windows (8x8, shrunk for small images)
/// and channels, with the standard stabilizers for unit dynamic range.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Real, NumericsError> {
    let s = a.shape();
    if s != b.shape() {
        return Err(shape_err(
            "ssim",
            "shape",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if s.len() != 3 {
        return Err(shape_err("ssim", "rank", format!("image rank {}", s.len())));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let win = 8.min(h).min(w);
    let n = (win * win) as Real;
    let (da, db) = (a.data(), b.data());
    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            for ch in 0..c {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let va = da[(y * w + x) * c + ch];
                        let vb = db[(y * w + x) * c + ch];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let ma = sa / n;
                let mb = sb / n;
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                let v = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                acc += v;
                count += 1;
            }
        }
    }
    Ok(acc / count as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identical_images_hit_the_caps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::randn(&[12, 12, 3], 0.2, &mut rng);
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let a = Tensor::zeros(&[4, 4, 3]);
        let b = Tensor::from_vec(&[4, 4, 3], vec![0.1; 48]).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-12, "psnr {p}");
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_matches_the_definition_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[6, 6, 3], 0.3, &mut rng);
        let b = Tensor::randn(&[6, 6, 3], 0.3, &mut rng);
        let mse: Real = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<Real>()
            / 108.0;
        assert!((psnr(&a, &b).unwrap() - (-10.0 * mse.log10())).abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn ssim_closed_form_for_flat_images() {
        // zero variance: only the luminance term remains
        let a = Tensor::from_vec(&[8, 8, 1], vec![0.4; 64]).unwrap();
        let b = Tensor::from_vec(&[8, 8, 1], vec![0.6; 64]).unwrap();
        let want = (2.0 * 0.4 * 0.6 + C1) / (0.4 * 0.4 + 0.6 * 0.6 + C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let base: Vec<Real> = (0..300)
            .map(|i| 0.5 + 0.3 * ((i as Real) * 0.21).sin())
            .collect();
        let a = Tensor::from_vec(&[10, 10, 3], base.clone()).unwrap();
        let noise = Tensor::randn(&[10, 10, 3], 1.0, &mut rng);
        let with = |amp: Real| {
            let d = base
                .iter()
                .zip(noise.data())
                .map(|(&v, &n)| v + amp * n)
                .collect();
            Tensor::from_vec(&[10, 10, 3], d).unwrap()
        };
        let low = ssim(&a, &with(0.02)).unwrap();
        let high = ssim(&a, &with(0.2)).unwrap();
        assert!(low > high, "ssim {low} vs {high}");
        assert!(high < 1.0 && low < 1.0);
    }
}
