//! Image quality metrics: windowed SSIM, a fixed-feature LPIPS proxy, and
//! FID / KID over pooled embeddings of the frozen feature network.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::losses::FixedFeatureNet;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 2.0;

/// SSIM of one window from its moments.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over every fully contained `window×window` patch of every channel,
/// with uniform weights and population moments.
pub fn ssim_window(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, h, w) = a.chw()?;
    if window == 0 || h < window || w < window {
        return shape_err(format!("image {h}x{w} is smaller than the {window}x{window} SSIM window"));
    }
    let plane = h * w;
    let (th, tw) = (h + 1, w + 1);
    let mut total = 0.0;
    let mut count = 0usize;
    let n = (window * window) as f64;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let mut tables = vec![vec![0.0; th * tw]; 5];
        for y in 0..h {
            for x in 0..w {
                let (va, vb) = (pa[y * w + x], pb[y * w + x]);
                let vals = [va, vb, va * va, vb * vb, va * vb];
                for (t, v) in tables.iter_mut().zip(vals) {
                    t[(y + 1) * tw + x + 1] = v + t[y * tw + x + 1] + t[(y + 1) * tw + x] - t[y * tw + x];
                }
            }
        }
        let rect = |t: &[f64], y: usize, x: usize| {
            let (y1, x1) = (y + window, x + window);
            t[y1 * tw + x1] - t[y * tw + x1] - t[y1 * tw + x] + t[y * tw + x]
        };
        for y in 0..=h - window {
            for x in 0..=w - window {
                let s: Vec<f64> = tables.iter().map(|t| rect(t, y, x) / n).collect();
                let (ma, mb) = (s[0], s[1]);
                let va = s[2] - ma * ma;
                let vb = s[3] - mb * mb;
                let cov = s[4] - ma * mb;
                total += ssim_from_moments(ma, mb, va, vb, cov);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_window(a, b, SSIM_WINDOW)
}

/// Mean over taps of the spatially averaged squared difference of
/// channel-normalised features.
pub fn lpips_proxy(net: &FixedFeatureNet, a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (ta, tb) = (net.taps_of(a)?, net.taps_of(b)?);
    let mut total = 0.0;
    for (fa, fb) in ta.iter().zip(&tb) {
        let (c, h, w) = fa.chw()?;
        let plane = h * w;
        let mut d = 0.0;
        for p in 0..plane {
            let norm = |f: &Tensor| (0..c).map(|k| f.data()[k * plane + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(fa), norm(fb));
            for k in 0..c {
                d += (fa.data()[k * plane + p] / na - fb.data()[k * plane + p] / nb).powi(2);
            }
        }
        total += d / plane as f64;
    }
    Ok(total / ta.len() as f64)
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if rows.len() < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(format!(
            "feature sets need at least two rows of one common width, got {} rows",
            rows.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root; negative eigenvalues are clipped to zero.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> (DMatrix<f64>, DVector<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1e-300);
    if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
        log::warn!("{what}: clipped negative eigenvalues while taking a matrix square root");
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (root, roots)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (xa, xb) = (to_matrix(a)?, to_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::InvalidArgument("feature sets differ in width".into()));
    }
    if xa.nrows() <= xa.ncols() || xb.nrows() <= xb.ncols() {
        log::warn!(
            "FID with {} and {} samples of width {}: covariances are rank deficient",
            xa.nrows(),
            xb.nrows(),
            xa.ncols()
        );
    }
    let (mu_a, cov_a) = mean_cov(&xa);
    let (mu_b, cov_b) = mean_cov(&xb);
    let (root_a, _) = sqrt_psd(&cov_a, "FID");
    let inner = &root_a * &cov_b * &root_a;
    let (_, roots) = sqrt_psd(&inner, "FID");
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * roots.sum();
    Ok(d.max(0.0))
}

/// Unbiased squared MMD with the cubic polynomial kernel `(xᵀy/D + 1)³`.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (xa, xb) = (to_matrix(a)?, to_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::InvalidArgument("feature sets differ in width".into()));
    }
    let d = xa.ncols() as f64;
    let k = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x * y.transpose()).map(|v| (v / d + 1.0).powi(3));
    let (m, n) = (xa.nrows() as f64, xb.nrows() as f64);
    let kaa = k(&xa, &xa);
    let kbb = k(&xb, &xb);
    let kab = k(&xa, &xb);
    let off_diag = |km: &DMatrix<f64>| km.sum() - km.diagonal().sum();
    if xa.nrows() == xb.nrows() {
        // equal sizes: the cross term also skips i = j, so identical sets give exactly 0
        return Ok((off_diag(&kaa) + off_diag(&kbb) - 2.0 * off_diag(&kab)) / (m * (m - 1.0)));
    }
    Ok(off_diag(&kaa) / (m * (m - 1.0)) + off_diag(&kbb) / (n * (n - 1.0)) - 2.0 * kab.sum() / (m * n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub paired: bool,
    pub count: usize,
    /// Only meaningful with ground truth; `None` for unpaired evaluation.
    pub ssim: Option<f64>,
    pub lpips_proxy: Option<f64>,
    pub fid: f64,
    pub kid: f64,
}

impl MetricReport {
    fn tag(&self) -> &'static str {
        if self.paired {
            "paired"
        } else {
            "unpaired"
        }
    }

    /// `key=value` lines, prefixed by the setting.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |v| format!("{v:.17e}"));
        let t = self.tag();
        format!(
            "{t}.count={}\n{t}.ssim={}\n{t}.lpips_proxy={}\n{t}.fid={:.17e}\n{t}.kid={:.17e}\n",
            self.count,
            opt(self.ssim),
            opt(self.lpips_proxy),
            self.fid,
            self.kid
        )
    }
}

/// Table with one row per setting, columns as `SSIM LPIPS* FID KID`.
pub fn format_table(reports: &[MetricReport]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut s = format!("{:<10} {:>5} {:>8} {:>12} {:>10} {:>10}\n", "setting", "n", "SSIM", "LPIPS-proxy", "FID", "KID");
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:>5} {:>8} {:>12} {:>10.4} {:>10.4}\n",
            r.tag(),
            r.count,
            opt(r.ssim),
            opt(r.lpips_proxy),
            r.fid,
            r.kid
        ));
    }
    s
}

/// Metrics of generated images against references. In the paired setting the
/// `i`-th reference is the ground truth of the `i`-th output; in the unpaired
/// setting only the distribution-level scores are reported.
pub fn evaluate(net: &FixedFeatureNet, outputs: &[Tensor], references: &[Tensor], paired: bool) -> Result<MetricReport> {
    if outputs.is_empty() || references.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs outputs and references".into()));
    }
    let (mut ssim_sum, mut lp_sum) = (0.0, 0.0);
    if paired {
        if outputs.len() != references.len() {
            return Err(Error::InvalidArgument("paired evaluation needs one reference per output".into()));
        }
        for (o, r) in outputs.iter().zip(references) {
            ssim_sum += ssim(o, r)?;
            lp_sum += lpips_proxy(net, o, r)?;
        }
    }
    let fa = outputs.iter().map(|t| net.pooled(t)).collect::<Result<Vec<_>>>()?;
    let fb = references.iter().map(|t| net.pooled(t)).collect::<Result<Vec<_>>>()?;
    let n = outputs.len() as f64;
    Ok(MetricReport {
        paired,
        count: outputs.len(),
        ssim: paired.then_some(ssim_sum / n),
        lpips_proxy: paired.then_some(lp_sum / n),
        fid: fid(&fa, &fb)?,
        kid: kid(&fa, &fb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let mut rng = Rng::new(0);
        let a = rng.uniform_tensor(&[3, 12, 10], -1.0, 1.0);
        let b = rng.uniform_tensor(&[3, 12, 10], -1.0, 1.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim_window(&a, &a, 7).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        let checker = Tensor::from_fn(&[1, 9, 9], |i| if (i / 9 + i % 9) % 2 == 0 { 0.5 } else { -0.5 });
        assert!(ssim(&checker, &checker.map(|v| -v)).unwrap() < 0.0);
        let small = Tensor::zeros(&[1, 6, 9]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn fid_and_kid_vanish_on_identical_sets() {
        let mut rng = Rng::new(1);
        let a: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        assert!(kid(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        let a: Vec<Vec<f64>> = vec![vec![0.0], vec![2.0]];
        let b: Vec<Vec<f64>> = vec![vec![3.0], vec![7.0]];
        // means 1 and 5, variances 2 and 8: 16 + (√2 − √8)²
        let want = 16.0 + (2f64.sqrt() - 8f64.sqrt()).powi(2);
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn unpaired_report_has_no_pixel_scores() {
        let net = FixedFeatureNet::new(3);
        let mut rng = Rng::new(2);
        let imgs: Vec<Tensor> = (0..3).map(|_| rng.uniform_tensor(&[3, 16, 16], -1.0, 1.0)).collect();
        let r = evaluate(&net, &imgs, &imgs, false).unwrap();
        assert!(r.ssim.is_none() && r.lpips_proxy.is_none());
        assert!(r.to_kv().contains("unpaired.ssim=na"));
        let p = evaluate(&net, &imgs, &imgs, true).unwrap();
        assert_eq!(p.ssim, Some(1.0));
        assert_eq!(p.lpips_proxy, Some(0.0));
    }
}
