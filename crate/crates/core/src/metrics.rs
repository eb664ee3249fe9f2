//! Image-quality metrics for susceptibility maps.
//!
//! Every metric takes an optional mask; `None` is the whole grid. The
//! conventions used are recorded in [`CONVENTIONS`] and copied into every
//! [`MetricsReport`].

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{QsmError, Result};
use crate::volume::{separable_filter as separable, Edge, GridSpec, RealVolume};

pub const CONVENTIONS: &str = "nrmse = 100*||pred-gt||/||gt|| over mask; \
psnr = 10*log10(peak^2/mse), peak = max(gt)-min(gt) over mask, identical volumes give inf; \
hfen = 100*||LoG(pred)-LoG(gt)||/||LoG(gt)|| over mask, LoG 15^3 voxels, sigma 1.5 voxels, zero-sum kernel, replicated edges, mask applied after filtering; \
ssim = mean over masked centres, gaussian window 11^3 sigma 1.5 voxels truncated at the grid edge and renormalised, K1 0.01, K2 0.03, L = max(gt)-min(gt) over mask";

const LOG_SIZE: usize = 15;
const LOG_SIGMA: f64 = 1.5;
const SSIM_SIZE: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Boolean region of interest on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: GridSpec,
    inside: Vec<bool>,
}

impl Mask {
    pub fn new(grid: GridSpec, inside: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if inside.len() != grid.len() {
            return Err(QsmError::LengthMismatch {
                expected: grid.len(),
                found: inside.len(),
                context: "mask samples",
            });
        }
        if !inside.iter().any(|&b| b) {
            return Err(QsmError::InvalidConfig("mask selects no voxels".into()));
        }
        Ok(Mask { grid, inside })
    }

    pub fn full(grid: GridSpec) -> Self {
        Mask {
            grid,
            inside: vec![true; grid.len()],
        }
    }

    /// Voxels where `v` is non-zero.
    pub fn from_volume(v: &RealVolume) -> Result<Self> {
        Self::new(*v.grid(), v.data().iter().map(|&x| x != 0.0).collect())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }
}

fn check(pred: &RealVolume, gt: &RealVolume, mask: Option<&Mask>) -> Result<()> {
    gt.grid().ensure_same(pred.grid())?;
    if let Some(m) = mask {
        gt.grid().ensure_same(m.grid())?;
    }
    Ok(())
}

/// Indices selected by the mask, in storage order.
fn selected(len: usize, mask: Option<&Mask>) -> impl Iterator<Item = usize> + '_ {
    (0..len).filter(move |&i| mask.is_none_or(|m| m.inside[i]))
}

fn masked_sq_norm(v: &[f64], mask: Option<&Mask>) -> f64 {
    selected(v.len(), mask).map(|i| v[i] * v[i]).sum()
}

fn masked_diff_sq_norm(a: &[f64], b: &[f64], mask: Option<&Mask>) -> f64 {
    selected(a.len(), mask).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn masked_range(v: &[f64], mask: Option<&Mask>) -> f64 {
    let (lo, hi) = selected(v.len(), mask).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        (lo.min(v[i]), hi.max(v[i]))
    });
    hi - lo
}

/// `100 · ‖pred − gt‖ / ‖gt‖` over the mask.
pub fn nrmse(pred: &RealVolume, gt: &RealVolume, mask: Option<&Mask>) -> Result<f64> {
    check(pred, gt, mask)?;
    let denom = masked_sq_norm(gt.data(), mask);
    if denom == 0.0 {
        return Err(QsmError::InvalidConfig("reference is zero inside the mask".into()));
    }
    Ok(100.0 * (masked_diff_sq_norm(pred.data(), gt.data(), mask) / denom).sqrt())
}

/// NRMSE over the whole grid.
pub fn nrmse_unmasked(pred: &RealVolume, gt: &RealVolume) -> Result<f64> {
    nrmse(pred, gt, None)
}

/// Peak signal-to-noise ratio in dB; `+∞` when the volumes agree exactly.
pub fn psnr(pred: &RealVolume, gt: &RealVolume, mask: Option<&Mask>) -> Result<f64> {
    check(pred, gt, mask)?;
    let n = mask.map_or(gt.len(), Mask::count) as f64;
    let mse = masked_diff_sq_norm(pred.data(), gt.data(), mask) / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = masked_range(gt.data(), mask);
    if peak == 0.0 {
        return Err(QsmError::InvalidConfig("reference is constant inside the mask".into()));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    (0..size)
        .map(|i| {
            let t = i as f64 - r;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// The zero-sum LoG kernel as a dense `size³` array (x fastest).
pub fn log_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_taps(size, sigma);
    let r = (size / 2) as f64;
    let s2 = sigma * sigma;
    let mut h = Vec::with_capacity(size.pow(3));
    for k in 0..size {
        for j in 0..size {
            for i in 0..size {
                h.push(g[i] * g[j] * g[k]);
            }
        }
    }
    let total: f64 = h.iter().sum();
    let mut idx = 0;
    for k in 0..size {
        for j in 0..size {
            for i in 0..size {
                let rr = (i as f64 - r).powi(2) + (j as f64 - r).powi(2) + (k as f64 - r).powi(2);
                h[idx] = h[idx] / total * (rr - 3.0 * s2) / (s2 * s2);
                idx += 1;
            }
        }
    }
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter_mut().for_each(|v| *v -= mean);
    h
}

/// LoG filtering with replicated edges, evaluated as a sum of separable
/// passes equal to correlation with [`log_kernel`].
pub fn log_filter(v: &RealVolume) -> RealVolume {
    let size = LOG_SIZE;
    let sigma = LOG_SIGMA;
    let dims = v.grid().dims;
    let g = gaussian_taps(size, sigma);
    let r = (size / 2) as f64;
    let q: Vec<f64> = g.iter().enumerate().map(|(i, w)| (i as f64 - r).powi(2) * w).collect();
    let ones = vec![1.0; size];
    let s2 = sigma * sigma;
    let total = g.iter().sum::<f64>().powi(3);

    // Σ h1 over the cube, needed for the zero-sum correction
    let gsum: f64 = g.iter().sum();
    let qsum: f64 = q.iter().sum();
    let h1_sum = (3.0 * qsum * gsum * gsum - 3.0 * s2 * gsum.powi(3)) / (total * s2 * s2);
    let mean = h1_sum / size.pow(3) as f64;

    let d = v.data();
    let a = separable(d, dims, [&q, &g, &g], Edge::Replicate);
    let b = separable(d, dims, [&g, &q, &g], Edge::Replicate);
    let c = separable(d, dims, [&g, &g, &q], Edge::Replicate);
    let gg = separable(d, dims, [&g, &g, &g], Edge::Replicate);
    let bx = separable(d, dims, [&ones, &ones, &ones], Edge::Replicate);
    let out = (0..d.len())
        .map(|i| (a[i] + b[i] + c[i] - 3.0 * s2 * gg[i]) / (total * s2 * s2) - mean * bx[i])
        .collect();
    RealVolume::from_parts(*v.grid(), out)
}

/// High-frequency error norm in percent.
pub fn hfen(pred: &RealVolume, gt: &RealVolume, mask: Option<&Mask>) -> Result<f64> {
    check(pred, gt, mask)?;
    let lp = log_filter(pred);
    let lg = log_filter(gt);
    let denom = masked_sq_norm(lg.data(), mask);
    if denom == 0.0 {
        return Err(QsmError::InvalidConfig(
            "filtered reference is zero inside the mask".into(),
        ));
    }
    Ok(100.0 * (masked_diff_sq_norm(lp.data(), lg.data(), mask) / denom).sqrt())
}

/// Mean local structural similarity over masked window centres.
pub fn ssim3d(pred: &RealVolume, gt: &RealVolume, mask: Option<&Mask>) -> Result<f64> {
    check(pred, gt, mask)?;
    let dims = gt.grid().dims;
    let range = masked_range(gt.data(), mask);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let g = gaussian_taps(SSIM_SIZE, SSIM_SIGMA);
    let blur = |v: &[f64]| separable(v, dims, [&g, &g, &g], Edge::Truncate);

    let x = pred.data();
    let y = gt.data();
    let mx = blur(x);
    let my = blur(y);
    let xx = blur(&x.iter().map(|v| v * v).collect::<Vec<_>>());
    let yy = blur(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let xy = blur(&x.iter().zip(y).map(|(a, b)| a * b).collect::<Vec<_>>());

    let mut sum = 0.0;
    let mut count = 0usize;
    for i in selected(x.len(), mask) {
        let vx = (xx[i] - mx[i] * mx[i]).max(0.0);
        let vy = (yy[i] - my[i] * my[i]).max(0.0);
        let cxy = xy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        sum += if den == 0.0 { 1.0 } else { num / den };
        count += 1;
    }
    Ok(sum / count as f64)
}

/// All four metrics plus the conventions they were computed with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nrmse_percent: f64,
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub psnr_db: f64,
    pub hfen_percent: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
    pub conventions: String,
}

fn ser_maybe_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_maybe_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!(
            "expected a number or \"inf\", got {s:?}"
        ))),
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "nrmse_percent,psnr_db,hfen_percent,ssim,mask_voxels,conventions";

    pub fn compute(pred: &RealVolume, gt: &RealVolume, mask: Option<&Mask>) -> Result<Self> {
        Ok(MetricsReport {
            nrmse_percent: nrmse(pred, gt, mask)?,
            psnr_db: psnr(pred, gt, mask)?,
            hfen_percent: hfen(pred, gt, mask)?,
            ssim: ssim3d(pred, gt, mask)?,
            mask_voxels: mask.map_or(gt.len(), Mask::count),
            conventions: CONVENTIONS.to_string(),
        })
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},\"{}\"\n",
            Self::CSV_HEADER,
            self.nrmse_percent,
            self.psnr_db,
            self.hfen_percent,
            self.ssim,
            self.mask_voxels,
            self.conventions.replace('"', "\"\"")
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid(n: [usize; 3]) -> GridSpec {
        GridSpec::isotropic(n).unwrap()
    }

    fn noise(g: GridSpec, sigma: f64, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_fn(g, |_, _, _| sigma * rng.sample::<f64, _>(StandardNormal))
    }

    fn smooth(g: GridSpec) -> RealVolume {
        RealVolume::from_fn(g, |i, j, k| {
            let (x, y, z) = (i as f64 / 4.0, j as f64 / 5.0, k as f64 / 6.0);
            x.sin() + (y + 0.3).cos() * z.sin() + 0.2 * x * y
        })
    }

    #[test]
    fn nrmse_closed_forms() {
        let g = grid([5, 4, 6]);
        let gt = noise(g, 1.0, 1);
        assert_eq!(nrmse(&gt, &gt, None).unwrap(), 0.0);
        assert!((nrmse(&RealVolume::zeros(g), &gt, None).unwrap() - 100.0).abs() < 1e-12);
        assert!((nrmse(&gt.scaled(1.5), &gt, None).unwrap() - 50.0).abs() < 1e-12);
        assert!(nrmse(&gt, &RealVolume::zeros(g), None).is_err());
        let pred = noise(g, 1.0, 2);
        for c in [-3.0, 0.01, 7.5] {
            let a = nrmse(&pred.scaled(c), &gt.scaled(c), None).unwrap();
            let b = nrmse(&pred, &gt, None).unwrap();
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn full_mask_equals_unmasked_bitwise() {
        let g = grid([12, 11, 13]);
        let gt = smooth(g);
        let pred = gt.add(&noise(g, 0.1, 3)).unwrap();
        let full = Mask::full(g);
        let a = MetricsReport::compute(&pred, &gt, None).unwrap();
        let b = MetricsReport::compute(&pred, &gt, Some(&full)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn psnr_closed_forms() {
        let g = grid([2, 2, 2]);
        let gt = RealVolume::new(g, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let pred = RealVolume::new(g, gt.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&pred, &gt, None).unwrap() - 20.0).abs() < 1e-10);
        assert_eq!(psnr(&gt, &gt, None).unwrap(), f64::INFINITY);

        let g = grid([16; 3]);
        let gt = smooth(g);
        let e = noise(g, 0.05, 4);
        let p1 = psnr(&gt.add(&e).unwrap(), &gt, None).unwrap();
        let p2 = psnr(&gt.add(&e.scaled(2.0)).unwrap(), &gt, None).unwrap();
        assert!((p1 - p2 - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    /// Direct correlation with the dense kernel and replicated edges.
    fn log_brute(v: &RealVolume) -> Vec<f64> {
        let h = log_kernel(LOG_SIZE, LOG_SIGMA);
        let [nx, ny, nz] = v.grid().dims;
        let r = (LOG_SIZE / 2) as isize;
        let at = |i: isize, j: isize, k: isize| {
            v.get(
                i.clamp(0, nx as isize - 1) as usize,
                j.clamp(0, ny as isize - 1) as usize,
                k.clamp(0, nz as isize - 1) as usize,
            )
        };
        let mut out = Vec::with_capacity(v.len());
        for k in 0..nz as isize {
            for j in 0..ny as isize {
                for i in 0..nx as isize {
                    let mut acc = 0.0;
                    let mut idx = 0;
                    for dk in -r..=r {
                        for dj in -r..=r {
                            for di in -r..=r {
                                acc += h[idx] * at(i + di, j + dj, k + dk);
                                idx += 1;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn log_kernel_has_zero_sum_and_separable_filter_matches_dense() {
        let h = log_kernel(LOG_SIZE, LOG_SIGMA);
        assert!(h.iter().sum::<f64>().abs() < 1e-12);
        let v = noise(grid([9, 10, 8]), 1.0, 5);
        let fast = log_filter(&v);
        for (a, b) in fast.data().iter().zip(log_brute(&v)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hfen_properties() {
        let g = grid([16; 3]);
        let gt = smooth(g);
        assert_eq!(hfen(&gt, &gt, None).unwrap(), 0.0);
        let shifted = gt.map(|v| v + 3.0);
        assert!(hfen(&shifted, &gt, None).unwrap() < 1e-9);
        let pred = gt.add(&noise(g, 0.1, 6)).unwrap();
        let a = hfen(&pred, &gt, None).unwrap();
        let b = hfen(&pred.map(|v| v - 2.0), &gt.map(|v| v - 2.0), None).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);

        let amp = 0.02 * gt.max_abs();
        // cells of three voxels sit in the LoG pass band; a one-voxel
        // checkerboard would be at Nyquist, where the Gaussian removes it
        let checker = RealVolume::from_fn(g, |i, j, k| if (i / 3 + j / 3 + k / 3) % 2 == 0 { amp } else { -amp });
        let pred = gt.add(&checker).unwrap();
        let ratio = hfen(&pred, &gt, None).unwrap() / nrmse(&pred, &gt, None).unwrap();
        assert!(ratio > 2.0, "ratio {ratio}");
    }

    /// Per-centre weighted statistics over the truncated window.
    fn ssim_brute(pred: &RealVolume, gt: &RealVolume) -> f64 {
        let [nx, ny, nz] = gt.grid().dims;
        let r = (SSIM_SIZE / 2) as isize;
        let s = SSIM_SIGMA;
        let range = masked_range(gt.data(), None);
        let c1 = (SSIM_K1 * range).powi(2);
        let c2 = (SSIM_K2 * range).powi(2);
        let mut total = 0.0;
        for k in 0..nz as isize {
            for j in 0..ny as isize {
                for i in 0..nx as isize {
                    let mut samples = Vec::new();
                    for dk in -r..=r {
                        for dj in -r..=r {
                            for di in -r..=r {
                                let (a, b, c) = (i + di, j + dj, k + dk);
                                if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                                    continue;
                                }
                                let w = (-((di * di + dj * dj + dk * dk) as f64) / (2.0 * s * s)).exp();
                                let (a, b, c) = (a as usize, b as usize, c as usize);
                                samples.push((w, pred.get(a, b, c), gt.get(a, b, c)));
                            }
                        }
                    }
                    let wsum: f64 = samples.iter().map(|t| t.0).sum();
                    let mx = samples.iter().map(|t| t.0 * t.1).sum::<f64>() / wsum;
                    let my = samples.iter().map(|t| t.0 * t.2).sum::<f64>() / wsum;
                    let vx = samples.iter().map(|t| t.0 * (t.1 - mx).powi(2)).sum::<f64>() / wsum;
                    let vy = samples.iter().map(|t| t.0 * (t.2 - my).powi(2)).sum::<f64>() / wsum;
                    let cxy = samples.iter().map(|t| t.0 * (t.1 - mx) * (t.2 - my)).sum::<f64>() / wsum;
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
            }
        }
        total / (nx * ny * nz) as f64
    }

    #[test]
    fn ssim_matches_scalar_window_implementation() {
        let g = grid([13, 12, 14]);
        let gt = smooth(g);
        let range = masked_range(gt.data(), None);
        let pred = gt.add(&noise(g, 0.01 * range, 7)).unwrap();
        let fast = ssim3d(&pred, &gt, None).unwrap();
        let slow = ssim_brute(&pred, &gt);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        assert!(fast > 0.95);

        let noisy = gt.add(&noise(g, 0.5 * range, 8)).unwrap();
        assert!((ssim3d(&noisy, &gt, None).unwrap() - ssim_brute(&noisy, &gt)).abs() < 1e-10);
    }

    #[test]
    fn ssim_signs() {
        let g = grid([12; 3]);
        let gt = noise(g, 1.0, 9);
        let gt = gt.map(|v| v - gt.mean());
        assert!((ssim3d(&gt, &gt, None).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim3d(&gt.scaled(-1.0), &gt, None).unwrap() < 0.0);
        let c = RealVolume::constant(g, 2.0);
        let v = ssim3d(&c, &gt, None).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn mask_restricts_every_metric() {
        let g = grid([10; 3]);
        let gt = smooth(g);
        let mut pred = gt.data().to_vec();
        pred[0] += 5.0; // corner error, outside the mask below
        let pred = RealVolume::new(g, pred).unwrap();
        let inside: Vec<bool> = (0..g.len()).map(|i| i > g.len() / 2).collect();
        let m = Mask::new(g, inside).unwrap();
        assert_eq!(nrmse(&pred, &gt, Some(&m)).unwrap(), 0.0);
        assert_eq!(psnr(&pred, &gt, Some(&m)).unwrap(), f64::INFINITY);
        assert!(nrmse(&pred, &gt, None).unwrap() > 0.0);
        assert!(Mask::new(g, vec![false; g.len()]).is_err());
    }

    #[test]
    fn report_serialisation() {
        let g = grid([8; 3]);
        let gt = smooth(g);
        let r = MetricsReport::compute(&gt, &gt, None).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"psnr_db\": \"inf\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        for key in [
            "nrmse_percent",
            "psnr_db",
            "hfen_percent",
            "ssim",
            "mask_voxels",
            "conventions",
        ] {
            assert!(json.contains(key));
        }
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,inf,0,1,512,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn nested_noise_orders_nrmse(seed in 0u64..1000, extra in 0.0f64..2.0) {
            let g = grid([6, 5, 4]);
            let gt = smooth(g);
            let e = noise(g, 0.1, seed);
            let a = nrmse(&gt.add(&e).unwrap(), &gt, None).unwrap();
            let b = nrmse(&gt.add(&e.scaled(1.0 + extra)).unwrap(), &gt, None).unwrap();
            prop_assert!(a <= b);
        }
    }
}
