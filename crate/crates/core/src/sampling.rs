//! Undersampling masks, retrospective undersampling and context encoding.
//!
//! Masks live in the centered k-space layout used by [`crate::fourier`].
//! The phase-encode axis is the first spatial axis (rows).

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{forward_dft_plane, inverse_dft_planes, KSpaceGrid};
use crate::tensor::{read_mact, write_mact, DType, Tensor};

pub const DEFAULT_CARTESIAN_CENTER: f64 = 0.08;
pub const DEFAULT_GAUSSIAN_CENTER: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPattern {
    Cartesian,
    Gaussian,
}

impl MaskPattern {
    /// Enumeration used in context vectors: 1 = Cartesian, 2 = Gaussian.
    pub fn code(self) -> u8 {
        match self {
            MaskPattern::Cartesian => 1,
            MaskPattern::Gaussian => 2,
        }
    }

    pub fn default_center_fraction(self) -> f64 {
        match self {
            MaskPattern::Cartesian => DEFAULT_CARTESIAN_CENTER,
            MaskPattern::Gaussian => DEFAULT_GAUSSIAN_CENTER,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskPattern::Cartesian => "cartesian",
            MaskPattern::Gaussian => "gaussian",
        }
    }
}

/// Which elements make up the encoded context vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextEncoding {
    /// `[R]`
    Acceleration,
    /// `[R, pattern code]`
    AccelerationPattern,
    /// `[R, study code]`
    AccelerationStudy,
}

impl ContextEncoding {
    pub fn len(self) -> usize {
        match self {
            ContextEncoding::Acceleration => 1,
            _ => 2,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

/// One acquisition setting: acceleration, mask pattern and study, plus how it is encoded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionContext {
    pub acceleration: f64,
    pub pattern: MaskPattern,
    /// Study enumeration, 1 or 2.
    pub study: u8,
    pub encoding: ContextEncoding,
}

impl AcquisitionContext {
    pub fn new(acceleration: f64, pattern: MaskPattern, study: u8, encoding: ContextEncoding) -> Result<Self> {
        if !(acceleration.is_finite() && acceleration >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "acceleration must be >= 1, got {acceleration}"
            )));
        }
        if !(1..=2).contains(&study) {
            return Err(Error::InvalidArgument(format!("study code must be 1 or 2, got {study}")));
        }
        Ok(AcquisitionContext {
            acceleration,
            pattern,
            study,
            encoding,
        })
    }

    /// The encoded second element, or 0 when the encoding has only one element.
    pub fn code(&self) -> u8 {
        match self.encoding {
            ContextEncoding::Acceleration => 0,
            ContextEncoding::AccelerationPattern => self.pattern.code(),
            ContextEncoding::AccelerationStudy => self.study,
        }
    }

    /// Stable label used in file names and CSV rows.
    pub fn label(&self) -> String {
        format!("r{:.1}-{}-s{}", self.acceleration, self.pattern.name(), self.study)
    }

    /// Same context at a different acceleration.
    pub fn with_acceleration(&self, acceleration: f64) -> Self {
        AcquisitionContext {
            acceleration,
            ..*self
        }
    }
}

impl fmt::Display for AcquisitionContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Raw context vector: `[R]` or `[R, code]`, no scaling.
pub fn encode_context(ctx: &AcquisitionContext) -> Tensor {
    let data = match ctx.encoding {
        ContextEncoding::Acceleration => vec![ctx.acceleration],
        _ => vec![ctx.acceleration, ctx.code() as f64],
    };
    Tensor::from_parts(vec![data.len()], data)
}

/// Binary sampling set in centered layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    grid: Tensor,
    pub pattern: MaskPattern,
    pub target_acceleration: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

/// Sidecar metadata stored next to a mask's MACT file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    #[serde(rename = "type")]
    pub pattern: MaskPattern,
    #[serde(rename = "R")]
    pub acceleration: f64,
    pub center_fraction: f64,
    pub seed: u64,
    pub phase_axis: usize,
}

impl SamplingMask {
    /// Wraps an explicit 0/1 grid `[H, W]`.
    pub fn from_grid(grid: Tensor, pattern: MaskPattern, target_acceleration: f64) -> Result<Self> {
        if grid.ndim() != 2 {
            return Err(Error::InvalidArgument(format!(
                "mask grid must be 2-D, got {:?}",
                grid.shape()
            )));
        }
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(SamplingMask {
            grid,
            pattern,
            target_acceleration,
            center_fraction: 0.0,
            seed: 0,
        })
    }

    pub fn full(h: usize, w: usize) -> Self {
        SamplingMask {
            grid: Tensor::full(&[h, w], 1.0),
            pattern: MaskPattern::Cartesian,
            target_acceleration: 1.0,
            center_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        SamplingMask {
            grid: Tensor::zeros(&[h, w]),
            pattern: MaskPattern::Cartesian,
            target_acceleration: f64::INFINITY,
            center_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.grid.shape()[0], self.grid.shape()[1]]
    }

    pub fn is_sampled(&self, idx: usize) -> bool {
        self.grid.data()[idx] != 0.0
    }

    /// True when the sampled set is closed under `k → -k`.
    pub fn is_conjugate_symmetric(&self) -> bool {
        let [h, w] = self.dims();
        let g = self.grid.data();
        (0..h * w).all(|idx| g[idx] == g[mirror(idx / w, h) * w + mirror(idx % w, w)])
    }

    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// `HW / count`; infinite for an empty mask.
    pub fn achieved_acceleration(&self) -> f64 {
        let c = self.count();
        if c == 0 {
            f64::INFINITY
        } else {
            self.grid.len() as f64 / c as f64
        }
    }

    pub fn record(&self) -> MaskRecord {
        MaskRecord {
            pattern: self.pattern,
            acceleration: self.target_acceleration,
            center_fraction: self.center_fraction,
            seed: self.seed,
            phase_axis: 0,
        }
    }

    /// Writes `path` (MACT) and `path` with a `.json` extension (sidecar).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_mact(path, &self.grid, DType::F64)?;
        let side = path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.record())?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let grid = read_mact(path)?;
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let rec: MaskRecord = serde_json::from_str(&text)?;
        let mut m = Self::from_grid(grid, rec.pattern, rec.acceleration)?;
        m.center_fraction = rec.center_fraction;
        m.seed = rec.seed;
        Ok(m)
    }
}

fn check_rate(r: f64, center_fraction: f64) -> Result<()> {
    if !(r.is_finite() && r >= 1.0) {
        return Err(Error::InvalidArgument(format!("acceleration must be >= 1, got {r}")));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0 / r) {
        return Err(Error::InvalidArgument(format!(
            "center_fraction must lie in (0, 1/R) = (0, {}), got {center_fraction}",
            1.0 / r
        )));
    }
    Ok(())
}

/// Index of the point-mirrored frequency `-k` along an axis of length `n`
/// in centered layout.
fn mirror(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

/// Fully sampled central rows plus uniformly drawn rows, `round(H/R)` rows in total.
///
/// The row set is closed under `k → -k` so that the zero-filled image of a
/// real object stays real and consistent with `y` on the mask. The central
/// block therefore has an odd row count (`⌈center_fraction·H⌉` rounded up to
/// odd), and for even `H` the self-mirrored outermost row is used to fix parity.
pub fn make_cartesian_mask(h: usize, w: usize, r: f64, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    check_rate(r, center_fraction)?;
    let total = ((h as f64) / r).round() as usize;
    let max_block = if h % 2 == 0 { h - 1 } else { h };
    let mut center = ((center_fraction * h as f64).ceil() as usize).max(1);
    if center % 2 == 0 {
        center += 1;
    }
    let center = center.min(max_block);
    if total < center {
        return Err(Error::InfeasibleRate {
            acceleration: r,
            required: total,
            center,
        });
    }
    let c = h / 2;
    let half = center / 2;
    let mut rows = vec![false; h];
    rows[c - half..=c + half].fill(true);

    let pairs: Vec<usize> = (0..h)
        .filter(|&i| !rows[i] && mirror(i, h) != i && i < mirror(i, h))
        .collect();
    let singles: Vec<usize> = (0..h).filter(|&i| !rows[i] && mirror(i, h) == i).collect();
    let rem = total - center;
    let take = (rem / 2).min(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pick in index::sample(&mut rng, pairs.len(), take).into_vec() {
        rows[pairs[pick]] = true;
        rows[mirror(pairs[pick], h)] = true;
    }
    for &i in singles.iter().take(rem - 2 * take) {
        rows[i] = true;
    }

    let mut grid = Tensor::zeros(&[h, w]);
    for (i, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
        grid.data_mut()[i * w..(i + 1) * w].fill(1.0);
    }
    Ok(SamplingMask {
        grid,
        pattern: MaskPattern::Cartesian,
        target_acceleration: r,
        center_fraction,
        seed,
    })
}

/// Fully sampled central disc of area `center_fraction·H·W`, then points drawn
/// without replacement with probability proportional to a centered Gaussian
/// (σ = H/6, W/6) until `round(HW/R)` points are set.
///
/// Points are drawn as mirror pairs `(k, -k)`; self-mirrored points fill an
/// odd remainder, highest density first.
pub fn make_gaussian_mask(h: usize, w: usize, r: f64, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    check_rate(r, center_fraction)?;
    let n = h * w;
    let total = ((n as f64) / r).round() as usize;
    let radius2 = center_fraction * n as f64 / std::f64::consts::PI;
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let (sh, sw) = (h as f64 / 6.0, w as f64 / 6.0);
    let mirror_idx = |idx: usize| mirror(idx / w, h) * w + mirror(idx % w, w);

    let mut grid = Tensor::zeros(&[h, w]);
    let mut center = 0;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n / 2);
    let mut singles: Vec<(f64, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..h {
        let di = i as f64 - ch;
        for j in 0..w {
            let dj = j as f64 - cw;
            let idx = i * w + j;
            if di * di + dj * dj <= radius2 {
                grid.data_mut()[idx] = 1.0;
                center += 1;
                continue;
            }
            let weight = (-0.5 * (di * di / (sh * sh) + dj * dj / (sw * sw))).exp();
            let m = mirror_idx(idx);
            if m == idx {
                singles.push((weight, idx));
            } else if idx < m {
                // Weighted sampling without replacement: keep the largest ln(u)/weight.
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                pairs.push((u.ln() / weight, idx));
            }
        }
    }
    if total < center {
        return Err(Error::InfeasibleRate {
            acceleration: r,
            required: total,
            center,
        });
    }
    let rem = total - center;
    let take = (rem / 2).min(pairs.len());
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, idx) in pairs.iter().take(take) {
        grid.data_mut()[idx] = 1.0;
        grid.data_mut()[mirror_idx(idx)] = 1.0;
    }
    singles.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, idx) in singles.iter().take(rem - 2 * take) {
        grid.data_mut()[idx] = 1.0;
    }
    Ok(SamplingMask {
        grid,
        pattern: MaskPattern::Gaussian,
        target_acceleration: r,
        center_fraction,
        seed,
    })
}

pub fn make_mask(
    pattern: MaskPattern,
    h: usize,
    w: usize,
    r: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    match pattern {
        MaskPattern::Cartesian => make_cartesian_mask(h, w, r, center_fraction, seed),
        MaskPattern::Gaussian => make_gaussian_mask(h, w, r, center_fraction, seed),
    }
}

/// Applies the mask to k-space in place (zeroes unsampled locations).
pub fn apply_mask(k: &mut KSpaceGrid, mask: &SamplingMask) -> Result<()> {
    if k.dims() != mask.dims() {
        return Err(Error::shape("apply_mask", &mask.dims(), &k.dims()));
    }
    for (idx, &m) in mask.grid().data().iter().enumerate() {
        if m == 0.0 {
            k.re[idx] = 0.0;
            k.im[idx] = 0.0;
        }
    }
    Ok(())
}

/// Retrospective undersampling: `y = M ⊙ F x`, `x_u = Re(Fᴴ y)`.
pub fn undersample(image: &Tensor, mask: &SamplingMask) -> Result<(KSpaceGrid, Tensor)> {
    let dims = match image.shape() {
        [h, w] | [1, h, w] => [*h, *w],
        other => {
            return Err(Error::InvalidArgument(format!(
                "undersample expects an image (H, W), got {other:?}"
            )))
        }
    };
    if dims != mask.dims() {
        return Err(Error::shape("undersample", &mask.dims(), &dims));
    }
    let mut y = forward_dft_plane(dims[0], dims[1], image.data());
    apply_mask(&mut y, mask)?;
    let (re, _) = inverse_dft_planes(&y);
    Ok((y, Tensor::from_parts(dims.to_vec(), re)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::forward_dft;
    use proptest::prelude::*;

    fn sampled_rows(m: &SamplingMask) -> Vec<usize> {
        let [h, w] = m.dims();
        (0..h).filter(|&i| m.grid().data()[i * w] != 0.0).collect()
    }

    #[test]
    fn unit_acceleration_is_full() {
        for p in [MaskPattern::Cartesian, MaskPattern::Gaussian] {
            let m = make_mask(p, 32, 32, 1.0, 0.05, 3).unwrap();
            assert_eq!(m.count(), 32 * 32);
        }
    }

    #[test]
    fn cartesian_row_arithmetic() {
        let m = make_cartesian_mask(128, 128, 4.0, 0.08, 7).unwrap();
        let rows = sampled_rows(&m);
        assert_eq!(rows.len(), 32);
        assert_eq!(m.count(), 32 * 128);
        // ceil(0.08 * 128) = 11 central rows around row 64
        assert!((59..=69).all(|r| rows.contains(&r)));
        assert!(m.is_conjugate_symmetric());
        for r in &rows {
            let w = 128;
            assert!(m.grid().data()[r * w..(r + 1) * w].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn seed_determinism() {
        for p in [MaskPattern::Cartesian, MaskPattern::Gaussian] {
            let a = make_mask(p, 64, 64, 4.0, 0.04, 1).unwrap();
            let b = make_mask(p, 64, 64, 4.0, 0.04, 1).unwrap();
            let c = make_mask(p, 64, 64, 4.0, 0.04, 2).unwrap();
            assert!(a.grid().bit_eq(b.grid()));
            assert!(!a.grid().bit_eq(c.grid()));
            assert_eq!(a.count(), c.count());
        }
    }

    #[test]
    fn odd_sizes_stay_symmetric() {
        for p in [MaskPattern::Cartesian, MaskPattern::Gaussian] {
            for (h, w) in [(15, 15), (33, 20), (20, 33)] {
                let m = make_mask(p, h, w, 3.0, 0.08, 5).unwrap();
                assert!(m.is_conjugate_symmetric(), "{p:?} {h}x{w}");
            }
        }
    }

    #[test]
    fn gaussian_count() {
        let m = make_gaussian_mask(128, 128, 5.0, 0.04, 11).unwrap();
        assert_eq!(m.count(), 3277);
    }

    #[test]
    fn gaussian_concentrates_near_center() {
        // Monte-Carlo comparison against uniform sampling at the same count.
        let (h, w) = (128usize, 128usize);
        let radius = |idx: usize| {
            let (i, j) = ((idx / w) as f64 - 64.0, (idx % w) as f64 - 64.0);
            (i * i + j * j).sqrt()
        };
        let m = make_gaussian_mask(h, w, 5.0, 0.04, 5).unwrap();
        let picked: Vec<usize> = (0..h * w).filter(|&i| m.is_sampled(i)).collect();
        let mean_mask = picked.iter().map(|&i| radius(i)).sum::<f64>() / picked.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut uniform_means = Vec::new();
        for _ in 0..20 {
            let s = index::sample(&mut rng, h * w, picked.len()).into_vec();
            uniform_means.push(s.iter().map(|&i| radius(i)).sum::<f64>() / s.len() as f64);
        }
        let min_uniform = uniform_means.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(mean_mask < min_uniform, "{mean_mask} vs {min_uniform}");
    }

    #[test]
    fn infeasible_and_invalid_rates() {
        assert!(make_cartesian_mask(128, 128, 40.0, 0.016, 0).is_ok());
        // 4 rows at R = 9 round to zero rows, below the one-row centre.
        assert!(matches!(
            make_cartesian_mask(4, 4, 9.0, 0.1, 0),
            Err(Error::InfeasibleRate { .. })
        ));
        assert!(matches!(
            make_cartesian_mask(64, 64, 0.5, 0.08, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_gaussian_mask(64, 64, 8.0, 0.2, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_gaussian_mask(8, 8, 9.9, 0.1, 0),
            Err(Error::InfeasibleRate { .. })
        ));
    }

    #[test]
    fn undersample_edge_masks() {
        let img = Tensor::new(vec![8, 8], (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let (_, xu) = undersample(&img, &SamplingMask::full(8, 8)).unwrap();
        assert!(xu.max_abs_diff(&img) < 1e-10);
        let (y, xu) = undersample(&img, &SamplingMask::empty(8, 8)).unwrap();
        assert!(y.re.iter().chain(&y.im).all(|&v| v == 0.0));
        assert!(xu.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            undersample(&img, &SamplingMask::full(8, 7)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn undersample_is_consistent_on_mask() {
        let img = Tensor::new(vec![16, 16], (0..256).map(|i| ((i * 7 % 13) as f64) / 13.0).collect()).unwrap();
        for p in [MaskPattern::Cartesian, MaskPattern::Gaussian] {
            let m = make_mask(p, 16, 16, 3.0, 0.1, 4).unwrap();
            let (y, xu) = undersample(&img, &m).unwrap();
            let k = forward_dft(&xu).unwrap();
            for idx in 0..256 {
                if m.is_sampled(idx) {
                    assert!((k.re[idx] - y.re[idx]).abs() < 1e-10);
                    assert!((k.im[idx] - y.im[idx]).abs() < 1e-10);
                } else {
                    assert_eq!(y.re[idx], 0.0);
                    assert_eq!(y.im[idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn context_encoding() {
        let g = AcquisitionContext::new(4.0, MaskPattern::Gaussian, 1, ContextEncoding::AccelerationPattern).unwrap();
        assert_eq!(encode_context(&g).data(), &[4.0, 2.0]);
        let c = AcquisitionContext::new(5.0, MaskPattern::Cartesian, 1, ContextEncoding::AccelerationPattern).unwrap();
        assert_eq!(encode_context(&c).data(), &[5.0, 1.0]);
        let s = AcquisitionContext::new(3.3, MaskPattern::Gaussian, 1, ContextEncoding::Acceleration).unwrap();
        assert_eq!(encode_context(&s).data(), &[3.3]);
        let t = AcquisitionContext::new(8.0, MaskPattern::Cartesian, 2, ContextEncoding::AccelerationStudy).unwrap();
        assert_eq!(encode_context(&t).data(), &[8.0, 2.0]);
        assert!(AcquisitionContext::new(4.0, MaskPattern::Cartesian, 3, ContextEncoding::AccelerationStudy).is_err());
    }

    #[test]
    fn mask_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_gaussian_mask(32, 32, 4.0, 0.04, 17).unwrap();
        let p = dir.path().join("mask.mact");
        m.save(&p).unwrap();
        let back = SamplingMask::load(&p).unwrap();
        assert_eq!(back, m);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("mask.json")).unwrap()).unwrap();
        assert_eq!(side["type"], "gaussian");
        assert_eq!(side["R"], 4.0);
        assert_eq!(side["phase_axis"], 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn rate_within_five_percent(seed in any::<u64>(), ri in 0usize..5, gauss in any::<bool>()) {
            let r = [2.0, 3.3, 4.0, 5.0, 8.0][ri];
            let p = if gauss { MaskPattern::Gaussian } else { MaskPattern::Cartesian };
            let m = make_mask(p, 64, 64, r, p.default_center_fraction(), seed).unwrap();
            prop_assert!((m.achieved_acceleration() - r).abs() <= 0.05 * r);
            prop_assert!(m.is_conjugate_symmetric());
        }
    }
}
