//! Density-path postprocessing: sanitize, sum and round to a count, plus the
//! 5x5 Gaussian blur used only for heatmap rendering.

use serde::{Deserialize, Serialize};

use crate::domain::{round_half_away, DensityMap};
use crate::error::{Error, Result};

pub const BLUR_KERNEL_SIZE: usize = 5;

/// Count estimated from a density map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityCount {
    pub count: u64,
    /// Total mass after clamping negative cells to zero.
    pub mass: f64,
    /// Number of cells that were negative and clamped.
    pub clamped_cells: usize,
}

impl DensityCount {
    pub fn was_sanitized(&self) -> bool {
        self.clamped_cells > 0
    }
}

fn check_finite(m: &DensityMap) -> Result<()> {
    match m.values().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteDensity {
            row: i / m.width(),
            col: i % m.width(),
        }),
        None => Ok(()),
    }
}

/// Sums the map with negative cells clamped to 0 and rounds half away from
/// zero.
pub fn count_density(m: &DensityMap) -> Result<DensityCount> {
    check_finite(m)?;
    let mut clamped_cells = 0;
    let mut mass = 0.0;
    for &v in m.values() {
        if v < 0.0 {
            clamped_cells += 1;
        } else {
            mass += v;
        }
    }
    if clamped_cells > 0 {
        tracing::debug!(clamped_cells, "negative density cells clamped");
    }
    Ok(DensityCount {
        count: round_half_away(mass).max(0.0) as u64,
        mass,
        clamped_cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurConfig {
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig { sigma: 1.0 }
    }
}

impl BlurConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "density.sigma = {sigma} must be positive"
            )));
        }
        Ok(BlurConfig { sigma })
    }

    /// Normalized 5-tap Gaussian, taps at offsets -2..=2.
    pub fn kernel(&self) -> Result<[f64; BLUR_KERNEL_SIZE]> {
        BlurConfig::new(self.sigma)?;
        let mut k = [0.0; BLUR_KERNEL_SIZE];
        for (i, v) in k.iter_mut().enumerate() {
            let x = i as f64 - 2.0;
            *v = (-x * x / (2.0 * self.sigma * self.sigma)).exp();
        }
        let sum: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= sum);
        Ok(k)
    }
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable 5x5 Gaussian blur with reflect-101 borders. Negative input
/// cells are clamped to zero first, so the output is non-negative.
pub fn gaussian_blur_5x5(m: &DensityMap, cfg: &BlurConfig) -> Result<DensityMap> {
    let k = cfg.kernel()?;
    check_finite(m)?;
    let (h, w) = (m.height(), m.width());
    let src: Vec<f64> = m.values().iter().map(|v| v.max(0.0)).collect();

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = (0..BLUR_KERNEL_SIZE)
                .map(|t| k[t] * src[r * w + reflect(c as isize + t as isize - 2, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = (0..BLUR_KERNEL_SIZE)
                .map(|t| k[t] * tmp[reflect(r as isize + t as isize - 2, h) * w + c])
                .sum();
        }
    }
    DensityMap::new(h, w, out)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_map() -> impl Strategy<Value = DensityMap> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            prop::collection::vec(-0.5f64..5.0, h * w)
                .prop_map(move |v| DensityMap::new(h, w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn count_is_layout_invariant(m in arb_map()) {
            prop_assert_eq!(count_density(&m).unwrap().count, count_density(&m.transposed()).unwrap().count);
        }

        #[test]
        fn count_uses_total_mass_of_a_tiling(a in arb_map(), b in arb_map()) {
            let ca = count_density(&a).unwrap();
            let cb = count_density(&b).unwrap();
            // stack the two tiles side by side (as rows of a 1-row strip)
            let mut v = a.values().to_vec();
            v.extend_from_slice(b.values());
            let joined = DensityMap::new(1, v.len(), v).unwrap();
            let cj = count_density(&joined).unwrap();
            prop_assert!((cj.mass - (ca.mass + cb.mass)).abs() < 1e-9);
            prop_assert_eq!(cj.count, (ca.mass + cb.mass).round() as u64);
        }

        #[test]
        fn blur_bounds(m in arb_map(), sigma in 0.2f64..4.0) {
            let out = gaussian_blur_5x5(&m, &BlurConfig::new(sigma).unwrap()).unwrap();
            let input_max = m.values().iter().fold(0.0f64, |a, &v| a.max(v));
            prop_assert!(out.values().iter().all(|&v| v >= 0.0 && v <= input_max + 1e-12));
        }

        #[test]
        // Mass must sit 3 cells from the border: 2 for the kernel reach, and
        // one more so that reflection at row 0 never re-reads it.
        fn blur_preserves_interior_mass(h in 5usize..16, w in 5usize..16, seed in any::<u64>(), sigma in 0.2f64..4.0) {
            let mut m = DensityMap::zeros(h + 6, w + 6).unwrap();
            let mut s = seed;
            for r in 3..h + 3 {
                for c in 3..w + 3 {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    m.set(r, c, (s >> 40) as f64 / (1u64 << 24) as f64);
                }
            }
            let before = m.total();
            let after = gaussian_blur_5x5(&m, &BlurConfig::new(sigma).unwrap()).unwrap().total();
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1e-300));
        }
    }
}
