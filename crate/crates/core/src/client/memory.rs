use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measured fine-tuning memory (MB) at depths 3, 6, 9 and 12 for four
/// speech tasks; the presets are least-squares lines through these rows.
pub const MEMORY_TABLE_DEPTHS: [usize; 4] = [3, 6, 9, 12];
pub const MEMORY_TABLE: [(&str, [f64; 4]); 4] = [
    ("kws", [319.02, 400.14, 481.25, 562.36]),
    ("er", [1328.76, 1409.88, 1490.99, 1572.11]),
    ("asr", [2293.20, 2374.31, 2455.43, 2536.54]),
    ("sid", [750.14, 831.47, 912.37, 993.70]),
];

/// Linear memory cost `base + depth · per_layer`, in MB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryModel {
    pub base_mb: f64,
    pub per_layer_mb: f64,
}

impl MemoryModel {
    pub fn new(base_mb: f64, per_layer_mb: f64) -> Result<Self> {
        let m = Self {
            base_mb,
            per_layer_mb,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mb > 0.0 && self.per_layer_mb > 0.0)
            || !self.base_mb.is_finite()
            || !self.per_layer_mb.is_finite()
        {
            return Err(Error::Config(format!(
                "memory model needs base_mb > 0 and per_layer_mb > 0, got {} and {}",
                self.base_mb, self.per_layer_mb
            )));
        }
        Ok(())
    }

    /// Ordinary least squares through `(depth, mb)` points.
    pub fn fit(points: &[(usize, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("memory fit needs at least two points".into()));
        }
        let n = points.len() as f64;
        let mean_d = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let mean_m = points.iter().map(|p| p.1).sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for &(d, m) in points {
            let dx = d as f64 - mean_d;
            sxy += dx * (m - mean_m);
            sxx += dx * dx;
        }
        if sxx == 0.0 {
            return Err(Error::Config("memory fit needs two distinct depths".into()));
        }
        let per_layer = sxy / sxx;
        Self::new(mean_m - per_layer * mean_d, per_layer)
    }

    /// Fitted model for `kws`, `er`, `asr` or `sid` (a `-like` suffix is accepted).
    pub fn preset(name: &str) -> Option<Self> {
        let key = name.strip_suffix("-like").unwrap_or(name);
        let (_, row) = MEMORY_TABLE.iter().find(|(n, _)| *n == key)?;
        let points: Vec<(usize, f64)> = MEMORY_TABLE_DEPTHS.iter().copied().zip(*row).collect();
        Self::fit(&points).ok()
    }

    pub fn estimate(&self, depth: usize) -> f64 {
        self.base_mb + depth as f64 * self.per_layer_mb
    }

    /// Fractional saving of running `shallow` instead of `deep` layers.
    pub fn reduction(&self, deep: usize, shallow: usize) -> f64 {
        let full = self.estimate(deep);
        (full - self.estimate(shallow)) / full
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn kws_endpoints() {
        let m = MemoryModel::preset("kws").unwrap();
        assert!((m.estimate(3) - 319.02).abs() < 0.01);
        assert!((m.estimate(12) - 562.36).abs() < 0.01);
        assert!((100.0 * m.reduction(12, 3) - 43.27).abs() < 0.01);
    }

    #[test]
    fn kws_coefficients() {
        let m = MemoryModel::preset("kws-like").unwrap();
        assert!((m.base_mb - 237.91).abs() < 1e-6);
        assert!((m.per_layer_mb - 27.037667).abs() < 1e-6);
    }

    #[test]
    fn fits_stay_close_to_every_row() {
        for (name, row) in MEMORY_TABLE {
            let m = MemoryModel::preset(name).unwrap();
            for (d, mb) in MEMORY_TABLE_DEPTHS.iter().zip(row) {
                assert!((m.estimate(*d) - mb).abs() < 0.15, "{name} d={d}");
            }
        }
    }

    #[test]
    fn reductions_by_task() {
        let got: Vec<f64> = ["kws", "sid", "er", "asr"]
            .iter()
            .map(|n| round2(100.0 * MemoryModel::preset(n).unwrap().reduction(12, 3)))
            .collect();
        let want = [43.27, 24.51, 15.48, 9.59];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 0.011, "{got:?}");
        }
    }

    #[test]
    fn increment_is_constant() {
        let m = MemoryModel::preset("er").unwrap();
        let steps: Vec<f64> = (1..12).map(|d| m.estimate(d + 1) - m.estimate(d)).collect();
        assert!(steps.iter().all(|s| (s - m.per_layer_mb).abs() < 1e-9));
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(MemoryModel::new(0.0, 1.0).is_err());
        assert!(MemoryModel::new(10.0, -1.0).is_err());
        assert!(MemoryModel::preset("mt").is_none());
    }
}
