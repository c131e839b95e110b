//! Synthetic images and box corpora with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::geometry::{BBox, Point, RecistDiameters};
use crate::grid::Grid;

/// A bright disk on a flat background with additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskPhantom {
    pub size: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub disk_hu: f64,
    pub background_hu: f64,
    pub noise_sigma: f64,
    /// Margin added around the disk bounds to form the box.
    pub box_margin: f64,
}

impl Default for DiskPhantom {
    fn default() -> Self {
        DiskPhantom {
            size: 128,
            center: (64.0, 64.0),
            radius: 24.0,
            disk_hu: 200.0,
            background_hu: -100.0,
            noise_sigma: 15.0,
            box_margin: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: Grid<f64>,
    pub truth: Grid<bool>,
    pub recist: RecistDiameters,
    pub bbox: BBox,
}

impl DiskPhantom {
    /// Pixel-center membership in the disk.
    pub fn truth(&self) -> Grid<bool> {
        let (cx, cy) = self.center;
        Grid::from_fn(self.size, self.size, |x, y| {
            (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= self.radius
        })
    }

    /// Horizontal long axis and vertical short axis through the center.
    pub fn recist(&self) -> RecistDiameters {
        let (cx, cy) = self.center;
        let r = self.radius;
        RecistDiameters::new(
            (Point::new(cx - r, cy), Point::new(cx + r, cy)),
            (Point::new(cx, cy - r), Point::new(cx, cy + r)),
        )
        .expect("phantom radius must be positive")
    }

    pub fn bbox(&self) -> BBox {
        let (cx, cy) = self.center;
        let r = self.radius + self.box_margin;
        let n = self.size as f64;
        BBox::new((cx - r).max(0.0), (cy - r).max(0.0), (cx + r).min(n), (cy + r).min(n))
            .expect("phantom box must be non-empty")
    }

    pub fn sample(&self, seed: u64) -> PhantomSample {
        let truth = self.truth();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_sigma).expect("noise sigma must be finite and non-negative");
        let image = truth.map(|&inside| {
            let base = if inside { self.disk_hu } else { self.background_hu };
            base + noise.sample(&mut rng)
        });
        PhantomSample { image, truth, recist: self.recist(), bbox: self.bbox() }
    }
}

/// Lesion-like boxes: log-normal long side, aspect ratio up to `max_aspect`,
/// random orientation, centered in a `frame`-sized image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionBoxModel {
    pub median_long_side: f64,
    pub log_sigma: f64,
    pub max_aspect: f64,
    pub min_side: f64,
    pub frame: f64,
}

impl Default for LesionBoxModel {
    fn default() -> Self {
        LesionBoxModel { median_long_side: 12.0, log_sigma: 0.7, max_aspect: 4.0, min_side: 2.0, frame: 512.0 }
    }
}

impl LesionBoxModel {
    pub fn sample(&self, n: usize, seed: u64) -> Vec<BBox> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let long = LogNormal::new(self.median_long_side.ln(), self.log_sigma).expect("invalid log-normal parameters");
        let max_long = self.frame / 2.0;
        (0..n)
            .map(|_| {
                let l: f64 = long.sample(&mut rng).clamp(self.min_side, max_long);
                let aspect = self.max_aspect.powf(rng.random::<f64>());
                let s = (l / aspect).max(self.min_side);
                let (w, h) = if rng.random::<bool>() { (l, s) } else { (s, l) };
                let c = self.frame / 2.0;
                BBox::from_center(c, c, w, h).expect("positive box sides")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_geometry() {
        let p = DiskPhantom::default();
        let s = p.sample(1);
        assert_eq!(s.image.dims(), (128, 128));
        assert_eq!(s.bbox.to_array(), [36.0, 36.0, 92.0, 92.0]);
        assert_eq!(s.recist.long_length(), 48.0);
        let area = s.truth.as_slice().iter().filter(|&&b| b).count() as f64;
        assert!((area - std::f64::consts::PI * 24.0 * 24.0).abs() < 40.0);
    }

    #[test]
    fn phantom_noise_is_seeded() {
        let p = DiskPhantom::default();
        assert_eq!(p.sample(3), p.sample(3));
        assert_ne!(p.sample(3).image, p.sample(4).image);
    }

    #[test]
    fn box_model_respects_aspect() {
        let boxes = LesionBoxModel::default().sample(500, 9);
        for b in &boxes {
            let (w, h) = (b.width(), b.height());
            assert!(w.max(h) / w.min(h) <= 4.0 + 1e-9);
        }
        let mut longs: Vec<f64> = boxes.iter().map(|b| b.width().max(b.height())).collect();
        longs.sort_by(f64::total_cmp);
        let median = longs[longs.len() / 2];
        assert!((9.0..16.0).contains(&median), "median {median}");
    }
}
