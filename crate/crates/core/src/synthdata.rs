//! Deterministic synthetic intrinsic scenes with known albedo, shading, light
//! color and a mask of pixels that violate the Lambertian model.
//!
//! Albedo is piecewise constant over Voronoi cells, gray shading is a bilinear
//! upsampling of a coarse random grid, and specular highlights are additive
//! disks proportional to shading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Result};
use crate::tensor::PlaneTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Number of Voronoi sites for the piecewise-constant albedo.
    pub albedo_cells: usize,
    /// Side of the coarse shading grid.
    pub shading_smoothness: usize,
    /// Fixed light color, or `None` to draw one per scene from `[0.5, 1]^3`.
    pub light_color: Option<[f64; 3]>,
    /// Target fraction of pixels covered by highlights, in `[0, 0.5]`.
    pub specular_fraction: f64,
    /// Highlight peak relative to the local shading. The default of 3 makes
    /// highlights outshine the diffuse term, as real specularities do.
    pub specular_strength: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            albedo_cells: 8,
            shading_smoothness: 4,
            light_color: None,
            specular_fraction: 0.15,
            specular_strength: 3.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return arg(format!("scene size {}x{} is too small", self.height, self.width));
        }
        if self.albedo_cells == 0 {
            return arg("albedo_cells must be at least 1");
        }
        if self.shading_smoothness < 2 {
            return arg("shading_smoothness must be at least 2");
        }
        if let Some(c) = self.light_color {
            if c.iter().any(|v| !(0.5..=1.0).contains(v)) {
                return arg(format!("light color {c:?} outside [0.5, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.specular_fraction) {
            return arg(format!("specular_fraction {} outside [0, 0.5]", self.specular_fraction));
        }
        if !(self.specular_strength >= 0.0) || !self.specular_strength.is_finite() {
            return arg(format!("specular_strength {} must be finite and non-negative", self.specular_strength));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Linear image in `[0, 1]`.
    pub image: PlaneTensor,
    /// Linear albedo in `[0.1, 1]`.
    pub albedo: PlaneTensor,
    /// Linear gray shading in `(0, 1]`, including any brightness normalization.
    pub shading_gray: PlaneTensor,
    pub light_color: [f64; 3],
    /// 1 where a highlight was added, 0 elsewhere.
    pub violation_mask: PlaneTensor,
    /// Factor the raw render was divided by to fit `[0, 1]` (1 if none).
    pub normalization: f64,
}

impl Scene {
    /// `albedo * shading * light` at every pixel.
    pub fn lambertian(&self) -> PlaneTensor {
        let (h, w, _) = self.albedo.shape();
        PlaneTensor::from_fn(h, w, 3, |y, x, c| {
            self.albedo.at(y, x, c) * self.shading_gray.at(y, x, 0) * self.light_color[c]
        })
    }

    pub fn masked_pixels(&self) -> usize {
        self.violation_mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

fn voronoi_albedo(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> PlaneTensor {
    let sites: Vec<(f64, f64, [f64; 3])> = (0..cells)
        .map(|_| {
            let y = rng.gen_range(0.0..h as f64);
            let x = rng.gen_range(0.0..w as f64);
            let col = [rng.gen_range(0.1..=1.0), rng.gen_range(0.1..=1.0), rng.gen_range(0.1..=1.0)];
            (y, x, col)
        })
        .collect();
    PlaneTensor::from_fn(h, w, 3, |y, x, c| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let nearest = sites
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one site");
        nearest.2[c]
    })
}

fn smooth_shading(rng: &mut ChaCha8Rng, h: usize, w: usize, g: usize) -> PlaneTensor {
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.2..=1.0)).collect();
    let scale = |i: usize, n: usize| i as f64 * (g - 1) as f64 / (n - 1) as f64;
    PlaneTensor::from_fn(h, w, 1, |y, x, _| {
        let (fy, fx) = (scale(y, h), scale(x, w));
        let (y0, x0) = ((fy.floor() as usize).min(g - 2), (fx.floor() as usize).min(g - 2));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let v = |yy: usize, xx: usize| grid[yy * g + xx];
        let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
        let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Random disks until their union covers the requested fraction of pixels.
fn highlight_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, fraction: f64) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let target = (fraction * (h * w) as f64).round() as usize;
    let max_r = (h.min(w) as f64 / 6.0).max(2.5);
    let mut covered = 0;
    while covered < target {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let r = rng.gen_range(1.5..=max_r);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                if d2 <= r * r && !mask[y * w + x] {
                    mask[y * w + x] = true;
                    covered += 1;
                }
            }
        }
    }
    mask
}

/// Renders one scene. Deterministic in `spec`.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let albedo = voronoi_albedo(&mut rng, h, w, spec.albedo_cells);
    let mut shading = smooth_shading(&mut rng, h, w, spec.shading_smoothness);
    let light: [f64; 3] = match spec.light_color {
        Some(c) => c,
        None => [rng.gen_range(0.5..=1.0), rng.gen_range(0.5..=1.0), rng.gen_range(0.5..=1.0)],
    };
    let mask = if spec.specular_fraction > 0.0 && spec.specular_strength > 0.0 {
        highlight_mask(&mut rng, h, w, spec.specular_fraction)
    } else {
        vec![false; h * w]
    };
    let mut image = PlaneTensor::from_fn(h, w, 3, |y, x, c| {
        let b = shading.at(y, x, 0);
        let spec_term = if mask[y * w + x] { spec.specular_strength * b } else { 0.0 };
        albedo.at(y, x, c) * b * light[c] + spec_term
    });
    let peak = image.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let normalization = peak.max(1.0);
    if normalization > 1.0 {
        image = image.map(|v| (v / normalization).min(1.0));
        shading = shading.map(|v| v / normalization);
    }
    let violation_mask = PlaneTensor::from_fn(h, w, 1, |y, x, _| if mask[y * w + x] { 1.0 } else { 0.0 });
    Ok(Scene { image, albedo, shading_gray: shading, light_color: light, violation_mask, normalization })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub scene: Scene,
}

/// Scene identifier for dataset index `i`.
pub fn scene_id(index: usize) -> String {
    format!("scene_{index:03}")
}

/// `n` scenes seeded `base_seed + i`; even indices train, odd indices test.
pub fn make_dataset(n_scenes: usize, base_seed: u64, template: &SceneSpec) -> Result<Vec<SceneRecord>> {
    if n_scenes < 2 {
        return arg(format!("need at least 2 scenes for a train/test split, got {n_scenes}"));
    }
    (0..n_scenes)
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let scene = generate(&SceneSpec { seed, ..template.clone() })?;
            let split = if i % 2 == 0 { Split::Train } else { Split::Test };
            Ok(SceneRecord { id: scene_id(i), seed, split, scene })
        })
        .collect()
}

/// Records of one split, in dataset order.
pub fn split_records(records: &[SceneRecord], split: Split) -> Vec<&SceneRecord> {
    records.iter().filter(|r| r.split == split).collect()
}
