//! Synthetic white-blood-cell style images, noise models and file I/O.
//!
//! Classes: 0 background, 1 cytoplasm, 2 nucleus.

mod dataset;
pub mod netpbm;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dataset::{
    load_dataset, parse_key_values, save_dataset, Dataset, DatasetConfig, MANIFEST_NAME,
};

use crate::error::{Error, Result};
use crate::field::{Field3, LabelMap, Shape};

pub const BACKGROUND: u8 = 0;
pub const CYTOPLASM: u8 = 1;
pub const NUCLEUS: u8 = 2;
pub const CLASSES: usize = 3;

/// An RGB image in `[0, 1]` and its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Field3,
    pub label: LabelMap,
}

/// Independent generator for item `stream` of a seeded collection.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// `< 1` inside, `1` on the boundary.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn grown(&self, d: f64) -> Self {
        Ellipse {
            a: self.a + d,
            b: self.b + d,
            ..*self
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 1.0
    }
}

struct Geometry {
    cell: Ellipse,
    nucleus: Ellipse,
    label: LabelMap,
}

fn draw_geometry(size: usize, rng: &mut impl Rng) -> Option<Geometry> {
    let s = size as f64;
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let a = rng.random_range(0.18 * s..0.3 * s);
    let b = rng.random_range(0.18 * s..0.3 * s);
    let cell = Ellipse::new(cx, cy, a, b, rng.random_range(0.0..std::f64::consts::PI));
    let r = 0.2 * a.min(b);
    let nucleus = Ellipse::new(
        cx + rng.random_range(-r..r),
        cy + rng.random_range(-r..r),
        a * rng.random_range(0.4..0.65),
        b * rng.random_range(0.4..0.65),
        rng.random_range(0.0..std::f64::consts::PI),
    );
    let mut label = LabelMap::filled(size, size, BACKGROUND);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            if nucleus.inside(x, y) {
                label.set(i, j, NUCLEUS);
            } else if cell.inside(x, y) {
                label.set(i, j, CYTOPLASM);
            }
        }
    }
    geometry_ok(&label).then_some(Geometry {
        cell,
        nucleus,
        label,
    })
}

/// The cell must not touch the border, the nucleus must be separated from
/// the background by cytoplasm, and class sizes must be ordered
/// background > cytoplasm > nucleus > 0.
fn geometry_ok(label: &LabelMap) -> bool {
    let (h, w) = (label.height(), label.width());
    let mut counts = [0usize; CLASSES];
    for i in 0..h {
        for j in 0..w {
            let l = label.get(i, j);
            counts[l as usize] += 1;
            if l == BACKGROUND {
                continue;
            }
            if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
                return false;
            }
            if l == NUCLEUS {
                let nb = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)];
                if nb.iter().any(|&(y, x)| label.get(y, x) == BACKGROUND) {
                    return false;
                }
            }
        }
    }
    counts[NUCLEUS as usize] >= 16
        && counts[CYTOPLASM as usize] > counts[NUCLEUS as usize]
        && counts[BACKGROUND as usize] > counts[CYTOPLASM as usize] + counts[NUCLEUS as usize]
}

/// Smooth random texture in roughly `[-1, 1]` built from a few plane waves.
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn new(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let waves = (0..4)
            .map(|_| {
                let freq = rng.random_range(2.0..7.0) / s;
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU * freq;
                (
                    k * angle.cos(),
                    k * angle.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|(kx, ky, p)| (kx * x + ky * y + p).sin())
            .sum::<f64>()
            / 2.0
    }
}

const BG_RGB: [f64; 3] = [0.88, 0.80, 0.84];
const RBC_RGB: [f64; 3] = [0.86, 0.58, 0.62];
const CYTO_RGB: [f64; 3] = [0.80, 0.72, 0.86];
const NUC_RGB: [f64; 3] = [0.40, 0.20, 0.55];

fn render(size: usize, g: &Geometry, rng: &mut impl Rng) -> Field3 {
    let s = size as f64;
    let tex = Texture::new(size, rng);
    let grain = Texture::new(size / 2, rng);
    // Red-cell distractors, kept clear of the white cell.
    let mut blobs = Vec::new();
    let wanted = rng.random_range(3..=6);
    for _ in 0..40 {
        if blobs.len() == wanted {
            break;
        }
        let r = rng.random_range(0.06 * s..0.1 * s);
        let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let clear = g.cell.grown(r + 1.0).level(x, y) > 1.0;
        if clear {
            blobs.push((x, y, r));
        }
    }
    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut img = Field3::zeros(Shape::new(3, size, size).expect("size > 0"));
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let shade = 1.0 + 0.06 * (gx * (x / s - 0.5) + gy * (y / s - 0.5));
            let (rgb, amp) = match g.label.get(i, j) {
                NUCLEUS => {
                    let depth = 1.0 - g.nucleus.level(x, y);
                    let c = NUC_RGB.map(|v| v * (1.0 - 0.12 * depth));
                    (c, 0.05 * grain.at(2.0 * x, 2.0 * y))
                }
                CYTOPLASM => (CYTO_RGB, 0.025 * grain.at(x, y)),
                _ => {
                    let mut c = BG_RGB;
                    for &(bx, by, r) in &blobs {
                        let d = ((x - bx).powi(2) + (y - by).powi(2)).sqrt() / r;
                        if d <= 1.0 {
                            // paler centre
                            let t = 0.35 * (1.0 - d * d);
                            c = [0, 1, 2].map(|k| RBC_RGB[k] + t * (BG_RGB[k] - RBC_RGB[k]));
                        }
                    }
                    (c, 0.03 * tex.at(x, y))
                }
            };
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, i, j, (v * shade + amp).clamp(0.02, 0.98));
            }
        }
    }
    img
}

/// Generates `count` cell images of `size × size`. Sample `k` depends only on
/// `(seed, k)`.
pub fn generate_cells(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if size < 32 || !size.is_multiple_of(4) {
        return Err(Error::InvalidConfig(format!(
            "image size must be >= 32 and divisible by 4 (got {size})"
        )));
    }
    Ok((0..count)
        .map(|k| generate_one(size, seed, k as u64))
        .collect())
}

fn generate_one(size: usize, seed: u64, k: u64) -> Sample {
    let mut rng = stream_rng(seed, k);
    let g = loop {
        if let Some(g) = draw_geometry(size, &mut rng) {
            break g;
        }
    };
    let image = render(size, &g, &mut rng);
    Sample {
        image,
        label: g.label,
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every entry, then clips to `[0, 1]`.
pub fn add_gaussian_noise(image: &Field3, sigma: f64, seed: u64) -> Result<Field3> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be >= 0 (got {sigma})"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpulseKind {
    Salt,
    Pepper,
    /// First half of the chosen pixels salt, the rest pepper.
    Both,
}

/// Sets `floor(fraction * H * W)` distinct random pixels to 1 (salt) or 0
/// (pepper) in every channel.
pub fn add_salt_pepper(
    image: &Field3,
    fraction: f64,
    kind: ImpulseKind,
    seed: u64,
) -> Result<Field3> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "fraction must lie in [0, 1] (got {fraction})"
        )));
    }
    let pixels = image.shape().pixels();
    let n = ((fraction * pixels as f64).floor() as usize).min(pixels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, pixels, n).into_vec();
    let mut out = image.clone();
    for (r, &p) in chosen.iter().enumerate() {
        let v = match kind {
            ImpulseKind::Salt => 1.0,
            ImpulseKind::Pepper => 0.0,
            ImpulseKind::Both => {
                if r < n / 2 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        for c in 0..image.channels() {
            out.channel_mut(c)[p] = v;
        }
    }
    Ok(out)
}

/// A test-time or training-time corruption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Clean,
    Gaussian { sigma: f64 },
    Impulse { kind: ImpulseKind, fraction: f64 },
}

impl Noise {
    pub fn apply(&self, image: &Field3, seed: u64) -> Result<Field3> {
        match *self {
            Noise::Clean => Ok(image.clone()),
            Noise::Gaussian { sigma } => add_gaussian_noise(image, sigma, seed),
            Noise::Impulse { kind, fraction } => add_salt_pepper(image, fraction, kind, seed),
        }
    }

    /// `(kind, level)` as written to result tables.
    pub fn descriptor(&self) -> (&'static str, f64) {
        match *self {
            Noise::Clean => ("clean", 0.0),
            Noise::Gaussian { sigma } => ("gauss", sigma),
            Noise::Impulse { kind, fraction } => (
                match kind {
                    ImpulseKind::Salt => "salt",
                    ImpulseKind::Pepper => "pepper",
                    ImpulseKind::Both => "saltpepper",
                },
                fraction,
            ),
        }
    }
}

/// Training-set noise: gaussian with this sigma, or salt-and-pepper on this
/// fraction of pixels.
pub const TRAIN_NOISE_SIGMA: f64 = 0.05;
pub const TRAIN_NOISE_FRACTION: f64 = 0.01;

/// Corrupts `subset_count` randomly chosen samples, each with a fair coin
/// between gaussian noise and salt-and-pepper.
pub fn corrupt_training_subset(
    data: &[Sample],
    subset_count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if subset_count > data.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot corrupt {subset_count} of {} samples",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, data.len(), subset_count).into_vec();
    let mut out = data.to_vec();
    for k in chosen {
        let noise_seed = rng.random();
        let noise = if rng.random_bool(0.5) {
            Noise::Gaussian {
                sigma: TRAIN_NOISE_SIGMA,
            }
        } else {
            Noise::Impulse {
                kind: ImpulseKind::Both,
                fraction: TRAIN_NOISE_FRACTION,
            }
        };
        out[k].image = noise.apply(&out[k].image, noise_seed)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cells(3, 32, 5).unwrap();
        let b = generate_cells(3, 32, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_cells(3, 32, 6).unwrap();
        assert_ne!(a, c);
        // prefix-stable
        assert_eq!(generate_cells(2, 32, 5).unwrap()[..], a[..2]);
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(generate_cells(1, 30, 0).is_err());
        assert!(generate_cells(1, 34, 0).is_err());
        assert!(generate_cells(1, 36, 0).is_ok());
    }

    #[test]
    fn class_structure_holds() {
        for s in generate_cells(100, 32, 1).unwrap() {
            assert!(geometry_ok(&s.label));
            assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = Field3::filled(Shape::new(3, 64, 64).unwrap(), 0.5);
        assert_eq!(add_gaussian_noise(&img, 0.0, 1).unwrap(), img);
        let sigma = 0.05;
        let noisy = add_gaussian_noise(&img, sigma, 1).unwrap();
        let n = img.as_slice().len() as f64;
        let diffs: Vec<f64> = noisy.as_slice().iter().map(|v| v - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - sigma).abs() < 0.05 * sigma, "{sd}");
        let extreme = add_gaussian_noise(&img, 5.0, 2).unwrap();
        assert!(extreme.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn salt_pepper_counts() {
        let img = Field3::filled(Shape::new(3, 64, 64).unwrap(), 0.5);
        assert_eq!(
            add_salt_pepper(&img, 0.0, ImpulseKind::Salt, 0).unwrap(),
            img
        );
        let all = add_salt_pepper(&img, 1.0, ImpulseKind::Salt, 0).unwrap();
        assert!(all.as_slice().iter().all(|&v| v == 1.0));
        let s = add_salt_pepper(&img, 0.01, ImpulseKind::Pepper, 3).unwrap();
        let changed = (0..4096).filter(|&p| s.channel(0)[p] != 0.5).count();
        assert_eq!(changed, 40);
        for p in 0..4096 {
            let v = s.channel(0)[p];
            assert!(v == s.channel(1)[p] && v == s.channel(2)[p]);
        }
        let b = add_salt_pepper(&img, 0.01, ImpulseKind::Both, 3).unwrap();
        let ones = b.channel(0).iter().filter(|&&v| v == 1.0).count();
        let zeros = b.channel(0).iter().filter(|&&v| v == 0.0).count();
        assert_eq!((ones, zeros), (20, 20));
        assert!(add_salt_pepper(&img, 1.5, ImpulseKind::Salt, 0).is_err());
    }

    #[test]
    fn corruption_touches_exactly_the_subset() {
        let data = generate_cells(10, 32, 2).unwrap();
        assert_eq!(corrupt_training_subset(&data, 0, 1).unwrap(), data);
        let c = corrupt_training_subset(&data, 4, 1).unwrap();
        let differing = data
            .iter()
            .zip(&c)
            .filter(|(a, b)| a.image != b.image)
            .count();
        assert_eq!(differing, 4);
        assert!(data.iter().zip(&c).all(|(a, b)| a.label == b.label));
        assert_eq!(c, corrupt_training_subset(&data, 4, 1).unwrap());
        assert!(corrupt_training_subset(&data, 11, 1).is_err());
    }
}
