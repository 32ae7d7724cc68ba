//! Procedural scene rendering: elliptical blobs, streak/blotch
//! artifacts, and organ/lesion phantoms.
//!
//! Every scene draws from its own counter-derived ChaCha stream, so
//! generation is reproducible sample by sample regardless of order or
//! thread count. Intensities live in `[0, 1]`; masks are hard 0/1 while
//! image edges are rendered soft, so the pixel-exact boundary is
//! genuinely ambiguous from intensities alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Texture parameters for one visual style of blob scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStyle {
    /// Background intensity mean.
    pub bg_mean: f64,
    /// Signed foreground offset relative to the background.
    pub fg_delta: f64,
    /// Gaussian pixel noise sigma.
    pub noise_sigma: f64,
    /// Blob radius range (pixels).
    pub radius: (f64, f64),
    /// Max ellipse eccentricity: axes are `r*(1 +- e)`.
    pub eccentricity: f64,
    /// Blob count range (inclusive).
    pub count: (usize, usize),
}

/// Scene geometry shared by the generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub style: SceneStyle,
    /// Soft-edge half width as a fraction of the radius.
    pub edge_softness: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            style: SceneStyle {
                bg_mean: 0.4,
                fg_delta: 0.3,
                noise_sigma: 0.08,
                radius: (4.0, 7.0),
                eccentricity: 0.2,
                count: (3, 7),
            },
            edge_softness: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    /// Semi-axes.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    /// Normalized elliptical distance: < 1 inside.
    fn dist(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Approximate standard normal from the ChaCha stream (Box-Muller).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn smooth_coverage(dist: f64, softness: f64) -> f64 {
    // 1 well inside, 0 well outside, linear ramp across [1-s, 1+s].
    if softness <= 0.0 {
        return f64::from(dist <= 1.0);
    }
    ((1.0 + softness - dist) / (2.0 * softness)).clamp(0.0, 1.0)
}

pub struct Scene {
    pub image: Tensor<f32>,
    /// Blob (foreground object) mask.
    pub blob_mask: Tensor<f32>,
    /// Artifact mask; empty unless artifacts were rendered.
    pub artifact_mask: Tensor<f32>,
}

fn sample_blobs(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = rng.gen_range(spec.style.count.0..=spec.style.count.1);
    // Cap radii on small canvases so blobs fit with a placement margin.
    let side = spec.height.min(spec.width) as f64;
    let r_hi = spec.style.radius.1.min(side / 4.0);
    let r_lo = spec.style.radius.0.min(side / 6.0);
    let margin = r_hi;
    (0..n)
        .map(|_| {
            let r = rng.gen_range(r_lo..r_hi);
            let ecc = rng.gen_range(0.0..=spec.style.eccentricity.max(1e-9));
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.gen_range(margin..spec.height as f64 - margin),
                cx: rng.gen_range(margin..spec.width as f64 - margin),
                a: r * (1.0 + ecc),
                b: r * (1.0 - ecc).max(0.2),
                theta,
            }
        })
        .collect()
}

/// One streak or blotch artifact: a capsule (thick segment) or a wide
/// soft ellipse, plus its own intensity offset.
pub struct Artifact {
    kind: ArtifactKind,
    delta: f64,
}

enum ArtifactKind {
    Streak {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        half_width: f64,
    },
    Blotch(Ellipse),
}

impl Artifact {
    /// Normalized distance (< 1 inside footprint).
    fn dist(&self, y: f64, x: f64) -> f64 {
        match &self.kind {
            ArtifactKind::Streak {
                y0,
                x0,
                y1,
                x1,
                half_width,
            } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len_sq = dx * dx + dy * dy;
                let t = (((x - x0) * dx + (y - y0) * dy) / len_sq).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * dx, y0 + t * dy);
                ((x - px).powi(2) + (y - py).powi(2)).sqrt() / half_width
            }
            ArtifactKind::Blotch(e) => e.dist(y, x),
        }
    }
}

fn sample_artifacts(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Artifact> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut artifacts = Vec::new();
    let streaks = rng.gen_range(1..=2);
    for _ in 0..streaks {
        let y0 = rng.gen_range(2.0..h - 2.0);
        let x0 = rng.gen_range(2.0..w - 2.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let len = rng.gen_range(0.35 * w..0.8 * w);
        let y1 = (y0 + len * angle.sin()).clamp(1.0, h - 1.0);
        let x1 = (x0 + len * angle.cos()).clamp(1.0, w - 1.0);
        // Mostly-bright streaks: salient enough that a handful of
        // annotated samples carries signal.
        let sign = if rng.gen_bool(0.7) { 1.0 } else { -1.0 };
        artifacts.push(Artifact {
            kind: ArtifactKind::Streak {
                y0,
                x0,
                y1,
                x1,
                half_width: rng.gen_range(1.3..2.4),
            },
            delta: sign * rng.gen_range(0.28..0.42),
        });
    }
    if rng.gen_bool(0.6) {
        let r = rng.gen_range(0.10 * w..0.17 * w);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        artifacts.push(Artifact {
            kind: ArtifactKind::Blotch(Ellipse {
                cy: rng.gen_range(r..h - r),
                cx: rng.gen_range(r..w - r),
                a: r * rng.gen_range(1.0..1.4),
                b: r * rng.gen_range(0.6..1.0),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            }),
            delta: sign * rng.gen_range(0.16..0.26),
        });
    }
    artifacts
}

/// Render a blob scene, optionally with artifacts layered on top.
pub fn render_blob_scene(spec: &SceneSpec, with_artifacts: bool, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let blobs = sample_blobs(spec, rng);
    let artifacts = if with_artifacts {
        sample_artifacts(spec, rng)
    } else {
        Vec::new()
    };

    let mut image = Tensor::zeros(&[1, h, w]);
    let mut blob_mask = Tensor::zeros(&[1, h, w]);
    let mut artifact_mask = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let (yf, xf) = (y as f64, x as f64);
            let mut value = spec.style.bg_mean;
            let mut min_dist = f64::INFINITY;
            for blob in &blobs {
                let d = blob.dist(yf, xf);
                min_dist = min_dist.min(d);
            }
            if min_dist.is_finite() {
                value += spec.style.fg_delta * smooth_coverage(min_dist, spec.edge_softness);
                if min_dist <= 1.0 {
                    blob_mask.data_mut()[idx] = 1.0;
                }
            }
            for artifact in &artifacts {
                let d = artifact.dist(yf, xf);
                value += artifact.delta * smooth_coverage(d, 0.35);
                if d <= 1.0 {
                    artifact_mask.data_mut()[idx] = 1.0;
                }
            }
            value += spec.style.noise_sigma * gauss(rng);
            image.data_mut()[idx] = value.clamp(0.0, 1.0) as f32;
        }
    }
    Scene {
        image,
        blob_mask,
        artifact_mask,
    }
}

/// Organ/lesion phantom for continuous size conditioning.
///
/// The lesion's intensity contrast fades to zero at a per-sample random
/// fraction of its true radius, so the annotated extent is not
/// recoverable from pixels alone: the normalized size metadata carries
/// the missing information.
pub struct Phantom {
    pub image: Tensor<f32>,
    /// Channel 0: organ, channel 1: lesion.
    pub mask: Tensor<f32>,
    /// True lesion radius in pixels.
    pub lesion_radius: f64,
}

pub fn render_phantom(
    height: usize,
    width: usize,
    lesion_radius_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Phantom {
    let (h, w) = (height as f64, width as f64);
    let organ_r = rng.gen_range(0.30 * w..0.36 * w);
    let organ = Ellipse {
        cy: h / 2.0 + rng.gen_range(-0.05 * h..0.05 * h),
        cx: w / 2.0 + rng.gen_range(-0.05 * w..0.05 * w),
        a: organ_r * rng.gen_range(1.0..1.15),
        b: organ_r * rng.gen_range(0.8..1.0),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let lesion_radius = rng.gen_range(lesion_radius_range.0..lesion_radius_range.1);
    // Place the lesion well inside the organ.
    let max_offset = (organ_r * 0.75 - lesion_radius).max(1.0);
    let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let offset = rng.gen_range(0.0..max_offset);
    let lesion = Ellipse {
        cy: organ.cy + offset * angle.sin(),
        cx: organ.cx + offset * angle.cos(),
        a: lesion_radius,
        b: lesion_radius,
        theta: 0.0,
    };
    // The lesion is only visible in a random inner core, so its extent
    // cannot be read off the intensities.
    let visible_frac = rng.gen_range(0.35..0.80);
    let noise = 0.055;

    let mut image = Tensor::zeros(&[1, height, width]);
    let mut mask = Tensor::zeros(&[2, height, width]);
    let plane = height * width;
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            let (yf, xf) = (y as f64, x as f64);
            let mut value = 0.22;
            let od = organ.dist(yf, xf);
            value += 0.30 * smooth_coverage(od, 0.08);
            if od <= 1.0 {
                mask.data_mut()[idx] = 1.0;
            }
            let ld = lesion.dist(yf, xf);
            if ld <= 1.0 {
                mask.data_mut()[plane + idx] = 1.0;
            }
            // Linear fade: full contrast at the center, zero from
            // visible_frac outward.
            let contrast = (1.0 - ld / visible_frac).clamp(0.0, 1.0);
            value += 0.24 * contrast;
            value += noise * gauss(rng);
            image.data_mut()[idx] = value.clamp(0.0, 1.0) as f32;
        }
    }
    Phantom {
        image,
        mask,
        lesion_radius,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_stream_renders_identical_scenes() {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            ..SceneSpec::default()
        };
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let sa = render_blob_scene(&spec, true, &mut a);
        let sb = render_blob_scene(&spec, true, &mut b);
        assert_eq!(sa.image.data(), sb.image.data());
        assert_eq!(sa.blob_mask.data(), sb.blob_mask.data());
        assert_eq!(sa.artifact_mask.data(), sb.artifact_mask.data());
    }

    #[test]
    fn blob_masks_are_binary_and_not_full() {
        let spec = SceneSpec {
            height: 40,
            width: 40,
            ..SceneSpec::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = render_blob_scene(&spec, false, &mut rng);
            assert!(scene.blob_mask.is_binary());
            let n = scene.blob_mask.count_nonzero();
            assert!(n > 0 && n < scene.blob_mask.numel());
            assert_eq!(scene.artifact_mask.count_nonzero(), 0);
        }
    }

    #[test]
    fn artifact_masks_differ_from_blob_masks() {
        let spec = SceneSpec {
            height: 40,
            width: 40,
            ..SceneSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = render_blob_scene(&spec, true, &mut rng);
        assert!(scene.artifact_mask.count_nonzero() > 0);
        assert_ne!(scene.artifact_mask.data(), scene.blob_mask.data());
    }

    #[test]
    fn lesion_pixel_count_is_monotone_in_radius() {
        let mut counts = Vec::new();
        for (i, r) in [3.0f64, 5.0, 7.0, 9.0].iter().enumerate() {
            // Fixed stream per phantom: vary only the radius by taking a
            // degenerate range around it.
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let p = render_phantom(40, 40, (*r, r + 1e-9), &mut rng);
            let lesion = p.mask.index_axis0(1);
            counts.push(lesion.count_nonzero());
        }
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn phantom_masks_are_binary_with_two_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = render_phantom(40, 40, (3.0, 9.0), &mut rng);
        assert_eq!(p.mask.shape(), &[2, 40, 40]);
        assert!(p.mask.is_binary());
        assert!(p.mask.index_axis0(0).count_nonzero() > p.mask.index_axis0(1).count_nonzero());
    }
}
