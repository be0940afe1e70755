//! Seeded articulated stick-figure generator: renders textured figures on
//! noise backgrounds together with full keypoint annotations. Provides the
//! train/test substrate for desk-scale end-to-end runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::error::Result;
use crate::features::ImageGray;
use crate::io::{
    encode_pgm, save_annotations, Annotation, AnnotationSet, CombinedDoc, Convention, PartsDoc,
};

/// Joint order used by the generator's annotations.
pub const JOINT_NAMES: [&str; 14] = [
    "head_top",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// The 14 single + 10 combined human part roster.
pub fn human_parts_doc() -> PartsDoc {
    let limb = |name: &str, a: &str, b: &str| CombinedDoc {
        name: name.into(),
        constituents: vec![a.into(), b.into()],
        num_types: None,
    };
    PartsDoc {
        singles: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        combined: vec![
            limb("head", "neck", "head_top"),
            CombinedDoc {
                name: "torso".into(),
                constituents: vec!["neck".into(), "left_hip".into(), "right_hip".into()],
                num_types: None,
            },
            limb("left_upper_arm", "left_shoulder", "left_elbow"),
            limb("left_lower_arm", "left_elbow", "left_wrist"),
            limb("right_upper_arm", "right_shoulder", "right_elbow"),
            limb("right_lower_arm", "right_elbow", "right_wrist"),
            limb("left_upper_leg", "left_hip", "left_knee"),
            limb("left_lower_leg", "left_knee", "left_ankle"),
            limb("right_upper_leg", "right_hip", "right_knee"),
            limb("right_lower_leg", "right_knee", "right_ankle"),
        ],
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub min_height: f64,
    pub max_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 132,
            image_height: 132,
            min_height: 96.0,
            max_height: 108.0,
        }
    }
}

/// One rendered figure with its 14 joint positions.
#[derive(Debug, Clone)]
pub struct StickFigure {
    pub image: ImageGray,
    pub keypoints: Vec<(f64, f64)>,
    pub height: f64,
}

fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageGray {
    // A few low-frequency waves plus per-pixel noise around mid gray.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.01..0.06),
                rng.gen_range(0.01..0.06),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let mut img = ImageGray::from_fn(w, h, |x, y| {
        let mut v = 0.5;
        for &(fx, fy, phase, amp) in &waves {
            v += amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).cos();
        }
        v
    });
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) + rng.gen_range(-0.04..0.04);
            img.set(x, y, v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Paint a thick segment; `shade(t, band)` gets the normalized position
/// along the limb and the stripe band index across the texture period.
fn draw_limb(
    img: &mut ImageGray,
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
    period: f64,
    base: f64,
    stripe: f64,
) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt().max(1e-6);
    let (ux, uy) = (dx / len, dy / len);
    let x0 = (a.0.min(b.0) - width).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + width).ceil().min(img.width() as f64 - 1.0) as usize;
    let y0 = (a.1.min(b.1) - width).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + width).ceil().min(img.height() as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = px * ux + py * uy;
            let across = -px * uy + py * ux;
            if t >= -width / 2.0 && t <= len + width / 2.0 && across.abs() <= width / 2.0 {
                let band = ((t / period).floor() as i64).rem_euclid(2);
                let v = base + if band == 0 { stripe } else { -stripe };
                img.set(x, y, v.clamp(0.0, 1.0));
            }
        }
    }
}

fn draw_disk(img: &mut ImageGray, center: (f64, f64), radius: f64, value: f64, rim: f64) {
    let x0 = (center.0 - radius).floor().max(0.0) as usize;
    let x1 = (center.0 + radius).ceil().min(img.width() as f64 - 1.0) as usize;
    let y0 = (center.1 - radius).floor().max(0.0) as usize;
    let y1 = (center.1 + radius).ceil().min(img.height() as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2)).sqrt();
            if d <= radius {
                let v = if d > radius - 1.5 { rim } else { value };
                img.set(x, y, v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Sample and render one figure. Poses stay roughly upright with moderate
/// joint-angle jitter; left/right limbs keep to their own side so the
/// deformation priors can disambiguate them.
pub fn generate_figure(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> StickFigure {
    let h = rng.gen_range(cfg.min_height..cfg.max_height);
    let w_img = cfg.image_width as f64;
    let h_img = cfg.image_height as f64;
    let cx = w_img / 2.0 + rng.gen_range(-5.0..5.0);
    // Pelvis sits so the whole figure fits: head up ~0.52h, legs down ~0.46h.
    let cy = h_img / 2.0 + 0.04 * h + rng.gen_range(-3.0..3.0);
    let lean: f64 = rng.gen_range(-0.10..0.10);

    let rot = |v: (f64, f64), ang: f64| -> (f64, f64) {
        (
            v.0 * ang.cos() - v.1 * ang.sin(),
            v.0 * ang.sin() + v.1 * ang.cos(),
        )
    };
    let add = |a: (f64, f64), b: (f64, f64)| (a.0 + b.0, a.1 + b.1);

    let pelvis = (cx, cy);
    let torso_vec = rot((0.0, -0.30 * h), lean);
    let neck = add(pelvis, torso_vec);
    let head_top = add(neck, rot((0.0, -0.20 * h), lean));

    let shoulder_off = rot((0.11 * h, 0.02 * h), lean);
    let left_shoulder = add(neck, (-shoulder_off.0, shoulder_off.1));
    let right_shoulder = add(neck, shoulder_off);
    let hip_off = rot((0.08 * h, 0.0), lean);
    let left_hip = add(pelvis, (-hip_off.0, hip_off.1));
    let right_hip = add(pelvis, hip_off);

    // Angles measured from straight down; positive swings outward.
    let limb_end = |origin: (f64, f64), length: f64, outward: f64, side: f64| {
        let ang = side * outward;
        add(origin, rot((0.0, length), ang))
    };
    let ua = 0.17 * h;
    let la = 0.16 * h;
    let upper_arm_l: f64 = rng.gen_range(0.15..0.75);
    let upper_arm_r: f64 = rng.gen_range(0.15..0.75);
    let bend_l: f64 = rng.gen_range(-0.2..0.55);
    let bend_r: f64 = rng.gen_range(-0.2..0.55);
    let left_elbow = limb_end(left_shoulder, ua, upper_arm_l, -1.0);
    let right_elbow = limb_end(right_shoulder, ua, upper_arm_r, 1.0);
    let left_wrist = limb_end(left_elbow, la, upper_arm_l + bend_l, -1.0);
    let right_wrist = limb_end(right_elbow, la, upper_arm_r + bend_r, 1.0);

    let ul = 0.23 * h;
    let ll = 0.23 * h;
    let upper_leg_l: f64 = rng.gen_range(0.03..0.30);
    let upper_leg_r: f64 = rng.gen_range(0.03..0.30);
    let knee_l: f64 = rng.gen_range(-0.25..0.10);
    let knee_r: f64 = rng.gen_range(-0.25..0.10);
    let left_knee = limb_end(left_hip, ul, upper_leg_l, -1.0);
    let right_knee = limb_end(right_hip, ul, upper_leg_r, 1.0);
    let left_ankle = limb_end(left_knee, ll, upper_leg_l + knee_l, -1.0);
    let right_ankle = limb_end(right_knee, ll, upper_leg_r + knee_r, 1.0);

    let mut image = background(rng, cfg.image_width, cfg.image_height);

    // Painter's order: legs, torso, arms, head.
    draw_limb(&mut image, left_hip, left_knee, 0.085 * h, 5.0, 0.16, 0.07);
    draw_limb(&mut image, right_hip, right_knee, 0.085 * h, 5.0, 0.16, 0.07);
    draw_limb(&mut image, left_knee, left_ankle, 0.06 * h, 3.0, 0.22, 0.10);
    draw_limb(&mut image, right_knee, right_ankle, 0.06 * h, 3.0, 0.22, 0.10);
    let hip_mid = ((left_hip.0 + right_hip.0) / 2.0, (left_hip.1 + right_hip.1) / 2.0);
    draw_limb(&mut image, hip_mid, neck, 0.17 * h, 100.0, 0.10, 0.03);
    draw_limb(&mut image, left_shoulder, left_elbow, 0.065 * h, 6.0, 0.85, 0.10);
    draw_limb(&mut image, right_shoulder, right_elbow, 0.065 * h, 6.0, 0.85, 0.10);
    draw_limb(&mut image, left_elbow, left_wrist, 0.05 * h, 3.0, 0.78, 0.14);
    draw_limb(&mut image, right_elbow, right_wrist, 0.05 * h, 3.0, 0.78, 0.14);
    let head_mid = ((neck.0 + head_top.0) / 2.0, (neck.1 + head_top.1) / 2.0);
    draw_disk(&mut image, head_mid, 0.10 * h, 0.92, 0.15);

    StickFigure {
        image,
        keypoints: vec![
            head_top,
            neck,
            left_shoulder,
            right_shoulder,
            left_elbow,
            right_elbow,
            left_wrist,
            right_wrist,
            left_hip,
            right_hip,
            left_knee,
            right_knee,
            left_ankle,
            right_ankle,
        ],
        height: h,
    }
}

/// Background-only image for the negative set.
pub fn generate_negative(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> ImageGray {
    let mut img = background(rng, cfg.image_width, cfg.image_height);
    // Sprinkle a few random bars so negatives are not trivially flat.
    for _ in 0..rng.gen_range(2..5) {
        let a = (
            rng.gen_range(10.0..cfg.image_width as f64 - 10.0),
            rng.gen_range(10.0..cfg.image_height as f64 - 10.0),
        );
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(15.0..40.0);
        let b = (a.0 + len * ang.cos(), a.1 + len * ang.sin());
        draw_limb(
            &mut img,
            a,
            b,
            rng.gen_range(3.0..8.0),
            rng.gen_range(3.0..8.0),
            rng.gen_range(0.2..0.8),
            0.08,
        );
    }
    img
}

fn split_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (split << 40) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Write a complete dataset: `train/` and `test/` (images + annotations),
/// `neg/` (background images), and `parts.json`. Deterministic for a fixed
/// seed.
pub fn generate_dataset(
    dir: impl AsRef<Path>,
    n_train: usize,
    n_test: usize,
    n_neg: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    human_parts_doc().save(dir.join("parts.json"))?;

    for (split, count, tag) in [("train", n_train, 1u64), ("test", n_test, 2u64)] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir)?;
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = split_rng(seed, tag, i as u64);
            let fig = generate_figure(&mut rng, cfg);
            let name = format!("{split}_{i:04}.pgm");
            std::fs::write(split_dir.join(&name), encode_pgm(&fig.image))?;
            images.push(Annotation {
                image: name,
                height: fig.height,
                keypoints: fig.keypoints.into_iter().map(Some).collect(),
            });
        }
        let set = AnnotationSet {
            part_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            convention: Convention::ImageCentric,
            images,
        };
        save_annotations(split_dir.join("annotations.json"), &set)?;
    }

    let neg_dir = dir.join("neg");
    std::fs::create_dir_all(&neg_dir)?;
    for i in 0..n_neg {
        let mut rng = split_rng(seed, 3, i as u64);
        let img = generate_negative(&mut rng, cfg);
        std::fs::write(neg_dir.join(format!("neg_{i:04}.pgm")), encode_pgm(&img))?;
    }
    Ok(())
}
