//! Procedural wound-like image sequences with known latent stage structure.
//!
//! Each wound is a centered disk whose radius shrinks as healing progresses,
//! rendered with stage-dependent cues: a sharp dark ring with a bright wet
//! interior (stage 0), a blurred swollen ring with specular highlights
//! (stage 1), a matte mid-tone interior with high-frequency texture
//! (stage 2), and a near-background disk (stage 3). The aged cohort heals
//! slower: its transition days are the young ones divided by the rate
//! multiplier, and its radius shrinks proportionally slower, so a given
//! appearance occurs at a later day.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{Cohort, ManifestRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encode: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed ground truth file: {0}")]
    BadGroundTruth(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub wounds_per_cohort: usize,
    pub days: u32,
    pub side: usize,
    /// Healing-rate multiplier for the aged cohort, relative to young.
    pub aged_rate: f64,
    /// Additive per-pixel noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            wounds_per_cohort: 8,
            days: 16,
            side: 64,
            aged_rate: 0.7,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days < 4 {
            return Err(SynthError::BadConfig(format!("days {} < 4", self.days)));
        }
        if !(self.aged_rate > 0.0 && self.aged_rate <= 1.0) {
            return Err(SynthError::BadConfig(format!(
                "aged_rate {} outside (0,1]",
                self.aged_rate
            )));
        }
        if self.noise < 0.0 {
            return Err(SynthError::BadConfig(format!("noise {} < 0", self.noise)));
        }
        if self.wounds_per_cohort == 0 {
            return Err(SynthError::BadConfig("wounds_per_cohort is 0".into()));
        }
        if self.side < 16 {
            return Err(SynthError::BadConfig(format!("side {} < 16", self.side)));
        }
        Ok(())
    }
}

/// True stage per (wound_id, day) plus each wound's stage-transition days.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthGroundTruth {
    pub stages: BTreeMap<(String, u32), usize>,
    pub transitions: BTreeMap<String, [f64; 3]>,
}

impl SynthGroundTruth {
    pub fn stage_of(&self, wound_id: &str, day: u32) -> Option<usize> {
        self.stages.get(&(wound_id.to_string(), day)).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("wound_id day true_stage t1 t2 t3\n");
        for ((wound_id, day), stage) in &self.stages {
            let t = self.transitions[wound_id];
            writeln!(out, "{wound_id} {day} {stage} {} {} {}", t[0], t[1], t[2]).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut gt = SynthGroundTruth::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(SynthError::BadGroundTruth(format!("line {}: {line}", i + 1)));
            }
            let bad = |what: &str| SynthError::BadGroundTruth(format!("line {}: bad {what}", i + 1));
            let day: u32 = f[1].parse().map_err(|_| bad("day"))?;
            let stage: usize = f[2].parse().map_err(|_| bad("stage"))?;
            let mut t = [0.0; 3];
            for (k, v) in t.iter_mut().enumerate() {
                *v = f[3 + k].parse().map_err(|_| bad("transition"))?;
            }
            gt.stages.insert((f[0].to_string(), day), stage);
            gt.transitions.insert(f[0].to_string(), t);
        }
        Ok(gt)
    }
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";

fn cohort_rate(cohort: Cohort, cfg: &SynthConfig) -> f64 {
    match cohort {
        Cohort::Young => 1.0,
        Cohort::Aged => cfg.aged_rate,
    }
}

/// Nominal (pre-jitter) stage-transition days for a cohort: young values
/// scaled to the series length, divided by the cohort healing rate.
pub fn nominal_transitions(cohort: Cohort, cfg: &SynthConfig) -> [f64; 3] {
    let scale = cfg.days as f64 / 16.0;
    let rate = cohort_rate(cohort, cfg);
    [1.5, 5.0, 10.0].map(|t| t * scale / rate)
}

fn wound_transitions(cohort: Cohort, cfg: &SynthConfig, rng: &mut impl Rng) -> [f64; 3] {
    let nominal = nominal_transitions(cohort, cfg);
    let last = (cfg.days - 1) as f64;
    let mut t = nominal.map(|v| v + rng.random_range(-0.8..0.8));
    t[0] = t[0].clamp(1.0, last - 2.0);
    t[1] = t[1].clamp(t[0] + 0.5, last - 1.0);
    t[2] = t[2].clamp(t[1] + 0.5, last);
    t
}

fn stage_at(day: u32, transitions: &[f64; 3]) -> usize {
    transitions.iter().filter(|&&t| t <= day as f64).count()
}

/// Wound radius in pixels at a given day; strictly decreasing in day, with
/// the aged cohort shrinking proportionally slower. The square root makes
/// the wound *area* shrink at a constant rate, so day-to-day appearance
/// change is spread evenly across the series instead of front-loaded.
pub fn true_radius(day: u32, cohort: Cohort, cfg: &SynthConfig) -> f64 {
    let rate = cohort_rate(cohort, cfg);
    let q = (rate * day as f64 / (cfg.days - 1) as f64).min(1.0);
    cfg.side as f64 * (0.05 + 0.31 * (1.0 - q).sqrt())
}

const BACKGROUND: [f64; 3] = [0.80, 0.66, 0.58];

struct StageLook {
    interior: [f64; 3],
    ring: [f64; 3],
    ring_width: f64,
    /// 0 = hard ring edge, larger = blurrier falloff.
    ring_blur: f64,
    ring_alpha: f64,
    /// Fraction of interior blended toward the background.
    fade: f64,
    /// Specular highlight probability (wet, shiny look).
    specular: f64,
    /// High-frequency interior texture amplitude (matte, rough look).
    texture: f64,
}

fn stage_look(stage: usize) -> StageLook {
    match stage {
        0 => StageLook {
            interior: [0.70, 0.12, 0.10],
            ring: [0.30, 0.05, 0.05],
            ring_width: 1.6,
            ring_blur: 0.3,
            ring_alpha: 1.0,
            fade: 0.0,
            specular: 0.02,
            texture: 0.0,
        },
        1 => StageLook {
            interior: [0.78, 0.32, 0.28],
            ring: [0.85, 0.42, 0.38],
            ring_width: 3.5,
            ring_blur: 2.0,
            ring_alpha: 0.9,
            fade: 0.0,
            specular: 0.10,
            texture: 0.0,
        },
        2 => StageLook {
            interior: [0.46, 0.30, 0.22],
            ring: [0.42, 0.27, 0.20],
            ring_width: 2.0,
            ring_blur: 1.0,
            ring_alpha: 0.7,
            fade: 0.0,
            specular: 0.0,
            texture: 0.18,
        },
        _ => StageLook {
            interior: [0.62, 0.45, 0.38],
            ring: [0.66, 0.50, 0.42],
            ring_width: 1.0,
            ring_blur: 1.0,
            ring_alpha: 0.10,
            fade: 0.90,
            specular: 0.0,
            texture: 0.0,
        },
    }
}

fn render_image(
    cfg: &SynthConfig,
    cohort: Cohort,
    day: u32,
    transitions: &[f64; 3],
    rng: &mut impl Rng,
) -> Vec<u8> {
    let side = cfg.side;
    let stage = stage_at(day, transitions);
    let look = stage_look(stage);
    let radius = true_radius(day, cohort, cfg);
    let center = (side as f64 - 1.0) / 2.0;
    let illum = rng.random_range(0.97..1.03);

    let mut px = vec![0.0f64; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - center, x as f64 - center);
            let dist = (dy * dy + dx * dx).sqrt();

            let mut color = BACKGROUND;
            // interior with a ~1px antialiased edge
            let inside = smoothstep((radius - dist) / 1.0);
            if inside > 0.0 {
                let mut interior = look.interior;
                for c in 0..3 {
                    interior[c] = interior[c] * (1.0 - look.fade) + BACKGROUND[c] * look.fade;
                }
                if look.texture > 0.0 {
                    let n = rng.random_range(-look.texture..look.texture);
                    for v in &mut interior {
                        *v += n;
                    }
                } else if look.specular > 0.0 && rng.random::<f64>() < look.specular {
                    for v in &mut interior {
                        *v += 0.28;
                    }
                }
                for c in 0..3 {
                    color[c] = color[c] * (1.0 - inside) + interior[c] * inside;
                }
            }
            // ring drawn over interior edge
            let band = (dist - radius).abs();
            let edge = look.ring_width / 2.0;
            let ring = if band <= edge {
                1.0
            } else {
                smoothstep(1.0 - (band - edge) / look.ring_blur.max(1e-6))
            };
            let a = ring * look.ring_alpha;
            if a > 0.0 {
                for c in 0..3 {
                    color[c] = color[c] * (1.0 - a) + look.ring[c] * a;
                }
            }

            for c in 0..3 {
                let mut v = color[c] * illum;
                if cfg.noise > 0.0 {
                    v += rng.random_range(-cfg.noise..cfg.noise);
                }
                px[(y * side + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    px.iter().map(|&v| (v * 255.0).round() as u8).collect()
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generate a full dataset under `out_dir` (manifest + PNGs + ground-truth
/// table) and return the ground truth. Byte-identical output for identical
/// config and seed.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthGroundTruth> {
    cfg.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let mut gt = SynthGroundTruth::default();
    let mut manifest: Vec<ManifestRecord> = Vec::new();
    for (ci, cohort) in [Cohort::Young, Cohort::Aged].into_iter().enumerate() {
        for wi in 0..cfg.wounds_per_cohort {
            let tag = match cohort {
                Cohort::Young => "y",
                Cohort::Aged => "a",
            };
            let wound_id = format!("{tag}{wi:02}");
            let wound_seed = cfg
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((ci * 10_000 + wi) as u64);
            let mut wrng = ChaCha8Rng::seed_from_u64(wound_seed);
            let transitions = wound_transitions(cohort, cfg, &mut wrng);
            gt.transitions.insert(wound_id.clone(), transitions);
            for day in 0..cfg.days {
                let mut prng = ChaCha8Rng::seed_from_u64(wound_seed.wrapping_add(1 + day as u64));
                let bytes = render_image(cfg, cohort, day, &transitions, &mut prng);
                let file = format!("images/{wound_id}_d{day:02}.png");
                let img =
                    image::RgbImage::from_raw(cfg.side as u32, cfg.side as u32, bytes).unwrap();
                img.save(out_dir.join(&file))?;
                gt.stages
                    .insert((wound_id.clone(), day), stage_at(day, &transitions));
                manifest.push(ManifestRecord {
                    wound_id: wound_id.clone(),
                    cohort,
                    day,
                    file,
                });
            }
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json)?;
    gt.save(&out_dir.join(GROUND_TRUTH_FILE))?;
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            wounds_per_cohort: 2,
            side: 32,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig { days: 3, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { aged_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { noise: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn day_zero_is_hemostasis_and_stages_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let gt = generate(&cfg, dir.path()).unwrap();
        for wid in gt.transitions.keys() {
            assert_eq!(gt.stage_of(wid, 0), Some(0));
            let mut prev = 0;
            let mut seen = [false; 4];
            for d in 0..cfg.days {
                let s = gt.stage_of(wid, d).unwrap();
                assert!(s >= prev, "stage regressed for {wid} at day {d}");
                prev = s;
                seen[s] = true;
            }
            assert!(seen.iter().all(|&s| s), "wound {wid} missing a stage");
        }
    }

    #[test]
    fn aged_nominal_transitions_scaled_by_rate() {
        let cfg = SynthConfig::default();
        let young = nominal_transitions(Cohort::Young, &cfg);
        let aged = nominal_transitions(Cohort::Aged, &cfg);
        for (y, a) in young.iter().zip(&aged) {
            assert!((a - y / cfg.aged_rate).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small_cfg();
        let g1 = generate(&cfg, d1.path()).unwrap();
        let g2 = generate(&cfg, d2.path()).unwrap();
        assert_eq!(g1, g2);
        for entry in std::fs::read_dir(d1.path().join("images")).unwrap() {
            let p1 = entry.unwrap().path();
            let p2 = d2.path().join("images").join(p1.file_name().unwrap());
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
        assert_eq!(
            std::fs::read(d1.path().join("manifest.json")).unwrap(),
            std::fs::read(d2.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn ground_truth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let gt = generate(&small_cfg(), dir.path()).unwrap();
        let loaded = SynthGroundTruth::load(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert_eq!(gt, loaded);
    }

    #[test]
    fn generated_tree_loads_as_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        generate(&cfg, dir.path()).unwrap();
        let series = load_dataset(dir.path(), cfg.side).unwrap();
        assert_eq!(series.len(), 4);
        assert!(series.iter().all(|s| s.days() == 16));
    }

    #[test]
    fn radius_order_oracle_sorts_days() {
        // an oracle that orders any day pair by true radius gets the
        // temporal direction right essentially always
        let cfg = SynthConfig::default();
        let mut total = 0u32;
        let mut correct = 0u32;
        for cohort in [Cohort::Young, Cohort::Aged] {
            for a in 0..cfg.days {
                for b in 0..cfg.days {
                    if a == b {
                        continue;
                    }
                    total += 1;
                    let (ra, rb) = (true_radius(a, cohort, &cfg), true_radius(b, cohort, &cfg));
                    if (a < b) == (ra > rb) {
                        correct += 1;
                    }
                }
            }
        }
        assert!(correct as f64 / total as f64 > 0.95);
    }

    #[test]
    fn raw_pixel_nearest_centroid_separates_stages() {
        // stages must be learnable from pixels alone: a nearest-centroid
        // classifier on 8x8 downsampled noise-free images clears 60%
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            wounds_per_cohort: 2,
            side: 32,
            noise: 0.0,
            seed: 5,
            ..Default::default()
        };
        let gt = generate(&cfg, dir.path()).unwrap();
        let series = load_dataset(dir.path(), cfg.side).unwrap();

        let down = |img: &crate::dataset::WoundImage| -> Vec<f64> {
            let f = img.height / 8;
            let mut out = vec![0.0; 8 * 8 * 3];
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        let mut s = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                s += img.pixel(y * f + dy, x * f + dx, c);
                            }
                        }
                        out[(y * 8 + x) * 3 + c] = s / (f * f) as f64;
                    }
                }
            }
            out
        };

        let mut feats: Vec<(Vec<f64>, usize)> = Vec::new();
        for s in &series {
            for img in &s.images {
                let stage = gt.stage_of(&s.wound_id, img.day).unwrap();
                feats.push((down(img), stage));
            }
        }
        let mut centroids = vec![vec![0.0; 8 * 8 * 3]; 4];
        let mut counts = [0usize; 4];
        for (f, s) in &feats {
            counts[*s] += 1;
            for (c, v) in centroids[*s].iter_mut().zip(f) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let correct = feats
            .iter()
            .filter(|(f, s)| {
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(f).map(|(c, v)| (c - v) * (c - v)).sum();
                        let db: f64 = centroids[b].iter().zip(f).map(|(c, v)| (c - v) * (c - v)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == *s
            })
            .count();
        let acc = correct as f64 / feats.len() as f64;
        assert!(acc > 0.6, "nearest-centroid stage accuracy {acc}");
    }
}
