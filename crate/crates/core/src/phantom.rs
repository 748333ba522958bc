//! Seeded synthetic chest phantoms with labels, lesion boxes and controllable
//! domain shifts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{save_image_png16, GrayImage, Mask};
use crate::seed;

pub const PHANTOM_SIDE: usize = 224;

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

/// Intensity levels of the anatomy before domain transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityProfile {
    pub background: f64,
    pub body: f64,
    pub lung: f64,
    pub rib: f64,
    pub lesion: f64,
}

impl Default for IntensityProfile {
    fn default() -> Self {
        Self {
            background: -0.9,
            body: 0.25,
            lung: -0.35,
            rib: 0.25,
            lesion: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub brightness: f64,
    pub contrast_gain: f64,
    pub noise_sigma: f64,
    pub text_probability: f64,
    pub text_intensity: f64,
    pub artifact_probability: f64,
    pub artifact_intensity: f64,
    pub profile: IntensityProfile,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self::clean()
    }
}

impl DomainConfig {
    /// Domain A: clean acquisitions.
    pub fn clean() -> Self {
        Self {
            name: "A".into(),
            brightness: 0.0,
            contrast_gain: 1.0,
            noise_sigma: 0.02,
            text_probability: 0.0,
            text_intensity: 0.95,
            artifact_probability: 0.0,
            artifact_intensity: 0.85,
            profile: IntensityProfile::default(),
        }
    }

    /// Domain B: overexposed with burnt-in corner text.
    pub fn bright_text() -> Self {
        Self {
            name: "B".into(),
            brightness: 0.3,
            contrast_gain: 0.8,
            text_probability: 0.8,
            ..Self::clean()
        }
    }

    /// Domain C: noisy with tube and electrode artifacts.
    pub fn noisy_artifacts() -> Self {
        Self {
            name: "C".into(),
            noise_sigma: 0.12,
            artifact_probability: 0.8,
            ..Self::clean()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "A" => Some(Self::clean()),
            "B" => Some(Self::bright_text()),
            "C" => Some(Self::noisy_artifacts()),
            _ => None,
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.text_probability, self.artifact_probability];
        ensure!(
            probs.iter().all(|p| (0.0..=1.0).contains(p)),
            Config,
            "domain probabilities must lie in [0, 1]"
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Config,
            "noise_sigma must be non-negative"
        );
        ensure!(
            self.contrast_gain > 0.0 && self.contrast_gain.is_finite(),
            Config,
            "contrast_gain must be positive"
        );
        ensure!(self.brightness.is_finite(), Config, "brightness must be finite");
        ensure!(
            !self.name.is_empty() && !self.name.contains([',', '\n', '"']),
            Config,
            "domain name must be non-empty and free of commas, quotes and newlines"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: GrayImage,
    pub label: bool,
    pub lesion_box: Option<BoundingBox>,
    pub domain: String,
    pub seed: u64,
    /// Pixels covered by burnt-in text, if any was drawn.
    pub text_mask: Option<Mask>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn level(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 1.0
    }
}

/// Soft inside indicator with a one-pixel ramp at the boundary.
fn soft_inside(e: &Ellipse, x: f64, y: f64) -> f64 {
    let r = e.level(x, y).sqrt();
    let edge = 1.0 / e.rx.min(e.ry);
    ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0)
}

struct Anatomy {
    body: Ellipse,
    lungs: [Ellipse; 2],
    rib_period: f64,
    rib_phase: f64,
}

fn draw_anatomy(rng: &mut ChaCha8Rng, side: f64) -> Anatomy {
    let j = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range(-s..=s);
    let body = Ellipse {
        cx: side * (0.5 + j(rng, 0.02)),
        cy: side * (0.56 + j(rng, 0.02)),
        rx: side * (0.42 + j(rng, 0.02)),
        ry: side * (0.46 + j(rng, 0.02)),
    };
    let lung = |rng: &mut ChaCha8Rng, cx: f64| Ellipse {
        cx: side * (cx + j(rng, 0.015)),
        cy: side * (0.5 + j(rng, 0.02)),
        rx: side * (0.14 + j(rng, 0.015)),
        ry: side * (0.28 + j(rng, 0.02)),
    };
    let lungs = [lung(rng, 0.31), lung(rng, 0.69)];
    Anatomy {
        body,
        lungs,
        rib_period: side * rng.gen_range(0.075..0.095),
        rib_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// Lesion centre and radius with its box inside the chosen lung.
fn place_lesion(rng: &mut ChaCha8Rng, lung: &Ellipse, side: usize) -> (f64, f64, f64, BoundingBox) {
    loop {
        let r = rng.gen_range(10.0..18.0);
        let cx = rng.gen_range(lung.cx - lung.rx..lung.cx + lung.rx);
        let cy = rng.gen_range(lung.cy - lung.ry..lung.cy + lung.ry);
        let x_min = (cx - r).floor();
        let y_min = (cy - r).floor();
        let x_max = (cx + r).ceil();
        let y_max = (cy + r).ceil();
        let corners = [(x_min, y_min), (x_min, y_max), (x_max, y_min), (x_max, y_max)];
        if x_min >= 0.0
            && y_min >= 0.0
            && x_max < side as f64
            && y_max < side as f64
            && corners.iter().all(|&(x, y)| lung.contains(x, y))
        {
            let bbox = BoundingBox {
                x_min: x_min as usize,
                y_min: y_min as usize,
                x_max: x_max as usize,
                y_max: y_max as usize,
            };
            return (cx, cy, r, bbox);
        }
    }
}

/// 5x7 pseudo-glyphs in the top-left corner.
fn draw_text(rng: &mut ChaCha8Rng, side: usize) -> Vec<bool> {
    let mut bits = vec![false; side * side];
    let scale = 2;
    let chars = rng.gen_range(3..7);
    let (x0, y0) = (6, 6);
    for c in 0..chars {
        let glyph: u64 = rng.gen();
        for gy in 0..7 {
            for gx in 0..5 {
                if glyph >> (gy * 5 + gx) & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = x0 + c * 6 * scale + gx * scale + dx;
                        let y = y0 + gy * scale + dy;
                        if x < side && y < side {
                            bits[y * side + x] = true;
                        }
                    }
                }
            }
        }
    }
    bits
}

/// Tube-like strokes and electrode rings.
fn draw_artifacts(rng: &mut ChaCha8Rng, side: usize) -> Vec<bool> {
    let s = side as f64;
    let mut bits = vec![false; side * side];
    let strokes = rng.gen_range(1..=2);
    let mut segments = Vec::new();
    for _ in 0..strokes {
        let a = (rng.gen_range(0.1..0.9) * s, rng.gen_range(0.0..0.2) * s);
        let b = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.5..0.95) * s);
        segments.push((a, b, rng.gen_range(1.0..2.5)));
    }
    let rings: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| (rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s, rng.gen_range(4.0..7.0)))
        .collect();
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64, y as f64);
            let on_stroke = segments.iter().any(|&(a, b, w)| segment_distance(p, a, b) <= w);
            let on_ring = rings.iter().any(|&(cx, cy, r)| {
                let d = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
                (d - r).abs() <= 1.2
            });
            bits[y * side + x] = on_stroke || on_ring;
        }
    }
    bits
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One 224x224 phantom, a pure function of its arguments.
pub fn generate_phantom(seed: u64, domain: &DomainConfig, label: bool) -> Result<PhantomSample> {
    domain.validate()?;
    let side = PHANTOM_SIDE;
    let s = side as f64;
    let mut rng = seed::rng(seed, &[seed::tag("phantom-anatomy")]);
    let anatomy = draw_anatomy(&mut rng, s);
    let lesion = label.then(|| {
        let which = rng.gen_range(0..2);
        place_lesion(&mut rng, &anatomy.lungs[which], side)
    });
    let prof = domain.profile;
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let body = soft_inside(&anatomy.body, fx, fy);
            let lung = anatomy
                .lungs
                .iter()
                .map(|l| soft_inside(l, fx, fy))
                .fold(0.0, f64::max);
            let rib_wave = (std::f64::consts::TAU * fy / anatomy.rib_period + anatomy.rib_phase
                + 0.02 * (fx - s / 2.0).abs())
            .sin();
            let rib = rib_wave.max(0.0).powi(2);
            let tissue = prof.body + (prof.lung - prof.body) * lung + prof.rib * rib * lung;
            let mut v = prof.background + (tissue - prof.background) * body;
            if let Some((cx, cy, r, _)) = lesion {
                let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
                v += (prof.lesion - prof.lung) * (-d2 / (2.0 * (r / 2.0).powi(2))).exp();
            }
            pixels.push(v);
        }
    }

    let mut domain_rng = seed::rng(seed, &[seed::tag("phantom-domain"), seed::tag(&domain.name)]);
    for p in pixels.iter_mut() {
        *p = domain.contrast_gain * *p + domain.brightness;
    }
    let mut text_mask = None;
    if domain_rng.gen_bool(domain.text_probability) {
        let bits = draw_text(&mut domain_rng, side);
        for (p, &b) in pixels.iter_mut().zip(&bits) {
            if b {
                *p = domain.text_intensity;
            }
        }
        text_mask = Some(Mask::new(side, side, bits)?);
    }
    if domain_rng.gen_bool(domain.artifact_probability) {
        let bits = draw_artifacts(&mut domain_rng, side);
        for (p, &b) in pixels.iter_mut().zip(&bits) {
            if b {
                *p = domain.artifact_intensity;
            }
        }
    }
    if domain.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, domain.noise_sigma).expect("validated sigma");
        for p in pixels.iter_mut() {
            *p += normal.sample(&mut domain_rng);
        }
    }
    Ok(PhantomSample {
        image: GrayImage::from_clamped(side, side, pixels)?,
        label,
        lesion_box: lesion.map(|l| l.3),
        domain: domain.name.clone(),
        seed,
        text_mask,
    })
}

/// Seed of the `index`-th sample of a corpus.
pub fn sample_seed(corpus_seed: u64, index: usize) -> u64 {
    seed::derive(corpus_seed, &[seed::tag("phantom-sample"), index as u64])
}

/// `n` samples, `round(n * positive_fraction)` of them positive, with the
/// positive positions shuffled by the corpus seed.
pub fn generate_corpus(
    n: usize,
    seed: u64,
    domain: &DomainConfig,
    positive_fraction: f64,
) -> Result<Vec<PhantomSample>> {
    ensure!(n >= 1, Parameter, "corpus size must be at least 1");
    ensure!(
        (0.0..=1.0).contains(&positive_fraction),
        Parameter,
        "positive fraction {positive_fraction} outside [0, 1]"
    );
    let positives = (n as f64 * positive_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < positives).collect();
    labels.shuffle(&mut seed::rng(seed, &[seed::tag("phantom-labels")]));
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| generate_phantom(sample_seed(seed, i), domain, label))
        .collect()
}

pub const MANIFEST_HEADER: [&str; 7] = ["file", "label", "x_min", "y_min", "x_max", "y_max", "domain"];

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub label: u8,
    pub x_min: Option<usize>,
    pub y_min: Option<usize>,
    pub x_max: Option<usize>,
    pub y_max: Option<usize>,
    pub domain: String,
}

impl ManifestRow {
    pub fn lesion_box(&self) -> Option<BoundingBox> {
        Some(BoundingBox {
            x_min: self.x_min?,
            y_min: self.y_min?,
            x_max: self.x_max?,
            y_max: self.y_max?,
        })
    }
}

pub fn sample_file_name(index: usize) -> String {
    format!("phantom_{index:05}.png")
}

/// Writes PNGs, text masks (under `masks/`) and `manifest.csv` into `dir`.
pub fn write_corpus(samples: &[PhantomSample], dir: &Path) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = sample_file_name(i);
        save_image_png16(&s.image, &dir.join(&file))?;
        if let Some(mask) = &s.text_mask {
            let mask_dir = dir.join("masks");
            std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            crate::image::save_mask_png(mask, &mask_dir.join(&file))?;
        }
        rows.push(ManifestRow {
            file,
            label: u8::from(s.label),
            x_min: s.lesion_box.map(|b| b.x_min),
            y_min: s.lesion_box.map(|b| b.y_min),
            x_max: s.lesion_box.map(|b| b.x_max),
            y_max: s.lesion_box.map(|b| b.y_max),
            domain: s.domain.clone(),
        });
    }
    write_manifest(&rows, &dir.join("manifest.csv"))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    ensure!(
        header == MANIFEST_HEADER,
        Format,
        "{}: manifest header must be {}",
        path.display(),
        MANIFEST_HEADER.join(",")
    );
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
