//! Synthetic striation marks with known sources.
//!
//! Every source (tool side) gets a latent signature made of Gaussian stria
//! bumps plus band-limited micro-texture, optionally blended with a
//! signature shared by all tools of one size class. A replicate mark samples
//! that latent signature at a random sub-sample offset, applies the angle and
//! direction distortions, adds a quadratic macro trend and white noise, and
//! is replicated over the rows of a scan.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{extract_signature, ExtractionError, Signature, DEFAULT_SPAN};
use crate::meta::{Direction, Side, SizeClass, SourceMeta};
use crate::profile_io::{extract_profile, SurfaceScan, DEFAULT_ROW_FRACTION};
use crate::similarity::{similarity_matrix, SimilarityError};

/// Reference conditions: marks made at this angle and pulling are undistorted.
pub const REFERENCE_ANGLE: u32 = 80;
pub const REFERENCE_DIRECTION: Direction = Direction::Pull;

// angle smoothing (samples) at full attenuation
const ANGLE_SMOOTHING: f64 = 3.0;
// push marks: blend weight and decay (samples) of a one-sided smear
const PUSH_SMEAR_WEIGHT: f64 = 0.35;
const PUSH_SMEAR_DECAY: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("infeasible generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Exp1,
    Exp2,
    Exp3,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp1" => Ok(Preset::Exp1),
            "exp2" => Ok(Preset::Exp2),
            "exp3" => Ok(Preset::Exp3),
            other => Err(format!("unknown preset {other:?} (expected exp1, exp2 or exp3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_tools: u32,
    pub sides: Vec<Side>,
    pub angles: Vec<u32>,
    pub directions: Vec<Direction>,
    pub replicates: u32,
    pub size_class: SizeClass,
    pub pitch_um: f64,
    pub length_mm: f64,
    pub rows: usize,
    /// Replicate white noise (micrometers).
    pub noise_sd_um: f64,
    /// Relative spread of the noise level between replicates: each mark
    /// uses `noise_sd_um * (1 + noise_spread * u)` with `u` uniform in [-1, 1].
    pub noise_spread: f64,
    /// Amplitude factor per 10 degrees away from the reference angle.
    pub angle_attenuation: f64,
    /// Scale of the quadratic macro trend (micrometers).
    pub trend_amplitude_um: f64,
    /// Maximum replicate offset as a fraction of the mark length.
    pub max_shift_frac: f64,
    pub striae_per_mm: f64,
    pub stria_depth_um: f64,
    pub stria_width_um: (f64, f64),
    pub texture_sd_um: f64,
    /// Correlation length of the micro-texture, in samples.
    pub texture_corr_samples: f64,
    /// Fraction of each latent signature shared by all tools of the size class.
    pub subclass_component: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::preset(Preset::Exp1, 1)
    }
}

impl GeneratorConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = GeneratorConfig {
            seed,
            n_tools: 20,
            sides: vec![Side::A, Side::B],
            angles: vec![REFERENCE_ANGLE],
            directions: vec![REFERENCE_DIRECTION],
            replicates: 8,
            size_class: SizeClass::Small,
            pitch_um: 3.45,
            length_mm: 6.0,
            rows: 50,
            noise_sd_um: 0.4,
            noise_spread: 0.16,
            angle_attenuation: 0.85,
            trend_amplitude_um: 20.0,
            max_shift_frac: 0.05,
            striae_per_mm: 25.0,
            stria_depth_um: 1.0,
            stria_width_um: (3.5, 10.0),
            texture_sd_um: 0.5,
            texture_corr_samples: 3.0,
            subclass_component: 0.05,
        };
        match preset {
            Preset::Exp1 => base,
            Preset::Exp2 => {
                GeneratorConfig { n_tools: 3, angles: vec![60, 70, 80], size_class: SizeClass::Large, ..base }
            }
            Preset::Exp3 => GeneratorConfig { n_tools: 3, directions: vec![Direction::Pull, Direction::Push], ..base },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.n_tools < 1 || self.sides.is_empty() || self.angles.is_empty() || self.directions.is_empty() {
            return fail("factorial design needs at least one tool, side, angle and direction".into());
        }
        if self.replicates < 2 {
            return fail(format!("need at least 2 replicates, got {}", self.replicates));
        }
        if let Some(a) = self.angles.iter().find(|a| ![60, 70, 80].contains(*a)) {
            return fail(format!("angle {a} not in {{60, 70, 80}}"));
        }
        let positive = [
            ("pitch_um", self.pitch_um),
            ("length_mm", self.length_mm),
            ("angle_attenuation", self.angle_attenuation),
            ("trend_amplitude_um", self.trend_amplitude_um),
            ("striae_per_mm", self.striae_per_mm),
            ("stria_depth_um", self.stria_depth_um),
            ("texture_corr_samples", self.texture_corr_samples),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.noise_sd_um >= 0.0 && self.texture_sd_um >= 0.0) {
            return fail("noise scales must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.noise_spread) {
            return fail(format!("noise_spread must be in [0, 1], got {}", self.noise_spread));
        }
        if self.angle_attenuation > 1.0 {
            return fail("angle_attenuation must be at most 1".into());
        }
        if !(0.0..0.5).contains(&self.max_shift_frac) {
            return fail(format!("max_shift_frac must be in [0, 0.5), got {}", self.max_shift_frac));
        }
        if !(0.0..1.0).contains(&self.subclass_component) {
            return fail(format!("subclass_component must be in [0, 1), got {}", self.subclass_component));
        }
        let (w_lo, w_hi) = self.stria_width_um;
        if !(w_lo > 0.0 && w_lo <= w_hi) {
            return fail(format!("bad stria width range ({w_lo}, {w_hi})"));
        }
        if 2.0 * w_hi >= self.length_mm * 1000.0 {
            return fail("striae wider than the tool".into());
        }
        if self.samples() < 2 || self.rows < 1 {
            return fail("scan must have at least 1 row and 2 columns".into());
        }
        Ok(())
    }

    /// Samples per profile.
    pub fn samples(&self) -> usize {
        (self.length_mm * 1000.0 / self.pitch_um).round() as usize
    }

    pub fn n_marks(&self) -> usize {
        self.n_tools as usize * self.sides.len() * self.angles.len() * self.directions.len() * self.replicates as usize
    }

    fn width_um(&self) -> f64 {
        self.length_mm * 1000.0
    }

    fn margin_um(&self) -> f64 {
        self.max_shift_frac * self.width_um() + 4.0 * self.stria_width_um.1 + 10.0 * self.pitch_um
    }
}

/// Deterministic 64-bit mixing (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

/// Striae of one tool side: Gaussian depth bumps across the tool width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: u32,
    pub side: Side,
    pub n_striae: usize,
    /// Micrometers from the left edge of the mark.
    pub stria_positions: Vec<f64>,
    pub stria_depths: Vec<f64>,
    pub stria_widths: Vec<f64>,
    pub subclass_component: f64,
}

impl ToolSpec {
    fn random(tool_id: u32, side: Side, config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let margin = config.margin_um();
        let span = config.width_um() + 2.0 * margin;
        let n_striae = ((config.striae_per_mm * span / 1000.0).round() as usize).max(1);
        let depth = Normal::new(0.0, config.stria_depth_um).unwrap();
        let (w_lo, w_hi) = config.stria_width_um;
        let mut stria_positions = Vec::with_capacity(n_striae);
        let mut stria_depths = Vec::with_capacity(n_striae);
        let mut stria_widths = Vec::with_capacity(n_striae);
        for _ in 0..n_striae {
            stria_positions.push(rng.random_range(-margin..config.width_um() + margin));
            stria_depths.push(depth.sample(rng));
            stria_widths.push(if w_hi > w_lo { rng.random_range(w_lo..w_hi) } else { w_lo });
        }
        ToolSpec {
            tool_id,
            side,
            n_striae,
            stria_positions,
            stria_depths,
            stria_widths,
            subclass_component: config.subclass_component,
        }
    }

    fn striae_at(&self, x: f64) -> f64 {
        self.stria_positions
            .iter()
            .zip(&self.stria_depths)
            .zip(&self.stria_widths)
            .filter(|((p, _), w)| (x - **p).abs() < 5.0 * **w)
            .map(|((p, d), w)| {
                let u = (x - p) / w;
                d * (-0.5 * u * u).exp()
            })
            .sum()
    }
}

/// A latent signature evaluable at any position: striae plus micro-texture
/// held on a fine grid and linearly interpolated.
#[derive(Debug, Clone)]
struct Latent {
    spec: ToolSpec,
    texture: Vec<f64>,
    origin_um: f64,
    step_um: f64,
}

impl Latent {
    fn random(spec: ToolSpec, config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let margin = config.margin_um();
        let step = config.pitch_um;
        let len = ((config.width_um() + 2.0 * margin) / step).ceil() as usize + 2;
        let white: Vec<f64> = {
            let unit = Normal::new(0.0, 1.0).unwrap();
            (0..len).map(|_| unit.sample(rng)).collect()
        };
        let mut texture = gaussian_smooth(&white, config.texture_corr_samples / 2.0);
        let sd = (texture.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        if sd > 0.0 {
            let scale = config.texture_sd_um / sd;
            texture.iter_mut().for_each(|v| *v *= scale);
        }
        Latent { spec, texture, origin_um: -margin, step_um: step }
    }

    fn at(&self, x: f64) -> f64 {
        let t = (x - self.origin_um) / self.step_um;
        let i = (t.floor().max(0.0) as usize).min(self.texture.len() - 2);
        let f = t - i as f64;
        let tex = self.texture[i] * (1.0 - f) + self.texture[i + 1] * f;
        self.spec.striae_at(x) + tex
    }
}

fn gaussian_smooth(values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let half = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let n = values.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, w) in (-half..=half).zip(&kernel) {
                let j = i + k;
                if (0..n).contains(&j) {
                    acc += w * values[j as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// One-sided exponential smear blended into the original.
fn push_distortion(values: &[f64]) -> Vec<f64> {
    let a = (-1.0 / PUSH_SMEAR_DECAY).exp();
    let mut state = values.first().copied().unwrap_or(0.0);
    values
        .iter()
        .map(|&v| {
            state = a * state + (1.0 - a) * v;
            (1.0 - PUSH_SMEAR_WEIGHT) * v + PUSH_SMEAR_WEIGHT * state
        })
        .collect()
}

struct SourceModel {
    tool_id: u32,
    side: Side,
    own: Latent,
}

fn shared_latent(config: &GeneratorConfig) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0xC1A55, config.size_class as u64]));
    let spec = ToolSpec::random(0, Side::A, config, &mut rng);
    Latent::random(spec, config, &mut rng)
}

fn source_model(config: &GeneratorConfig, tool_id: u32, side: Side) -> SourceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, tool_id as u64, side as u64]));
    let spec = ToolSpec::random(tool_id, side, config, &mut rng);
    SourceModel { tool_id, side, own: Latent::random(spec, config, &mut rng) }
}

/// Tool specifications of every source in the design, in generation order.
pub fn tool_specs(config: &GeneratorConfig) -> Result<Vec<ToolSpec>, SynthError> {
    config.validate()?;
    Ok(sources(config).into_iter().map(|(t, s)| source_model(config, t, s).own.spec).collect())
}

fn sources(config: &GeneratorConfig) -> Vec<(u32, Side)> {
    (1..=config.n_tools).flat_map(|t| config.sides.iter().map(move |&s| (t, s))).collect()
}

fn replicate_profile(
    config: &GeneratorConfig,
    source: &SourceModel,
    shared: &Latent,
    angle: u32,
    direction: Direction,
    replicate: u32,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        config.seed,
        source.tool_id as u64,
        source.side as u64,
        angle as u64,
        direction as u64,
        replicate as u64,
        0xBEEF,
    ]));
    let n = config.samples();
    let max_shift = config.max_shift_frac * config.width_um();
    let shift = if max_shift > 0.0 { rng.random_range(-max_shift..=max_shift) } else { 0.0 };
    let s = config.subclass_component;
    let mut values: Vec<f64> = (0..n)
        .map(|j| {
            let x = j as f64 * config.pitch_um + shift;
            (1.0 - s) * source.own.at(x) + s * shared.at(x)
        })
        .collect();

    let steps = (angle as f64 - REFERENCE_ANGLE as f64).abs() / 10.0;
    let amplitude = config.angle_attenuation.powf(steps);
    if amplitude < 1.0 {
        values = gaussian_smooth(&values, ANGLE_SMOOTHING * (1.0 - amplitude));
        values.iter_mut().for_each(|v| *v *= amplitude);
    }
    if direction != REFERENCE_DIRECTION {
        values = push_distortion(&values);
    }

    let curvature = rng.random_range(-1.0..1.0) * config.trend_amplitude_um;
    let slope = rng.random_range(-0.5..0.5) * config.trend_amplitude_um;
    let offset = Normal::new(0.0, config.trend_amplitude_um).unwrap().sample(&mut rng);
    let half = config.width_um() / 2.0;
    let noise_sd = config.noise_sd_um * (1.0 + config.noise_spread * rng.random_range(-1.0..=1.0));
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    for (j, v) in values.iter_mut().enumerate() {
        let u = (j as f64 * config.pitch_um - half) / half;
        *v += curvature * u * u + slope * u + offset;
        if noise_sd > 0.0 {
            *v += noise.sample(&mut rng);
        }
    }
    values
}

fn scan_from_profile(config: &GeneratorConfig, profile: &[f64], meta: SourceMeta, seed: u64) -> SurfaceScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_sd = 0.1 * config.noise_sd_um;
    let row_noise = Normal::new(0.0, row_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut heights = Vec::with_capacity(config.rows * profile.len());
    for _ in 0..config.rows {
        for &v in profile {
            let jitter = if row_sd > 0.0 { row_noise.sample(&mut rng) } else { 0.0 };
            heights.push((v + jitter) as f32);
        }
    }
    SurfaceScan::new(config.rows, profile.len(), heights, config.pitch_um, config.pitch_um, meta)
        .expect("generator produces valid scans")
}

/// Generates every mark of the factorial design, ordered by tool, side,
/// angle, direction and replicate. The output depends only on the config.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Vec<SurfaceScan>, SynthError> {
    config.validate()?;
    let shared = shared_latent(config);
    let models: Vec<SourceModel> = sources(config).into_par_iter().map(|(t, s)| source_model(config, t, s)).collect();
    let mut jobs = Vec::with_capacity(config.n_marks());
    for (m, model) in models.iter().enumerate() {
        for &angle in &config.angles {
            for &direction in &config.directions {
                for rep in 1..=config.replicates {
                    jobs.push((m, model, angle, direction, rep));
                }
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(m, model, angle, direction, rep)| {
            let profile = replicate_profile(config, model, &shared, angle, direction, rep);
            let mut meta = SourceMeta::new(model.tool_id, model.side, rep)
                .expect("tool ids and replicates start at 1")
                .with_direction(direction)
                .with_size_class(config.size_class);
            meta.angle_deg = Some(angle);
            let seed = derive_seed(&[config.seed, m as u64, angle as u64, direction as u64, rep as u64, 0x20]);
            scan_from_profile(config, &profile, meta, seed)
        })
        .collect())
}

/// Middle-row profile of each scan, detrended with the default span.
pub fn extract_signatures(scans: &[SurfaceScan]) -> Result<Vec<Signature>, SynthError> {
    scans
        .par_iter()
        .map(|scan| Ok(extract_signature(&extract_profile(scan, DEFAULT_ROW_FRACTION), DEFAULT_SPAN)?))
        .collect()
}

/// Ground-truth manifest: `index,file,tool_id,side,angle_deg,direction,replicate,size_class`.
pub fn manifest_csv(scans: &[SurfaceScan], file_names: &[String]) -> String {
    let mut out = String::from("index,file,tool_id,side,angle_deg,direction,replicate,size_class\n");
    let opt = |o: Option<String>| o.unwrap_or_default();
    for (i, (scan, name)) in scans.iter().zip(file_names).enumerate() {
        let m = scan.meta();
        let _ = writeln!(
            out,
            "{i},{name},{},{},{},{},{},{}",
            m.tool_id,
            m.side,
            opt(m.angle_deg.map(|a| a.to_string())),
            opt(m.direction.map(|d| d.to_string())),
            m.replicate,
            opt(m.size_class.map(|s| s.to_string())),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mean_km: f64,
    pub mean_knm: f64,
    pub gap: f64,
    pub n_km: usize,
    pub n_knm: usize,
}

/// Generates the dataset, extracts and scores every pair, and summarizes
/// the same-source and different-source score levels.
pub fn calibrate(config: &GeneratorConfig) -> Result<CalibrationReport, SynthError> {
    let sigs = extract_signatures(&generate_dataset(config)?)?;
    let sim = similarity_matrix(&sigs)?;
    let (mut km, mut knm) = (Vec::new(), Vec::new());
    for i in 0..sim.len() {
        for j in i + 1..sim.len() {
            if sim.labels()[i].source() == sim.labels()[j].source() {
                km.push(sim.get(i, j));
            } else {
                knm.push(sim.get(i, j));
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (mean_km, mean_knm) = (mean(&km), mean(&knm));
    Ok(CalibrationReport { mean_km, mean_knm, gap: mean_km - mean_knm, n_km: km.len(), n_knm: knm.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig { n_tools: 2, replicates: 2, rows: 3, length_mm: 1.0, ..GeneratorConfig::default() }
    }

    #[test]
    fn preset_counts() {
        assert_eq!(GeneratorConfig::preset(Preset::Exp1, 1).n_marks(), 320);
        assert_eq!(GeneratorConfig::preset(Preset::Exp2, 1).n_marks(), 144);
        assert_eq!(GeneratorConfig::preset(Preset::Exp3, 1).n_marks(), 96);
        assert_eq!(GeneratorConfig::default().samples(), 1739);
    }

    #[test]
    fn validation() {
        assert!(small_config().validate().is_ok());
        let bad = [
            GeneratorConfig { replicates: 1, ..small_config() },
            GeneratorConfig { angles: vec![45], ..small_config() },
            GeneratorConfig { stria_width_um: (10.0, 600.0), ..small_config() },
            GeneratorConfig { noise_sd_um: -1.0, ..small_config() },
            GeneratorConfig { subclass_component: 1.0, ..small_config() },
            GeneratorConfig { sides: vec![], ..small_config() },
        ];
        for cfg in bad {
            assert!(matches!(generate_dataset(&cfg), Err(SynthError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!((a[0].rows(), a[0].cols()), (3, cfg.samples()));
        assert_eq!(a[0].meta().to_string(), "1A_80_pull_r1_small");
        assert_eq!(a[7].meta().to_string(), "2B_80_pull_r2_small");
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GeneratorConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tool_specs_respect_invariants() {
        let cfg = small_config();
        let specs = tool_specs(&cfg).unwrap();
        assert_eq!(specs.len(), 4);
        for s in specs {
            assert_eq!(s.stria_positions.len(), s.n_striae);
            assert!(s.stria_widths.iter().all(|&w| w > 0.0));
            let margin = cfg.margin_um();
            assert!(s.stria_positions.iter().all(|&p| p > -margin && p < cfg.width_um() + margin));
        }
    }

    #[test]
    fn gaussian_smooth_preserves_constants() {
        let v = vec![2.0; 30];
        assert!(gaussian_smooth(&v, 1.5).iter().all(|x| (x - 2.0).abs() < 1e-12));
        assert!(push_distortion(&v).iter().all(|x| (x - 2.0).abs() < 1e-12));
    }
}
