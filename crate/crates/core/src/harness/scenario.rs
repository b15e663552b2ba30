//! Synthetic scenarios: ground-truth pose sampling, input-feature
//! corruption and initial-pose perturbation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_unit_vector, rotvec_to_matrix, CameraIntrinsics, Pose6, Rotation, Vec3};
use crate::mesh::{init_textures, load_mesh, mesh_stats, shapes, TextureInit, TexturedMesh};
use crate::optimizer::LMParams;
use crate::renderer::{rasterize, FeatureImage};
use crate::training::{TrainConfig, TrainSample};

/// Channel count of the synthetic oracle feature field.
pub const ORACLE_CHANNELS: usize = 3;

/// Median of the standard half-normal distribution, `Φ⁻¹(3/4)`.
pub const HALF_NORMAL_MEDIAN: f64 = 0.674_489_750_196_081_7;

const MAX_POSE_ATTEMPTS: usize = 1000;
/// Pixels kept free between the projected object and the image border.
const FRAME_MARGIN: f64 = 2.0;
/// The sampled object spans roughly this fraction of the shorter image side.
const OBJECT_EXTENT: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub rot_deg_median: f64,
    pub trans_rel_median: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        // Average initial-estimator error on the clean benchmark.
        Perturbation {
            rot_deg_median: 1.280,
            trans_rel_median: 0.048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub noise_sigma: f64,
    /// Per-channel multiplicative gain drawn uniformly from this range.
    pub gain_range: [f64; 2],
    pub occlusion_frac: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption {
            noise_sigma: 0.0,
            gain_range: [1.0, 1.0],
            occlusion_frac: 0.0,
        }
    }
}

/// Damping given either per iteration or as one shared value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Shared(f64),
    Schedule(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSpec {
    pub iterations: usize,
    pub lambda: LambdaSpec,
    pub gamma: f64,
}

/// Damping schedule for the builtin object at the standard intrinsics.
pub const STANDARD_LAMBDA: [f64; 5] = [3e5, 3e4, 3e3, 300.0, 30.0];

impl Default for RefineSpec {
    fn default() -> Self {
        RefineSpec {
            iterations: STANDARD_LAMBDA.len(),
            lambda: LambdaSpec::Schedule(STANDARD_LAMBDA.to_vec()),
            gamma: 1.0,
        }
    }
}

impl RefineSpec {
    pub fn to_params(&self) -> Result<LMParams> {
        let lambda = match &self.lambda {
            LambdaSpec::Shared(l) => vec![*l],
            LambdaSpec::Schedule(v) => v.clone(),
        };
        LMParams::new(lambda, self.gamma, self.iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TextureSource {
    /// Refine against the same feature field that produced the input.
    Oracle,
    /// Textures and solver parameters from a training checkpoint.
    Checkpoint(PathBuf),
    /// Photometric baseline: vertex colors in both input and render.
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// OBJ path (relative paths resolve against the config file) or one of
    /// `builtin:blob`, `builtin:cube`, `builtin:plate`.
    pub mesh: String,
    pub intrinsics: CameraIntrinsics,
    pub n_trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub corruption: Corruption,
    #[serde(default)]
    pub refine: RefineSpec,
    #[serde(default = "default_source")]
    pub texture_source: TextureSource,
    /// Settings for the `train` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_source() -> TextureSource {
    TextureSource::Oracle
}

impl ScenarioConfig {
    /// Desk-scale defaults around the builtin benchmark object.
    pub fn standard(n_trials: usize, seed: u64) -> Self {
        ScenarioConfig {
            mesh: "builtin:blob".into(),
            intrinsics: CameraIntrinsics::new(260.0, 260.0, 63.5, 63.5, 128, 128).expect("valid"),
            n_trials,
            seed,
            perturbation: Perturbation::default(),
            corruption: Corruption::default(),
            refine: RefineSpec::default(),
            texture_source: TextureSource::Oracle,
            train: None,
            base_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.n_trials < 1 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        let c = &self.corruption;
        if !(0.0..1.0).contains(&c.occlusion_frac) {
            return Err(Error::Config("occlusion_frac must lie in [0, 1)".into()));
        }
        if !(c.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(c.gain_range[0] <= c.gain_range[1]) || !c.gain_range.iter().all(|g| g.is_finite()) {
            return Err(Error::Config("gain_range must be [lo, hi] with lo <= hi".into()));
        }
        let p = &self.perturbation;
        if !(p.rot_deg_median >= 0.0 && p.trans_rel_median >= 0.0) {
            return Err(Error::Config("perturbation medians must be non-negative".into()));
        }
        self.refine.to_params().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn resolve(&self, path: impl AsRef<Path>) -> PathBuf {
        let path = path.as_ref();
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Loads the geometry named by `mesh` with `channels` texture channels.
    pub fn load_mesh(&self, channels: usize) -> Result<TexturedMesh> {
        let base = match self.mesh.as_str() {
            "builtin:blob" => shapes::benchmark_object(),
            "builtin:cube" => shapes::cuboid(0.1, 0.1, 0.1),
            "builtin:plate" => shapes::square_plate(0.12, 0.03),
            other if other.starts_with("builtin:") => {
                return Err(Error::Config(format!("unknown builtin mesh '{other}'")))
            }
            path => return load_mesh(self.resolve(path), channels),
        };
        init_textures(&base, TextureInit::Zeros, channels)
    }
}

/// Smooth, zero-mean feature field over the object: a few low-frequency
/// sinusoids of the normalized vertex position.
pub fn oracle_textures(mesh: &TexturedMesh) -> Result<TexturedMesh> {
    let stats = mesh_stats(mesh)?;
    let center = (stats.bbox_min + stats.bbox_max) * 0.5;
    let scale = if stats.diameter > 0.0 { 1.0 / stats.diameter } else { 1.0 };
    let tau = 2.0 * std::f64::consts::PI;
    let freqs = [
        (Vec3::new(1.3, 0.4, -0.5), 0.0),
        (Vec3::new(-0.3, 1.2, 0.7), 0.9),
        (Vec3::new(0.6, -0.5, 1.4), 2.1),
    ];
    let textures = mesh
        .vertices()
        .iter()
        .flat_map(|v| {
            let u = (v - center) * scale;
            freqs.map(|(f, phase)| (tau * f.dot(&u) + phase).sin())
        })
        .collect();
    mesh.with_textures(textures, ORACLE_CHANNELS)
}

/// Meshes used while generating and refining one scenario.
#[derive(Debug, Clone)]
pub struct SceneAssets {
    /// Textures that synthesize the input features.
    pub source: TexturedMesh,
    /// Textures the refiner renders with.
    pub refine: TexturedMesh,
    pub params: LMParams,
    pub diameter: f64,
}

impl SceneAssets {
    pub fn prepare(cfg: &ScenarioConfig, checkpoint: Option<&Path>) -> Result<Self> {
        let geometry = cfg.load_mesh(ORACLE_CHANNELS)?;
        let diameter = mesh_stats(&geometry)?.diameter;
        if !(diameter > 0.0) {
            return Err(Error::Config("mesh has zero diameter".into()));
        }
        let mut params = cfg.refine.to_params()?;
        let source_kind = match checkpoint {
            Some(p) => TextureSource::Checkpoint(p.to_path_buf()),
            None => cfg.texture_source.clone(),
        };
        let (source, refine) = match source_kind {
            TextureSource::Oracle => {
                let oracle = oracle_textures(&geometry)?;
                (oracle.clone(), oracle)
            }
            TextureSource::Rgb => {
                let rgb = init_textures(&geometry, TextureInit::FromColors, 3)
                    .map_err(|e| Error::Config(format!("rgb texture source: {e}")))?;
                (rgb.clone(), rgb)
            }
            TextureSource::Checkpoint(path) => {
                let ckpt = crate::training::Checkpoint::load(&cfg.resolve(path), &geometry)?;
                let lambda: Vec<f64> = (0..params.iterations.max(1))
                    .map(|i| ckpt.params.lambda_at(i))
                    .collect();
                params = LMParams::new(lambda, ckpt.params.gamma, params.iterations)?;
                (oracle_textures(&geometry)?, ckpt.mesh)
            }
        };
        if source.channels() != refine.channels() {
            return Err(Error::ChannelMismatch {
                expected: source.channels(),
                found: refine.channels(),
            });
        }
        Ok(SceneAssets {
            source,
            refine,
            params,
            diameter,
        })
    }
}

/// Uniformly distributed rotation.
fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let angle = 2.0 * w.abs().min(1.0).acos();
    let axis = Vec3::new(x, y, z) * w.signum();
    let rv = if axis.norm() > 1e-15 { axis.normalize() * angle } else { Vec3::zeros() };
    rotvec_to_matrix(&rv).expect("finite")
}

fn half_normal(rng: &mut ChaCha8Rng, median: f64) -> f64 {
    if median == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    z.abs() * median / HALF_NORMAL_MEDIAN
}

fn fully_in_frame(mesh: &TexturedMesh, pose: &Pose6, k: &CameraIntrinsics) -> bool {
    let r = match pose.rotation() {
        Ok(r) => r,
        Err(_) => return false,
    };
    mesh.vertices().iter().all(|v| {
        let c = pose.apply(&r, v);
        if c.z <= 1e-3 {
            return false;
        }
        let u = k.fx * c.x / c.z + k.px;
        let w = k.fy * c.y / c.z + k.py;
        u >= FRAME_MARGIN
            && w >= FRAME_MARGIN
            && u <= k.width as f64 - 1.0 - FRAME_MARGIN
            && w <= k.height as f64 - 1.0 - FRAME_MARGIN
    })
}

fn sample_ground_truth(
    rng: &mut ChaCha8Rng,
    mesh: &TexturedMesh,
    k: &CameraIntrinsics,
    diameter: f64,
) -> Result<Pose6> {
    let short_side = k.width.min(k.height) as f64;
    let z_nominal = k.fx.max(k.fy) * diameter / (OBJECT_EXTENT * short_side);
    for _ in 0..MAX_POSE_ATTEMPTS {
        let r = random_rotation(rng);
        let z = z_nominal * rng.random_range(0.9..1.1);
        let u = rng.random_range(0.3..0.7) * k.width as f64;
        let v = rng.random_range(0.3..0.7) * k.height as f64;
        let t = Vec3::new((u - k.px) * z / k.fx, (v - k.py) * z / k.fy, z);
        let pose = Pose6::from_rotation(&r, t);
        if fully_in_frame(mesh, &pose, k) {
            return Ok(pose);
        }
    }
    Err(Error::Config(format!(
        "could not place the object fully in frame within {MAX_POSE_ATTEMPTS} attempts; \
         intrinsics are incompatible with the mesh size"
    )))
}

/// Rotates `pose` further by a random-axis angle and shifts it in a random
/// direction, with half-normal magnitudes calibrated by their medians.
pub fn perturb_pose(rng: &mut ChaCha8Rng, pose: &Pose6, p: &Perturbation, diameter: f64) -> Result<Pose6> {
    let angle = half_normal(rng, p.rot_deg_median).to_radians();
    let axis = random_unit_vector(rng);
    let shift = half_normal(rng, p.trans_rel_median) * diameter;
    let dir = random_unit_vector(rng);
    if angle == 0.0 && shift == 0.0 {
        return Ok(*pose);
    }
    let r = rotvec_to_matrix(&(axis * angle))?.compose(&pose.rotation()?);
    Ok(Pose6::from_rotation(&r, pose.t + dir * shift))
}

/// Deletes (marks invalid) an axis-aligned rectangle holding at least
/// `frac` of the masked pixels.
fn occlude(rng: &mut ChaCha8Rng, width: usize, height: usize, mask: &mut [bool], frac: f64) {
    let total = mask.iter().filter(|&&m| m).count();
    let target = (frac * total as f64).ceil() as usize;
    if target == 0 {
        return;
    }
    // Summed-area table of the mask.
    let mut sat = vec![0usize; (width + 1) * (height + 1)];
    for y in 0..height {
        for x in 0..width {
            sat[(y + 1) * (width + 1) + x + 1] = mask[y * width + x] as usize
                + sat[y * (width + 1) + x + 1]
                + sat[(y + 1) * (width + 1) + x]
                - sat[y * (width + 1) + x];
        }
    }
    let count = |x0: usize, y0: usize, x1: usize, y1: usize| {
        sat[y1 * (width + 1) + x1] + sat[y0 * (width + 1) + x0]
            - sat[y0 * (width + 1) + x1]
            - sat[y1 * (width + 1) + x0]
    };
    let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let anchor = masked[rng.random_range(0..masked.len())];
    let (ax, ay) = ((anchor % width) as f64, (anchor / width) as f64);
    let aspect = rng.random_range(-std::f64::consts::LN_2..std::f64::consts::LN_2).exp().sqrt();
    let rect = |s: f64| {
        let hw = s * aspect;
        let hh = s / aspect;
        let x0 = (ax - hw).floor().max(0.0) as usize;
        let y0 = (ay - hh).floor().max(0.0) as usize;
        let x1 = ((ax + hw).ceil() as usize + 1).min(width);
        let y1 = ((ay + hh).ceil() as usize + 1).min(height);
        (x0, y0, x1, y1)
    };
    let (mut lo, mut hi) = (0.0f64, 2.0 * width.max(height) as f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (x0, y0, x1, y1) = rect(mid);
        if count(x0, y0, x1, y1) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (x0, y0, x1, y1) = rect(hi);
    for y in y0..y1 {
        for m in &mut mask[y * width + x0..y * width + x1] {
            *m = false;
        }
    }
}

/// Corrupts a clean render: per-channel gain, additive noise on covered
/// pixels, then an occluding rectangle.
pub fn corrupt(rng: &mut ChaCha8Rng, clean: FeatureImage, c: &Corruption) -> Result<FeatureImage> {
    let (w, h, d) = (clean.width(), clean.height(), clean.channels());
    let (mut data, mut mask) = clean.into_parts();
    let [glo, ghi] = c.gain_range;
    let gains: Vec<f64> = (0..d)
        .map(|_| if glo < ghi { rng.random_range(glo..ghi) } else { glo })
        .collect();
    let noise = (c.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, c.noise_sigma))
        .transpose()
        .map_err(|e| Error::Config(e.to_string()))?;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for (ch, v) in data[p * d..(p + 1) * d].iter_mut().enumerate() {
            if gains[ch] != 1.0 {
                *v *= gains[ch];
            }
            if let Some(n) = &noise {
                *v += n.sample(rng);
            }
        }
    }
    if c.occlusion_frac > 0.0 {
        occlude(rng, w, h, &mut mask, c.occlusion_frac);
    }
    FeatureImage::from_parts(w, h, d, data, mask)
}

pub fn trial_rng(seed: u64, trial_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_index);
    rng
}

/// Synthesizes one trial; deterministic in `(cfg.seed, trial_index)`.
pub fn generate_trial(cfg: &ScenarioConfig, assets: &SceneAssets, trial_index: usize) -> Result<TrainSample> {
    let k = cfg.intrinsics;
    let mut rng = trial_rng(cfg.seed, trial_index as u64);
    let gt = sample_ground_truth(&mut rng, &assets.source, &k, assets.diameter)?;
    let clean = rasterize(&assets.source, &gt, &k)?.feature;
    let input = corrupt(&mut rng, clean, &cfg.corruption)?;
    let initial = perturb_pose(&mut rng, &gt, &cfg.perturbation, assets.diameter)?;
    Ok(TrainSample {
        input,
        truth: gt,
        initial,
        intrinsics: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::median;

    fn assets(cfg: &ScenarioConfig) -> SceneAssets {
        SceneAssets::prepare(cfg, None).unwrap()
    }

    #[test]
    fn clean_zero_perturbation_trial_is_exact() {
        let mut cfg = ScenarioConfig::standard(1, 5);
        cfg.perturbation = Perturbation { rot_deg_median: 0.0, trans_rel_median: 0.0 };
        let a = assets(&cfg);
        let s = generate_trial(&cfg, &a, 0).unwrap();
        let clean = rasterize(&a.source, &s.truth, &cfg.intrinsics).unwrap().feature;
        assert_eq!(s.input, clean);
        assert_eq!(s.initial, s.truth);
    }

    #[test]
    fn trials_are_deterministic_and_distinct() {
        let cfg = ScenarioConfig::standard(3, 8);
        let a = assets(&cfg);
        let s0 = generate_trial(&cfg, &a, 0).unwrap();
        let s0b = generate_trial(&cfg, &a, 0).unwrap();
        let s1 = generate_trial(&cfg, &a, 1).unwrap();
        assert_eq!(s0.truth, s0b.truth);
        assert_eq!(s0.input, s0b.input);
        assert_ne!(s0.truth, s1.truth);
    }

    #[test]
    fn heavy_occlusion_leaves_about_one_percent() {
        let mut cfg = ScenarioConfig::standard(1, 2);
        cfg.corruption.occlusion_frac = 0.99;
        let a = assets(&cfg);
        let s = generate_trial(&cfg, &a, 0).unwrap();
        let clean = rasterize(&a.source, &s.truth, &cfg.intrinsics).unwrap().feature;
        let kept = s.input.masked_count() as f64 / clean.masked_count() as f64;
        assert!(kept <= 0.01 + 1e-12, "kept {kept}");
        let trace = crate::optimizer::refine(&s.input, &a.refine, &s.initial, &s.intrinsics, &a.params).unwrap();
        assert!(trace.heavy_occlusion || trace.empty_overlap);
    }

    #[test]
    fn occlusion_fraction_is_met() {
        let mut cfg = ScenarioConfig::standard(1, 4);
        cfg.corruption.occlusion_frac = 0.2;
        let a = assets(&cfg);
        for t in 0..5 {
            let s = generate_trial(&cfg, &a, t).unwrap();
            let clean = rasterize(&a.source, &s.truth, &cfg.intrinsics).unwrap().feature;
            let removed = 1.0 - s.input.masked_count() as f64 / clean.masked_count() as f64;
            assert!((0.2..0.35).contains(&removed), "removed {removed}");
        }
    }

    #[test]
    fn rotation_perturbation_median_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = Perturbation { rot_deg_median: 1.28, trans_rel_median: 0.048 };
        let gt = Pose6::new(Vec3::new(0.4, 0.1, -0.3), Vec3::new(0.0, 0.0, 0.5));
        let mut rot = Vec::new();
        let mut trans = Vec::new();
        for _ in 0..10_000 {
            let q = perturb_pose(&mut rng, &gt, &p, 0.15).unwrap();
            let (r, t) = crate::metrics::rotation_translation_error(&q, &gt, 0.15).unwrap();
            rot.push(r);
            trans.push(t);
        }
        let m = median(&rot).unwrap();
        assert!((1.15..=1.41).contains(&m), "median {m}");
        let mt = median(&trans).unwrap();
        assert!((0.043..=0.053).contains(&mt), "median {mt}");
    }

    #[test]
    fn incompatible_intrinsics_exhaust_sampling() {
        let mut cfg = ScenarioConfig::standard(1, 1);
        cfg.intrinsics = CameraIntrinsics::new(260.0, 260.0, 1.0, 1.0, 3, 3).unwrap();
        let a = assets(&cfg);
        assert!(matches!(generate_trial(&cfg, &a, 0), Err(Error::Config(_))));
    }

    #[test]
    fn config_parsing_rejects_unknown_keys() {
        let good = r#"{
            "mesh": "builtin:blob",
            "intrinsics": {"fx": 260, "fy": 260, "px": 63.5, "py": 63.5, "width": 128, "height": 128},
            "n_trials": 4, "seed": 3,
            "perturbation": {"rot_deg_median": 2.0, "trans_rel_median": 0.02},
            "corruption": {"noise_sigma": 0.0, "gain_range": [1.0, 1.0], "occlusion_frac": 0.0},
            "refine": {"iterations": 10, "lambda": 0.001, "gamma": 1.0},
            "texture_source": "oracle"
        }"#;
        let cfg = ScenarioConfig::from_json(good).unwrap();
        assert_eq!(cfg.refine.to_params().unwrap().lambda.len(), 10);
        let bad = good.replace("\"seed\": 3", "\"seed\": 3, \"colour\": 1");
        assert!(matches!(ScenarioConfig::from_json(&bad), Err(Error::Config(_))));
        let ckpt = good.replace("\"oracle\"", "{\"checkpoint\": \"c.json\"}");
        let cfg = ScenarioConfig::from_json(&ckpt).unwrap();
        assert_eq!(cfg.texture_source, TextureSource::Checkpoint("c.json".into()));
        let occ = good.replace("\"occlusion_frac\": 0.0", "\"occlusion_frac\": 1.0");
        assert!(ScenarioConfig::from_json(&occ).is_err());
    }
}
