//! Pipeline configuration (TOML) and seed derivation.

use std::path::{Path, PathBuf};

use color3d_core::augment::AugmentConfig;
use color3d_core::colorizer::{ColorizerTrainConfig, NetConfig};
use color3d_core::reconstruct::{InitConfig, ReconstructConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::SynthSpec;

/// Default polynomial degree of the deformation for dynamic scenes.
pub const DEFAULT_DEFORMATION_DEGREE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SceneType {
    #[default]
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory: `cameras.txt`, `mono/`, optional `points.txt`.
    pub input: PathBuf,
    /// Root of every stage output.
    pub output: PathBuf,
    /// Colorized key view (PNG or planar Lab); `{id}` expands to the key view id.
    pub key_view_color: Option<String>,
    /// Generative-augmentation manifest.
    pub manifest: Option<PathBuf>,
    /// Seed points for scene initialization; defaults to `<input>/points.txt`.
    pub init_points: Option<PathBuf>,
    /// Embedding file for `keyview.provider = "file"`.
    pub embeddings: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input: PathBuf::from("data"),
            output: PathBuf::from("out"),
            key_view_color: None,
            manifest: None,
            init_points: None,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Builtin,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyviewConfig {
    pub provider: ProviderKind,
    /// Count each view's similarity to itself in the entropy.
    pub include_self: bool,
}

impl Default for KeyviewConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Builtin,
            include_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ColorizerSection {
    pub net: NetConfig,
    pub train: ColorizerTrainConfig,
}

/// Uniform random seed points, used when no point file is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomInit {
    pub count: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for RandomInit {
    fn default() -> Self {
        Self {
            count: 2000,
            min: [-1.5; 3],
            max: [1.5; 3],
        }
    }
}

/// Simulated per-image colorization used as a consistency reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Training steps of each per-view colorizer.
    pub iterations: usize,
    /// Each view's colorization is the truth rotated in hue by up to this many degrees.
    pub max_hue_shift_deg: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            max_hue_shift_deg: 90.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    pub scene_type: SceneType,
    /// Worker threads for tile rendering (default: all cores).
    pub threads: Option<usize>,
    pub paths: Paths,
    pub keyview: KeyviewConfig,
    pub augment: AugmentConfig,
    pub colorizer: ColorizerSection,
    pub init: InitConfig,
    pub random_init: RandomInit,
    pub reconstruct: ReconstructConfig,
    pub synth: SynthSpec,
    pub baseline: BaselineConfig,
}

/// 64-bit seed for a module: first 8 bytes of SHA-256(seed_le || tag).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        resolve(base, &mut p.input);
        resolve(base, &mut p.output);
        for o in [&mut p.manifest, &mut p.init_points, &mut p.embeddings].into_iter().flatten() {
            resolve(base, o);
        }
        if let Some(k) = &mut p.key_view_color {
            if Path::new(k.as_str()).is_relative() {
                *k = base.join(k.as_str()).to_string_lossy().into_owned();
            }
        }
    }

    /// Copy with every module seed derived from the master seed and the
    /// deformation degree matching the scene type.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.augment.seed = derive_seed(s, "augment");
        c.colorizer.net.seed = derive_seed(s, "colorizer.net");
        c.colorizer.train.seed = derive_seed(s, "colorizer.train");
        c.reconstruct.seed = derive_seed(s, "reconstruct");
        c.synth.seed = derive_seed(s, "synth");
        c.init.deformation_degree = match self.scene_type {
            SceneType::Static => None,
            SceneType::Dynamic => Some(self.init.deformation_degree.unwrap_or(DEFAULT_DEFORMATION_DEGREE)),
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.colorizer.net.validate()?;
        self.colorizer.train.validate()?;
        self.reconstruct.validate()?;
        self.synth.validate()?;
        if self.scene_type == SceneType::Static && self.init.deformation_degree.is_some() {
            return Err(Error::Config("init.deformation_degree is set but scene_type is static".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.random_init.count == 0 {
            return Err(Error::Config("random_init.count must be positive".into()));
        }
        if self.keyview.provider == ProviderKind::File && self.paths.embeddings.is_none() {
            return Err(Error::Config("keyview.provider = \"file\" needs paths.embeddings".into()));
        }
        if !(self.baseline.max_hue_shift_deg >= 0.0) || self.baseline.iterations == 0 {
            return Err(Error::Config("baseline needs iterations > 0 and a non-negative hue shift".into()));
        }
        Ok(())
    }

    /// Fails unless the dataset directory exists.
    pub fn require_input(&self) -> Result<()> {
        if !self.paths.input.is_dir() {
            return Err(Error::Missing(format!("input directory {} does not exist", self.paths.input.display())));
        }
        Ok(())
    }
}
