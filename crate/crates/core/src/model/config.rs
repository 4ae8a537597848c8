use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{AttnConfig, SpatialMixKind};
use crate::error::{config_err, Result, SbtError};
use crate::tensor::PadKind;

/// `Conv(k, c, s)` patch embedding of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch_embed: PatchConfig,
    pub depth: usize,
    pub heads: usize,
    pub reduction: usize,
    /// 1-based indices of the cross-attention blocks within the stage.
    #[serde(default)]
    pub ca_positions: Vec<usize>,
}

impl StageConfig {
    pub fn new(kernel: usize, channels: usize, stride: usize, depth: usize, heads: usize, reduction: usize) -> Self {
        Self {
            patch_embed: PatchConfig { kernel, channels, stride },
            depth,
            heads,
            reduction,
            ca_positions: Vec::new(),
        }
    }

    pub fn with_ca(mut self, positions: &[usize]) -> Self {
        self.ca_positions = positions.to_vec();
        self
    }

    pub fn attn(&self) -> AttnConfig {
        AttnConfig { heads: self.heads, reduction: self.reduction, dim: self.patch_embed.channels }
    }

    pub fn is_cross(&self, block: usize) -> bool {
        self.ca_positions.contains(&(block + 1))
    }
}

/// How the search features reach the prediction heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Heads read the fused search features directly.
    #[default]
    Direct,
    /// Siamese baseline: depthwise correlation of the final template and
    /// search features, layer-normalized, then the heads.
    DwCorr,
}

fn default_head_depth() -> usize {
    2
}

/// Full architectural description. With `classes` set the model is an image
/// classifier (global average pool + linear) instead of a tracker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub template_size: usize,
    pub search_size: usize,
    #[serde(default = "default_head_depth")]
    pub head_depth: usize,
    #[serde(default)]
    pub padding: PadKind,
    #[serde(default)]
    pub head_spatial: SpatialMixKind,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub classes: Option<usize>,
    pub stages: Vec<StageConfig>,
}

impl ModelConfig {
    /// Desk-scale tracker used by the tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            template_size: 64,
            search_size: 128,
            head_depth: 2,
            padding: PadKind::Zeros,
            head_spatial: SpatialMixKind::Dense,
            head: HeadKind::Direct,
            classes: None,
            stages: vec![
                StageConfig::new(7, 16, 4, 1, 1, 4),
                StageConfig::new(3, 32, 2, 1, 2, 2),
                StageConfig::new(3, 64, 1, 4, 4, 1).with_ca(&[2, 4]),
            ],
        }
    }

    fn full_scale(name: &str, dims: [usize; 3], depths: [usize; 3], ca: &[usize]) -> Self {
        Self {
            name: name.into(),
            template_size: 128,
            search_size: 256,
            head_depth: 2,
            padding: PadKind::Zeros,
            head_spatial: SpatialMixKind::Dense,
            head: HeadKind::Direct,
            classes: None,
            stages: vec![
                StageConfig::new(7, dims[0], 4, depths[0], 1, 8),
                StageConfig::new(3, dims[1], 2, depths[1], 2, 4),
                StageConfig::new(3, dims[2], 1, depths[2], 5, 2).with_ca(ca),
            ],
        }
    }

    pub fn light() -> Self {
        Self::full_scale("light", [32, 64, 160], [2, 2, 6], &[2, 4, 6])
    }

    pub fn small() -> Self {
        Self::full_scale("small", [64, 128, 320], [2, 2, 6], &[2, 4, 6])
    }

    pub fn base() -> Self {
        Self::full_scale("base", [64, 128, 320], [3, 4, 10], &[2, 4, 6, 8, 10])
    }

    pub fn large() -> Self {
        Self::full_scale("large", [64, 128, 320], [3, 4, 18], &[6, 8, 10, 12, 14, 16, 18])
    }

    /// Four-stage classifier sharing this tracker's first three stages:
    /// cross-attention removed, `stage4` appended, square `image_size` input.
    pub fn classifier(&self, stage4: StageConfig, classes: usize, image_size: usize) -> Self {
        let mut stages = self.stages.clone();
        stages.iter_mut().for_each(|s| s.ca_positions.clear());
        stages.push(stage4);
        Self {
            name: format!("{}-cls", self.name),
            template_size: image_size,
            search_size: image_size,
            classes: Some(classes),
            stages,
            ..self.clone()
        }
    }

    /// Full-scale four-stage classifier: stage 4 is `Conv(3, 256|512, 2)`
    /// with two eight-head `r = 1` blocks, on 224×224 images.
    pub fn full_classifier(&self, classes: usize) -> Self {
        let c = if self.stages[2].patch_embed.channels <= 160 { 256 } else { 512 };
        self.classifier(StageConfig::new(3, c, 2, 2, 8, 1), classes, 224)
    }

    /// Desk-scale four-stage classifier on 32×32 images.
    pub fn tiny_classifier(classes: usize) -> Self {
        Self::tiny().classifier(StageConfig::new(3, 128, 2, 1, 4, 1), classes, 32)
    }

    /// Circular padding, `r = 1` everywhere and circulant spatial mixing in
    /// the heads: the configuration under which the tracker commutes with
    /// circular shifts of the search image.
    pub fn equivariant(mut self) -> Self {
        self.padding = PadKind::Circular;
        self.head_spatial = SpatialMixKind::Circulant;
        for s in &mut self.stages {
            s.reduction = 1;
        }
        self
    }

    pub fn with_padding(mut self, padding: PadKind) -> Self {
        self.padding = padding;
        self
    }

    /// Pure two-stream Siamese encoder with a depthwise-correlation head.
    pub fn siamese_baseline(mut self) -> Self {
        self.stages.iter_mut().for_each(|s| s.ca_positions.clear());
        self.head = HeadKind::DwCorr;
        self.name = format!("{}-dwcorr", self.name);
        self
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_embed.stride).product()
    }

    /// Side of the cls/reg maps.
    pub fn score_size(&self) -> usize {
        self.search_size / self.total_stride()
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.total_stride()
    }

    pub fn is_classifier(&self) -> bool {
        self.classes.is_some()
    }

    pub fn has_cross_attention(&self) -> bool {
        self.stages.iter().any(|s| !s.ca_positions.is_empty())
    }

    /// `(stage, block)` of the earliest cross-attention block, 0-based.
    pub fn first_cross(&self) -> Option<(usize, usize)> {
        self.stages
            .iter()
            .enumerate()
            .find_map(|(i, s)| s.ca_positions.iter().min().map(|&b| (i, b - 1)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config_err!("no stages"));
        }
        if self.template_size == 0 || self.search_size == 0 {
            return Err(config_err!("image sizes must be positive"));
        }
        let mut sizes = [self.template_size, self.search_size];
        for (i, s) in self.stages.iter().enumerate() {
            let pe = &s.patch_embed;
            if !matches!(pe.stride, 1 | 2 | 4) {
                return Err(config_err!("stage {}: stride {} not in {{1,2,4}}", i + 1, pe.stride));
            }
            if pe.kernel % 2 == 0 {
                return Err(config_err!("stage {}: patch kernel {} must be odd", i + 1, pe.kernel));
            }
            if s.depth == 0 {
                return Err(config_err!("stage {}: depth must be positive", i + 1));
            }
            s.attn().validate().map_err(|e| config_err!("stage {}: {e}", i + 1))?;
            if let Some(&p) = s.ca_positions.iter().find(|&&p| p == 0 || p > s.depth) {
                return Err(config_err!("stage {}: cross position {p} outside 1..={}", i + 1, s.depth));
            }
            for size in &mut sizes {
                if *size % pe.stride != 0 {
                    return Err(config_err!("stage {}: extent {} not divisible by stride {}", i + 1, size, pe.stride));
                }
                *size /= pe.stride;
                if *size % s.reduction != 0 {
                    return Err(config_err!("stage {}: grid {} not divisible by reduction {}", i + 1, size, s.reduction));
                }
            }
        }
        if self.is_classifier() {
            if self.classes == Some(0) {
                return Err(config_err!("classifier needs at least one class"));
            }
            if self.has_cross_attention() {
                return Err(config_err!("classifier cannot contain cross-attention blocks"));
            }
        } else {
            if self.head_depth == 0 {
                return Err(config_err!("head depth must be positive"));
            }
            if self.head == HeadKind::DwCorr && self.template_grid() > self.score_size() {
                return Err(config_err!("template grid larger than search grid"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml())?)
    }
}

/// Named configuration presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Light,
    Small,
    Base,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Tiny, Preset::Light, Preset::Small, Preset::Base, Preset::Large];

    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Light => ModelConfig::light(),
            Preset::Small => ModelConfig::small(),
            Preset::Base => ModelConfig::base(),
            Preset::Large => ModelConfig::large(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::Tiny => "tiny",
            Preset::Light => "light",
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Large => "large",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = SbtError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| config_err!("unknown preset {s:?} (tiny, light, small, base, large)"))
    }
}
