//! Model configuration, block-sequence parsing and shape propagation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ldm::upsampled_size;

/// One token of a step's block sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// Back-project image features onto flat layers (initialization only).
    Bp,
    /// Render, compare and back-project update features.
    U,
    /// Halve the layer count.
    Lc,
    /// One-to-many attention with the given head count; starts a fusion block.
    A(usize),
    /// Residual conv MLP inside the current fusion block.
    C,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Bp => write!(f, "Bp"),
            Block::U => write!(f, "U"),
            Block::Lc => write!(f, "Lc"),
            Block::A(h) => write!(f, "A{h}"),
            Block::C => write!(f, "C"),
        }
    }
}

impl FromStr for Block {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "Bp" => Ok(Block::Bp),
            "U" => Ok(Block::U),
            "Lc" => Ok(Block::Lc),
            "C" => Ok(Block::C),
            t if t.starts_with('A') => match t[1..].parse::<usize>() {
                Ok(h) if h >= 1 => Ok(Block::A(h)),
                _ => Err(format!("bad attention token {t:?}")),
            },
            t => Err(format!("unknown block token {t:?}")),
        }
    }
}

/// Parses a comma separated block sequence such as `"Lc,U,A2,C,A2,C"`.
pub fn parse_blocks(s: &str) -> std::result::Result<Vec<Block>, String> {
    s.split(',').map(str::parse).collect()
}

pub fn format_blocks(blocks: &[Block]) -> String {
    blocks.iter().map(Block::to_string).collect::<Vec<_>>().join(",")
}

/// A fusion block: attention heads and the number of conv MLPs after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionSpec {
    pub heads: usize,
    pub convs: usize,
}

/// One Initialize or Update & Fuse step. Dimensions are the step's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub layers: usize,
    pub height: usize,
    pub width: usize,
    /// Pyramid level (1 = half the encoder input resolution).
    pub level: usize,
    pub blocks: String,
}

/// Parsed step: collapse count, entry kind and fusion blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub collapses: usize,
    pub initialize: bool,
    pub fusion: Vec<FusionSpec>,
}

impl StepConfig {
    pub fn new(layers: usize, height: usize, width: usize, level: usize, blocks: &str) -> Self {
        Self {
            layers,
            height,
            width,
            level,
            blocks: blocks.to_string(),
        }
    }

    /// Checks token order: `Lc* (Bp|U) (A C+)*`.
    pub fn plan(&self) -> std::result::Result<StepPlan, String> {
        let blocks = parse_blocks(&self.blocks)?;
        let mut it = blocks.iter().peekable();
        let mut collapses = 0;
        while it.peek() == Some(&&Block::Lc) {
            collapses += 1;
            it.next();
        }
        let initialize = match it.next() {
            Some(Block::Bp) => true,
            Some(Block::U) => false,
            Some(b) => return Err(format!("expected Bp or U after layer collapses, found {b}")),
            None => return Err("empty block sequence".into()),
        };
        let mut fusion: Vec<FusionSpec> = Vec::new();
        for b in it {
            match *b {
                Block::A(heads) => fusion.push(FusionSpec { heads, convs: 0 }),
                Block::C => match fusion.last_mut() {
                    Some(f) => f.convs += 1,
                    None => return Err("C before any attention block".into()),
                },
                Block::Lc => return Err("Lc must prefix the step".into()),
                Block::Bp | Block::U => return Err("exactly one of Bp or U per step".into()),
            }
        }
        if let Some(f) = fusion.iter().find(|f| f.convs == 0) {
            return Err(format!("attention block A{} has no conv after it", f.heads));
        }
        if initialize && collapses > 0 {
            return Err("the initialize step cannot collapse layers".into());
        }
        Ok(StepPlan {
            collapses,
            initialize,
            fusion,
        })
    }
}

/// Switches that remove parts of the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Replace attention keys inside the fusion blocks by zeros.
    pub zero_keys: bool,
    pub zero_ray_encoding: bool,
    /// Replace the intermediate rendered image by zeros.
    pub zero_rendered: bool,
    /// Decode RGB directly from the feature volume instead of blending input images.
    pub direct_rgb: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub views: usize,
    /// Encoder input `[height, width]`.
    pub image: [usize; 2],
    pub levels: usize,
    #[serde(default = "default_blocks")]
    pub encoder_blocks: usize,
    #[serde(default = "default_blocks")]
    pub update_blocks: usize,
    #[serde(default = "default_octaves")]
    pub ray_octaves: usize,
    pub upsample: f64,
    /// Final LDM `[height, width]`.
    pub output: [usize; 2],
    pub near: f64,
    pub far: f64,
    pub steps: Vec<StepConfig>,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_blocks() -> usize {
    2
}

fn default_octaves() -> usize {
    8
}

/// Dimensions entering and leaving one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepShape {
    /// `(L, h, w, C)`
    pub input: (usize, usize, usize, usize),
    /// Encoded image features `(h, w, C)`.
    pub features: (usize, usize, usize),
    pub output: (usize, usize, usize, usize),
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the demo commands.
    pub fn nano() -> Self {
        Self {
            channels: 8,
            views: 4,
            image: [64, 64],
            levels: 3,
            encoder_blocks: 2,
            update_blocks: 2,
            ray_octaves: 8,
            upsample: 2.0,
            output: [64, 64],
            near: 2.0,
            far: 12.0,
            steps: vec![
                StepConfig::new(8, 8, 8, 3, "Bp,A2,C"),
                StepConfig::new(8, 8, 8, 3, "U,A2,C,C"),
                StepConfig::new(8, 16, 16, 2, "U,A2,C"),
                StepConfig::new(4, 32, 32, 1, "Lc,U,A1,C"),
            ],
            ablation: Ablation::default(),
        }
    }

    /// The full-size model (1080p output).
    pub fn full() -> Self {
        let big = "A4,C,C,A4,C,C,A4,C,C";
        Self {
            channels: 32,
            views: 8,
            image: [576, 960],
            levels: 4,
            encoder_blocks: 2,
            update_blocks: 2,
            ray_octaves: 8,
            upsample: 3.75,
            output: [1080, 1920],
            near: 1.0,
            far: 100.0,
            steps: vec![
                StepConfig::new(24, 36, 64, 4, &format!("Bp,{big}")),
                StepConfig::new(24, 36, 64, 4, &format!("U,{big}")),
                StepConfig::new(24, 72, 128, 3, &format!("U,{big}")),
                StepConfig::new(24, 72, 128, 3, "U,A4,C,A4,C"),
                StepConfig::new(12, 144, 256, 2, "Lc,U,A2,C,A2,C"),
                StepConfig::new(6, 288, 512, 1, "Lc,U,A1,C,A1,C"),
            ],
            ablation: Ablation::default(),
        }
    }

    /// The larger variant: more layers and a smaller final upsample.
    pub fn full_plus() -> Self {
        let big = "A4,C,C,A4,C,C,A4,C,C";
        Self {
            image: [864, 1440],
            upsample: 2.5,
            steps: vec![
                StepConfig::new(32, 54, 96, 4, &format!("Bp,{big}")),
                StepConfig::new(32, 54, 96, 4, &format!("U,{big}")),
                StepConfig::new(32, 108, 192, 3, &format!("U,{big}")),
                StepConfig::new(32, 108, 192, 3, "U,A4,C,A4,C"),
                StepConfig::new(16, 216, 384, 2, "Lc,U,A2,C,A2,C"),
                StepConfig::new(8, 432, 768, 1, "Lc,U,A1,C,A1,C"),
            ],
            ..Self::full()
        }
    }

    /// Encoder feature size at pyramid level `k` (level 0 is the input).
    pub fn level_size(&self, k: usize) -> (usize, usize) {
        (self.image[0] >> k, self.image[1] >> k)
    }

    /// Channels of the raw (unprojected) ray encoding.
    pub fn ray_dim(&self) -> usize {
        4 * self.ray_octaves
    }

    pub fn plans(&self) -> Result<Vec<StepPlan>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| s.plan().map_err(|m| Error::schema(format!("steps[{i}].blocks"), m)))
            .collect()
    }

    /// Validates the configuration and returns every step's dimensions.
    pub fn shapes(&self) -> Result<Vec<StepShape>> {
        let c = self.channels;
        let pos = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::schema(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        pos("channels", c)?;
        pos("views", self.views)?;
        pos("levels", self.levels)?;
        pos("ray_octaves", self.ray_octaves)?;
        if self.ray_octaves > 30 {
            return Err(Error::schema("ray_octaves", "at most 30"));
        }
        let div = 1usize << self.levels;
        if self.image.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::schema(
                "image",
                format!("{:?} must be positive multiples of 2^levels = {div}", self.image),
            ));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::schema("far", format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        if !(self.upsample >= 1.0 && self.upsample.is_finite()) {
            return Err(Error::schema("upsample", format!("must be >= 1, got {}", self.upsample)));
        }
        if self.steps.is_empty() {
            return Err(Error::schema("steps", "at least the initialize step is required"));
        }
        let plans = self.plans()?;
        let mut shapes = Vec::with_capacity(plans.len());
        let mut prev = (1, 1, 1, c);
        for (i, (s, p)) in self.steps.iter().zip(&plans).enumerate() {
            let field = |f: &str| format!("steps[{i}].{f}");
            pos(&field("layers"), s.layers)?;
            pos(&field("height"), s.height)?;
            pos(&field("width"), s.width)?;
            if p.initialize != (i == 0) {
                return Err(Error::schema(
                    field("blocks"),
                    "Bp must start the first step and only the first step",
                ));
            }
            if s.level == 0 || s.level > self.levels {
                return Err(Error::schema(field("level"), format!("must be in 1..={}", self.levels)));
            }
            if i > 0 {
                if s.layers << p.collapses != prev.0 {
                    return Err(Error::schema(
                        field("layers"),
                        format!(
                            "{} input layers with {} collapse(s) cannot give {}",
                            prev.0, p.collapses, s.layers
                        ),
                    ));
                }
                if s.height < prev.1 || s.width < prev.2 {
                    return Err(Error::schema(field("height"), "resolution must not decrease"));
                }
            }
            let (fh, fw) = self.level_size(s.level);
            let out = (s.layers, s.height, s.width, c);
            shapes.push(StepShape {
                input: prev,
                features: (fh, fw, c),
                output: out,
            });
            prev = out;
        }
        let last = self.steps.last().unwrap();
        let (oh, ow) = upsampled_size(last.height, last.width, self.upsample);
        if [oh, ow] != self.output {
            return Err(Error::schema(
                "output",
                format!(
                    "{:?} but {}x{} upsampled by {} gives [{oh}, {ow}]",
                    self.output, last.height, last.width, self.upsample
                ),
            ));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::schema("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Final layer count.
    pub fn output_layers(&self) -> usize {
        self.steps.last().map_or(0, |s| s.layers)
    }
}
