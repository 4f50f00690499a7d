//! The command-conditioned driving policy: a shared convolutional backbone,
//! RoI pooling over the fixed region grid, one attention head plus dense
//! regressor per high-level command, and a steering output.

mod check;
mod model;

pub use check::{model_gradient_check, ModelGradCheck};
pub use model::{Batch, BatchOutput, ForwardTrace, GroupOutput, HeadParams, PassStats, PolicyModel};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::roi::{GridConfig, RegionSpec};
use crate::tensor::kernels::conv_out_extent;

/// High-level navigation command; the integer encoding is stable across
/// datasets, checkpoints and benchmark logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum HighLevelCommand {
    FollowLane = 0,
    GoStraight = 1,
    TurnLeft = 2,
    TurnRight = 3,
}

impl HighLevelCommand {
    pub const ALL: [HighLevelCommand; 4] = [
        HighLevelCommand::FollowLane,
        HighLevelCommand::GoStraight,
        HighLevelCommand::TurnLeft,
        HighLevelCommand::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(HighLevelCommand::FollowLane),
            1 => Ok(HighLevelCommand::GoStraight),
            2 => Ok(HighLevelCommand::TurnLeft),
            3 => Ok(HighLevelCommand::TurnRight),
            _ => Err(Error::Contract(format!("unknown command code {i}"))),
        }
    }

    pub fn is_turn(self) -> bool {
        matches!(self, HighLevelCommand::TurnLeft | HighLevelCommand::TurnRight)
    }

    pub fn name(self) -> &'static str {
        match self {
            HighLevelCommand::FollowLane => "follow_lane",
            HighLevelCommand::GoStraight => "go_straight",
            HighLevelCommand::TurnLeft => "turn_left",
            HighLevelCommand::TurnRight => "turn_right",
        }
    }
}

impl From<HighLevelCommand> for u8 {
    fn from(c: HighLevelCommand) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for HighLevelCommand {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        HighLevelCommand::from_index(v)
    }
}

impl fmt::Display for HighLevelCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HighLevelCommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "follow_lane" | "follow" => Ok(HighLevelCommand::FollowLane),
            "go_straight" | "straight" => Ok(HighLevelCommand::GoStraight),
            "turn_left" | "left" => Ok(HighLevelCommand::TurnLeft),
            "turn_right" | "right" => Ok(HighLevelCommand::TurnRight),
            other => other
                .parse::<u8>()
                .map_err(|_| Error::Config(format!("unknown command '{other}'")))
                .and_then(HighLevelCommand::from_index),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    FullAttention,
    NoAttention,
    IndependentRoi,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::FullAttention => "full_attention",
            Variant::NoAttention => "no_attention",
            Variant::IndependentRoi => "independent_roi",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_attention" | "full" => Ok(Variant::FullAttention),
            "no_attention" | "noatt" => Ok(Variant::NoAttention),
            "independent_roi" | "independent" => Ok(Variant::IndependentRoi),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Layer list of the fully convolutional backbone (valid padding, relu).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        let l = |kernel, stride, channels| ConvLayerSpec { kernel, stride, channels };
        BackboneSpec { layers: vec![l(5, 2, 24), l(5, 2, 36), l(5, 2, 48), l(3, 1, 64), l(3, 1, 64)] }
    }
}

impl BackboneSpec {
    /// `(width, height, channels)` after each layer for a `width × height` input.
    pub fn layer_dims(&self, width: usize, height: usize) -> Result<Vec<(usize, usize, usize)>> {
        if self.layers.is_empty() {
            bail!(Config, "backbone has no layers");
        }
        let (mut w, mut h) = (width, height);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 {
                bail!(Config, "layer {} has zero stride", i + 1);
            }
            match (conv_out_extent(w, l.kernel, l.stride), conv_out_extent(h, l.kernel, l.stride)) {
                (Some(nw), Some(nh)) => {
                    w = nw;
                    h = nh;
                }
                _ => bail!(Geometry, "layer {} kernel {} does not fit a {}x{} input", i + 1, l.kernel, w, h),
            }
            out.push((w, h, l.channels));
        }
        Ok(out)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(width, height)` of input frames.
    pub input: (usize, usize),
    pub variant: Variant,
    pub grid: GridConfig,
    /// Explicit region list used instead of the generated grid.
    #[serde(default)]
    pub regions: Option<Vec<RegionSpec>>,
    pub backbone: BackboneSpec,
    pub dense: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: (600, 264),
            variant: Variant::FullAttention,
            grid: GridConfig::default(),
            regions: None,
            backbone: BackboneSpec::default(),
            dense: vec![512, 128, 50, 10],
        }
    }
}

impl ModelConfig {
    /// Desk-scale resolution used for training on a single CPU core.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig { input: DESK_INPUT, variant, ..ModelConfig::default() }
    }
}

pub const DESK_INPUT: (usize, usize) = (128, 72);
