//! Shared-weight five-stage convolutional feature pyramid.

use tdstereo_tensor::{ConvSpec, Var};

use crate::error::{invalid, Result};
use crate::params::{Conv, Init, ParamBuilder, Tape};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureChannels {
    pub unary: usize,
    pub quarter: usize,
    pub eighth: usize,
    pub sixteenth: usize,
}

impl Default for FeatureChannels {
    fn default() -> Self {
        Self {
            unary: 16,
            quarter: 32,
            eighth: 48,
            sixteenth: 64,
        }
    }
}

/// Feature maps of one image; handles into the tape that produced them.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMaps {
    pub unary: Var,
    pub quarter: Var,
    pub eighth: Var,
    pub sixteenth: Var,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    conv: Conv,
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub channels: FeatureChannels,
    stages: Vec<Stage>,
}

impl FeatureNet {
    pub fn new(pb: &mut ParamBuilder, channels: FeatureChannels) -> Result<Self> {
        let half = channels.unary;
        let widths = [
            (3, channels.unary, 1),
            (channels.unary, half, 2),
            (half, channels.quarter, 2),
            (channels.quarter, channels.eighth, 2),
            (channels.eighth, channels.sixteenth, 2),
        ];
        let he = Init::He { slope: LEAKY_SLOPE };
        let mut stages = Vec::new();
        for (i, &(cin, cout, stride)) in widths.iter().enumerate() {
            let mut s = pb.scope(&format!("stage{}", i + 1));
            let down = s.conv(
                "down",
                cin,
                cout,
                &[3, 3],
                ConvSpec::d2().stride(stride).padding(1),
                he.clone(),
                Some(Init::Zeros),
            )?;
            let conv = s.conv(
                "conv",
                cout,
                cout,
                &[3, 3],
                ConvSpec::d2().padding(1),
                he.clone(),
                Some(Init::Zeros),
            )?;
            stages.push(Stage { down, conv });
        }
        Ok(Self { channels, stages })
    }

    pub fn extract_one(&self, tape: &mut Tape, image: Var) -> Result<FeatureMaps> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(invalid(format!("image must be 3×H×W, got {shape:?}")));
        }
        if shape[1] % 16 != 0 || shape[2] % 16 != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(invalid(format!(
                "image extents {}×{} must be non-zero multiples of 16; pad the input first",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(5);
        for stage in &self.stages {
            x = stage.down.forward_leaky(tape, x, LEAKY_SLOPE)?;
            x = stage.conv.forward_leaky(tape, x, LEAKY_SLOPE)?;
            outs.push(x);
        }
        Ok(FeatureMaps {
            unary: outs[0],
            quarter: outs[2],
            eighth: outs[3],
            sixteenth: outs[4],
        })
    }

    /// Runs the same weights over both images.
    pub fn extract(&self, tape: &mut Tape, left: Var, right: Var) -> Result<(FeatureMaps, FeatureMaps)> {
        let l = self.extract_one(tape, left)?;
        let r = self.extract_one(tape, right)?;
        Ok((l, r))
    }
}
