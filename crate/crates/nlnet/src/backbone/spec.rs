//! Architecture descriptions: stage layout, stem/pool geometry, inflation
//! state, and non-local insertions. A spec is pure data — checkpoints embed
//! it so a network can be rebuilt without out-of-band knowledge.

use crate::error::{Error, Result};
use crate::mask::MaskMode;
use crate::pairwise::PairwiseKind;
use crate::tape::{PoolGeom, TimePad};
use serde::{Deserialize, Serialize};

/// One residual stage. The bottleneck design fixes out = 4 * bottleneck and
/// channel counts double stage to stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub num_blocks: usize,
    pub bottleneck: usize,
    pub out_channels: usize,
    /// Spatial stride of the stage's first block (1 or 2).
    pub spatial_stride: usize,
}

/// Kernel inflation state of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inflation {
    None,
    I3d3x3x3,
    I3d3x1x1,
}

impl Inflation {
    pub fn as_str(self) -> &'static str {
        match self {
            Inflation::None => "none",
            Inflation::I3d3x3x3 => "i3d_3x3x3",
            Inflation::I3d3x1x1 => "i3d_3x1x1",
        }
    }
}

/// Per-block non-local options, minus the channel count (derived from the
/// host stage at build time).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NonLocalSettings {
    pub kind: PairwiseKind,
    pub mask: MaskMode,
    pub subsample_spatial: usize,
    pub use_bn_on_wz: bool,
    /// None means channels / 2.
    pub bottleneck: Option<usize>,
}

impl Default for NonLocalSettings {
    fn default() -> Self {
        NonLocalSettings {
            kind: PairwiseKind::EmbeddedGaussian,
            mask: MaskMode::Spacetime,
            subsample_spatial: 1,
            use_bn_on_wz: true,
            bottleneck: None,
        }
    }
}

/// A non-local block inserted right before residual block `block` of stage
/// `stage` (stage numbered 2..=5 as in res2..res5).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonLocalInsertion {
    pub stage: usize,
    pub block: usize,
    pub settings: NonLocalSettings,
}

/// Complete architecture description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub conv1_channels: usize,
    /// (t, k, k); (1,7,7) for 2D stems, (5,7,7) once inflated.
    pub conv1_kernel: [usize; 3],
    pub conv1_stride: [usize; 3],
    pub pool1: PoolGeom,
    pub pool2: Option<PoolGeom>,
    pub stages: Vec<StageSpec>,
    pub inflation: Inflation,
    /// Temporal padding of inflated kernels; zero by default, replicate for
    /// the static-frame equivalence regime.
    pub time_pad: TimePad,
    pub nonlocal: Vec<NonLocalInsertion>,
    /// Dropout rate after global average pooling.
    pub head_dropout: f64,
}

impl NetworkSpec {
    /// The reference architecture: ResNet-50-style C2D for 32x224x224 input.
    pub fn full_scale(in_channels: usize, num_classes: usize) -> Self {
        NetworkSpec {
            in_channels,
            num_classes,
            conv1_channels: 64,
            conv1_kernel: [1, 7, 7],
            conv1_stride: [2, 2, 2],
            pool1: PoolGeom {
                window: [3, 3, 3],
                stride: [2, 2, 2],
                pad: [1, 1, 1],
            },
            pool2: Some(PoolGeom {
                window: [3, 1, 1],
                stride: [2, 1, 1],
                pad: [1, 0, 0],
            }),
            stages: vec![
                stage("res2", 3, 64, 1),
                stage("res3", 4, 128, 2),
                stage("res4", 6, 256, 2),
                stage("res5", 3, 512, 2),
            ],
            inflation: Inflation::None,
            time_pad: TimePad::Zero,
            nonlocal: Vec::new(),
            head_dropout: 0.5,
        }
    }

    /// Desk-scale preset: channels / 8, blocks per stage {1,1,2,1}, sized for
    /// 8x32x32 clips. The temporal schedule keeps T=4 through res2..res5 so
    /// spacetime blocks still see a time axis, mirroring the reference
    /// network's T=4 at those stages.
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        NetworkSpec {
            in_channels,
            num_classes,
            conv1_channels: 8,
            conv1_kernel: [1, 7, 7],
            conv1_stride: [1, 2, 2],
            pool1: PoolGeom {
                window: [3, 3, 3],
                stride: [2, 2, 2],
                pad: [1, 1, 1],
            },
            pool2: None,
            stages: vec![
                stage("res2", 1, 8, 1),
                stage("res3", 1, 16, 2),
                stage("res4", 2, 32, 2),
                stage("res5", 1, 64, 2),
            ],
            inflation: Inflation::None,
            time_pad: TimePad::Zero,
            nonlocal: Vec::new(),
            head_dropout: 0.5,
        }
    }

    /// Desk preset with extra standard residual blocks in res3, sized so its
    /// total parameter count matches the desk preset carrying five-policy
    /// non-local blocks (within a few percent). The depth-vs-nonlocal
    /// control.
    pub fn desk_deeper(in_channels: usize, num_classes: usize) -> Self {
        let mut spec = Self::desk(in_channels, num_classes);
        spec.stages[1].num_blocks = 3;
        spec
    }

    /// Sub-5k-parameter configuration for exhaustive end-to-end gradient
    /// checks: every finite-difference probe re-runs the whole network.
    pub fn micro(in_channels: usize, num_classes: usize) -> Self {
        NetworkSpec {
            in_channels,
            num_classes,
            conv1_channels: 2,
            conv1_kernel: [1, 3, 3],
            conv1_stride: [1, 2, 2],
            pool1: PoolGeom {
                window: [1, 2, 2],
                stride: [1, 2, 2],
                pad: [0, 0, 0],
            },
            pool2: None,
            stages: vec![
                stage("res2", 1, 1, 1),
                stage("res3", 1, 2, 1),
                stage("res4", 1, 4, 1),
                stage("res5", 1, 8, 1),
            ],
            inflation: Inflation::None,
            time_pad: TimePad::Zero,
            nonlocal: Vec::new(),
            head_dropout: 0.5,
        }
    }

    /// Apply width/depth multipliers; scaled widths and depths must come out
    /// as integers >= 1.
    pub fn scaled(&self, width_scale: f64, depth_scale: f64) -> Result<Self> {
        let mut out = self.clone();
        out.conv1_channels = scale_int("conv1 channels", self.conv1_channels, width_scale)?;
        for s in out.stages.iter_mut() {
            s.bottleneck = scale_int(&format!("{} bottleneck", s.name), s.bottleneck, width_scale)?;
            s.out_channels = scale_int(&format!("{} out channels", s.name), s.out_channels, width_scale)?;
            s.num_blocks = scale_int(&format!("{} blocks", s.name), s.num_blocks, depth_scale)?;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("network needs at least one stage"));
        }
        let mut prev_out = None;
        for s in &self.stages {
            if s.out_channels != 4 * s.bottleneck {
                return Err(Error::config(format!(
                    "{}: bottleneck design requires out = 4*bottleneck, got {} vs {}",
                    s.name, s.out_channels, s.bottleneck
                )));
            }
            if let Some(p) = prev_out {
                if s.out_channels != 2 * p {
                    return Err(Error::config(format!(
                        "{}: channels must double per stage ({} after {})",
                        s.name, s.out_channels, p
                    )));
                }
            }
            if s.num_blocks == 0 {
                return Err(Error::config(format!("{}: needs at least one block", s.name)));
            }
            if !matches!(s.spatial_stride, 1 | 2) {
                return Err(Error::config(format!("{}: spatial stride must be 1 or 2", s.name)));
            }
            prev_out = Some(s.out_channels);
        }
        for ins in &self.nonlocal {
            let st = self.stage_by_number(ins.stage)?;
            if ins.block >= st.num_blocks {
                return Err(Error::config(format!(
                    "non-local insertion at {}[{}] but the stage has {} blocks",
                    st.name, ins.block, st.num_blocks
                )));
            }
        }
        Ok(())
    }

    pub fn stage_by_number(&self, number: usize) -> Result<&StageSpec> {
        if number < 2 || number - 2 >= self.stages.len() {
            return Err(Error::config(format!("no stage res{number}")));
        }
        Ok(&self.stages[number - 2])
    }

    /// Named output shapes (T, H, W, C) for a given input, computed without
    /// allocating any weights. Entry order: conv1, pool1, res2, pool2 (when
    /// present), res3, res4, res5.
    pub fn trace_shapes(&self, input_thwc: [usize; 4]) -> Result<Vec<(String, [usize; 4])>> {
        let [mut t, mut h, mut w, c] = input_thwc;
        if c != self.in_channels {
            return Err(Error::config(format!(
                "input has {c} channels, spec wants {}",
                self.in_channels
            )));
        }
        let mut out = Vec::new();
        let outdim = |l: usize, k: usize, s: usize, p: usize, what: &str| -> Result<usize> {
            if k > l + 2 * p {
                return Err(Error::shape(
                    "trace_shapes",
                    format!("{what}: kernel {k} larger than padded extent {}", l + 2 * p),
                ));
            }
            Ok((l + 2 * p - k) / s + 1)
        };
        let k1 = self.conv1_kernel;
        t = outdim(t, k1[0], self.conv1_stride[0], k1[0] / 2, "conv1")?;
        h = outdim(h, k1[1], self.conv1_stride[1], k1[1] / 2, "conv1")?;
        w = outdim(w, k1[2], self.conv1_stride[2], k1[2] / 2, "conv1")?;
        out.push(("conv1".to_string(), [t, h, w, self.conv1_channels]));
        t = outdim(t, self.pool1.window[0], self.pool1.stride[0], self.pool1.pad[0], "pool1")?;
        h = outdim(h, self.pool1.window[1], self.pool1.stride[1], self.pool1.pad[1], "pool1")?;
        w = outdim(w, self.pool1.window[2], self.pool1.stride[2], self.pool1.pad[2], "pool1")?;
        out.push(("pool1".to_string(), [t, h, w, self.conv1_channels]));
        for (i, s) in self.stages.iter().enumerate() {
            let st = s.spatial_stride;
            h = outdim(h, 1, st, 0, &s.name)?;
            w = outdim(w, 1, st, 0, &s.name)?;
            out.push((s.name.clone(), [t, h, w, s.out_channels]));
            if i == 0 {
                if let Some(p2) = self.pool2 {
                    t = outdim(t, p2.window[0], p2.stride[0], p2.pad[0], "pool2")?;
                    h = outdim(h, p2.window[1], p2.stride[1], p2.pad[1], "pool2")?;
                    w = outdim(w, p2.window[2], p2.stride[2], p2.pad[2], "pool2")?;
                    out.push(("pool2".to_string(), [t, h, w, s.out_channels]));
                }
            }
        }
        Ok(out)
    }
}

fn stage(name: &str, num_blocks: usize, bottleneck: usize, spatial_stride: usize) -> StageSpec {
    StageSpec {
        name: name.to_string(),
        num_blocks,
        bottleneck,
        out_channels: 4 * bottleneck,
        spatial_stride,
    }
}

fn scale_int(what: &str, v: usize, scale: f64) -> Result<usize> {
    let scaled = v as f64 * scale;
    let rounded = scaled.round();
    if (scaled - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::config(format!(
            "{what}: {v} * {scale} = {scaled} is not a positive integer"
        )));
    }
    Ok(rounded as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_trace_matches_reference_table() {
        let spec = NetworkSpec::full_scale(3, 400);
        let trace = spec.trace_shapes([32, 224, 224, 3]).unwrap();
        let find = |n: &str| trace.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(find("conv1"), [16, 112, 112, 64]);
        assert_eq!(find("pool1"), [8, 56, 56, 64]);
        assert_eq!(find("res2"), [8, 56, 56, 256]);
        assert_eq!(find("pool2"), [4, 56, 56, 256]);
        assert_eq!(find("res3"), [4, 28, 28, 512]);
        assert_eq!(find("res4"), [4, 14, 14, 1024]);
        assert_eq!(find("res5"), [4, 7, 7, 2048]);
    }

    #[test]
    fn scaling_rejects_non_integer_widths() {
        let spec = NetworkSpec::full_scale(3, 10);
        assert!(spec.scaled(1.0 / 7.0, 1.0).is_err());
        assert!(spec.scaled(0.125, 1.0).is_ok());
    }

    #[test]
    fn validate_rejects_broken_bottleneck_ratio() {
        let mut spec = NetworkSpec::desk(1, 2);
        spec.stages[1].out_channels += 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn desk_preset_is_valid_and_keeps_time() {
        let spec = NetworkSpec::desk(1, 2);
        spec.validate().unwrap();
        let trace = spec.trace_shapes([8, 32, 32, 1]).unwrap();
        let find = |n: &str| trace.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(find("res2"), [4, 8, 8, 32]);
        assert_eq!(find("res3"), [4, 4, 4, 64]);
        assert_eq!(find("res4"), [4, 2, 2, 128]);
        assert_eq!(find("res5"), [4, 1, 1, 256]);
    }
}
