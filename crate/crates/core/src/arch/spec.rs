//! Declarative network description and its `key=value` manifest format.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the outputs of the T streams of a block are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// One channel-wise gate shared by all streams.
    UnifiedAg,
    /// One channel-wise gate per stream.
    SeparateAgs,
    /// Shared hidden layer, one scalar output per stream.
    StreamwiseAg,
    /// Learned per-channel logits, independent of the input.
    StaticGate,
    Add,
    /// Channel concatenation followed by a linear 1×1 projection.
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 6] = [
        Fusion::UnifiedAg,
        Fusion::SeparateAgs,
        Fusion::StreamwiseAg,
        Fusion::StaticGate,
        Fusion::Add,
        Fusion::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::UnifiedAg => "unified_ag",
            Fusion::SeparateAgs => "separate_ags",
            Fusion::StreamwiseAg => "streamwise_ag",
            Fusion::StaticGate => "static_gate",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(
            self,
            Fusion::UnifiedAg | Fusion::SeparateAgs | Fusion::StreamwiseAg | Fusion::StaticGate
        )
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion '{}'", s)))
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    /// Stream t stacks t layers.
    Incremental,
    /// Every stream stacks `uniform_depth` layers.
    Uniform,
}

impl FromStr for DepthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incremental" => Ok(DepthMode::Incremental),
            "uniform" => Ok(DepthMode::Uniform),
            _ => Err(Error::invalid(format!("unknown depth_mode '{}'", s))),
        }
    }
}

impl fmt::Display for DepthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthMode::Incremental => "incremental",
            DepthMode::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Pointwise then depthwise 3×3.
    Lite,
    /// Standard dense 3×3.
    Full,
}

impl FromStr for ConvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(ConvKind::Lite),
            "full" => Ok(ConvKind::Full),
            _ => Err(Error::invalid(format!("unknown conv_kind '{}'", s))),
        }
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvKind::Lite => "lite",
            ConvKind::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Widths of conv1, conv2, conv3, conv4 before the width multiplier.
    pub stage_channels: [usize; 4],
    /// Bottlenecks in conv2, conv3, conv4.
    pub blocks_per_stage: [usize; 3],
    /// Stream cardinality T.
    pub streams: usize,
    pub fusion: Fusion,
    pub depth_mode: DepthMode,
    pub uniform_depth: usize,
    pub conv_kind: ConvKind,
    pub width_multiplier: f64,
    pub input_height: usize,
    pub input_width: usize,
    /// Output width of the embedding layer; not scaled by the multiplier.
    pub feature_dim: usize,
    pub ibn: bool,
    /// Classes of the training head; 0 builds no head.
    pub num_classes: usize,
    pub gate_reduction: usize,
    pub bottleneck_reduction: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            stage_channels: [64, 256, 384, 512],
            blocks_per_stage: [2, 2, 2],
            streams: 4,
            fusion: Fusion::UnifiedAg,
            depth_mode: DepthMode::Incremental,
            uniform_depth: 1,
            conv_kind: ConvKind::Lite,
            width_multiplier: 1.0,
            input_height: 256,
            input_width: 128,
            feature_dim: 512,
            ibn: false,
            num_classes: 0,
            gate_reduction: 16,
            bottleneck_reduction: 4,
        }
    }
}

/// `round(beta * c)`, at least 1.
pub fn scale_width(c: usize, beta: f64) -> usize {
    ((c as f64 * beta).round() as usize).max(1)
}

impl NetworkSpec {
    /// Reduced-size variant used by tests and desk-scale experiments.
    pub fn tiny() -> Self {
        NetworkSpec {
            width_multiplier: 0.25,
            input_height: 32,
            input_width: 16,
            ..Default::default()
        }
    }

    /// Applies a resolution multiplier to the default 256×128 input.
    pub fn with_resolution_multiplier(mut self, gamma: f64) -> Self {
        self.input_height = ((256.0 * gamma).round() as usize).max(1);
        self.input_width = ((128.0 * gamma).round() as usize).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::invalid(format!(
                "width_multiplier must lie in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if !(1..=4).contains(&self.streams) {
            return Err(Error::invalid(format!("streams must be 1..=4, got {}", self.streams)));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.feature_dim == 0 {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::invalid("every stage needs at least one block"));
        }
        if self.depth_mode == DepthMode::Uniform && !(1..=2).contains(&self.uniform_depth) {
            return Err(Error::invalid(format!(
                "uniform_depth must be 1 or 2, got {}",
                self.uniform_depth
            )));
        }
        if self.gate_reduction == 0 || self.bottleneck_reduction == 0 {
            return Err(Error::invalid("reduction ratios must be positive"));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::invalid("input extents must be positive"));
        }
        Ok(())
    }

    /// Widths after the width multiplier.
    pub fn channels(&self) -> [usize; 4] {
        self.stage_channels.map(|c| scale_width(c, self.width_multiplier))
    }

    /// Bottleneck inner width for a block producing `out_c` channels.
    pub fn mid_channels(&self, out_c: usize) -> usize {
        (out_c / self.bottleneck_reduction).max(1)
    }

    /// Hidden width of an aggregation gate on `c` channels.
    pub fn gate_hidden(&self, c: usize) -> usize {
        c.div_ceil(self.gate_reduction).max(1)
    }

    /// Number of stacked layers in stream `t` (1-based).
    pub fn stream_depth(&self, t: usize) -> usize {
        match self.depth_mode {
            DepthMode::Incremental => t,
            DepthMode::Uniform => self.uniform_depth,
        }
    }

    pub fn to_manifest(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s.push_str(&format!("stage_channels={}\n", join(&self.stage_channels)));
        s.push_str(&format!("blocks_per_stage={}\n", join(&self.blocks_per_stage)));
        s.push_str(&format!("streams={}\n", self.streams));
        s.push_str(&format!("fusion={}\n", self.fusion));
        s.push_str(&format!("depth_mode={}\n", self.depth_mode));
        s.push_str(&format!("uniform_depth={}\n", self.uniform_depth));
        s.push_str(&format!("conv_kind={}\n", self.conv_kind));
        s.push_str(&format!("width_multiplier={}\n", self.width_multiplier));
        s.push_str(&format!("input_height={}\n", self.input_height));
        s.push_str(&format!("input_width={}\n", self.input_width));
        s.push_str(&format!("feature_dim={}\n", self.feature_dim));
        s.push_str(&format!("ibn={}\n", self.ibn));
        s.push_str(&format!("num_classes={}\n", self.num_classes));
        s.push_str(&format!("gate_reduction={}\n", self.gate_reduction));
        s.push_str(&format!("bottleneck_reduction={}\n", self.bottleneck_reduction));
        s
    }

    /// Parses a manifest. Unknown keys are rejected; missing keys keep
    /// their defaults. Blank lines and `#` comments are ignored.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{}'", line),
            })?;
            spec.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one manifest field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("invalid value '{}' for {}", v, key)))
        }
        fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| num(key, p.trim()))
                .collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::invalid(format!("{} needs {} comma-separated values", key, N)))
        }
        match key {
            "stage_channels" => self.stage_channels = list(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = list(key, value)?,
            "streams" => self.streams = num(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "depth_mode" => self.depth_mode = value.parse()?,
            "uniform_depth" => self.uniform_depth = num(key, value)?,
            "conv_kind" => self.conv_kind = value.parse()?,
            "width_multiplier" => self.width_multiplier = num(key, value)?,
            "input_height" => self.input_height = num(key, value)?,
            "input_width" => self.input_width = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "ibn" => self.ibn = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "gate_reduction" => self.gate_reduction = num(key, value)?,
            "bottleneck_reduction" => self.bottleneck_reduction = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown spec key '{}'", key))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let spec = NetworkSpec {
            fusion: Fusion::StreamwiseAg,
            width_multiplier: 0.75,
            ibn: true,
            num_classes: 10,
            ..Default::default()
        };
        assert_eq!(NetworkSpec::from_manifest(&spec.to_manifest()).unwrap(), spec);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let err = NetworkSpec::from_manifest("# c\nstreams=4\nfusion=blend\n").unwrap_err();
        assert!(err.to_string().starts_with("line 3"), "{}", err);
        assert!(NetworkSpec::from_manifest("nonsense").is_err());
        assert!(NetworkSpec::from_manifest("width_multiplier=1.5").is_err());
    }

    #[test]
    fn width_rounding() {
        let spec = NetworkSpec {
            width_multiplier: 0.5,
            ..Default::default()
        };
        assert_eq!(spec.channels(), [32, 128, 192, 256]);
        assert_eq!(scale_width(3, 0.1), 1);
        assert_eq!(spec.gate_hidden(24), 2);
        assert_eq!(spec.gate_hidden(8), 1);
    }
}
