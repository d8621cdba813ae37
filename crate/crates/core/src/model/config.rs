use serde::{Deserialize, Serialize};

use crate::attention::{check_reduction, SpatialAttentionParams};
use crate::error::{Error, Result};
use crate::layers::Conv2dSpec;

/// Architecture hyperparameters.
///
/// The default is the full-scale network: 224×224 three-modality input, a
/// 7×7/2 stem with 64 channels, four stages with 2/3/5/3 identity blocks
/// after each conv-block, cardinality 32, bottleneck widths 128…1024 and an
/// expansion of 2, reduction ratio 16.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Identity blocks following the conv-block of each of the four stages.
    pub stage_identity_counts: Vec<usize>,
    /// Number of groups in every 3×3 grouped convolution.
    pub cardinality: usize,
    /// Bottleneck (grouped conv) width of each stage.
    pub stage_widths: Vec<usize>,
    /// Stage output channels = bottleneck width × expansion.
    pub expansion: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub use_batch_norm: bool,
    pub num_classes: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::scaled(64, 32, (224, 224))
    }
}

impl ModelConfig {
    /// Standard layout with the stem at `base` channels and stage widths
    /// `2b, 4b, 8b, 16b`.
    pub fn scaled(base: usize, cardinality: usize, input_size: (usize, usize)) -> Self {
        Self {
            input_channels: 3,
            input_size,
            stem_channels: base,
            stem_kernel: 7,
            stem_stride: 2,
            stage_identity_counts: vec![2, 3, 5, 3],
            cardinality,
            stage_widths: (1..=4).map(|i| base << i).collect(),
            expansion: 2,
            reduction: 16,
            spatial_kernel: 7,
            use_batch_norm: true,
            num_classes: 2,
            mlp_hidden: vec![256],
        }
    }

    /// Desk-scale network: 16 stem channels, cardinality 4, 32×32 input.
    pub fn reduced() -> Self {
        Self::scaled(16, 4, (32, 32))
    }

    pub fn stage_out_channels(&self, stage: usize) -> usize {
        self.stage_widths[stage] * self.expansion
    }

    pub fn final_channels(&self) -> usize {
        self.stage_out_channels(self.stage_widths.len() - 1)
    }

    pub fn stem_spec(&self) -> Conv2dSpec {
        Conv2dSpec::square(
            self.input_channels,
            self.stem_channels,
            self.stem_kernel,
            self.stem_stride,
            self.stem_kernel / 2,
        )
        .with_bias(!self.use_batch_norm)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage_identity_counts.len() != 4 {
            return bad(format!(
                "expected identity-block counts for 4 stages, got {:?}",
                self.stage_identity_counts
            ));
        }
        if self.stage_widths.len() != 4 {
            return bad(format!("expected 4 stage widths, got {:?}", self.stage_widths));
        }
        if self.input_channels == 0 || self.stem_channels == 0 || self.expansion == 0 || self.cardinality == 0 {
            return bad("channel counts, expansion and cardinality must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.mlp_hidden.contains(&0) {
            return bad("MLP hidden widths must be positive".into());
        }
        for &w in &self.stage_widths {
            if w == 0 || w % self.cardinality != 0 {
                return bad(format!("stage width {w} not divisible by cardinality {}", self.cardinality));
            }
        }
        check_reduction(self.stem_channels, self.reduction)?;
        check_reduction(self.final_channels(), self.reduction)?;
        SpatialAttentionParams::branch_spec(self.spatial_kernel)?;
        self.feature_shapes().map(|_| ())
    }

    /// `(name, [C, H, W])` after the stem and after each stage.
    pub fn feature_shapes(&self) -> Result<Vec<(String, [usize; 3])>> {
        let (mut h, mut w) = self.input_size;
        let (sh, sw) = self.stem_spec().output_size(h, w)?;
        h = sh;
        w = sw;
        let mut shapes = vec![("stem".to_string(), [self.stem_channels, h, w])];
        for stage in 0..4 {
            let spec = Conv2dSpec::square(1, 1, 3, 2, 1);
            let (nh, nw) = spec.output_size(h, w)?;
            h = nh;
            w = nw;
            shapes.push((format!("stage{}", stage + 1), [self.stage_out_channels(stage), h, w]));
        }
        Ok(shapes)
    }
}
