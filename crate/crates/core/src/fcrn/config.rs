use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial size (in input pixels) seen by a `k x k` classifier with dilation
/// `d` sitting on a feature map of the given output stride.
pub fn compute_fov(output_stride: usize, kernel: usize, dilation: usize) -> usize {
    ((kernel - 1) * dilation + 1) * output_stride
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `K + 1` logits (background first).
    Semantic,
    /// `4K` regression channels, four per foreground category.
    Localization,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Foreground categories, background excluded.
    pub num_categories: usize,
    pub stem: ConvSpec,
    pub stages: Vec<StageSpec>,
    pub target_output_stride: usize,
    pub classifier_kernel: usize,
    /// Dilation of the classifier, measured on the output feature grid.
    pub classifier_dilation: usize,
    pub head: HeadKind,
    #[serde(default)]
    pub multilayer_head: bool,
    /// How outputs are brought back to input resolution for losses and inference.
    #[serde(default)]
    pub upsample: Upsample,
}

/// Realized stride and dilation of one stride-carrying unit (stem or stage).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub nominal_stride: usize,
    pub stride: usize,
    /// Dilation of the unit's first (possibly strided) convolution.
    pub entry_dilation: usize,
    /// Dilation of every later convolution in the unit.
    pub dilation: usize,
}

impl NetworkConfig {
    /// Stem plus three stages of two residual blocks, 16/32/64 channels.
    pub fn desk(num_categories: usize, head: HeadKind) -> Self {
        Self {
            in_channels: 3,
            num_categories,
            stem: ConvSpec {
                kernel: 3,
                stride: 2,
                channels: 16,
            },
            stages: vec![
                StageSpec {
                    blocks: 2,
                    channels: 16,
                    stride: 2,
                },
                StageSpec {
                    blocks: 2,
                    channels: 32,
                    stride: 2,
                },
                StageSpec {
                    blocks: 2,
                    channels: 64,
                    stride: 2,
                },
            ],
            target_output_stride: 8,
            classifier_kernel: 3,
            classifier_dilation: 2,
            head,
            multilayer_head: false,
            upsample: Upsample::Nearest,
        }
    }

    pub fn output_channels(&self) -> usize {
        match self.head {
            HeadKind::Semantic => self.num_categories + 1,
            HeadKind::Localization => 4 * self.num_categories,
        }
    }

    pub fn nominal_stride(&self) -> usize {
        self.stem.stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn fov(&self) -> usize {
        compute_fov(
            self.target_output_stride,
            self.classifier_kernel,
            self.classifier_dilation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_categories == 0 {
            return bad("num_categories must be >= 1".into());
        }
        if self.in_channels == 0 || self.stem.channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 {
            return bad("stem kernel must be odd and stride >= 1".into());
        }
        if self.classifier_kernel % 2 == 0 {
            return bad(format!(
                "classifier kernel {} must be odd",
                self.classifier_kernel
            ));
        }
        if self.classifier_dilation == 0 {
            return bad("classifier dilation must be >= 1".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return bad(format!("stage {i}: blocks, channels and stride must be >= 1"));
            }
        }
        self.rebase_strides().map(|_| ())
    }

    /// Hole-algorithm rebasing: every unit whose stride would take the
    /// cumulative stride beyond the target runs at stride 1, and all later
    /// convolutions have their dilation multiplied by the skipped factor.
    /// Entry 0 is the stem, entry `i + 1` is stage `i`.
    pub fn rebase_strides(&self) -> Result<Vec<StageSchedule>> {
        let nominal = self.nominal_stride();
        let target = self.target_output_stride;
        if target == 0 || nominal % target != 0 {
            return Err(Error::Config(format!(
                "target output stride {target} does not divide nominal stride {nominal}"
            )));
        }
        let strides = std::iter::once(self.stem.stride).chain(self.stages.iter().map(|s| s.stride));
        let mut cumulative = 1;
        let mut multiplier = 1;
        let mut schedule = Vec::with_capacity(self.stages.len() + 1);
        for s in strides {
            if cumulative * s <= target {
                cumulative *= s;
                schedule.push(StageSchedule {
                    nominal_stride: s,
                    stride: s,
                    entry_dilation: multiplier,
                    dilation: multiplier,
                });
            } else {
                let entry = multiplier;
                multiplier *= s;
                schedule.push(StageSchedule {
                    nominal_stride: s,
                    stride: 1,
                    entry_dilation: entry,
                    dilation: multiplier,
                });
            }
        }
        if cumulative != target {
            return Err(Error::Config(format!(
                "strides cannot be rebased to output stride {target} (reached {cumulative})"
            )));
        }
        Ok(schedule)
    }

    /// Output feature-map extent for an input extent.
    pub fn output_extent(&self, input: usize) -> usize {
        input.div_ceil(self.target_output_stride)
    }
}

/// One row of the published FoV tables: depth, output stride, classifier
/// kernel, classifier dilation, reported FoV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FovRow {
    pub table: &'static str,
    pub depth: usize,
    pub output_stride: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub fov: usize,
}

const fn row(
    table: &'static str,
    depth: usize,
    output_stride: usize,
    kernel: usize,
    dilation: usize,
    fov: usize,
) -> FovRow {
    FovRow {
        table,
        depth,
        output_stride,
        kernel,
        dilation,
        fov,
    }
}

/// Every distinct (depth, resolution, kernel, dilation) configuration of the
/// PASCAL VOC and Cityscapes FCRN result tables, with the FoV they report.
pub const REPORTED_FOV: &[FovRow] = &[
    row("voc-val", 50, 16, 3, 6, 208),
    row("voc-val", 50, 8, 3, 6, 104),
    row("voc-val", 50, 8, 3, 12, 200),
    row("voc-val", 50, 8, 3, 18, 296),
    row("voc-val", 50, 8, 5, 6, 200),
    row("voc-val", 50, 8, 5, 12, 392),
    row("voc-val", 50, 8, 7, 6, 296),
    row("voc-val", 101, 16, 3, 6, 208),
    row("voc-val", 101, 8, 3, 6, 104),
    row("voc-val", 101, 8, 3, 12, 200),
    row("voc-val", 101, 8, 3, 18, 296),
    row("voc-val", 101, 8, 5, 6, 200),
    row("voc-val", 101, 8, 5, 12, 392),
    row("voc-val", 101, 8, 7, 6, 296),
    row("cityscapes-val", 50, 8, 5, 18, 584),
    row("cityscapes-val", 50, 8, 7, 12, 584),
    row("cityscapes-val", 152, 16, 3, 6, 208),
    row("cityscapes-val", 152, 8, 3, 6, 104),
    row("cityscapes-val", 152, 8, 3, 12, 200),
    row("cityscapes-val", 152, 8, 3, 18, 296),
    row("cityscapes-val", 152, 8, 5, 6, 200),
    row("cityscapes-val", 152, 8, 5, 12, 392),
    row("cityscapes-val", 152, 8, 7, 6, 296),
];

/// Plain-text FoV table plus the rows whose computed FoV disagrees with the
/// reported one.
pub fn fov_table() -> (String, Vec<FovRow>) {
    let mut out = String::new();
    out.push_str("table           depth  resolution  kernel  dilation  fov  reported  ok\n");
    let mut mismatches = Vec::new();
    for r in REPORTED_FOV {
        let fov = compute_fov(r.output_stride, r.kernel, r.dilation);
        let ok = fov == r.fov;
        if !ok {
            mismatches.push(*r);
        }
        out.push_str(&format!(
            "{:<15} {:>5}  {:>10}  {:>6}  {:>8}  {:>3}  {:>8}  {}\n",
            r.table,
            r.depth,
            format!("1/{}", r.output_stride),
            r.kernel,
            r.dilation,
            fov,
            r.fov,
            if ok { "yes" } else { "NO" }
        ));
    }
    (out, mismatches)
}
