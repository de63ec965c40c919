//! Tunables of the full extraction pipeline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::affine::Interpolation;
use crate::error::{Error, Result};
use crate::features::DetectorParams;
use crate::filter::BandpassParams;
use crate::matching::MatchParams;
use crate::stitch::{AlignMode, StitchParams, TemplateMode};
use crate::tensor::{ROWS, SEGMENT_LEN, SEGMENT_STRIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub matching: MatchParams,
    /// Predecessor window of the stitching DP; `None` scans all frames.
    pub window: Option<usize>,
    pub template: TemplateMode,
    pub align_mode: AlignMode,
    pub detector: DetectorParams,
    /// Detect keypoints on frames lacking annotated keypoints.
    pub use_detector: bool,
    /// Keep only keypoints inside the face box (when one is known).
    pub keypoints_in_face_box: bool,
    /// Histogram-equalize the gray image before detection.
    pub equalize: bool,
    pub interpolation: Interpolation,
    pub band: BandpassParams,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub segment_len: usize,
    pub segment_stride: usize,
    /// Vessel weight map JSON; `None` uses the bundled map.
    pub weight_map: Option<PathBuf>,
    /// Build the normalized twin channels from the unfiltered traces.
    pub normalize_before_filter: bool,
    /// Standard deviation shown at full scale in the alignment heatmap.
    pub heatmap_scale: f64,
    /// Seed for every randomized step (fold assignment, synthetic overrides).
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            matching: MatchParams::default(),
            window: None,
            template: TemplateMode::First,
            align_mode: AlignMode::Stitched,
            detector: DetectorParams::default(),
            use_detector: true,
            keypoints_in_face_box: true,
            equalize: false,
            interpolation: Interpolation::Bilinear,
            band: BandpassParams::default(),
            grid_rows: 4,
            grid_cols: 6,
            segment_len: SEGMENT_LEN,
            segment_stride: SEGMENT_STRIDE,
            weight_map: None,
            normalize_before_filter: false,
            heatmap_scale: 5.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        self.detector.validate()?;
        self.band.validate()?;
        if self.window == Some(0) {
            return Err(Error::Config("window must be at least 1".into()));
        }
        // the tensor file layout is fixed at 24 × 120 × 18
        if self.grid_rows * self.grid_cols != ROWS {
            return Err(Error::Config(format!(
                "{}×{} grid does not give {ROWS} ROIs",
                self.grid_rows, self.grid_cols
            )));
        }
        if self.segment_len != SEGMENT_LEN {
            return Err(Error::Config(format!("segment length must be {SEGMENT_LEN}")));
        }
        if self.segment_stride == 0 {
            return Err(Error::Config("segment stride must be positive".into()));
        }
        if !(self.heatmap_scale > 0.0) {
            return Err(Error::Config("heatmap_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stitch_params(&self) -> StitchParams {
        StitchParams {
            matching: self.matching,
            window: self.window,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_published_constants() {
        let c = PipelineConfig::default();
        assert_eq!((c.matching.delta, c.matching.lambda, c.matching.alpha), (0.6, 3.0, 0.5));
        assert_eq!((c.band.low_hz, c.band.high_hz), (0.85, 3.5));
        assert_eq!((c.grid_rows, c.grid_cols, c.segment_len, c.segment_stride), (4, 6, 120, 3));
        assert_eq!(c.template, TemplateMode::First);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_input() {
        let c = PipelineConfig {
            window: Some(8),
            template: TemplateMode::Middle,
            ..Default::default()
        };
        let back = PipelineConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = PipelineConfig::from_json(r#"{"matching": {"delta": 0.7}}"#).unwrap();
        assert_eq!(partial.matching.delta, 0.7);
        assert_eq!(partial.matching.lambda, 3.0);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"matching": {"alpha": 1.5}}"#,
            r#"{"grid_rows": 5}"#,
            r#"{"window": 0}"#,
            r#"{"band": {"low_hz": 4.0}}"#,
            r#"{"unknown": 1}"#,
        ] {
            let e = PipelineConfig::from_json(text).unwrap_err();
            assert!(e.is_input_error(), "{text}: {e}");
        }
    }
}
