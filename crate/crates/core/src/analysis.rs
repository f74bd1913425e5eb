//! Whole-model scans: per-layer config overrides, parallel layer analysis
//! and alpha summaries.

use std::path::Path;

use glob::Pattern;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sampler::{
    analyze_layer, ConvAggregation, LayerReport, StepMode, SubsampleConfig, WindowMode,
};
use crate::spectral::HillConfig;
use crate::tensor_io::{load_tensor_with, LoadOptions, ModelManifest};

/// Partial [`SubsampleConfig`]; unset fields keep the base value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleOverride {
    pub q_ratio: Option<f64>,
    pub window: Option<WindowMode>,
    pub steps: Option<StepMode>,
    pub conv_aggregation: Option<ConvAggregation>,
    pub clamp_window: Option<bool>,
    pub hill: Option<HillConfig>,
}

impl SubsampleOverride {
    pub fn apply(&self, base: &SubsampleConfig) -> SubsampleConfig {
        SubsampleConfig {
            q_ratio: self.q_ratio.unwrap_or(base.q_ratio),
            window: self.window.unwrap_or(base.window),
            steps: self.steps.unwrap_or(base.steps),
            conv_aggregation: self.conv_aggregation.unwrap_or(base.conv_aggregation),
            clamp_window: self.clamp_window.unwrap_or(base.clamp_window),
            hill: self.hill.unwrap_or(base.hill),
        }
    }
}

/// Layer-name glob patterns mapped to partial configs.
///
/// Rules are applied in lexicographic pattern order; when several patterns
/// match a layer, later rules win field by field.
#[derive(Debug, Clone, Default)]
pub struct LayerOverrides {
    rules: Vec<(Pattern, SubsampleOverride)>,
}

impl LayerOverrides {
    pub fn from_json_str(text: &str) -> Result<Self, String> {
        let map: std::collections::BTreeMap<String, SubsampleOverride> =
            serde_json::from_str(text).map_err(|e| format!("layer overrides: {e}"))?;
        Self::from_map(map)
    }

    pub fn from_map(
        map: impl IntoIterator<Item = (String, SubsampleOverride)>,
    ) -> Result<Self, String> {
        let mut rules = map
            .into_iter()
            .map(|(p, o)| {
                Pattern::new(&p)
                    .map(|pat| (pat, o))
                    .map_err(|e| format!("bad layer pattern `{p}`: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rules.sort_by(|a, b| a.0.as_str().cmp(b.0.as_str()));
        Ok(Self { rules })
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn resolve(&self, base: &SubsampleConfig, layer: &str) -> SubsampleConfig {
        self.rules
            .iter()
            .filter(|(p, _)| p.matches(layer))
            .fold(*base, |cfg, (_, o)| o.apply(&cfg))
    }
}

/// Mean and population standard deviation of one alpha column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub mean: f64,
    pub std: f64,
}

impl AlphaStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Summary over the non-excluded layers. `None` when there are none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub layers: usize,
    pub baseline: Option<AlphaStats>,
    pub farms: Option<AlphaStats>,
}

impl ModelSummary {
    pub fn of(reports: &[LayerReport]) -> Self {
        let used: Vec<&LayerReport> = reports.iter().filter(|r| !r.excluded).collect();
        let base: Vec<f64> = used.iter().map(|r| r.baseline_alpha).collect();
        let farms: Vec<f64> = used.iter().map(|r| r.farms_alpha).collect();
        Self {
            layers: used.len(),
            baseline: AlphaStats::of(&base),
            farms: AlphaStats::of(&farms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFailure {
    pub index: usize,
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnalysis {
    pub model_name: String,
    pub reports: Vec<LayerReport>,
    pub failures: Vec<LayerFailure>,
    pub summary: ModelSummary,
}

impl ModelAnalysis {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Loads and analyzes every layer of a manifest.
///
/// Layers run in parallel on the current rayon pool; results are assembled
/// in manifest order so output does not depend on the thread count. A layer
/// that fails to load or analyze is recorded and the scan continues.
pub fn analyze_model(
    manifest_dir: &Path,
    manifest: &ModelManifest,
    cfg: &SubsampleConfig,
    overrides: &LayerOverrides,
    load: LoadOptions,
) -> ModelAnalysis {
    let outcomes: Vec<Result<LayerReport, String>> = manifest
        .layers
        .par_iter()
        .map(|entry| {
            let tensor = load_tensor_with(manifest_dir, entry, load).map_err(|e| e.to_string())?;
            let layer_cfg = overrides.resolve(cfg, &entry.name);
            analyze_layer(&tensor, &layer_cfg).map_err(|e| e.to_string())
        })
        .collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (index, (outcome, entry)) in outcomes.into_iter().zip(&manifest.layers).enumerate() {
        match outcome {
            Ok(r) => reports.push(r),
            Err(error) => failures.push(LayerFailure {
                index,
                name: entry.name.clone(),
                error,
            }),
        }
    }
    let summary = ModelSummary::of(&reports);
    ModelAnalysis {
        model_name: manifest.model_name.clone(),
        reports,
        failures,
        summary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_in_pattern_order() {
        let o = LayerOverrides::from_json_str(
            r#"{
                "fc*": {"steps": {"grid": {"rows": 9, "cols": 1}}},
                "fc_out": {"q_ratio": 2.0}
            }"#,
        )
        .unwrap();
        let base = SubsampleConfig::default();
        let out = o.resolve(&base, "fc_out");
        assert_eq!(out.steps, StepMode::Grid { rows: 9, cols: 1 });
        assert_eq!(out.q_ratio, 2.0);
        assert_eq!(o.resolve(&base, "conv1"), base);
    }

    #[test]
    fn bad_pattern_and_unknown_field() {
        assert!(LayerOverrides::from_json_str(r#"{"[": {}}"#).is_err());
        assert!(LayerOverrides::from_json_str(r#"{"a": {"bogus": 1}}"#).is_err());
    }

    #[test]
    fn stats_population_std() {
        let s = AlphaStats::of(&[2.0, 4.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.std, 1.0);
        assert!(AlphaStats::of(&[]).is_none());
    }

    #[test]
    fn empty_manifest_gives_undefined_summary() {
        let m = ModelManifest {
            model_name: "empty".into(),
            layers: vec![],
        };
        let a = analyze_model(
            Path::new("."),
            &m,
            &SubsampleConfig::default(),
            &LayerOverrides::default(),
            LoadOptions::default(),
        );
        assert!(a.reports.is_empty());
        assert_eq!(a.summary.layers, 0);
        assert!(a.summary.baseline.is_none() && a.summary.farms.is_none());
    }
}
