//! Component ablation: one training and evaluation run per variant.
//!
//! Variants are deltas on a base configuration. `B0` is the baseline with
//! progressive decoding, a smaller input side (`352/384` of the base) and
//! scales `{0.5, 1, 1.5}`. `M1`-`M3` swap the decoding strategy. `M4` is `M1`
//! at the base input side, `M5`-`M7` change the backbone, and `M8`/`M9`
//! change the scale set on top of `M6`.
//!
//! With a toy base backbone the backbone axis widens the toy stages
//! (`b2` x1, `b3` x1.5, `b4` x2, `b5` x2.5); with a pyramid-transformer base
//! it selects the published variants.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::decoder::{dependency_graph, DecodingStrategy};
use crate::encoder::{BackboneFamily, BackboneSpec};
use crate::error::{CodError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::dataset::Dataset;
use crate::harness::synthetic::{SyntheticSpec, TINY_OBJECTS, TINY_SCALE};
use crate::harness::train::{evaluate, prepare_dataset, train};
use crate::metrics::MetricReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Variant {
    B0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::B0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
        Variant::M8,
        Variant::M9,
    ];

    pub fn description(self) -> &'static str {
        match self {
            Variant::B0 => "Baseline",
            Variant::M1 => "B0 + RFD",
            Variant::M2 => "B0 + DPD",
            Variant::M3 => "B0 + DRFD",
            Variant::M4 => "M1 + IS (input side)",
            Variant::M5 => "M4 + backbone b3",
            Variant::M6 => "M4 + backbone b4",
            Variant::M7 => "M4 + backbone b5",
            Variant::M8 => "M6 + IS (1, 1.5, 1.7)",
            Variant::M9 => "M6 + IS (1, 1.5, 2)",
        }
    }

    fn strategy(self) -> DecodingStrategy {
        match self {
            Variant::B0 => DecodingStrategy::Progressive,
            Variant::M2 => DecodingStrategy::DenseProgressive,
            Variant::M3 => DecodingStrategy::DenseRecursiveFeedback,
            _ => DecodingStrategy::RecursiveFeedback,
        }
    }

    fn full_input(self) -> bool {
        self >= Variant::M4
    }

    fn backbone_level(self) -> &'static str {
        match self {
            Variant::M5 => "b3",
            Variant::M6 | Variant::M8 | Variant::M9 => "b4",
            Variant::M7 => "b5",
            _ => "b2",
        }
    }

    fn scales(self) -> Vec<f64> {
        match self {
            Variant::M8 => vec![1.0, 1.5, 1.7],
            Variant::M4 | Variant::M5 | Variant::M6 | Variant::M7 | Variant::M9 => vec![1.0, 1.5, 2.0],
            _ => vec![0.5, 1.0, 1.5],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = CodError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CodError::InvalidInput(format!("unknown variant `{}`", s.trim())))
    }
}

/// Parse a comma-separated variant list; blank input gives an empty list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

fn widen(channels: &[usize], factor: f64) -> Vec<usize> {
    channels
        .iter()
        .map(|&c| ((c as f64 * factor / 4.0).ceil() as usize * 4).max(4))
        .collect()
}

fn backbone_for(level: &str, base: &BackboneSpec) -> Result<BackboneSpec> {
    match base.family() {
        BackboneFamily::PyramidTransformer if base.name.starts_with("pvt_v2") => {
            let mut spec = BackboneSpec::pvt_v2(level)?;
            spec.pretrained = base.pretrained;
            spec.weights = base.weights.clone();
            Ok(spec)
        }
        _ => {
            let factor = match level {
                "b3" => 1.5,
                "b4" => 2.0,
                "b5" => 2.5,
                _ => 1.0,
            };
            Ok(BackboneSpec {
                stage_channels: widen(&base.stage_channels, factor),
                ..base.clone()
            })
        }
    }
}

/// Configuration of `variant` derived from `base`.
pub fn variant_config(base: &TrainConfig, variant: Variant) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let m = &mut cfg.model;
    m.strategy = variant.strategy();
    if !variant.full_input() {
        m.input_size = (base.model.input_size as f64 * 352.0 / 384.0).round() as usize;
    }
    m.scales = variant.scales();
    m.allow_downscale = m.scales.iter().any(|&k| k < 1.0);
    m.backbone = backbone_for(variant.backbone_level(), &base.model.backbone)?;
    cfg.output_dir = base.output_dir.join(variant.to_string());
    cfg.validate()?;
    Ok(cfg)
}

/// Held-out evaluation splits: single objects, several objects and tiny
/// objects, generated from a seed disjoint from the training scenes.
pub fn desk_splits(spec: &SyntheticSpec, seed: u64, count: usize) -> Result<Vec<(String, Dataset)>> {
    let base = SyntheticSpec {
        count,
        tiny_scenes: 0,
        ..spec.clone()
    };
    let multi = SyntheticSpec {
        n_objects: 3,
        object_scale: (spec.object_scale * 0.6).min(0.15),
        ..base.clone()
    };
    let tiny = SyntheticSpec {
        n_objects: TINY_OBJECTS,
        object_scale: TINY_SCALE,
        ..base.clone()
    };
    let eval_seed = seed.wrapping_add(0xE7A1);
    Ok(vec![
        ("single".to_string(), SyntheticSpec { n_objects: 1, ..base }.generate(eval_seed)?),
        ("multi".to_string(), multi.generate(eval_seed)?),
        ("tiny".to_string(), tiny.generate(eval_seed)?),
    ])
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub strategy: String,
    pub input_size: usize,
    pub backbone: String,
    pub stage_channels: Vec<usize>,
    /// Scale list exactly as configured.
    pub scales: String,
    pub params: usize,
    /// Decoder edges added (`+`) or removed (`-`) relative to the baseline.
    pub structural_diff: Vec<String>,
    /// One report per split, in `AblationReport::splits` order.
    pub metrics: Vec<MetricReport>,
    /// Mean relative change against the baseline over every split and
    /// metric, in percent, with MAE counted as lower-is-better.
    pub delta_pct: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub splits: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn structural_diff(strategy: DecodingStrategy) -> Vec<String> {
    let base = dependency_graph(DecodingStrategy::Progressive).edges;
    let g = dependency_graph(strategy).edges;
    g.difference(&base)
        .map(|e| format!("+{e}"))
        .chain(base.difference(&g).map(|e| format!("-{e}")))
        .collect()
}

fn scales_verbatim(scales: &[f64]) -> String {
    format!("[{}]", scales.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "))
}

fn delta(row: &[MetricReport], base: &[MetricReport]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for (r, b) in row.iter().zip(base) {
        for (i, (v, bv)) in r.values().iter().zip(b.values()).enumerate() {
            if bv.abs() < 1e-12 {
                continue;
            }
            let rel = (v - bv) / bv.abs();
            sum += if i == 2 { -rel } else { rel };
            n += 1.0;
        }
    }
    if n == 0.0 {
        0.0
    } else {
        100.0 * sum / n
    }
}

/// Train and evaluate the baseline plus every listed variant (duplicates and
/// an explicit `B0` are folded into the baseline row).
pub fn ablate(base: &TrainConfig, variants: &[Variant]) -> Result<AblationReport> {
    let mut list = vec![Variant::B0];
    for &v in variants {
        if !list.contains(&v) {
            list.push(v);
        }
    }
    let eval_count = base.data.synthetic.count.clamp(1, 8);
    let mut splits: Option<Vec<String>> = None;
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in list {
        let cfg = variant_config(base, v)?;
        log::info!("ablation {v}: {}", v.description());
        let data = prepare_dataset(&cfg)?;
        let outcome = train(&cfg, &data, None)?;
        let eval_sets = match &cfg.data.root {
            Some(_) => vec![("data".to_string(), data.clone())],
            None => desk_splits(&cfg.data.synthetic, cfg.seed, eval_count)?,
        };
        let mut metrics = Vec::new();
        for (_, ds) in &eval_sets {
            let ds = ds.resized(cfg.model.input_size)?;
            metrics.push(evaluate(&outcome.net, &outcome.best, &ds, cfg.threads)?.report);
        }
        splits.get_or_insert_with(|| eval_sets.iter().map(|s| s.0.clone()).collect());
        let delta_pct = rows.first().map(|b| delta(&metrics, &b.metrics)).unwrap_or(0.0);
        rows.push(AblationRow {
            variant: v,
            description: v.description().to_string(),
            strategy: cfg.model.strategy.to_string(),
            input_size: cfg.model.input_size,
            backbone: cfg.model.backbone.name.clone(),
            stage_channels: cfg.model.backbone.stage_channels.clone(),
            scales: scales_verbatim(&cfg.model.scales),
            params: outcome.store.num_scalars(),
            structural_diff: structural_diff(cfg.model.strategy),
            metrics,
            delta_pct,
        });
    }
    Ok(AblationReport {
        splits: splits.unwrap_or_default(),
        rows,
    })
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<4} {:<22} {:>8} {:>6} {:<16}", "No", "Model", "Params", "Input", "Scales");
        for split in &self.splits {
            for h in MetricReport::HEADERS {
                let _ = write!(s, " {:>12}", format!("{split}:{h}"));
            }
        }
        let _ = writeln!(s, " {:>8}  Decoder diff vs B0", "Delta");
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<4} {:<22} {:>8} {:>6} {:<16}",
                r.variant.to_string(),
                r.description,
                r.params,
                r.input_size,
                r.scales
            );
            for m in &r.metrics {
                for v in m.values() {
                    let _ = write!(s, " {v:>12.4}");
                }
            }
            let diff = if r.structural_diff.is_empty() {
                "none".to_string()
            } else {
                r.structural_diff.join(" ")
            };
            let _ = writeln!(s, " {:>7.2}%  {diff}", r.delta_pct);
        }
        s
    }

    /// Write `ablation.txt` and `ablation.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CodError::io(dir, e))?;
        let txt = dir.join("ablation.txt");
        fs::write(&txt, self.to_table()).map_err(|e| CodError::io(&txt, e))?;
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| CodError::io(&json, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("M10".parse::<Variant>().is_err());
        assert_eq!(parse_variants(" b0, m1 ").unwrap(), vec![Variant::B0, Variant::M1]);
        assert!(parse_variants("").unwrap().is_empty());
    }

    #[test]
    fn recursive_feedback_adds_three_edges() {
        let d = structural_diff(DecodingStrategy::RecursiveFeedback);
        assert_eq!(d, vec!["+3->1(refined)", "+4->1(refined)", "+4->2(refined)"]);
        assert!(structural_diff(DecodingStrategy::Progressive).is_empty());
    }

    #[test]
    fn variant_axes() {
        let mut base = TrainConfig::default();
        base.model = crate::model::ModelConfig::desk();
        let b0 = variant_config(&base, Variant::B0).unwrap();
        assert_eq!(b0.model.input_size, 59);
        assert_eq!(b0.model.scales, vec![0.5, 1.0, 1.5]);
        assert!(b0.model.allow_downscale);
        let m9 = variant_config(&base, Variant::M9).unwrap();
        assert_eq!(m9.model.input_size, 64);
        assert_eq!(m9.model.backbone.stage_channels, vec![16, 32, 32, 32]);
        assert_eq!(m9.model.strategy, DecodingStrategy::RecursiveFeedback);
        let full = variant_config(&TrainConfig::default(), Variant::M5).unwrap();
        assert_eq!(full.model.backbone.name, "pvt_v2_b3");
    }
}
