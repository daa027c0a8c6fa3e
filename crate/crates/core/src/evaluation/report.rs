use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{mean_average_precision, mfi_statistic, precision_at, MiouResult};
use crate::aggregation::predict;
use crate::diffmath::NormMode;
use crate::error::{Error, Result};
use crate::projectors::{project_text, FeatureGrid, PoolingOrder, ProjectorParams, TextBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `None` for classes without positives in the evaluated split.
    pub per_class_ap: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
    pub map: f64,
    /// `None` when no prediction reaches the threshold.
    pub precision: Option<f64>,
    pub precision_threshold: f64,
    /// Mean |cosine| between projected positive prompts (eval mode).
    pub mfi_stat: f64,
    pub per_class_iou: Option<Vec<(u16, f64)>>,
    pub miou: Option<f64>,
}

impl MetricsReport {
    pub fn with_segmentation(mut self, seg: &MiouResult) -> Self {
        self.per_class_iou = Some(seg.per_class.clone());
        self.miou = seg.mean;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format: `metric,class,value`, empty value when undefined.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("metric,class,value\n");
        writeln!(out, "map,,{:.6}", self.map).unwrap();
        writeln!(out, "precision,,{}", fmt(self.precision)).unwrap();
        writeln!(out, "mfi_stat,,{:.6}", self.mfi_stat).unwrap();
        for (name, ap) in self.class_names.iter().zip(&self.per_class_ap) {
            writeln!(out, "ap,{name},{}", fmt(*ap)).unwrap();
        }
        if let Some(ious) = &self.per_class_iou {
            for (id, iou) in ious {
                let name = self
                    .class_names
                    .get(*id as usize)
                    .map(String::as_str)
                    .unwrap_or("background");
                writeln!(out, "iou,{name},{iou:.6}").unwrap();
            }
            writeln!(out, "miou,,{}", fmt(self.miou)).unwrap();
        }
        out
    }
}

/// Scores every record and summarizes recognition quality and entanglement.
pub fn evaluate_mlr(
    records: &[FeatureGrid],
    bank: &TextBank,
    params: &ProjectorParams,
    logit_scale: f64,
    pooling: PoolingOrder,
    precision_threshold: f64,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Degenerate("nothing to evaluate".into()));
    }
    let text = project_text(bank, params, NormMode::Eval)?;
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        if r.labels.len() != bank.n_classes() {
            return Err(Error::dim(format!(
                "record {} has {} labels, bank has {} classes",
                r.image_id,
                r.labels.len(),
                bank.n_classes()
            )));
        }
        scores.push(predict(r, &text, params, logit_scale, pooling)?);
        labels.push(r.labels.clone());
    }
    let map = mean_average_precision(&scores, &labels)?;
    let flat_s: Vec<f64> = scores.concat();
    let flat_l: Vec<u8> = labels.concat();
    Ok(MetricsReport {
        class_names: bank.class_names.clone(),
        per_class_ap: map.per_class,
        skipped_classes: map.skipped,
        map: map.map,
        precision: precision_at(&flat_s, &flat_l, precision_threshold)?,
        precision_threshold,
        mfi_stat: mfi_statistic(&text.positive())?,
        per_class_iou: None,
        miou: None,
    })
}
