//! CSV and image output, plus the similarity trend checks.

use std::fs;
use std::io;
use std::path::Path;

use pigment_gateway::wire::png_bytes;
use serde::Serialize;

use crate::plan::Condition;
use crate::sweep::{Mechanism, SweepRecord};

/// One CSV row. Rating columns stay empty for external annotation.
#[derive(Debug, Serialize)]
struct Row<'a> {
    id: &'a str,
    condition: &'a str,
    target_type: &'a str,
    original: &'a str,
    additional: &'a str,
    context_object: Option<&'a str>,
    context_style: Option<&'a str>,
    context_specific: Option<&'a str>,
    original_prompt: &'a str,
    iterated_prompt: &'a str,
    weight: Option<f64>,
    grid: &'a str,
    mix_weight: Option<f64>,
    axis_weight: Option<f64>,
    overcoat: Option<f64>,
    switch_step: Option<usize>,
    pair_index: usize,
    set_index: usize,
    init_seed: u64,
    overcoat_seed: u64,
    meta_seed: u64,
    steps: usize,
    guide_scale: f64,
    backend: &'a str,
    latent_cosine_similarity: Option<f64>,
    pixel_mse: Option<f64>,
    orig_image: Option<String>,
    iter_image: Option<String>,
    error: Option<&'a str>,
    addition: Option<u8>,
    remain: Option<u8>,
    similarity: Option<u8>,
    addition_approach: Option<&'a str>,
}

fn row(r: &SweepRecord) -> Row<'_> {
    let s = &r.spec;
    let (mut mix_weight, mut axis_weight, mut overcoat, mut switch_step) = (None, None, None, None);
    match r.mechanism {
        Mechanism::MixWeight(w) => mix_weight = Some(w),
        Mechanism::AxisWeight(w) => axis_weight = Some(w),
        Mechanism::Overcoat(o) => overcoat = Some(o),
        Mechanism::SwitchStep(k) => switch_step = Some(k),
        Mechanism::Unweighted => {}
    }
    let ok = r.result.as_ref().ok();
    Row {
        id: &r.id,
        condition: s.condition.as_str(),
        target_type: s.pair.target.as_str(),
        original: &s.pair.original,
        additional: &s.pair.additional,
        context_object: s.context.object.as_deref(),
        context_style: s.context.style.as_deref(),
        context_specific: s.context.specific.as_deref(),
        original_prompt: &r.original_prompt,
        iterated_prompt: &r.iterated_prompt,
        weight: r.weight,
        grid: if r.on_grid() { "grid" } else { "extended" },
        mix_weight,
        axis_weight,
        overcoat,
        switch_step,
        pair_index: s.pair_index,
        set_index: s.set_index,
        init_seed: s.seeds.init,
        overcoat_seed: s.seeds.overcoat,
        meta_seed: r.meta_seed,
        steps: r.steps,
        guide_scale: r.guide_scale,
        backend: &r.backend_id,
        latent_cosine_similarity: ok.map(|m| m.latent_cosine_similarity),
        pixel_mse: ok.map(|m| m.pixel_mse),
        orig_image: ok.map(|_| format!("{}_orig.png", r.id)),
        iter_image: ok.map(|_| format!("{}_iter.png", r.id)),
        error: r.result.as_ref().err().map(String::as_str),
        addition: None,
        remain: None,
        similarity: None,
        addition_approach: None,
    }
}

/// Serializes records as RFC 4180 CSV with a header row.
pub fn records_csv(records: &[SweepRecord]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    for r in records {
        w.serialize(row(r)).expect("rows serialize");
    }
    w.into_inner().expect("writing to memory cannot fail")
}

/// Writes `records.csv` and a PNG pair per successful record.
pub fn write_outputs(records: &[SweepRecord], dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("records.csv"), records_csv(records))?;
    for r in records {
        if let Ok(m) = &r.result {
            fs::write(
                dir.join(format!("{}_orig.png", r.id)),
                png_bytes(&m.original.image),
            )?;
            fs::write(
                dir.join(format!("{}_iter.png", r.id)),
                png_bytes(&m.iterated.image),
            )?;
        }
    }
    Ok(())
}

/// Similarity over the grid weights of one condition, pair and context set.
#[derive(Debug, Clone, Serialize)]
pub struct TrendCheck {
    pub condition: Condition,
    pub pair_index: usize,
    pub set_index: usize,
    pub weights: Vec<f64>,
    pub similarity: Vec<f64>,
    /// False if any record in the series failed.
    pub complete: bool,
    pub non_increasing: bool,
}

impl TrendCheck {
    pub fn holds(&self) -> bool {
        self.complete && self.non_increasing
    }
}

/// Checks that latent similarity never rises with the weight, per series.
pub fn similarity_trends(records: &[SweepRecord], condition: Condition) -> Vec<TrendCheck> {
    let mut series: std::collections::BTreeMap<(usize, usize), Vec<&SweepRecord>> =
        Default::default();
    for r in records
        .iter()
        .filter(|r| r.spec.condition == condition && r.weight.is_some() && r.on_grid())
    {
        series
            .entry((r.spec.pair_index, r.spec.set_index))
            .or_default()
            .push(r);
    }
    series
        .into_iter()
        .map(|((pair_index, set_index), mut rs)| {
            rs.sort_by(|a, b| a.weight.partial_cmp(&b.weight).expect("weights are finite"));
            let complete = rs.iter().all(|r| r.result.is_ok());
            let similarity: Vec<f64> = rs
                .iter()
                .map(|r| {
                    r.result
                        .as_ref()
                        .map_or(f64::NAN, |m| m.latent_cosine_similarity)
                })
                .collect();
            TrendCheck {
                condition,
                pair_index,
                set_index,
                weights: rs.iter().filter_map(|r| r.weight).collect(),
                non_increasing: complete && similarity.windows(2).all(|p| p[1] <= p[0]),
                similarity,
                complete,
            }
        })
        .collect()
}
