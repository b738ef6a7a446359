//! Runs sweep specs against a backend.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbaImage;
use pigment_core::color::Rgb;
use pigment_core::latentops::StencilMask;
use pigment_core::palette::{GroupId, NodeId, Selection, SelectionTarget};
use pigment_core::scheduler::Latent;
use pigment_core::session::{
    start_generation, BackendSet, Conditioning, GenerationConfig, SessionInputs, SessionStatus,
};
use pigment_core::vecmix::{DirectionalAxis, MixWeights, PromptEmbedding};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::metrics::{latent_cosine_similarity, pixel_mse};
use crate::plan::{is_grid_weight, Condition, PlanError, Seeds, SweepPlan, SweepSpec};

const ORIGINAL_COLOR: Rgb = Rgb([200, 60, 40]);
const ADDITIONAL_COLOR: Rgb = Rgb([40, 90, 200]);

/// How a weight was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    MixWeight(f64),
    AxisWeight(f64),
    Overcoat(f64),
    /// Step at which the prompt switches to the additional attribute.
    SwitchStep(usize),
    Unweighted,
}

/// Intervention switch step for weight `w` over `steps` steps: higher
/// weights switch earlier. `w = 0` never switches, `w = 1` switches
/// before the first step.
pub fn switch_step(w: f64, steps: usize) -> usize {
    ((1.0 - w) * steps as f64).floor() as usize
}

#[derive(Debug, Clone)]
pub struct Output {
    pub latent: Arc<Latent>,
    pub image: RgbaImage,
}

#[derive(Debug, Clone)]
pub struct Measured {
    pub original: Arc<Output>,
    pub iterated: Output,
    pub latent_cosine_similarity: f64,
    pub pixel_mse: f64,
}

#[derive(Debug, Clone)]
pub struct SweepRecord {
    /// Short content hash naming the record's image files.
    pub id: String,
    pub spec: Arc<SweepSpec>,
    pub weight: Option<f64>,
    pub mechanism: Mechanism,
    pub original_prompt: String,
    pub iterated_prompt: String,
    pub backend_id: String,
    pub meta_seed: u64,
    pub steps: usize,
    pub guide_scale: f64,
    /// A failed generation keeps its row with the error text.
    pub result: Result<Measured, String>,
}

impl SweepRecord {
    /// Whether the weight is on the reference grid. Unweighted records are.
    pub fn on_grid(&self) -> bool {
        self.weight.is_none_or(is_grid_weight)
    }
}

struct Engine<'a> {
    backends: &'a BackendSet,
    unconditional: PromptEmbedding,
    steps: usize,
    guide_scale: f64,
}

impl Engine<'_> {
    fn embed(&self, text: &str) -> pigment_core::Result<PromptEmbedding> {
        self.backends.embedder.embed(text)
    }

    fn single(&self, text: &str, color: Rgb) -> pigment_core::Result<Conditioning> {
        Ok(Conditioning::single(self.embed(text)?, color))
    }

    fn blank_canvas(&self) -> RgbaImage {
        let (h, w) = self.backends.canvas_size();
        RgbaImage::new(w as u32, h as u32)
    }

    fn generate(
        &self,
        canvas: RgbaImage,
        conditioning: Conditioning,
        overcoat: f64,
        seeds: Seeds,
        mut switch: Option<(usize, Conditioning)>,
    ) -> pigment_core::Result<Output> {
        let (h, w) = self.backends.canvas_size();
        let inputs = SessionInputs {
            canvas,
            stencil: StencilMask::full(h, w, self.backends.codec.scale())?,
            conditioning,
            unconditional: self.unconditional.clone(),
            config: GenerationConfig {
                steps: self.steps,
                guide_scale: self.guide_scale,
                overcoat,
                single_stroke: None,
                init_seed: seeds.init,
                overcoat_seed: seeds.overcoat,
            },
            trace_masked: false,
        };
        let mut session = start_generation(
            self.backends.denoiser.clone(),
            self.backends.codec.clone(),
            inputs,
        )?;
        while session.status() == SessionStatus::Running {
            if switch.as_ref().is_some_and(|(k, _)| *k == session.cursor()) {
                let (_, next) = switch.take().expect("checked above");
                session.intervene(next)?;
            }
            session.step()?;
        }
        Ok(Output {
            latent: session.latent().clone(),
            image: session.composite()?,
        })
    }

    fn original(&self, spec: &SweepSpec) -> pigment_core::Result<Output> {
        let cond = self.single(&spec.original_prompt(), ORIGINAL_COLOR)?;
        self.generate(self.blank_canvas(), cond, 0.0, spec.seeds, None)
    }

    fn iterate(
        &self,
        spec: &SweepSpec,
        weight: Option<f64>,
        original: &Output,
    ) -> pigment_core::Result<Output> {
        let w = weight.unwrap_or(0.0);
        let blank = self.blank_canvas();
        match spec.condition {
            Condition::Mixing => {
                let cond = Conditioning {
                    selection: Selection {
                        target: SelectionTarget::Group(GroupId(0)),
                        node_ids: vec![NodeId(0), NodeId(1)],
                        point: Default::default(),
                        weights: MixWeights::new(vec![1.0 - w, w])?,
                    },
                    prompts: vec![
                        self.embed(&spec.original_prompt())?,
                        self.embed(&spec.additional_prompt())?,
                    ],
                    colors: vec![ORIGINAL_COLOR, ADDITIONAL_COLOR],
                    axes: Vec::new(),
                };
                self.generate(blank, cond, 0.0, spec.seeds, None)
            }
            Condition::Directional => {
                let mut cond = self.single(&spec.original_prompt(), ORIGINAL_COLOR)?;
                cond.axes.push(DirectionalAxis {
                    id: "attribute".into(),
                    end_a: self.embed(&spec.pair.additional)?,
                    end_b: self.embed(&spec.pair.original)?,
                    weight: w,
                    color_a: ADDITIONAL_COLOR,
                    color_b: ORIGINAL_COLOR,
                });
                self.generate(blank, cond, 0.0, spec.seeds, None)
            }
            Condition::Stencil => {
                let cond = self.single(&spec.additional_prompt(), ADDITIONAL_COLOR)?;
                self.generate(original.image.clone(), cond, w * 100.0, spec.seeds, None)
            }
            Condition::Intervention => {
                let first = self.single(&spec.original_prompt(), ORIGINAL_COLOR)?;
                let then = self.single(&spec.additional_prompt(), ADDITIONAL_COLOR)?;
                self.generate(
                    blank,
                    first,
                    0.0,
                    spec.seeds,
                    Some((switch_step(w, self.steps), then)),
                )
            }
            Condition::Concatenation => {
                let cond = self.single(&spec.concatenated_prompt(), ADDITIONAL_COLOR)?;
                self.generate(blank, cond, 0.0, spec.seeds, None)
            }
        }
    }
}

fn mechanism(condition: Condition, weight: Option<f64>, steps: usize) -> Mechanism {
    match (condition, weight) {
        (Condition::Mixing, Some(w)) => Mechanism::MixWeight(w),
        (Condition::Directional, Some(w)) => Mechanism::AxisWeight(w),
        (Condition::Stencil, Some(w)) => Mechanism::Overcoat(w * 100.0),
        (Condition::Intervention, Some(w)) => Mechanism::SwitchStep(switch_step(w, steps)),
        _ => Mechanism::Unweighted,
    }
}

fn record_id(spec: &SweepSpec, weight: Option<f64>, plan: &SweepPlan, backend_id: &str) -> String {
    let key = json!({
        "condition": spec.condition,
        "pair": spec.pair,
        "context": spec.context,
        "seeds": spec.seeds,
        "weight": weight,
        "steps": plan.steps,
        "guide_scale": plan.guide_scale,
        "backend": backend_id,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// Expands `plan` and runs every record. Records come back in spec order,
/// weights ascending as listed. A failing generation fails only the
/// records that depend on it.
pub fn run_sweep(plan: &SweepPlan, backends: &BackendSet) -> Result<Vec<SweepRecord>, PlanError> {
    let specs: Vec<Arc<SweepSpec>> = plan.expand()?.into_iter().map(Arc::new).collect();
    let unconditional = backends
        .unconditional()
        .map_err(|e| PlanError::Invalid(format!("backend cannot embed the empty prompt: {e}")))?;
    let engine = Engine {
        backends,
        unconditional,
        steps: plan.steps,
        guide_scale: plan.guide_scale,
    };
    let backend_id = backends.denoiser.backend_id().to_string();

    // one original per pair and context set, shared by its conditions
    let mut units: BTreeMap<(usize, usize), Arc<SweepSpec>> = BTreeMap::new();
    for spec in &specs {
        units
            .entry((spec.pair_index, spec.set_index))
            .or_insert_with(|| spec.clone());
    }
    let units: Vec<_> = units.into_iter().collect();
    let originals: BTreeMap<(usize, usize), Result<Arc<Output>, String>> = units
        .par_iter()
        .map(|(key, spec)| {
            (
                *key,
                engine
                    .original(spec)
                    .map(Arc::new)
                    .map_err(|e| e.to_string()),
            )
        })
        .collect();

    let items: Vec<(Arc<SweepSpec>, Option<f64>)> = specs
        .iter()
        .flat_map(|spec| {
            let weights: Vec<Option<f64>> = if spec.condition.is_weighted() {
                spec.weights.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            weights.into_iter().map(move |w| (spec.clone(), w))
        })
        .collect();
    let records = items
        .into_par_iter()
        .map(|(spec, weight)| {
            let original = &originals[&(spec.pair_index, spec.set_index)];
            let result = original.clone().and_then(|original| {
                let iterated = engine
                    .iterate(&spec, weight, &original)
                    .map_err(|e| e.to_string())?;
                let latent_cosine_similarity =
                    latent_cosine_similarity(&original.latent, &iterated.latent)
                        .map_err(|e| e.to_string())?;
                let pixel_mse =
                    pixel_mse(&original.image, &iterated.image).map_err(|e| e.to_string())?;
                Ok(Measured {
                    original,
                    iterated,
                    latent_cosine_similarity,
                    pixel_mse,
                })
            });
            let iterated_prompt = match spec.condition {
                Condition::Concatenation => spec.concatenated_prompt(),
                _ => spec.additional_prompt(),
            };
            SweepRecord {
                id: record_id(&spec, weight, plan, &backend_id),
                mechanism: mechanism(spec.condition, weight, plan.steps),
                original_prompt: spec.original_prompt(),
                iterated_prompt,
                backend_id: backend_id.clone(),
                meta_seed: plan.meta_seed,
                steps: plan.steps,
                guide_scale: plan.guide_scale,
                weight,
                spec,
                result,
            }
        })
        .collect();
    Ok(records)
}
