//! Synthetic concept datasets and the evaluation harness: fixed-feature
//! image-alignment and text-alignment proxies, the forgetting proxy,
//! per-layer coefficient reporting, and parameter accounting.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::moe::{gate_coefficients, select_and_normalize, SelectionMode};
use crate::numerics::RealArray;
use crate::rng::{stream, substream};
use crate::text::{ConceptEmbeddingBank, TokenEmbeddingTable};

pub const SHAPE_WORDS: [&str; 6] = ["circle", "square", "triangle", "diamond", "ring", "cross"];

/// Parameters defining one synthetic concept.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConceptSpec {
    pub index: usize,
    pub class_word: String,
    pub shape: usize,
    pub palette: [f64; 3],
    pub background: [f64; 3],
    pub stripe_freq: f64,
}

/// A concept's few-shot reference set.
#[derive(Debug, Clone)]
pub struct ConceptDataset {
    pub spec: ConceptSpec,
    pub images: Vec<RealArray>,
}

fn hue_color(h: f64) -> [f64; 3] {
    // saturated hue wheel mapped into [-1, 1]
    let r = (h * std::f64::consts::TAU).cos() * 0.5 + 0.35;
    let g = ((h + 1.0 / 3.0) * std::f64::consts::TAU).cos() * 0.5 + 0.35;
    let b = ((h + 2.0 / 3.0) * std::f64::consts::TAU).cos() * 0.5 + 0.35;
    [r.clamp(-0.9, 0.9), g.clamp(-0.9, 0.9), b.clamp(-0.9, 0.9)]
}

/// Render one image of a concept: a colored shape at the given normalized
/// center and radius over a muted background, with an optional stripe
/// texture. Values live in `[-1, 1]`.
pub fn render_concept(
    spec: &ConceptSpec,
    size: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    bg_jitter: [f64; 3],
) -> RealArray {
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64;
            let py = (y as f64 + 0.5) / size as f64;
            let dx = px - cx;
            let dy = py - cy;
            let inside = match spec.shape {
                0 => dx * dx + dy * dy < radius * radius,
                1 => dx.abs() < radius && dy.abs() < radius,
                2 => dy > -radius && dy < radius && dx.abs() < (radius - dy) * 0.5,
                3 => dx.abs() + dy.abs() < radius,
                4 => {
                    let d2 = dx * dx + dy * dy;
                    d2 < radius * radius && d2 > radius * radius * 0.25
                }
                _ => (dx.abs() < radius / 3.0 || dy.abs() < radius / 3.0)
                    && dx.abs() < radius
                    && dy.abs() < radius,
            };
            let stripe = if spec.stripe_freq > 0.0 {
                1.0 - 0.25 * (spec.stripe_freq * px * std::f64::consts::TAU).sin().abs()
            } else {
                1.0
            };
            for c in 0..3 {
                let v = if inside {
                    spec.palette[c] * stripe
                } else {
                    (spec.background[c] + bg_jitter[c]).clamp(-1.0, 1.0)
                };
                data[c * size * size + y * size + x] = v;
            }
        }
    }
    RealArray::new(vec![3, size, size], data)
}

/// Deterministic centered exemplar of a concept, used by the text-alignment
/// proxy as the prompt's visual ground truth.
pub fn canonical_render(spec: &ConceptSpec, size: usize) -> RealArray {
    render_concept(spec, size, 0.5, 0.5, 0.28, [0.0; 3])
}

/// Generate `count` distinct concepts, each with 3-8 few-shot images.
///
/// Shape families cycle; palettes are well separated for the first six
/// concepts and then deliberately revisit earlier hues with a small jitter,
/// so later tasks overlap visually with earlier ones.
pub fn gen_concepts(count: usize, image_size: usize, seed: u64) -> Result<Vec<ConceptDataset>> {
    if count == 0 {
        return Err(Error::Domain("need at least one concept".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = substream(seed, "concept", i as u64);
        let shape = i % SHAPE_WORDS.len();
        let palette = if i < 6 {
            hue_color(i as f64 / 6.0)
        } else {
            let base = hue_color((i % 4) as f64 / 6.0);
            let mut p = base;
            for v in p.iter_mut() {
                *v = (*v + rng.gen_range(-0.08..0.08)).clamp(-1.0, 1.0);
            }
            p
        };
        let background = [
            rng.gen_range(-0.35..-0.15),
            rng.gen_range(-0.35..-0.15),
            rng.gen_range(-0.35..-0.15),
        ];
        let stripe_freq = if i % 3 == 2 { rng.gen_range(3.0..6.0) } else { 0.0 };
        let spec = ConceptSpec {
            index: i,
            class_word: SHAPE_WORDS[shape].to_string(),
            shape,
            palette,
            background,
            stripe_freq,
        };
        let n_images = rng.gen_range(3..=8);
        let images = (0..n_images)
            .map(|_| {
                let cx = rng.gen_range(0.35..0.65);
                let cy = rng.gen_range(0.35..0.65);
                let radius = rng.gen_range(0.18..0.30);
                let jitter = [
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ];
                render_concept(&spec, image_size, cx, cy, radius, jitter)
            })
            .collect();
        out.push(ConceptDataset { spec, images });
    }
    Ok(out)
}

/// Generic pretraining corpus: random shapes in random colors with plain
/// class-word captions.
pub fn gen_base_corpus(count: usize, image_size: usize, seed: u64) -> Vec<(RealArray, String)> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = substream(seed, "base-corpus", i as u64);
        let shape = rng.gen_range(0..SHAPE_WORDS.len());
        let spec = ConceptSpec {
            index: i,
            class_word: SHAPE_WORDS[shape].to_string(),
            shape,
            palette: hue_color(rng.gen_range(0.0..1.0)),
            background: [
                rng.gen_range(-0.35..-0.15),
                rng.gen_range(-0.35..-0.15),
                rng.gen_range(-0.35..-0.15),
            ],
            stripe_freq: 0.0,
        };
        let cx = rng.gen_range(0.35..0.65);
        let cy = rng.gen_range(0.35..0.65);
        let radius = rng.gen_range(0.18..0.30);
        let img = render_concept(&spec, image_size, cx, cy, radius, [0.0; 3]);
        out.push((img, format!("photo of a {}", SHAPE_WORDS[shape])));
    }
    out
}

/// Per-channel 8-bin color histogram over `[-1, 1]`, normalized to unit sum.
pub fn color_histogram(img: &RealArray) -> Vec<f64> {
    let mut hist = vec![0.0; 24];
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for c in 0..3 {
        for &v in &img.data()[c * h * w..(c + 1) * h * w] {
            let bin = (((v + 1.0) / 2.0) * 8.0).floor().clamp(0.0, 7.0) as usize;
            hist[c * 8 + bin] += 1.0;
        }
    }
    let total = (3 * h * w) as f64;
    for b in hist.iter_mut() {
        *b /= total;
    }
    hist
}

/// Frozen seeded random convolutional feature extractor. Its parameters are
/// a pure function of the seed; `hash` pins them for frozenness checks.
pub struct FeatureExtractor {
    conv1: RealArray,
    conv2: RealArray,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, "feature-extractor");
        Self {
            conv1: RealArray::randn(&[6, 3, 3, 3], 0.4, &mut rng),
            conv2: RealArray::randn(&[8, 6, 3, 3], 0.3, &mut rng),
        }
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in [&self.conv1, &self.conv2] {
            for v in p.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let mut hex = String::new();
        for byte in hasher.finalize() {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Concatenation of the unit-normalized CNN descriptor and the
    /// unit-normalized color histogram.
    pub fn features(&self, img: &RealArray) -> Vec<f64> {
        let mut g = crate::graph::Graph::new();
        let x = g.constant(img.clone());
        let w1 = g.constant(self.conv1.clone());
        let b1 = g.constant(RealArray::zeros(&[6]));
        let w2 = g.constant(self.conv2.clone());
        let b2 = g.constant(RealArray::zeros(&[8]));
        let h1 = g.conv2d(x, w1, b1, 2);
        let h1 = g.tanh(h1);
        let h2 = g.conv2d(h1, w2, b2, 2);
        let h2 = g.tanh(h2);
        let fm = g.value(h2);
        let (c, hh, ww) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
        let mut cnn: Vec<f64> = (0..c)
            .map(|ch| fm.data()[ch * hh * ww..(ch + 1) * hh * ww].iter().sum::<f64>() / (hh * ww) as f64)
            .collect();
        normalize(&mut cnn);
        let mut hist = color_histogram(img);
        normalize(&mut hist);
        cnn.extend(hist);
        cnn
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Image-alignment proxy: for each generated image, the best cosine match
/// against the reference features; averaged over the generated set. Equals 1
/// exactly when every generated image appears among the references.
pub fn image_alignment(
    generated: &[RealArray],
    references: &[RealArray],
    extractor: &FeatureExtractor,
) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::Domain("alignment needs nonempty image sets".into()));
    }
    let ref_feats: Vec<Vec<f64>> = references.iter().map(|r| extractor.features(r)).collect();
    let mut total = 0.0;
    for img in generated {
        let f = extractor.features(img);
        let best = ref_feats
            .iter()
            .map(|r| cosine(&f, r))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / generated.len() as f64)
}

/// Text-alignment proxy: alignment of generated images against the concept's
/// deterministic canonical render (the prompt's palette/shape attributes).
pub fn text_alignment(
    generated: &[RealArray],
    spec: &ConceptSpec,
    image_size: usize,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let canon = canonical_render(spec, image_size);
    image_alignment(generated, std::slice::from_ref(&canon), extractor)
}

/// Forgetting proxy: mean clamped drop of each old concept's alignment
/// between when it was learned and the end of the sequence.
///
/// `learned[τ]` is IA measured right after task τ; `final_[τ]` is IA for the
/// same concept measured after the last task. Concepts other than the last
/// contribute `max(0, learned − final)`.
pub fn forgetting(
    n_tasks: usize,
    learned: &BTreeMap<usize, f64>,
    final_: &BTreeMap<usize, f64>,
) -> Result<f64> {
    if n_tasks < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for tau in 0..n_tasks - 1 {
        let l = learned
            .get(&tau)
            .ok_or_else(|| Error::State(format!("missing when-learned record for concept {tau}")))?;
        let f = final_
            .get(&tau)
            .ok_or_else(|| Error::State(format!("missing final record for concept {tau}")))?;
        sum += (l - f).max(0.0);
    }
    Ok(sum / (n_tasks - 1) as f64)
}

/// Layer-by-task matrix of the inference-mode coefficient each concept's own
/// expert receives; exactly zero where the expert was pruned or unselected.
pub fn coefficient_heatmap(
    model: &DenoiserModel,
    bank: &ConceptEmbeddingBank,
    k_active: usize,
    n_tasks: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut row = Vec::with_capacity(n_tasks);
        for tau in 0..n_tasks {
            let column = layer.k_proj.experts.column_of_task(tau);
            let alpha = match column {
                None => 0.0,
                Some(col) => {
                    let scores = gate_coefficients(bank.entry(tau)?, &layer.gate)?;
                    let sel = select_and_normalize(&scores, None, k_active, SelectionMode::Infer)?;
                    sel.alpha_of(col).unwrap_or(0.0)
                }
            };
            row.push(alpha);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Itemized parameter accounting over a learner state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub base_embeddings: usize,
    pub aux_experts: usize,
    pub task_experts: usize,
    pub gating: usize,
    pub concept_tokens: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.backbone
            + self.base_embeddings
            + self.aux_experts
            + self.task_experts
            + self.gating
            + self.concept_tokens
    }

    /// Parameters added on top of the pretrained model by the expert
    /// machinery (task experts plus gating), the quantity pruning reduces.
    pub fn added_expert_gating(&self) -> usize {
        self.task_experts + self.gating
    }
}

pub fn param_breakdown(model: &DenoiserModel, table: &TokenEmbeddingTable) -> ParamBreakdown {
    let mut aux = 0;
    let mut task = 0;
    let mut gating = 0;
    for layer in &model.layers {
        gating += layer.gate.param_count();
        for reg in [&layer.k_proj.experts, &layer.v_proj.experts] {
            for e in reg.entries().iter().filter(|e| e.retained) {
                if e.owner_task.is_none() {
                    aux += e.param_count();
                } else {
                    task += e.param_count();
                }
            }
        }
    }
    let concept_tokens: usize = (0..table.concept_count()).map(|s| table.concept_row(s).len()).sum();
    ParamBreakdown {
        backbone: model.backbone_param_count(),
        base_embeddings: table.base_rows().len(),
        aux_experts: aux,
        task_experts: task,
        gating,
        concept_tokens,
    }
}
