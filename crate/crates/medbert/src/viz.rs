//! Attention extraction and a self-contained HTML/SVG dependency view:
//! code labels in two columns grouped by visit, with attention weights
//! drawn as weighted edges between them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore};
use crate::ehr::{encode_patient, PatientRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::MedBertModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub patient_id: String,
    /// One label per sequence position.
    pub code_labels: Vec<String>,
    /// Start index of each visit group (first is always 0).
    pub visit_boundaries: Vec<usize>,
    pub n_layers: usize,
    pub n_heads: usize,
    /// `maps[layer][head]` is a row-major `len x len` matrix.
    pub maps: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn len(&self) -> usize {
        self.code_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code_labels.is_empty()
    }

    /// Visit group index of each position, from the boundaries.
    pub fn visit_of_position(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.len()];
        for (group, window) in self.visit_boundaries.windows(2).enumerate() {
            for pos in window[0]..window[1] {
                out[pos] = group;
            }
        }
        if let Some(&last) = self.visit_boundaries.last() {
            for pos in last..self.len() {
                out[pos] = self.visit_boundaries.len() - 1;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.visit_boundaries.first() != Some(&0) {
            return Err(Error::Contract(
                "attention record needs positions and a leading visit boundary".into(),
            ));
        }
        if self.maps.len() != self.n_layers
            || self.maps.iter().any(|l| l.len() != self.n_heads)
            || self
                .maps
                .iter()
                .flatten()
                .any(|m| m.len() != n * n)
        {
            return Err(Error::Contract("attention map dimensions inconsistent".into()));
        }
        for map in self.maps.iter().flatten() {
            for r in 0..n {
                let sum: f64 = map[r * n..(r + 1) * n].iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Numerics(format!(
                        "attention row {r} sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<json>".into(),
            line: 0,
            reason: e.to_string(),
        })
    }
}

/// Evaluation-mode forward pass capturing every head's attention map.
/// The encoded sequence is unpadded, so no pad stripping is needed.
pub fn extract_attention<S: Scalar>(
    model: &MedBertModel,
    store: &ParameterStore<S>,
    patient: &PatientRecord,
    vocab: &Vocabulary,
) -> Result<AttentionRecord> {
    if !store.contains("embed.code")
        || store.get("embed.code").shape != [model.config.vocab_size, model.config.hidden_size]
    {
        return Err(Error::config(
            "checkpoint",
            "parameters do not match the model configuration",
        ));
    }
    let input = encode_patient(patient, vocab, model.config.max_seq_len)?;
    let mut g = Graph::new(false, 0);
    let binding = store.bind_all(&mut g);
    let out = model.forward(&mut g, &binding, &input)?;

    let code_labels: Vec<String> = input.code_ids[..input.length]
        .iter()
        .map(|&id| vocab.token_of(id).unwrap_or("?").to_string())
        .collect();
    let mut visit_boundaries = vec![0usize];
    for pos in 1..input.length {
        if input.visit_ids[pos] != input.visit_ids[pos - 1] {
            visit_boundaries.push(pos);
        }
    }
    let maps: Vec<Vec<Vec<f64>>> = out
        .attention
        .iter()
        .map(|layer| layer.iter().map(|&id| g.value(id).to_f64_vec()).collect())
        .collect();
    let record = AttentionRecord {
        patient_id: patient.patient_id.clone(),
        code_labels,
        visit_boundaries,
        n_layers: model.config.n_layers,
        n_heads: model.config.n_heads,
        maps,
    };
    record.validate()?;
    Ok(record)
}

/// Head selection for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelection {
    One(usize),
    All,
}

const ROW_SPACING: f64 = 22.0;
const COLUMN_GAP: f64 = 260.0;
const MARGIN: f64 = 30.0;

fn render_head_svg(record: &AttentionRecord, layer: usize, head: usize, threshold: f64) -> String {
    let n = record.len();
    let map = &record.maps[layer][head];
    let height = MARGIN * 2.0 + n as f64 * ROW_SPACING;
    let y_of = |pos: usize| MARGIN + (pos as f64 + 0.5) * ROW_SPACING;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
         viewBox=\"0 0 {:.0} {:.0}\">\n",
        COLUMN_GAP + 2.0 * MARGIN + 160.0,
        height,
        COLUMN_GAP + 2.0 * MARGIN + 160.0,
        height
    );
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" class=\"title\">layer {layer} head {head}</text>\n",
        MARGIN, MARGIN * 0.6
    ));
    // edges first so labels draw on top
    for r in 0..n {
        for c in 0..n {
            let w = map[r * n + c];
            if w >= threshold {
                svg.push_str(&format!(
                    "<line class=\"edge\" x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
                     stroke=\"#1f6fb2\" stroke-width=\"{:.4}\" stroke-opacity=\"{:.4}\"/>\n",
                    MARGIN + 80.0,
                    y_of(r),
                    MARGIN + 80.0 + COLUMN_GAP,
                    y_of(c),
                    (w * 6.0).max(0.2),
                    (0.15 + 0.85 * w).min(1.0)
                ));
            }
        }
    }
    // visit separators across both columns
    for &b in record.visit_boundaries.iter().skip(1) {
        let y = MARGIN + b as f64 * ROW_SPACING;
        svg.push_str(&format!(
            "<line class=\"visit-sep\" x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
            MARGIN,
            MARGIN + 160.0 + COLUMN_GAP
        ));
    }
    let visit_of = record.visit_of_position();
    for pos in 0..n {
        let label = &record.code_labels[pos];
        let v = visit_of[pos] + 1;
        svg.push_str(&format!(
            "<text class=\"node node-left\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">v{v}:{label}</text>\n",
            MARGIN + 76.0,
            y_of(pos) + 4.0
        ));
        svg.push_str(&format!(
            "<text class=\"node node-right\" x=\"{:.1}\" y=\"{:.1}\">v{v}:{label}</text>\n",
            MARGIN + 84.0 + COLUMN_GAP,
            y_of(pos) + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Self-contained HTML document with one SVG per selected head.
/// Edges are drawn for weights >= `threshold`; stroke width scales with
/// the weight. Byte-deterministic for identical inputs.
pub fn render_attention(
    record: &AttentionRecord,
    layer: usize,
    head: HeadSelection,
    threshold: f64,
) -> Result<String> {
    record.validate()?;
    if layer >= record.n_layers {
        return Err(Error::Range {
            index: layer,
            limit: record.n_layers,
        });
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::config("threshold", "must be in [0,1)"));
    }
    let heads: Vec<usize> = match head {
        HeadSelection::One(h) => {
            if h >= record.n_heads {
                return Err(Error::Range {
                    index: h,
                    limit: record.n_heads,
                });
            }
            vec![h]
        }
        HeadSelection::All => (0..record.n_heads).collect(),
    };
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<style>\n\
         body { font-family: monospace; background: #fff; }\n\
         text.node { font-size: 12px; fill: #222; }\n\
         text.title { font-size: 13px; fill: #444; }\n\
         </style>\n",
    );
    html.push_str(&format!(
        "<title>attention: {}</title>\n</head>\n<body>\n<h2>patient {}</h2>\n",
        record.patient_id, record.patient_id
    ));
    for h in heads {
        html.push_str(&render_head_svg(record, layer, h, threshold));
    }
    html.push_str("</body>\n</html>\n");
    Ok(html)
}

/// Per-layer/head locality statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityStat {
    pub layer: usize,
    pub head: usize,
    /// Mean over query rows of the mass placed on same-visit keys.
    pub within_visit_mass: f64,
    /// Mean over query rows of the mass placed on identical-code keys
    /// at other positions.
    pub same_code_mass: f64,
}

/// Attention-mass summary: how much each head stays within a visit and
/// how much it follows repeats of the same code.
pub fn summarize_locality(record: &AttentionRecord) -> Result<Vec<LocalityStat>> {
    record.validate()?;
    let n = record.len();
    let visit_of = record.visit_of_position();
    let mut stats = Vec::with_capacity(record.n_layers * record.n_heads);
    for (layer, heads) in record.maps.iter().enumerate() {
        for (head, map) in heads.iter().enumerate() {
            let mut within = 0.0f64;
            let mut same_code = 0.0f64;
            for r in 0..n {
                for c in 0..n {
                    let w = map[r * n + c];
                    if visit_of[c] == visit_of[r] {
                        within += w;
                    }
                    if c != r && record.code_labels[c] == record.code_labels[r] {
                        same_code += w;
                    }
                }
            }
            stats.push(LocalityStat {
                layer,
                head,
                within_visit_mass: within / n as f64,
                same_code_mass: same_code / n as f64,
            });
        }
    }
    Ok(stats)
}

/// CSV emission of the locality statistics.
pub fn locality_csv(stats: &[LocalityStat]) -> String {
    let mut out = String::from("layer,head,within_visit_mass,same_code_mass\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.layer, s.head, s.within_visit_mass, s.same_code_mass
        ));
    }
    out
}
