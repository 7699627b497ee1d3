//! Closed-form parameter and FLOP accounting.
//!
//! Counts mirror the layer structure built by [`crate::model::OneBt`]:
//! bias-free Q/K/V projections, biased output projections, gated
//! feed-forward layers, one layer norm per sub-layer input (plus one on the
//! tokens and one before pooling) and an affine head.
//!
//! FLOPs are counted as multiply-accumulates: one MAC is one FLOP. Only
//! matrix products are counted (projections, attention scores, attention
//! times values, feed-forward layers, head); norms, softmax and
//! non-linearities are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::model::{Ablation, ModelConfig};

pub const FLOP_CONVENTION: &str = "1 MAC = 1 FLOP; matmuls only";

/// Breakdown keys, in display order.
pub const COMPONENTS: [&str; 6] = ["latents", "cross_attn", "cross_ff", "self_attn_blocks", "head", "norms"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub params_m: f64,
    pub flops: u64,
    pub gflops: f64,
    pub convention: &'static str,
    pub params_breakdown: BTreeMap<&'static str, u64>,
    pub flops_breakdown: BTreeMap<&'static str, u64>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn attention_params(q_dim: u64, kv_dim: u64, heads: u64, head_dim: u64) -> u64 {
    let inner = heads * head_dim;
    q_dim * inner + 2 * kv_dim * inner + inner * q_dim + q_dim
}

fn ff_params(d: u64, mult: u64) -> u64 {
    let hidden = d * mult;
    2 * (d * hidden + hidden) + hidden * d + d
}

/// Exact parameter count per component.
pub fn count_params(cfg: &ModelConfig) -> BTreeMap<&'static str, u64> {
    let m = cfg.num_latents as u64;
    let d = cfg.latent_dim as u64;
    let tok = cfg.token_dim() as u64;
    let blocks = cfg.self_per_cross as u64;
    let classes = cfg.num_classes as u64;
    let mult = cfg.ff_mult as u64;

    let self_block = attention_params(d, d, cfg.self_heads as u64, cfg.self_head_dim as u64) + ff_params(d, mult);
    // cross: latent norm, token norm, ff norm; per self block: attn norm, ff norm; final norm
    let norms = 2 * d + 2 * tok + 2 * d + blocks * 4 * d + 2 * d;

    BTreeMap::from([
        ("latents", m * d),
        (
            "cross_attn",
            attention_params(d, tok, cfg.cross_heads as u64, cfg.cross_head_dim as u64),
        ),
        ("cross_ff", ff_params(d, mult)),
        ("self_attn_blocks", blocks * self_block),
        ("head", d * classes + classes),
        ("norms", norms),
    ])
}

/// MAC count per component for one forward pass of one sample.
pub fn count_flops(cfg: &ModelConfig) -> BTreeMap<&'static str, u64> {
    let m = cfg.num_latents as u64;
    let d = cfg.latent_dim as u64;
    let l = cfg.seq_len as u64;
    let tok = cfg.token_dim() as u64;
    let hidden = d * cfg.ff_mult as u64;
    let cross_inner = (cfg.cross_heads * cfg.cross_head_dim) as u64;
    let self_inner = (cfg.self_heads * cfg.self_head_dim) as u64;

    let ff = 3 * m * d * hidden;
    let cross = m * d * cross_inner      // Q
        + 2 * l * tok * cross_inner      // K, V
        + 2 * m * l * cross_inner        // scores, probs·V
        + m * cross_inner * d; // out
    let self_block = 3 * m * d * self_inner + 2 * m * m * self_inner + m * self_inner * d + ff;

    BTreeMap::from([
        ("latents", 0),
        ("cross_attn", cross),
        ("cross_ff", ff),
        ("self_attn_blocks", cfg.self_per_cross as u64 * self_block),
        ("head", d * cfg.num_classes as u64),
        ("norms", 0),
    ])
}

pub fn cost_report(cfg: &ModelConfig) -> CostReport {
    let params_breakdown = count_params(cfg);
    let flops_breakdown = count_flops(cfg);
    let params = params_breakdown.values().sum::<u64>();
    let flops = flops_breakdown.values().sum::<u64>();
    CostReport {
        params,
        params_m: round2(params as f64 / 1e6),
        flops,
        gflops: round2(flops as f64 / 1e9),
        convention: FLOP_CONVENTION,
        params_breakdown,
        flops_breakdown,
    }
}

/// One line of a cost table: the ablation axes plus the cost columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    #[serde(flatten)]
    pub axes: Ablation,
    pub params: u64,
    pub params_m: f64,
    pub flops: u64,
    pub gflops: f64,
    pub convention: &'static str,
}

impl CostRow {
    pub fn of(cfg: &ModelConfig) -> Self {
        let r = cost_report(cfg);
        Self {
            axes: Ablation::of(cfg),
            params: r.params,
            params_m: r.params_m,
            flops: r.flops,
            gflops: r.gflops,
            convention: r.convention,
        }
    }
}

pub const AXIS_HEADERS: [&str; 7] = [
    "#Latents",
    "Latent dim",
    "#Cross-attn heads",
    "#Self-attn heads",
    "Cross head dim",
    "Self-attn head dim",
    "Self-attn per cross-attn",
];

pub fn axis_cells(a: &Ablation) -> [String; 7] {
    [
        a.num_latents,
        a.latent_dim,
        a.cross_heads,
        a.self_heads,
        a.cross_head_dim,
        a.self_head_dim,
        a.self_per_cross,
    ]
    .map(|v| v.to_string())
}

/// Left-aligns every column to its widest cell, two spaces apart.
pub fn align_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let l: Vec<String> = cells.iter().zip(&width).map(|(c, &w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", l.join("  ").trim_end());
    };
    line(header);
    line(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
    for r in rows {
        line(r);
    }
    out
}

/// Aligned text table with the ablation axes and `Params(M)` / `GFLOPs`.
pub fn render_cost_table(rows: &[CostRow]) -> String {
    let mut header: Vec<String> = AXIS_HEADERS.iter().map(|s| s.to_string()).collect();
    header.extend(["Params(M)", "GFLOPs", "Params", "MACs"].map(String::from));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = axis_cells(&r.axes).to_vec();
            cells.push(format!("{:.2}", r.params_m));
            cells.push(format!("{:.2}", r.gflops));
            cells.push(r.params.to_string());
            cells.push(r.flops.to_string());
            cells
        })
        .collect();
    let mut s = align_table(&header, &body);
    let _ = writeln!(s, "FLOP convention: {FLOP_CONVENTION}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TABLE1, TABLE2};

    #[test]
    fn breakdown_sums_to_total() {
        let cfg = TABLE1[0].apply(&ModelConfig::default());
        let r = cost_report(&cfg);
        assert_eq!(r.params, r.params_breakdown.values().sum::<u64>());
        assert_eq!(r.flops, r.flops_breakdown.values().sum::<u64>());
        assert_eq!(r.convention, FLOP_CONVENTION);
    }

    #[test]
    fn head_count_delta_is_four_projections() {
        let base = ModelConfig::default();
        let one = cost_report(&TABLE2[3].apply(&base)).params;
        let eight = cost_report(&TABLE1[4].apply(&base)).params;
        assert_eq!(eight - one, 7 * 32_768);
    }

    #[test]
    fn params_do_not_depend_on_seq_len() {
        let a = ModelConfig::default();
        let b = ModelConfig { seq_len: 17, ..a.clone() };
        assert_eq!(cost_report(&a).params, cost_report(&b).params);
    }

    #[test]
    fn table_has_headers() {
        let t = render_cost_table(&[CostRow::of(&ModelConfig::default())]);
        assert!(t.contains("Params(M)") && t.contains("Self-attn per cross-attn"));
        assert!(t.contains("0.45"));
    }
}
