//! Closed-form token and FLOP accounting.
//!
//! Counts cover matrix products, convolutions and attention (two
//! multiply-adds per weight use), the same operations the autodiff tape
//! instruments. Normalization, activations and gathers are not counted.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::network::retained;
use crate::model::{ModelConfig, CLASSES, HEAD_FIELDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub scale: usize,
    pub tokens: usize,
    /// Tokens kept for refinement; `None` at the last stage.
    pub kept: Option<usize>,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub stem: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub heads: u64,
    pub stages: Vec<StageCount>,
}

impl FlopLedger {
    pub fn total(&self) -> u64 {
        self.stem + self.encoder + self.decoder + self.heads
    }

    /// `tokens₀ → kept₀ → tokens₁ → …`
    pub fn token_chain(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flat_map(|s| std::iter::once(s.tokens).chain(s.kept))
            .collect()
    }
}

fn matmul(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Score-weighted value aggregation of one attention call.
pub fn attention_flops(queries: usize, keys: usize, d: usize) -> u64 {
    4 * (queries * keys * d) as u64
}

/// One pre-norm attention plus feed-forward layer.
pub fn layer_flops(queries: usize, keys: usize, d: usize, ffn: usize) -> u64 {
    2 * matmul(queries, d, d) + 2 * matmul(keys, d, d) + attention_flops(queries, keys, d) + 2 * matmul(queries, d, ffn)
}

pub fn ledger(cfg: &ModelConfig) -> Result<FlopLedger> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let (d, f) = (cfg.d, cfg.ffn);
    let n_in = grid.n_in * grid.n_in;

    let mut stem = 0;
    let mut side = cfg.input_size;
    let mut c_in = 3;
    for &c in cfg.stem_channels.iter().chain(std::iter::once(&d)) {
        side = (side + 2 - 3) / 2 + 1;
        stem += 2 * (c * c_in * 9 * side * side) as u64;
        c_in = c;
    }
    let encoder = cfg.encoder_layers as u64 * layer_flops(n_in, n_in, d, f);

    let mut stages = Vec::new();
    let mut tokens = grid.scale_cells(cfg.scales[0])?.len();
    let mut decoder = matmul(tokens, d, d);
    for (i, &s) in cfg.scales.iter().enumerate() {
        let mut flops = cfg.decoder_layers as u64 * layer_flops(tokens, n_in, d, f);
        let mut kept = None;
        let mut next = 0;
        if let Some(&t) = cfg.scales.get(i + 1) {
            let k = retained(cfg.mu, tokens);
            next = k * (s / t) * (s / t);
            flops += matmul(tokens, d, 1) + matmul(next, d, d);
            kept = Some(k);
        }
        if s > 1 {
            let cs = grid.side() / s;
            flops += 2 * (d * d * s * s * cs * cs) as u64;
        }
        decoder += flops;
        stages.push(StageCount {
            scale: s,
            tokens,
            kept,
            flops,
        });
        tokens = next;
    }
    let out = grid.out_cells().len();
    let head = |n: usize| matmul(n, d, d) + matmul(n, d, CLASSES * HEAD_FIELDS);
    Ok(FlopLedger {
        stem,
        encoder,
        decoder,
        heads: head(n_in) + head(out),
        stages,
    })
}
