//! Search over width multipliers and block schedules for cost targets.

use serde::Serialize;

use crate::arch::presets::e_convnext_scaled;
use crate::arch::build;
use crate::error::Result;

use super::model_cost;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub width: f64,
    pub blocks: [usize; 4],
    pub flops: u64,
    pub params: u64,
    pub flops_dev: f64,
    pub params_dev: f64,
}

impl Candidate {
    /// The larger of the two absolute relative deviations.
    pub fn score(&self) -> f64 {
        self.flops_dev.abs().max(self.params_dev.abs())
    }
}

pub const WIDTHS: [f64; 13] = [0.5, 0.5625, 0.625, 0.6875, 0.75, 0.8125, 0.875, 1.0, 1.125, 1.1875, 1.25, 1.3125, 1.375];

pub const SCHEDULES: [[usize; 4]; 10] = [
    [1, 1, 3, 1],
    [2, 2, 4, 2],
    [2, 2, 4, 4],
    [2, 2, 6, 2],
    [3, 3, 6, 3],
    [3, 3, 9, 3],
    [2, 2, 9, 2],
    [3, 3, 12, 3],
    [3, 3, 15, 3],
    [3, 3, 27, 3],
];

/// Every (width, schedule) pair, sorted by score against (flops, params).
pub fn search(target_flops: f64, target_params: f64) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for &width in &WIDTHS {
        for blocks in SCHEDULES {
            let graph = build(&e_convnext_scaled("candidate", width, blocks))?;
            let r = model_cost(&graph)?;
            out.push(Candidate {
                width,
                blocks,
                flops: r.total_flops,
                params: r.total_params,
                flops_dev: r.total_flops as f64 / target_flops - 1.0,
                params_dev: r.total_params as f64 / target_params - 1.0,
            });
        }
    }
    out.sort_by(|a, b| a.score().total_cmp(&b.score()));
    Ok(out)
}

/// Text report of the `top` best candidates.
pub fn report(name: &str, target_flops: f64, target_params: f64, top: usize) -> Result<String> {
    let cands = search(target_flops, target_params)?;
    let mut s = format!(
        "calibration for {name}: target {:.2}G FLOPs, {:.1}M params\n",
        target_flops / 1e9,
        target_params / 1e6
    );
    for c in cands.iter().take(top) {
        s.push_str(&format!(
            "  width {:<7} blocks {:?}  {:>6.3}G ({:+.1}%)  {:>6.2}M ({:+.1}%)\n",
            c.width,
            c.blocks,
            c.flops as f64 / 1e9,
            c.flops_dev * 100.0,
            c.params as f64 / 1e6,
            c.params_dev * 100.0
        ));
    }
    Ok(s)
}
