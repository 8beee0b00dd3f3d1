//! Published cost targets and verdicts against them.

use serde::Serialize;

use crate::arch::{build, preset};
use crate::error::Result;

use super::{calibrate, model_cost};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Target {
    pub preset: &'static str,
    pub flops: f64,
    pub params: f64,
    pub flops_tol: f64,
    pub params_tol: f64,
}

pub const TABLE8: [Target; 4] = [
    Target { preset: "convnext_tiny_ref", flops: 4.47e9, params: 28.6e6, flops_tol: 0.03, params_tol: 0.05 },
    Target { preset: "e_convnext_mini", flops: 0.93e9, params: 7.6e6, flops_tol: 0.10, params_tol: 0.10 },
    Target { preset: "e_convnext_tiny", flops: 2.04e9, params: 13.2e6, flops_tol: 0.03, params_tol: 0.05 },
    Target { preset: "e_convnext_small", flops: 3.12e9, params: 19.4e6, flops_tol: 0.10, params_tol: 0.10 },
];

pub fn target_for(preset: &str) -> Option<Target> {
    TABLE8.iter().copied().find(|t| t.preset == preset)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub target: Target,
    pub flops: u64,
    pub params: u64,
    pub flops_dev: f64,
    pub params_dev: f64,
}

impl Verdict {
    pub fn new(target: Target, flops: u64, params: u64) -> Self {
        Verdict {
            target,
            flops,
            params,
            flops_dev: flops as f64 / target.flops - 1.0,
            params_dev: params as f64 / target.params - 1.0,
        }
    }

    pub fn flops_ok(&self) -> bool {
        self.flops_dev.abs() <= self.target.flops_tol
    }

    pub fn params_ok(&self) -> bool {
        self.params_dev.abs() <= self.target.params_tol
    }

    pub fn passes(&self) -> bool {
        self.flops_ok() && self.params_ok()
    }

    pub fn line(&self) -> String {
        let v = |ok: bool| if ok { "PASS" } else { "FAIL" };
        format!(
            "{:<18} FLOPs {:>6.3}G vs {:.2}G ({:+.1}%, ±{:.0}%) {}   params {:>6.2}M vs {:.1}M ({:+.1}%, ±{:.0}%) {}",
            self.target.preset,
            self.flops as f64 / 1e9,
            self.target.flops / 1e9,
            self.flops_dev * 100.0,
            self.target.flops_tol * 100.0,
            v(self.flops_ok()),
            self.params as f64 / 1e6,
            self.target.params / 1e6,
            self.params_dev * 100.0,
            self.target.params_tol * 100.0,
            v(self.params_ok()),
        )
    }
}

/// Verdicts for every targeted preset at 224×224.
pub fn table8() -> Result<Vec<Verdict>> {
    TABLE8
        .iter()
        .map(|t| {
            let r = model_cost(&build(&preset(t.preset)?)?)?;
            Ok(Verdict::new(*t, r.total_flops, r.total_params))
        })
        .collect()
}

/// Table text; unpublished-config presets that miss get a calibration report.
pub fn render_table8(verdicts: &[Verdict]) -> Result<String> {
    let mut s = String::new();
    for v in verdicts {
        s.push_str(&v.line());
        s.push('\n');
    }
    for v in verdicts.iter().filter(|v| !v.passes() && v.target.flops_tol >= 0.10) {
        s.push_str(&calibrate::report(v.target.preset, v.target.flops, v.target.params, 5)?);
    }
    Ok(s)
}

/// FLOPs of csp_original before and after turning on ch_mid in every stage.
pub fn csp_reduction() -> Result<(u64, u64)> {
    let base = preset("csp_original")?;
    let mut flipped = base.clone();
    flipped.stages.iter_mut().for_each(|s| s.use_ch_mid = true);
    let a = model_cost(&build(&base)?)?.total_flops;
    let b = model_cost(&build(&flipped)?)?.total_flops;
    Ok((a, b))
}
