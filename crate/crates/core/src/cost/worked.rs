//! The four worked block-FLOPs derivations at 56×56: ResNet bottleneck,
//! CSPResNet, ConvNeXt and CSP-ConvNeXt.

use serde::Serialize;

use super::{conv_flops, dwconv_flops};

/// Relative tolerance on printed block totals.
pub const BLOCK_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkedTerm {
    pub expr: String,
    pub computed: u64,
    /// Printed value in millions.
    pub printed_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Target {
    /// Printed approximate total in millions, checked to a relative tolerance.
    Approx(f64),
    /// Exact integer total.
    Exact(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkedBlock {
    pub name: &'static str,
    pub terms: Vec<WorkedTerm>,
    pub target: Target,
    /// Printed total in millions, kept for display even when the target is exact.
    pub printed_total_m: f64,
}

impl WorkedBlock {
    pub fn total(&self) -> u64 {
        self.terms.iter().map(|t| t.computed).sum()
    }

    /// Relative deviation of the computed total from the printed total.
    pub fn deviation(&self) -> f64 {
        self.total() as f64 / (self.printed_total_m * 1e6) - 1.0
    }

    pub fn passes(&self) -> bool {
        match self.target {
            Target::Approx(_) => self.deviation().abs() <= BLOCK_TOLERANCE,
            Target::Exact(v) => self.total() == v,
        }
    }
}

const HW: u64 = 56;

fn conv(c_in: u64, k: u64, c_out: u64, printed_m: f64) -> WorkedTerm {
    WorkedTerm {
        expr: format!("{c_in} x {HW} x {HW} x {k}^2 x {c_out}"),
        computed: conv_flops(c_in, HW, HW, k, c_out),
        printed_m,
    }
}

fn dw(k: u64, c: u64, printed_m: f64) -> WorkedTerm {
    WorkedTerm { expr: format!("{HW} x {HW} x {k}^2 x {c}"), computed: dwconv_flops(HW, HW, k, c), printed_m }
}

pub fn resnet_block() -> WorkedBlock {
    WorkedBlock {
        name: "ResNet bottleneck",
        terms: vec![conv(256, 1, 64, 51.4), conv(64, 3, 64, 116.0), conv(64, 1, 256, 51.4)],
        target: Target::Approx(218.8),
        printed_total_m: 218.8,
    }
}

pub fn csp_resnet_block() -> WorkedBlock {
    WorkedBlock {
        name: "CSPResNet bottleneck",
        terms: vec![conv(128, 1, 64, 25.7), conv(64, 3, 64, 116.0), conv(64, 1, 128, 25.7)],
        target: Target::Approx(167.4),
        printed_total_m: 167.4,
    }
}

pub fn convnext_block() -> WorkedBlock {
    WorkedBlock {
        name: "ConvNeXt block",
        terms: vec![dw(7, 96, 15.0), conv(96, 1, 384, 116.0), conv(384, 1, 96, 116.0)],
        target: Target::Approx(257.0),
        printed_total_m: 257.0,
    }
}

/// Halved widths: depthwise over 48 channels, MLP 48 -> 192 -> 48.
pub fn csp_convnext_block() -> WorkedBlock {
    WorkedBlock {
        name: "CSP-ConvNeXt block",
        terms: vec![dw(7, 48, 7.5), conv(48, 1, 192, 29.5), conv(192, 1, 48, 29.5)],
        target: Target::Exact(65_178_624),
        printed_total_m: 66.5,
    }
}

pub fn all_blocks() -> Vec<WorkedBlock> {
    vec![resnet_block(), csp_resnet_block(), convnext_block(), csp_convnext_block()]
}

/// Side-by-side text table with a verdict per block.
pub fn render(blocks: &[WorkedBlock]) -> String {
    let mut s = String::new();
    for b in blocks {
        s.push_str(&format!("{}\n", b.name));
        for t in &b.terms {
            s.push_str(&format!("  {:<28} = {:>12}   printed ~{}M\n", t.expr, t.computed, t.printed_m));
        }
        let verdict = if b.passes() { "PASS" } else { "FAIL" };
        let rule = match b.target {
            Target::Approx(_) => format!("within {:.0}% of printed", BLOCK_TOLERANCE * 100.0),
            Target::Exact(v) => format!("exactly {v}"),
        };
        s.push_str(&format!(
            "  total {:>12}   printed ~{}M   deviation {:+.2}%   [{rule}] {verdict}\n",
            b.total(),
            b.printed_total_m,
            b.deviation() * 100.0
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals() {
        assert_eq!(resnet_block().total(), 218_365_952);
        assert_eq!(csp_resnet_block().total(), 166_985_728);
        assert_eq!(convnext_block().total(), 245_962_752);
        assert_eq!(csp_convnext_block().total(), 65_178_624);
    }

    #[test]
    fn printed_terms_are_roundings_of_the_products() {
        for b in [resnet_block(), csp_resnet_block(), convnext_block()] {
            for t in &b.terms {
                let rel = (t.computed as f64 / 1e6 - t.printed_m).abs() / t.printed_m;
                assert!(rel < 0.02, "{}: {} vs {}", t.expr, t.computed, t.printed_m);
            }
        }
    }

    #[test]
    fn render_has_one_verdict_per_block() {
        let text = render(&all_blocks());
        assert_eq!(text.matches("PASS").count() + text.matches("FAIL").count(), 4);
    }
}
