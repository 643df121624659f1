//! FLOPs accounting from recorded matrix-multiply shapes.
//!
//! Every `[m×k]·[k×n]` product counts `2·m·k·n`. Softmax, normalization and
//! element-wise work are not counted.

use substrate::MatmulRecord;

pub const COMPONENTS: [&str; 6] = [
    "encoder",
    "decoder_self_attn",
    "decoder_cross_attn",
    "feed_forward",
    "heads",
    "fpe_linear",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopsReport {
    pub total: u64,
    /// One entry per name in [`COMPONENTS`], in that order.
    pub breakdown: [u64; 6],
    /// Indexed by decode step; step 0 holds work done before the first
    /// decoder step (encoding).
    pub per_step: Vec<u64>,
}

impl FlopsReport {
    pub fn component(&self, name: &str) -> u64 {
        COMPONENTS
            .iter()
            .position(|c| *c == name)
            .map_or(0, |i| self.breakdown[i])
    }

    /// Decoder-side work: everything except the encoder.
    pub fn decoder(&self) -> u64 {
        self.total - self.component("encoder")
    }

    /// This report divided evenly over `n` instances (integer division).
    pub fn per_instance(&self, n: usize) -> FlopsReport {
        let n = n.max(1) as u64;
        let breakdown = self.breakdown.map(|b| b / n);
        FlopsReport {
            total: breakdown.iter().sum(),
            breakdown,
            per_step: self.per_step.iter().map(|s| s / n).collect(),
        }
    }
}

/// Aggregates a trace. Records with an unknown tag are a programming error.
pub fn count_flops(trace: &[MatmulRecord]) -> FlopsReport {
    let mut r = FlopsReport::default();
    for rec in trace {
        let i = COMPONENTS
            .iter()
            .position(|c| *c == rec.tag)
            .unwrap_or_else(|| panic!("matmul tagged `{}` outside the known components", rec.tag));
        let f = rec.flops();
        r.breakdown[i] += f;
        r.total += f;
        if r.per_step.len() <= rec.step {
            r.per_step.resize(rec.step + 1, 0);
        }
        r.per_step[rec.step] += f;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear_row() {
        let t = [MatmulRecord {
            tag: "heads",
            step: 1,
            m: 1,
            k: 4,
            n: 3,
        }];
        let r = count_flops(&t);
        assert_eq!(r.total, 24);
        assert_eq!(r.component("heads"), 24);
        assert_eq!(r.per_step, vec![0, 24]);
        assert_eq!(r.breakdown.iter().sum::<u64>(), r.total);
    }
}
