/// One row of the trainable-parameter comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCountRow {
    pub method: &'static str,
    pub formula: &'static str,
    pub count: u64,
}

/// Additional trainable parameters per tuning method for a transformer-like
/// backbone with token width `d`, bottleneck width `d_tilde`, `layers` blocks,
/// `prompts` prompt tokens per layer and prompt-block rank `m`. The
/// classification head (`d·C`) is reported on its own row.
pub fn param_count_report(d: u64, d_tilde: u64, layers: u64, prompts: u64, m: u64, classes: u64) -> Vec<ParamCountRow> {
    vec![
        ParamCountRow {
            method: "adapter",
            formula: "2*d*d_tilde*L",
            count: 2 * d * d_tilde * layers,
        },
        ParamCountRow {
            method: "bias",
            formula: "2*d*d_tilde*L",
            count: 2 * d * d_tilde * layers,
        },
        ParamCountRow {
            method: "vpt",
            formula: "n*L*d",
            count: prompts * layers * d,
        },
        ParamCountRow {
            method: "lion",
            formula: "m*d_tilde",
            count: m * d_tilde,
        },
        ParamCountRow {
            method: "head",
            formula: "d*C",
            count: d * classes,
        },
    ]
}
