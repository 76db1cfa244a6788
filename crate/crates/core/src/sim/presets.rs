//! Scenario presets for the four reference regimes on the asr-like task:
//! pooled training, homogeneous FL at the task's preferred exit, and a
//! 50/50 split of low- and high-memory clients under each aggregation rule.

pub const PRESETS: [(&str, &str, &str); 4] = [
    (
        "centralized",
        "all shards pooled, plain SGD at the preferred exit",
        include_str!("../../presets/centralized.json"),
    ),
    (
        "homo-fl",
        "every client trains to the preferred exit",
        include_str!("../../presets/homo-fl.json"),
    ),
    (
        "hetero-fedavg",
        "half the clients capped at exit 3, sample-weighted averaging",
        include_str!("../../presets/hetero-fedavg.json"),
    ),
    (
        "hetero-layerwise",
        "half the clients capped at exit 3, depth-weighted layer-wise averaging",
        include_str!("../../presets/hetero-layerwise.json"),
    ),
];

/// JSON text of a named preset.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.2)
}
