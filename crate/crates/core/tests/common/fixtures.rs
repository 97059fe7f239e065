//! Published step-wise rates, transcribed to three decimals.
#![allow(dead_code)]

/// `(method, α₀..α₆, reported MAT)`.
pub const STEPWISE: [(&str, [f64; 7], f64); 13] = [
    ("no target info", [0.237, 0.238, 0.237, 0.237, 0.237, 0.237, 0.236], 1.31),
    ("head concat", [0.489, 0.393, 0.353, 0.332, 0.320, 0.311, 0.305], 1.78),
    ("linear projection", [0.488, 0.425, 0.396, 0.379, 0.368, 0.360, 0.354], 1.83),
    ("proj + rope fix", [0.494, 0.427, 0.397, 0.381, 0.369, 0.360, 0.353], 1.84),
    ("kv 1-layer", [0.494, 0.427, 0.397, 0.381, 0.369, 0.360, 0.353], 1.84),
    ("kv 2-layer", [0.594, 0.540, 0.514, 0.497, 0.484, 0.473, 0.463], 2.23),
    ("kv 3-layer", [0.609, 0.558, 0.534, 0.518, 0.506, 0.496, 0.487], 2.31),
    ("kv 4-layer", [0.614, 0.565, 0.542, 0.527, 0.515, 0.505, 0.495], 2.34),
    ("gated scratch", [0.650, 0.582, 0.548, 0.527, 0.512, 0.501, 0.490], 2.44),
    ("gated ckpt", [0.665, 0.603, 0.573, 0.553, 0.537, 0.525, 0.514], 2.54),
    ("cross-only scratch", [0.634, 0.561, 0.523, 0.499, 0.480, 0.464, 0.450], 2.34),
    ("cross-only ckpt", [0.637, 0.563, 0.522, 0.495, 0.475, 0.458, 0.442], 2.35),
    ("hidden baseline", [0.638, 0.566, 0.533, 0.511, 0.495, 0.481, 0.469], 2.37),
];

/// `(method, α₀, α₆, reported retention in percent)` from the summary tables
/// and the ablation table.
pub const RETENTION: [(&str, f64, f64, f64); 20] = [
    ("no target info", 0.237, 0.236, 99.6),
    ("head concat", 0.489, 0.305, 62.4),
    ("linear projection", 0.488, 0.354, 72.5),
    ("proj + rope fix", 0.494, 0.353, 71.5),
    ("hidden baseline", 0.638, 0.469, 73.5),
    ("kv 2-layer", 0.594, 0.463, 77.9),
    ("kv 3-layer", 0.609, 0.487, 80.0),
    ("kv 4-layer", 0.614, 0.495, 80.6),
    ("gated scratch", 0.650, 0.490, 75.4),
    ("gated ckpt", 0.665, 0.514, 77.3),
    ("cross-only scratch", 0.634, 0.450, 71.0),
    ("cross-only ckpt", 0.637, 0.442, 69.4),
    ("ablation base", 0.594, 0.463, 77.9),
    ("4 kv layers", 0.600, 0.460, 76.7),
    ("mlp projector", 0.586, 0.458, 78.2),
    ("mlp projector + norm", 0.583, 0.458, 78.6),
    ("hidden to kv", 0.558, 0.388, 69.5),
    ("qk norm", 0.596, 0.466, 78.2),
    ("offline", 0.582, 0.454, 78.0),
    ("offline + kv grad scale", 0.587, 0.459, 78.2),
];
