//! Deterministic seed derivation: one root seed, split per pipeline stage
//! (and per sample where sampling happens) through a splitmix64 counter
//! scheme. The derived seeds are recorded in the metrics report.

/// splitmix64 step; the standard finalizer-style mixer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Pipeline stages in counter order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenToy = 0,
    Cache = 1,
    Induce = 2,
    Attach = 3,
    Infer = 4,
    Eval = 5,
    Train = 6,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenToy => "gen_toy",
            Stage::Cache => "cache",
            Stage::Induce => "induce",
            Stage::Attach => "attach",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::Train => "train",
        }
    }
}

/// Seed for one stage: `splitmix64(root + stage counter)`.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    splitmix64(root.wrapping_add(stage as u64))
}

/// Per-sample seed inside a stage (e.g. the logit-space MC draws).
pub fn sample_seed(stage_seed: u64, sample_id: u64) -> u64 {
    splitmix64(stage_seed ^ splitmix64(sample_id.wrapping_add(1)))
}
