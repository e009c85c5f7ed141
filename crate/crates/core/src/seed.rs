//! Seed fan-out.
//!
//! Every random stage of a run gets its own generator seeded with
//! `global_seed + RUN_STRIDE * run + stage`, so any per-stage seed can be
//! recovered from the global seed, the run index and the stage ordinal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Distance between the seed blocks of two consecutive benchmark runs.
pub const RUN_STRIDE: u64 = 1000;

/// Stage ordinals used in seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Synth = 1,
    Split = 2,
    TeacherInit = 3,
    TeacherTrain = 4,
    Sampling = 5,
    Unlearn = 6,
    IncompetentTeacher = 7,
    RetrainInit = 8,
    RetrainTrain = 9,
}

pub fn derive(global: u64, run: u64, stage: Stage) -> u64 {
    global
        .wrapping_add(RUN_STRIDE.wrapping_mul(run))
        .wrapping_add(stage as u64)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream of the same seed.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
