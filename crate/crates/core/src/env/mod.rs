//! In-silico acquisition environments: a moving Doppler target observed
//! through a steerable beam, and scanline subsampling of synthetic image
//! sequences.

mod doppler;
mod subsampling;

pub use doppler::{
    beam_profile, candidate_angles, estimate_frequency, observe_doppler, reflect_into, step_target,
    BeamObservationModel, BeamParams, DopplerEnvironment, DopplerState, SlowTimeParams,
};
pub use subsampling::{
    apply_mask, apply_mask_noisy, embed, sample_sequence, ImageSequencePrior, SubsamplingMask, SyntheticPriorParams,
};
