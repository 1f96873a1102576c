#![allow(dead_code)]

use gzsl_core::cada::CadaConfig;
use gzsl_core::cycle::CycleConfig;
use gzsl_core::data::SynthSpec;
use gzsl_core::run::RunConfig;

/// Small networks that train the 8 + 4 class synthetic benchmark in seconds.
pub fn desk_cada(seed: u64, synth_seed: u64) -> RunConfig {
    RunConfig {
        synth: Some(SynthSpec { seed: synth_seed, ..SynthSpec::default() }),
        cada: CadaConfig {
            latent_dim: 8,
            enc_hidden_visual: 128,
            enc_hidden_semantic: 64,
            dec_hidden_visual: 128,
            dec_hidden_semantic: 64,
            epochs: 50,
            ..CadaConfig::default()
        },
        ..RunConfig::new(seed)
    }
}

pub fn desk_cycle(seed: u64, synth_seed: u64, epochs: usize) -> RunConfig {
    RunConfig {
        family: "cycle".into(),
        synth: Some(SynthSpec { seed: synth_seed, visual_offset: 0.5, ..SynthSpec::default() }),
        cycle: CycleConfig {
            gen_hidden: 128,
            critic_hidden: 128,
            clip_c: 0.1,
            gamma_cyc: 0.1,
            lr: 1e-3,
            epochs,
            ..CycleConfig::default()
        },
        ..RunConfig::new(seed)
    }
}
