//! Small models and corpora shared by the integration tests.

#![allow(dead_code)]

use hpn_core::grid::CourtSpec;
use hpn_core::policy_net::{ArchitectureConfig, ConvSpec, HpnModel, Variant, GROUP_TRANSFER};
use hpn_core::trajdata::{build_sequences, synthesize, SynthConfig, TrainingSequence, WindowConfig};
use hpn_core::weak_labels::{label_all, SegmentationConfig, WeakLabels};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_arch(v: Variant) -> ArchitectureConfig {
    ArchitectureConfig {
        variant: v,
        pool_kernels: vec![2, 2],
        conv: vec![ConvSpec {
            filters: 4,
            kernel: 3,
            stride: 2,
        }],
        gru_cells: 8,
        cnn_hidden: 8,
        transfer_hidden: 8,
        shared_encoder: false,
    }
}

pub fn tiny_model(v: Variant, seed: u64) -> HpnModel {
    HpnModel::new(&CourtSpec::default(), &tiny_arch(v), seed).unwrap()
}

/// Gives the transfer net random weights so the mask is far from uniform.
pub fn scramble_transfer(m: &mut HpnModel, seed: u64, sigma: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    for p in m.store.params_mut().iter_mut().filter(|p| p.group == GROUP_TRANSFER) {
        p.value.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
    }
}

pub fn corpus(n_possessions: usize, seed: u64) -> (Vec<TrainingSequence>, Vec<WeakLabels>) {
    let spec = CourtSpec::default();
    let synth = SynthConfig {
        n_possessions,
        seed,
        ..SynthConfig::default()
    };
    let ps = synthesize(&synth, &spec).unwrap();
    let seqs = build_sequences(&ps, &spec, &WindowConfig::default(), seed);
    let seg = SegmentationConfig {
        seed,
        ..SegmentationConfig::default()
    };
    let labels = label_all(&seqs, &spec, &seg);
    (seqs, labels)
}
