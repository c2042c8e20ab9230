// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::collections::BTreeMap;

use countlab::constructor::{build_counting_model, default_config, CircuitSpec};
use countlab::model::{ModelConfig, ModelWeights};
use countlab::{Matrix, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn counting_model() -> (Vocab, CircuitSpec, ModelWeights) {
    let vocab = Vocab::standard();
    let spec = CircuitSpec::default();
    let w = build_counting_model(&spec, &vocab, &default_config(&vocab)).expect("construct");
    (vocab, spec, w)
}

/// Small dense model with Gaussian-ish weights.
pub fn random_model(vocab: &Vocab, seed: u64) -> ModelWeights {
    let config = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 12,
        d_head: 4,
        d_mlp: 16,
        vocab_size: vocab.len(),
        max_seq: 64,
        max_segments: 8,
        channels: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |m: &mut Matrix| {
        let data = (0..m.rows() * m.cols())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        *m = Matrix::from_vec(m.rows(), m.cols(), data).unwrap();
    };
    let mut w = ModelWeights::zeros(config).unwrap();
    fill(&mut w.tok_emb);
    fill(&mut w.pos_emb);
    fill(&mut w.seg_emb);
    fill(&mut w.unembed);
    for layer in &mut w.layers {
        for h in &mut layer.heads {
            fill(&mut h.w_q);
            fill(&mut h.w_k);
            fill(&mut h.w_v);
            fill(&mut h.w_o);
        }
        fill(&mut layer.mlp.w_in);
        fill(&mut layer.mlp.w_out);
    }
    w
}
