#![allow(dead_code)]

use std::path::Path;

use cogsym::experiment::ExperimentConfig;
use cogsym::model::ModelConfig;

/// A config that pretrains and sweeps in seconds.
pub fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.out_dir = out.to_path_buf();
    c.model = ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 160,
        context_len: 64,
        tie_embeddings: false,
    };
    c.suite.concept_count = 30;
    c.pretrain.corpus.n_examples = 320;
    c.pretrain.gate = 0.0;
    c.pretrain.gate_items = 20;
    c.adaptation.corpus.n_examples = 320;
    c.adaptation.checkpoints = 2;
    c.eval.n_items = 20;
    c.eval.seeds = vec![42, 43];
    c.method.lora.rank = 4;
    c.rank.lsn.min_tokens = 20;
    c
}
