// quick throwaway benchmark
#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;
use std::collections::BTreeMap;
use std::time::Instant;
use dmoe_core::corpus::{build_corpus, CorpusConfig, TokenizedCorpus};
use dmoe_core::checkpoint::Checkpoint;
use dmoe_core::model::{ModelConfig, TransformerModel};
use dmoe_core::train::{train_dense_baseline, TrainerConfig};

fn main() {
    let cfg = CorpusConfig { size_min_chars: 100_000, size_max_chars: 200_000, ..Default::default() };
    let set = build_corpus(&cfg, 0).unwrap();
    let corpus = TokenizedCorpus::from_set(&set).unwrap();
    let model = TransformerModel::new_dense(ModelConfig::default(), 0).unwrap();
    let ckpt = Checkpoint::from_model(&model, BTreeMap::new());
    let trainer = TrainerConfig::default();
    let t = Instant::now();
    let (_, report) = train_dense_baseline(&ckpt, &corpus, 8, &trainer, 0).unwrap();
    println!("8 dense steps: {:.2}s -> {:.2} s/step, last loss {:.3}",
        t.elapsed().as_secs_f64(), t.elapsed().as_secs_f64()/8.0,
        report.records.last().unwrap().clm);
}
