use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use higen::corpus::{generate_synthetic, SyntheticSpec};
use higen::exec::Exec;
use higen::model::{ModelConfig, Seq2Seq};
use higen::objectives::{EdgeScope, LossWeights};
use higen::tokenizer::Vocabulary;
use higen::trainer::{batch_gradient, Sample, Task};

fn batch_step(c: &mut Criterion) {
    let threads = higen::exec::init_threads();
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let vocab = Vocabulary::build(data.examples.iter().map(|e| e.doc.as_slice()), &data.taxonomy, 1).unwrap();
    let model_cfg = ModelConfig { vocab_size: vocab.len(), max_len: 64, ..ModelConfig::default() };
    let task = Task::new(&data.taxonomy, &vocab, model_cfg.max_len).unwrap();
    let model = Seq2Seq::<f32>::new(model_cfg, 0).unwrap();
    let samples: Vec<Sample> = task.samples(&data.examples[..32]).unwrap();
    let weights = LossWeights::default();

    let mut group = c.benchmark_group(format!("batch_step/{threads}-threads"));
    group.sample_size(10);
    for size in [8usize, 32] {
        let batch: Vec<&Sample> = samples[..size].iter().collect();
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, size), &batch, |b, batch| {
                b.iter(|| batch_gradient(&model, &task, batch, &weights, EdgeScope::AllEdges, Some((0, 0)), exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_step);
criterion_main!(benches);
