use atwwm_core::adversarial::{fgm, fgm_scoped, NormScope};
use atwwm_core::masking::{mask_sequence, MaskConfig};
use atwwm_core::model::{class_loss, classify, Batch, Mode, Model, ModelConfig, SiteOffsets};
use atwwm_core::tokenizer::{encode, Lexicon, Vocab};
use atwwm_core::{Graph, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[16, 32, 64], 1.0, &mut rng);
    let b = Tensor::randn(&[64, 64], 1.0, &mut rng);
    c.bench_function("matmul_fwd_bwd_16x32x64_64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(a.clone());
            let w = g.leaf(b.clone());
            let y = g.matmul(x, w).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Batch {
    let seqs = (0..16)
        .map(|_| {
            let n = rng.gen_range(8..30);
            (0..n).map(|_| rng.gen_range(5..cfg.vocab_size as u32)).collect::<Vec<u32>>()
        })
        .collect::<Vec<_>>();
    Batch::new(&seqs).unwrap()
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig::with_hidden(60, 32);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let b = batch(&cfg, &mut rng);
    let golds: Vec<usize> = (0..b.size()).map(|i| i % 3).collect();
    c.bench_function("classifier_eval_forward_b16_h32", |bench| bench.iter(|| black_box(model.logits(&b).unwrap())));
    c.bench_function("classifier_train_fwd_bwd_b16_h32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let out = classify(&mut g, &p, &cfg, &b, Mode::Train { seed: 3 }, &SiteOffsets::default()).unwrap();
            let loss = class_loss(&mut g, out.logits, &golds).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn adversarial(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grad = Tensor::randn(&[16, 32, 64], 1.0, &mut rng);
    c.bench_function("fgm_global_16x32x64", |bench| bench.iter(|| black_box(fgm(&grad, 0.17))));
    c.bench_function("fgm_per_example_16x32x64", |bench| bench.iter(|| black_box(fgm_scoped(&grad, 0.17, NormScope::Example))));
}

fn masking(c: &mut Criterion) {
    let text = "这家餐厅的服务很好但是价格有点贵，环境不错，下次还会再来。";
    let lexicon = Lexicon::new(&["餐厅", "服务", "但是", "价格", "有点", "环境", "不错", "下次"]).unwrap();
    let vocab = Vocab::build(&[text], 1).unwrap();
    let seq = encode(text, &vocab, &lexicon, 64).unwrap();
    let cfg = MaskConfig::default();
    for (name, whole_word) in [("mask_per_char", false), ("mask_whole_word", true)] {
        c.bench_function(name, |bench| {
            bench.iter_batched(
                || ChaCha8Rng::seed_from_u64(7),
                |mut rng| black_box(mask_sequence(&seq, &vocab, &cfg, whole_word, &mut rng).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, matmul, encoder, adversarial, masking);
criterion_main!(benches);
