use std::fs;

use bixt_core::harness::listops::{
    listops_generate, listops_generate_sources, load_lra_tsv, parse, split_tokens, token_id, tokenize, write_lra_tsv,
    GeneratorSpec, ListOpsSample, NUM_CLASSES, VOCAB_SIZE,
};
use bixt_core::harness::optim::{clip_grad_norm, cosine_warmup, AdamW, AdamWConfig};
use bixt_core::harness::train::{evaluate, train, DataSpec, Predictor, Splits, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use bixt_core::model::{checkpoint, ModelConfig};
use bixt_core::nn::ParamStore;
use bixt_core::tensor::Tensor;
use bixt_core::tokenizers::TokenizerConfig;
use bixt_core::Result;

/// Stack evaluator over whitespace tokens, written independently of the expression tree.
fn stack_eval(source: &str) -> u32 {
    let mut stack: Vec<(Option<String>, Vec<u32>)> = vec![(None, Vec::new())];
    let spaced = source.replace(']', " ] ").replace(['(', ')'], " ");
    for tok in spaced.split_whitespace() {
        match tok {
            "]" => {
                let (op, mut args) = stack.pop().unwrap();
                args.sort();
                let v = match op.as_deref().unwrap() {
                    "[MAX" => *args.last().unwrap(),
                    "[MIN" => args[0],
                    "[MED" => args[(args.len() - 1) / 2],
                    "[SM" | "[SUM_MOD" => args.iter().sum::<u32>() % 10,
                    other => panic!("operator {other}"),
                };
                stack.last_mut().unwrap().1.push(v);
            }
            t if t.starts_with('[') => stack.push((Some(t.to_string()), Vec::new())),
            d => stack.last_mut().unwrap().1.push(d.parse().unwrap()),
        }
    }
    assert_eq!(stack.len(), 1);
    stack[0].1[0]
}

#[test]
fn generated_labels_agree_with_stack_evaluator() {
    let spec = GeneratorSpec::new(128, 3);
    let rows = listops_generate_sources(2000, &spec, 9).unwrap();
    let samples = listops_generate(2000, &spec, 9).unwrap();
    let mut counts = [0usize; NUM_CLASSES];
    for ((source, label), sample) in rows.iter().zip(&samples) {
        assert_eq!(stack_eval(source), *label as u32, "{source}");
        assert_eq!(sample.label, *label);
        assert_eq!(sample.ids, tokenize(source).unwrap());
        assert!(sample.ids.len() <= 128);
        assert!(sample.ids.iter().all(|&id| id < VOCAB_SIZE));
        counts[*label] += 1;
    }
    // Every class occurs.
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}

#[test]
fn hand_written_expressions() {
    for (src, want) in [
        ("[MAX 2 9 [MIN 4 7 ] 0 ]", 9),
        ("[MED 3 1 4 1 ]", 1),
        ("[SM 8 7 [MAX 5 1 ] ]", 0),
        ("( ( [MIN 3 ( [SM 9 9 ] ) ] ) )", 3),
        ("[SUM_MOD 4 4 ]", 8),
        ("7", 7),
    ] {
        assert_eq!(parse(src).unwrap().eval() as u32, want, "{src}");
        assert_eq!(stack_eval(src), want);
    }
    assert!(parse("[MAX 1 2").is_err());
    assert!(parse("[FOO 1 2 ]").is_err());
    assert!(tokenize("[MAX 1 x ]").is_err());
    assert_eq!(split_tokens("[MAX 1 2]"), ["[MAX", "1", "2", "]"]);
    assert_eq!(token_id("[SM"), token_id("[SUM_MOD"));
    assert_eq!(token_id("<pad>"), Some(0));
}

#[test]
fn tsv_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.tsv");
    let rows = listops_generate_sources(50, &GeneratorSpec::new(64, 3), 2).unwrap();
    write_lra_tsv(&path, &rows).unwrap();
    let back = load_lra_tsv(&path).unwrap();
    assert_eq!(back.len(), 50);
    for (s, (src, label)) in back.iter().zip(&rows) {
        assert_eq!(s.label, *label);
        assert_eq!(s.ids, tokenize(src).unwrap());
    }
    fs::write(&path, "Source\tTarget\n[MAX 1 2 ]\t2\n[MIN 1 ]\tten\n").unwrap();
    let err = load_lra_tsv(&path).unwrap_err().to_string();
    assert!(err.contains(":3"), "{err}");
    assert!(load_lra_tsv(&dir.path().join("missing.tsv")).is_err());
}

#[test]
fn schedule_and_clipping() {
    let peak = 1e-3;
    assert_eq!(cosine_warmup(0, 100, 10, peak), 0.0);
    assert!((cosine_warmup(5, 100, 10, peak) - 5e-4).abs() < 1e-18);
    let lrs: Vec<f64> = (10..100).map(|s| cosine_warmup(s, 100, 10, peak)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let mut grads = vec![
        Tensor::<f32>::from_f64([2], &[3.0, 0.0]).unwrap(),
        Tensor::from_f64([1], &[4.0]).unwrap(),
    ];
    assert_eq!(clip_grad_norm(&mut grads, 10.0), 5.0);
    assert_eq!(grads[0].data()[0], 3.0);
    clip_grad_norm(&mut grads, 1.0);
    let n: f32 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
}

#[test]
fn adamw_first_steps_match_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64([2], &[1.0, -2.0]).unwrap(), true);
    store.add("b", Tensor::from_f64([1], &[0.5]).unwrap(), false);
    let config = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(config, &store);
    let g = [
        Tensor::from_f64([2], &[0.2, -0.4]).unwrap(),
        Tensor::from_f64([1], &[1.0]).unwrap(),
    ];
    let lr = 0.01;
    opt.adamw_step(&mut store, &g, lr);
    // Step 1: bias-corrected m/sqrt(v) is sign(g).
    let w = store.by_name("w").unwrap().data();
    assert!((w[0] - (1.0 - lr * 0.1 * 1.0 - lr * 0.2 / (0.2 + 1e-8))).abs() < 1e-12);
    assert!((w[1] - (-2.0 + lr * 0.1 * 2.0 + lr * 0.4 / (0.4 + 1e-8))).abs() < 1e-12);
    let b = store.by_name("b").unwrap().data()[0];
    assert!((b - (0.5 - lr / (1.0 + 1e-8))).abs() < 1e-12);

    // Step 2 with the same gradient: moments equal g again after correction.
    let w0 = store.by_name("w").unwrap().data()[0];
    opt.adamw_step(&mut store, &g, lr);
    let m = 0.9 * 0.1 * 0.2 + 0.1 * 0.2;
    let v = 0.999 * 0.001 * 0.04 + 0.001 * 0.04;
    let step = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    let want = w0 - lr * 0.1 * w0 - lr * step;
    assert!((store.by_name("w").unwrap().data()[0] - want).abs() < 1e-12);
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            layers: 2,
            latents: 4,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            drop_path: 0.1,
            num_classes: NUM_CLASSES,
            tokenizer: TokenizerConfig::Ids {
                vocab: VOCAB_SIZE,
                max_len: 64,
            },
            ..ModelConfig::toy()
        },
        epochs,
        batch_size: 8,
        lr: 1e-3,
        warmup_epochs: 1,
        optimizer: AdamWConfig::default(),
        clip_norm: 1.0,
        seed: 4,
        data: DataSpec::Generated {
            train: 48,
            val: 16,
            test: 16,
            generator: GeneratorSpec::new(64, 3),
        },
        stop_at_train_acc: None,
        eval_threads: 2,
    }
}

#[test]
fn training_is_byte_reproducible() {
    let config = tiny_config(3);
    let splits = config.data.load(config.seed).unwrap();
    assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (48, 16, 16));
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outcomes: Vec<_> = dirs.iter().map(|d| train(&config, &splits, Some(d.path())).unwrap()).collect();
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&dirs[0], METRICS_FILE), read(&dirs[1], METRICS_FILE));
    assert_eq!(read(&dirs[0], CHECKPOINT_FILE), read(&dirs[1], CHECKPOINT_FILE));
    assert_eq!(outcomes[0].history.len(), 3);
    let lines = String::from_utf8(read(&dirs[0], METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["train_loss"].as_f64().unwrap().is_finite());
    }
    // The saved best model predicts like the in-memory one.
    let (saved, header) = checkpoint::load::<f32>(&dirs[0].path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(header.seed, config.seed);
    let ids: Vec<Vec<usize>> = splits.val.iter().map(|s| s.ids.clone()).collect();
    assert_eq!(saved.predict(&ids).unwrap(), outcomes[0].best.predict(&ids).unwrap());

    let mut other = config.clone();
    other.seed = 5;
    let changed = train(&other, &splits, None).unwrap();
    assert_ne!(changed.history[0].train_loss, outcomes[0].history[0].train_loss);
}

#[test]
fn exploding_run_aborts_with_numeric_error() {
    let mut config = tiny_config(2);
    config.lr = 1e30;
    config.clip_norm = 1e30;
    let splits = config.data.load(config.seed).unwrap();
    let err = train(&config, &splits, None).err().expect("divergence is reported");
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("epoch"), "{err}");
}

struct Constant(usize);

impl Predictor for Constant {
    fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    fn predict(&self, batch: &[Vec<usize>]) -> Result<Vec<usize>> {
        Ok(vec![self.0; batch.len()])
    }
}

#[test]
fn evaluation_counts_per_class_and_ignores_thread_count() {
    let samples: Vec<ListOpsSample> = (0..30)
        .map(|i| ListOpsSample {
            ids: vec![1 + i % 10],
            label: i % 3,
        })
        .collect();
    let r = evaluate(&Constant(1), &samples, 4, 1).unwrap();
    assert_eq!(r.n, 30);
    assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.per_class[1].total, 10);
    assert_eq!(r.per_class[1].correct, 10);
    assert_eq!(r.per_class[0].correct, 0);

    let config = tiny_config(1);
    let splits: Splits = config.data.load(1).unwrap();
    let model = train(&config, &splits, None).unwrap().best;
    let one = evaluate(&model, &splits.val, 3, 1).unwrap();
    let many = evaluate(&model, &splits.val, 3, 4).unwrap();
    assert_eq!(one, many);

    let bad = [ListOpsSample { ids: vec![1], label: 12 }];
    assert!(evaluate(&Constant(0), &bad, 4, 1).is_err());
}
