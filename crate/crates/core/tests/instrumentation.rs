mod common;

use bixt_core::attention::ShareScheme;
use bixt_core::instrumentation::cost::{analytic_params, flop_count, preset, FlopConvention, PRESETS};
use bixt_core::instrumentation::dof::dof_calc;
use bixt_core::instrumentation::export::{export_attention, read_csv, read_pgm, write_pgm, PgmMode};
use bixt_core::instrumentation::symmetry::{pearson, symmetry_score};
use bixt_core::model::{init_model, AttentionVariant, ForwardOptions, HeadKind, Model, ModelConfig};
use bixt_core::nn::ForwardCtx;
use bixt_core::tensor::Tape;
use bixt_core::tokenizers::{PatchSpec, TokenInput, TokenizerConfig};
use common::{randn, rng};

fn image_config(variant: AttentionVariant, head: HeadKind) -> ModelConfig {
    ModelConfig {
        layers: 3,
        latents: 4,
        dim: 12,
        heads: 3,
        mlp_ratio: 2,
        variant,
        sa_count: 2,
        share: ShareScheme::AllButFirst,
        head,
        num_classes: 5,
        drop_path: 0.0,
        tokenizer: TokenizerConfig::Patch(PatchSpec {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            stride: 2,
        }),
    }
}

fn test_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for variant in [
        AttentionVariant::Bidirectional,
        AttentionVariant::Sequential,
        AttentionVariant::Iterative,
        AttentionVariant::FullSelfAttention,
    ] {
        for head in [HeadKind::ClassifyMeanLatent, HeadKind::DenseTokenLinear, HeadKind::None] {
            out.push(image_config(variant, head));
        }
    }
    for share in [ShareScheme::None, ShareScheme::All] {
        out.push(ModelConfig {
            share,
            ..image_config(AttentionVariant::Iterative, HeadKind::ClassifyMeanLatent)
        });
    }
    let mut ids = ModelConfig::toy();
    ids.tokenizer = TokenizerConfig::Ids { vocab: 8, max_len: 20 };
    out.push(ids);
    out.push(ModelConfig {
        tokenizer: TokenizerConfig::Points { channels: 6 },
        ..image_config(AttentionVariant::Bidirectional, HeadKind::DenseTokenLinear)
    });
    out
}

fn input_for(config: &ModelConfig) -> TokenInput<f64> {
    let mut r = rng(7);
    match config.tokenizer {
        TokenizerConfig::Patch(s) => TokenInput::Images(randn(&mut r, &[1, s.height, s.width, s.channels], 1.0)),
        TokenizerConfig::Ids { max_len, vocab } => TokenInput::Ids(vec![(0..max_len).map(|i| i % vocab).collect()]),
        TokenizerConfig::Points { channels } => TokenInput::Points(randn(&mut r, &[1, 9, channels], 1.0)),
    }
}

fn tape_macs(model: &Model<f64>, input: &TokenInput<f64>) -> u64 {
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let out = model.forward(&p, &ForwardCtx::eval(), input, &ForwardOptions::default()).unwrap();
    if model.config.head != HeadKind::None {
        let _ = match model.config.head {
            HeadKind::DenseTokenLinear => model.dense_token_head(&p, &out, None).unwrap(),
            _ => model.classification_head(&p, &out).unwrap(),
        };
    }
    tape.total_matmul_macs()
}

#[test]
fn counted_macs_equal_executed_macs() {
    for config in test_configs() {
        let model = init_model::<f64>(&config, 1).unwrap();
        let input = input_for(&config);
        let seq_len = match &input {
            TokenInput::Points(t) => Some(t.shape()[1]),
            _ => None,
        };
        let report = flop_count(&config, seq_len, FlopConvention::AllMatmuls).unwrap();
        assert_eq!(report.flops, tape_macs(&model, &input), "{config:?}");
        assert_eq!(report.params as usize, model.num_params(), "{config:?}");
        assert_eq!(analytic_params(&config), model.num_params(), "{config:?}");
    }
}

#[test]
fn every_preset_resolves_and_counts() {
    for name in PRESETS {
        let (config, convention) = preset(name).unwrap();
        let report = flop_count(&config, None, convention).unwrap();
        assert!(report.flops > 0 && report.params > 0, "{name}");
        assert_eq!(report.params as usize, analytic_params(&config));
    }
    assert!(preset("nonexistent").is_err());
}

#[test]
fn skip_convention_only_drops_token_self_attention_products() {
    let (config, _) = preset("transformer_lra_listops").unwrap();
    let all = flop_count(&config, None, FlopConvention::AllMatmuls).unwrap();
    let skip = flop_count(&config, None, FlopConvention::SkipSelfAttentionProducts).unwrap();
    // Two N x N x D products per layer.
    let n = 2048u64;
    let d = 64u64;
    assert_eq!(all.flops - skip.flops, config.layers as u64 * 2 * n * n * d);
    let (bixt, _) = preset("bixt_lra_listops").unwrap();
    let a = flop_count(&bixt, None, FlopConvention::AllMatmuls).unwrap();
    let b = flop_count(&bixt, None, FlopConvention::SkipSelfAttentionProducts).unwrap();
    // Latent self-attention is not token self-attention.
    assert_eq!(a.flops, b.flops);
}

#[test]
fn dof_reports() {
    let r = dof_calc(64, 196).unwrap();
    assert_eq!((r.total, r.shared, r.unique), (12543, 12285, 258));
    let r = dof_calc(1, 1).unwrap();
    assert_eq!((r.total, r.shared, r.unique), (0, 0, 0));
    assert!(dof_calc(0, 4).is_err());
}

fn forward_with_attention(config: &ModelConfig, seed: u64) -> Vec<bixt_core::model::LayerAttention<f64>> {
    let model = init_model::<f64>(config, seed).unwrap();
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let opts = ForwardOptions {
        export_attention: true,
        token_hook: None,
    };
    let input = TokenInput::Images(randn(&mut rng(seed), &[2, 16, 16, 3], 1.0));
    model.forward(&p, &ForwardCtx::eval(), &input, &opts).unwrap().attention
}

#[test]
fn exported_maps_are_distributions() {
    let config = image_config(AttentionVariant::Bidirectional, HeadKind::ClassifyMeanLatent);
    let attention = forward_with_attention(&config, 2);
    let dir = tempfile::tempdir().unwrap();
    let summary = export_attention(&attention, 1, Some((8, 8)), PgmMode::PerHead, dir.path()).unwrap();
    assert_eq!(summary.csv_files.len(), config.layers * config.heads);
    assert_eq!(summary.pgm_files.len(), config.layers * config.heads);
    for csv in &summary.csv_files {
        let rows = read_csv(csv).unwrap();
        assert_eq!(rows.len(), config.latents);
        for row in rows {
            assert_eq!(row.len(), 64);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let (w, h, px) = read_pgm(&summary.pgm_files[0]).unwrap();
    assert_eq!((w, h, px.len()), (8, 8, 64));
    assert_eq!(px.iter().max(), Some(&255));

    let per_latent = tempfile::tempdir().unwrap();
    let s = export_attention(&attention, 0, Some((8, 8)), PgmMode::PerLatent, per_latent.path()).unwrap();
    assert_eq!(s.pgm_files.len(), config.layers * config.heads * config.latents);
    assert!(export_attention(&attention, 5, None, PgmMode::None, per_latent.path()).is_err());
    assert!(export_attention(&attention, 0, Some((7, 8)), PgmMode::PerHead, per_latent.path()).is_err());
}

#[test]
fn pgm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    write_pgm(&path, 3, 2, &[0.0, 0.5, 1.0, 0.25, 0.75, 0.0]).unwrap();
    let (w, h, px) = read_pgm(&path).unwrap();
    assert_eq!((w, h), (3, 2));
    assert_eq!(px, [0, 128, 255, 64, 191, 0]);
}

#[test]
fn symmetry_separates_shared_and_independent_similarities() {
    let bidir = image_config(AttentionVariant::Bidirectional, HeadKind::DenseTokenLinear);
    let report = symmetry_score(&forward_with_attention(&bidir, 3)).unwrap();
    assert!(report.trivial);
    assert_eq!(report.mean, 1.0);
    assert_eq!(report.min, 1.0);

    let seq = image_config(AttentionVariant::Sequential, HeadKind::DenseTokenLinear);
    let report = symmetry_score(&forward_with_attention(&seq, 3)).unwrap();
    assert!(!report.trivial);
    assert!(report.mean.abs() < 0.5, "{}", report.mean);

    let full = image_config(AttentionVariant::FullSelfAttention, HeadKind::DenseTokenLinear);
    assert!(symmetry_score(&forward_with_attention(&full, 3)).is_err());

    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) > 0.99, true);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
}
