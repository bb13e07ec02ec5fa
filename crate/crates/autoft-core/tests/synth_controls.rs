//! Control experiments on the synthetic benchmark: the generator's
//! divergence and overlap knobs must produce the transfer structure they
//! claim, and self-transfer must be a no-op.

mod common;

use autoft_core::features::{Domain, Split};
use autoft_core::synth::{generate, SynthSpec};
use autoft_core::training::{evaluate_dcn, run_finetune, run_pretrain, RunConfig, Stage};

use common::{encode_rows, vocab_over};

fn control_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(Stage::Pretrain);
    cfg.seed = seed;
    cfg.arch.embed_dim = 8;
    cfg.arch.deep_layers = vec![32, 16];
    cfg.epochs = 10;
    cfg
}

/// With delta = 0 and full overlap the two domains are the same
/// distribution, so a source-trained model scores target data as well as
/// source data (identical-distribution control).
#[test]
fn delta_zero_transfers_perfectly() {
    let spec = SynthSpec {
        divergence: 0.0,
        item_overlap: 1.0,
        source_count: 30_000,
        target_count: 30_000,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let vocab = vocab_over(&data.schema, &[&data.source.train, &data.target.train]);
    let src_train = encode_rows(&data.source.train, &data.schema, &vocab, Domain::Source, Split::Train);
    let src_val = encode_rows(&data.source.validation, &data.schema, &vocab, Domain::Source, Split::Validation);
    let src_test = encode_rows(&data.source.test, &data.schema, &vocab, Domain::Source, Split::Test);
    let tgt_test = encode_rows(&data.target.test, &data.schema, &vocab, Domain::Target, Split::Test);

    let model = run_pretrain(&src_train, &src_val, &vocab.sizes(), &control_cfg(11)).unwrap();
    let (src_auc, _) = evaluate_dcn(&model.params, &src_test).unwrap();
    let (tgt_auc, _) = evaluate_dcn(&model.params, &tgt_test).unwrap();
    assert!(
        (src_auc - tgt_auc).abs() < 0.01,
        "delta=0 control: source AUC {src_auc:.4} vs target AUC {tgt_auc:.4}"
    );
}

/// With delta = 1 and zero overlap nothing transfers: a source-trained
/// model is uninformed about the target (independence control).
#[test]
fn delta_one_zero_overlap_does_not_transfer() {
    let spec = SynthSpec {
        divergence: 1.0,
        item_overlap: 0.0,
        source_count: 20_000,
        target_count: 10_000,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let vocab = vocab_over(&data.schema, &[&data.source.train, &data.target.train]);
    let src_train = encode_rows(&data.source.train, &data.schema, &vocab, Domain::Source, Split::Train);
    let src_val = encode_rows(&data.source.validation, &data.schema, &vocab, Domain::Source, Split::Validation);
    let tgt_test = encode_rows(&data.target.test, &data.schema, &vocab, Domain::Target, Split::Test);

    let model = run_pretrain(&src_train, &src_val, &vocab.sizes(), &control_cfg(13)).unwrap();
    let (tgt_auc, _) = evaluate_dcn(&model.params, &tgt_test).unwrap();
    assert!(
        (tgt_auc - 0.5).abs() < 0.05,
        "delta=1 zero-overlap control: target AUC {tgt_auc:.4} should be chance level"
    );
}

/// Fine-tuning on the pretraining data itself with a tiny learning rate
/// is a self-transfer control: validation AUC stays within 0.005 of the
/// pretrained model's.
#[test]
fn self_transfer_is_a_no_op() {
    let spec = SynthSpec {
        source_count: 10_000,
        target_count: 2_000,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let vocab = vocab_over(&data.schema, &[&data.source.train, &data.target.train]);
    let src_train = encode_rows(&data.source.train, &data.schema, &vocab, Domain::Source, Split::Train);
    let src_val = encode_rows(&data.source.validation, &data.schema, &vocab, Domain::Source, Split::Validation);

    let pre = run_pretrain(&src_train, &src_val, &vocab.sizes(), &control_cfg(17)).unwrap();
    let (pre_auc, _) = evaluate_dcn(&pre.params, &src_val).unwrap();

    let mut ft_cfg = control_cfg(18);
    ft_cfg.stage = Stage::FineTune;
    ft_cfg.learning_rate = 1e-5;
    ft_cfg.epochs = 3;
    let ft = run_finetune(pre.params, &src_train, &src_val, &ft_cfg).unwrap();
    let (ft_auc, _) = evaluate_dcn(&ft.params, &src_val).unwrap();
    assert!(
        (pre_auc - ft_auc).abs() < 0.005,
        "self-transfer: pretrain val AUC {pre_auc:.4} vs fine-tuned {ft_auc:.4}"
    );
}
