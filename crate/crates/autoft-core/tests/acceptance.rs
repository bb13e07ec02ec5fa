//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `cargo test -p autoft-core --test acceptance -- --show-output`).
//!
//! The directional criteria run the reference synthetic benchmark
//! (delta 0.5, 60% item overlap, 50k source / 5k target, generator seed
//! 42) over five paired training seeds at desk scale.

mod common;

use std::time::Instant;

use autoft_core::dcn::{self, ArchConfig, Backbone, DcnParams};
use autoft_core::features::{Domain, EncodedInstance, Split};
use autoft_core::metrics;
use autoft_core::numerics::{finite_difference_check, log_softmax, softmax, SeededRng};
use autoft_core::policy::{
    autoft_forward, autoft_loss, gumbel_argmax_pair, gumbel_softmax_pair,
    straight_through_backward, AutoftModel, PolicyComponents, RouteBits, RouteMode,
};
use autoft_core::rundir::RunDir;
use autoft_core::synth::{generate, SynthSpec};
use autoft_core::training::{
    evaluate_autoft, evaluate_dcn, run_autoft, run_finetune, run_pretrain, score_autoft,
    RunConfig, Stage,
};

use common::{encode_concat, encode_rows, vocab_over};

fn toy_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 4,
        cross_layers: 2,
        deep_layers: vec![6, 5],
        backbone: Backbone::Dcn,
    }
}

fn toy_instance() -> EncodedInstance {
    EncodedInstance {
        fields: vec![vec![2], vec![1, 3]],
        label: 1,
    }
}

/// Criterion 1: finite-difference gradient checks over every parameter of
/// the DCN loss and of the AutoFT soft forward, toy model m=2 k=4
/// L_c=2 L_d=2, three seeds, max relative error < 1e-4 at h = 1e-5.
#[test]
fn acceptance_01_gradient_correctness() {
    let start = Instant::now();
    let lambda = 0.01;
    let inst = toy_instance();
    for seed in [11u64, 12, 13] {
        // plain DCN bank
        let mut rng = SeededRng::new(seed);
        let params = DcnParams::init(&toy_arch(), &[6, 7], &mut rng).unwrap();
        let (_, tape) = dcn::forward(&inst, &params).unwrap();
        let grads = dcn::backward(&inst, &params, &tape, inst.label, lambda, false);
        let mut point = Vec::new();
        params.write_flat(&mut point);
        let mut analytic = Vec::new();
        grads.write_flat(&mut analytic);
        let mut scratch = params.clone();
        let err = finite_difference_check(
            |flat| {
                scratch.read_flat(flat);
                let (yhat, _) = dcn::forward(&inst, &scratch).unwrap();
                dcn::loss(inst.label, yhat, lambda, &scratch, false)
            },
            &point,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "DCN gradcheck seed {seed}: {err}");

        // AutoFT soft forward (Y in place of p), gradients for the target
        // bank and all three policies
        let mut model =
            AutoftModel::from_pretrained(params, 9, PolicyComponents::all(), &mut rng).unwrap();
        let mut noise = SeededRng::new(seed ^ 0x5EED);
        for m in model.target.matrices_mut() {
            for v in m.as_mut_slice() {
                *v += 0.25 * noise.uniform(-1.0, 1.0);
            }
        }
        let tau = 1.3;
        let gumbel_seed = 1000 + seed;
        let mut rng2 = SeededRng::new(gumbel_seed);
        let (_, tape) =
            autoft_forward(&inst, &model, RouteMode::SampleSoft { tau, rng: &mut rng2 }).unwrap();
        let grads =
            straight_through_backward(&inst, &model, &tape, inst.label, lambda, false, true).unwrap();

        let mut point = Vec::new();
        model.target.write_flat(&mut point);
        for m in model.policies.matrices() {
            point.extend_from_slice(m.as_slice());
        }
        let mut analytic = Vec::new();
        grads.target.write_flat(&mut analytic);
        for m in grads.policies.matrices() {
            analytic.extend_from_slice(m.as_slice());
        }
        let mut scratch = model.clone();
        let err = finite_difference_check(
            |flat| {
                let bank_len = scratch.target.flat_len();
                scratch.target.read_flat(&flat[..bank_len]);
                let mut offset = bank_len;
                for m in scratch.policies.matrices_mut() {
                    let n = m.len();
                    m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                    offset += n;
                }
                let mut rng = SeededRng::new(gumbel_seed);
                let (yhat, _) =
                    autoft_forward(&inst, &scratch, RouteMode::SampleSoft { tau, rng: &mut rng })
                        .unwrap();
                autoft_loss(inst.label, yhat, lambda, &scratch, false, true)
            },
            &point,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "AutoFT soft gradcheck seed {seed}: {err}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "gradient checks took {elapsed:.1}s");
    println!("ACCEPTANCE 1 (gradient correctness, DCN + AutoFT soft forward): PASS ({elapsed:.1}s)");
}

/// Criterion 2: Gumbel-max argmax frequencies match the softmax
/// probabilities within +-0.01 over 1e5 seeded draws, 10 random pairs.
#[test]
fn acceptance_02_gumbel_max_fidelity() {
    let start = Instant::now();
    let mut pair_rng = SeededRng::new(20_240_201);
    let n = 100_000;
    for case in 0..10 {
        let pair = [pair_rng.uniform(-3.0, 3.0), pair_rng.uniform(-3.0, 3.0)];
        let alpha = softmax(&pair, 1.0).unwrap();
        let la = log_softmax(&pair);
        let log_alpha = [la[0], la[1]];
        let mut rng = SeededRng::derive(777, &[case]);
        let mut hits = 0usize;
        for _ in 0..n {
            let (category, _) = gumbel_argmax_pair(log_alpha, &mut rng);
            hits += usize::from(category == 0);
        }
        let freq = hits as f64 / n as f64;
        assert!(
            (freq - alpha[0]).abs() < 0.01,
            "case {case}: frequency {freq} vs alpha {}",
            alpha[0]
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "gumbel fidelity took {elapsed:.1}s");
    println!("ACCEPTANCE 2 (Gumbel-max sampling fidelity): PASS ({elapsed:.1}s)");
}

/// Criterion 3: at tau = 0.01 the relaxation is nearly discrete (mean max
/// coordinate >= 0.999 over 1e3 draws, logits with a clear strict max);
/// at tau = 1e3 the mean relaxation is within 1e-3 of (0.5, 0.5).
#[test]
fn acceptance_03_temperature_limits() {
    // cold limit
    for (i, pair) in [[4.0, 0.0], [0.0, 5.5], [6.0, 1.0]].iter().enumerate() {
        let la = log_softmax(pair);
        let log_alpha = [la[0], la[1]];
        let mut rng = SeededRng::derive(31337, &[i as u64]);
        let mean_max: f64 = (0..1000)
            .map(|_| {
                let (_, y) = gumbel_softmax_pair(log_alpha, 0.01, &mut rng);
                y[0].max(y[1])
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean_max >= 0.999, "pair {pair:?}: mean max coordinate {mean_max}");
    }
    // hot limit
    for (i, pair) in [[1.0, 0.0], [0.5, 0.3], [0.0, 0.0]].iter().enumerate() {
        let la = log_softmax(pair);
        let log_alpha = [la[0], la[1]];
        let mut rng = SeededRng::derive(4242, &[i as u64]);
        let mut mean = [0.0, 0.0];
        for _ in 0..1000 {
            let (_, y) = gumbel_softmax_pair(log_alpha, 1e3, &mut rng);
            mean[0] += y[0];
            mean[1] += y[1];
        }
        mean[0] /= 1000.0;
        mean[1] /= 1000.0;
        assert!(
            (mean[0] - 0.5).abs() < 1e-3 && (mean[1] - 0.5).abs() < 1e-3,
            "pair {pair:?}: mean Y {mean:?}"
        );
    }
    println!("ACCEPTANCE 3 (temperature limits of the relaxation): PASS");
}

fn small_benchmark_spec() -> SynthSpec {
    SynthSpec {
        num_items: 120,
        num_genres: 12,
        ctx_vocab_sizes: vec![20, 20],
        latent_dim: 6,
        source_count: 4000,
        target_count: 1500,
        divergence: 0.5,
        item_overlap: 0.6,
        seed: 7,
    }
}

fn desk_cfg(stage: Stage, seed: u64, small: bool) -> RunConfig {
    let mut cfg = RunConfig::new(stage);
    cfg.seed = seed;
    if small {
        cfg.arch.embed_dim = 8;
        cfg.arch.deep_layers = vec![32, 16];
        cfg.epochs = 6;
    }
    if stage.policy_components().is_some() {
        // benchmark temperature schedule
        cfg.tau_start = 2.0;
        cfg.tau_end = 0.2;
    }
    cfg
}

/// Criterion 4: the source bank's byte hash is identical before and after
/// a full AutoFT training run.
#[test]
fn acceptance_04_freezing_contract() {
    let data = generate(&small_benchmark_spec()).unwrap();
    let vocab = vocab_over(&data.schema, &[&data.source.train, &data.target.train]);
    let all_train = encode_concat(
        &[&data.source.train, &data.target.train],
        &data.schema,
        &vocab,
        Domain::Source,
        Split::Train,
    );
    let all_val = encode_concat(
        &[&data.source.validation, &data.target.validation],
        &data.schema,
        &vocab,
        Domain::Source,
        Split::Validation,
    );
    let tgt_train = encode_rows(&data.target.train, &data.schema, &vocab, Domain::Target, Split::Train);
    let tgt_val = encode_rows(
        &data.target.validation,
        &data.schema,
        &vocab,
        Domain::Target,
        Split::Validation,
    );
    let pre = run_pretrain(&all_train, &all_val, &vocab.sizes(), &desk_cfg(Stage::Pretrain, 1, true)).unwrap();
    let pretrained_hash = pre.params.byte_hash();
    let out = run_autoft(pre.params, &tgt_train, &tgt_val, &desk_cfg(Stage::AutoFT, 1, true)).unwrap();
    assert_eq!(
        out.model.source.byte_hash(),
        pretrained_hash,
        "source bank changed during AutoFT training"
    );
    println!("ACCEPTANCE 4 (freezing contract): PASS");
}

/// Criterion 5: with bitwise-equal banks the prediction is invariant to
/// the route: 100 random forced routes, max |delta yhat| < 1e-12.
#[test]
fn acceptance_05_route_reduction() {
    let mut rng = SeededRng::new(55);
    let pretrained = DcnParams::init(&toy_arch(), &[6, 7], &mut rng).unwrap();
    let model = AutoftModel::from_pretrained(pretrained, 9, PolicyComponents::all(), &mut rng).unwrap();
    let mut route_rng = SeededRng::new(56);
    let mut max_delta = 0.0f64;
    for inst_seed in 0..5u64 {
        let mut inst_rng = SeededRng::derive(57, &[inst_seed]);
        let inst = EncodedInstance {
            fields: vec![
                vec![inst_rng.next_index(6) as u32],
                vec![inst_rng.next_index(7) as u32, inst_rng.next_index(7) as u32],
            ],
            label: 1,
        };
        let mut reference: Option<f64> = None;
        for _ in 0..100 {
            let bits = RouteBits {
                embed: (0..2).map(|_| route_rng.next_index(2) as u8).collect(),
                cross: (0..2).map(|_| route_rng.next_index(2) as u8).collect(),
                deep: (0..2).map(|_| route_rng.next_index(2) as u8).collect(),
            };
            let (yhat, _) = autoft_forward(&inst, &model, RouteMode::Forced(&bits)).unwrap();
            let r = *reference.get_or_insert(yhat);
            max_delta = max_delta.max((yhat - r).abs());
        }
    }
    assert!(max_delta < 1e-12, "route changed prediction by {max_delta}");
    println!("ACCEPTANCE 5 (route reduction with equal banks): PASS (max delta {max_delta:e})");
}

/// Criterion 6: rank-sum AUC equals the O(n^2) pairwise brute force to
/// 1e-12 on 50 random 200-instance cases, ties included.
#[test]
fn acceptance_06_auc_oracle_equivalence() {
    fn brute_force(labels: &[u8], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }
    let mut rng = SeededRng::new(606);
    let mut checked = 0;
    while checked < 50 {
        let labels: Vec<u8> = (0..200).map(|_| rng.next_index(2) as u8).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        // quantized scores force tie groups
        let scores: Vec<f64> = (0..200).map(|_| rng.next_index(25) as f64 / 25.0).collect();
        let fast = metrics::auc(&labels, &scores).unwrap();
        let slow = brute_force(&labels, &scores);
        assert!((fast - slow).abs() < 1e-12, "case {checked}: {fast} vs {slow}");
        checked += 1;
    }
    println!("ACCEPTANCE 6 (AUC rank-sum vs brute force): PASS");
}

/// Criteria 7 and 8, which share the 5-seed benchmark matrix.
///
/// 7 (directional transfer): AutoFT mean test AUC >= Fine-Tune mean,
/// Fine-Tune mean >= Target-only mean - 0.002, and AutoFT beats Fine-Tune
/// in at least 4 of 5 paired seeds, all on the seed-42 reference
/// benchmark in under 30 minutes.
///
/// 8 (ablation ordering): full AutoFT mean >= each single-component
/// ablation's mean - 0.001 over the same seeds.
#[test]
fn acceptance_07_08_directional_transfer_and_ablations() {
    let start = Instant::now();
    let data = generate(&SynthSpec::default()).unwrap();
    let vocab = vocab_over(&data.schema, &[&data.source.train, &data.target.train]);
    let sizes = vocab.sizes();
    let all_train = encode_concat(
        &[&data.source.train, &data.target.train],
        &data.schema,
        &vocab,
        Domain::Source,
        Split::Train,
    );
    let all_val = encode_concat(
        &[&data.source.validation, &data.target.validation],
        &data.schema,
        &vocab,
        Domain::Source,
        Split::Validation,
    );
    let tgt_train = encode_rows(&data.target.train, &data.schema, &vocab, Domain::Target, Split::Train);
    let tgt_val = encode_rows(
        &data.target.validation,
        &data.schema,
        &vocab,
        Domain::Target,
        Split::Validation,
    );
    let tgt_test = encode_rows(&data.target.test, &data.schema, &vocab, Domain::Target, Split::Test);

    let seeds = [1u64, 2, 3, 4, 5];
    let ablations = [
        Stage::AblationEmbedding,
        Stage::AblationCross,
        Stage::AblationDeep,
        Stage::AblationCrossDeep,
    ];
    let mut autoft_aucs = Vec::new();
    let mut finetune_aucs = Vec::new();
    let mut target_only_aucs = Vec::new();
    let mut ablation_aucs: Vec<Vec<f64>> = vec![Vec::new(); ablations.len()];

    for &seed in &seeds {
        let pre = run_pretrain(&all_train, &all_val, &sizes, &desk_cfg(Stage::Pretrain, seed, false)).unwrap();

        let ft = run_finetune(
            pre.params.clone(),
            &tgt_train,
            &tgt_val,
            &desk_cfg(Stage::FineTune, seed, false),
        )
        .unwrap();
        finetune_aucs.push(evaluate_dcn(&ft.params, &tgt_test).unwrap().0);

        let af = run_autoft(
            pre.params.clone(),
            &tgt_train,
            &tgt_val,
            &desk_cfg(Stage::AutoFT, seed, false),
        )
        .unwrap();
        autoft_aucs.push(evaluate_autoft(&af.model, &tgt_test).unwrap().0);

        let to = run_pretrain(&tgt_train, &tgt_val, &sizes, &desk_cfg(Stage::TargetOnly, seed, false)).unwrap();
        target_only_aucs.push(evaluate_dcn(&to.params, &tgt_test).unwrap().0);

        for (i, &stage) in ablations.iter().enumerate() {
            let ab = run_autoft(pre.params.clone(), &tgt_train, &tgt_val, &desk_cfg(stage, seed, false))
                .unwrap();
            ablation_aucs[i].push(evaluate_autoft(&ab.model, &tgt_test).unwrap().0);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let af_mean = mean(&autoft_aucs);
    let ft_mean = mean(&finetune_aucs);
    let to_mean = mean(&target_only_aucs);
    let wins = autoft_aucs
        .iter()
        .zip(&finetune_aucs)
        .filter(|(a, f)| a > f)
        .count();

    println!(
        "benchmark means: AutoFT {af_mean:.4}, Fine-Tune {ft_mean:.4}, Target-only {to_mean:.4}; AutoFT wins {wins}/5"
    );
    assert!(af_mean >= ft_mean, "AutoFT mean {af_mean} < Fine-Tune mean {ft_mean}");
    assert!(
        ft_mean >= to_mean - 0.002,
        "Fine-Tune mean {ft_mean} < Target-only mean {to_mean} - 0.002"
    );
    assert!(wins >= 4, "AutoFT beat Fine-Tune in only {wins}/5 seeds");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1800.0, "benchmark took {elapsed:.0}s, budget is 30 min");
    println!("ACCEPTANCE 7 (directional transfer AutoFT >= Fine-Tune >= Target-only): PASS ({elapsed:.0}s)");

    for (i, &stage) in ablations.iter().enumerate() {
        let ab_mean = mean(&ablation_aucs[i]);
        println!("  ablation {}: mean {ab_mean:.4}", stage.method_name());
        assert!(
            af_mean >= ab_mean - 0.001,
            "full AutoFT mean {af_mean} below ablation {} mean {ab_mean} - 0.001",
            stage.method_name()
        );
    }
    println!("ACCEPTANCE 8 (full AutoFT >= every single-component ablation - 0.001): PASS");
}

/// Criterion 9: two end-to-end pipeline runs with identical seeds produce
/// bit-identical data files, checkpoints, metrics and route dumps.
#[test]
fn acceptance_09_pipeline_determinism() {
    let run_pipeline = |root: &std::path::Path| {
        let data_dir = root.join("data");
        let spec = small_benchmark_spec();
        generate(&spec).unwrap().write_to_dir(&data_dir).unwrap();
        let schema = autoft_core::features::Schema::load(&data_dir.join("schema.toml")).unwrap();
        let train_rows = [
            autoft_core::features::read_csv_rows(&data_dir.join("source_train.csv"), &schema).unwrap(),
            autoft_core::features::read_csv_rows(&data_dir.join("target_train.csv"), &schema).unwrap(),
        ]
        .concat();
        let vocab = autoft_core::features::build_vocab(&train_rows, &schema, 1).unwrap();
        vocab.save(&schema, &data_dir.join("vocab.json")).unwrap();
        let vocab_hash = vocab.hash(&schema);
        let load = |name: &str, domain, split| {
            autoft_core::features::load_dataset(&data_dir.join(name), &schema, &vocab, domain, split)
                .unwrap()
        };
        let tgt_train = load("target_train.csv", Domain::Target, Split::Train);
        let tgt_val = load("target_validation.csv", Domain::Target, Split::Validation);
        let tgt_test = load("target_test.csv", Domain::Target, Split::Test);
        let src_train = load("source_train.csv", Domain::Source, Split::Train);
        let src_val = load("source_validation.csv", Domain::Source, Split::Validation);

        let pre_cfg = desk_cfg(Stage::Pretrain, 3, true);
        let pre_run = RunDir::create(&root.join("pretrain"), false).unwrap();
        pre_run.write_config(&pre_cfg).unwrap();
        let pre = run_pretrain(&src_train, &src_val, &vocab.sizes(), &pre_cfg).unwrap();
        pre_run.write_metrics(&pre.history).unwrap();
        let bytes = autoft_core::checkpoint::dcn_to_bytes(&pre.params, &vocab.sizes(), &vocab_hash);
        autoft_core::checkpoint::save_bytes(&pre_run.checkpoint_path(), &bytes).unwrap();

        let af_cfg = desk_cfg(Stage::AutoFT, 3, true);
        let af_run = RunDir::create(&root.join("autoft"), false).unwrap();
        af_run.write_config(&af_cfg).unwrap();
        let af = run_autoft(pre.params, &tgt_train, &tgt_val, &af_cfg).unwrap();
        af_run.write_metrics(&af.history).unwrap();
        let bytes = autoft_core::checkpoint::autoft_to_bytes(
            &af.model,
            &vocab.sizes(),
            &vocab_hash,
            af_cfg.policy_hidden,
        );
        autoft_core::checkpoint::save_bytes(&af_run.checkpoint_path(), &bytes).unwrap();
        let (labels, scores, routes) = score_autoft(&af.model, &tgt_test).unwrap();
        af_run.write_route_dump(&routes).unwrap();
        af_run
            .write_final_metrics(&metrics::RunMetrics {
                method: "AutoFT".into(),
                seed: af_cfg.seed,
                auc: metrics::auc(&labels, &scores).unwrap(),
                logloss: metrics::logloss(&labels, &scores).unwrap(),
                instances: labels.len(),
            })
            .unwrap();
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_pipeline(dir_a.path());
    run_pipeline(dir_b.path());

    let files = [
        "data/source_train.csv",
        "data/target_test.csv",
        "data/vocab.json",
        "pretrain/config.toml",
        "pretrain/metrics.jsonl",
        "pretrain/checkpoint.bin",
        "autoft/config.toml",
        "autoft/metrics.jsonl",
        "autoft/checkpoint.bin",
        "autoft/routes.csv",
        "autoft/final_metrics.json",
    ];
    for f in files {
        let a = std::fs::read(dir_a.path().join(f)).unwrap();
        let b = std::fs::read(dir_b.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    println!("ACCEPTANCE 9 (end-to-end determinism, bit-identical outputs): PASS");
}

/// Criterion 10: routing fractions satisfy pretrained + finetuned = 1 per
/// unit exactly, and the depth-ordered fine-tuned series is emitted
/// (reported, not gated).
#[test]
fn acceptance_10_routing_report() {
    let data = generate(&small_benchmark_spec()).unwrap();
    let vocab = vocab_over(&data.schema, &[&data.source.train, &data.target.train]);
    let tgt_train = encode_rows(&data.target.train, &data.schema, &vocab, Domain::Target, Split::Train);
    let tgt_val = encode_rows(
        &data.target.validation,
        &data.schema,
        &vocab,
        Domain::Target,
        Split::Validation,
    );
    let tgt_test = encode_rows(&data.target.test, &data.schema, &vocab, Domain::Target, Split::Test);
    let all_train = encode_concat(
        &[&data.source.train, &data.target.train],
        &data.schema,
        &vocab,
        Domain::Source,
        Split::Train,
    );
    let all_val = encode_concat(
        &[&data.source.validation, &data.target.validation],
        &data.schema,
        &vocab,
        Domain::Source,
        Split::Validation,
    );
    let pre = run_pretrain(&all_train, &all_val, &vocab.sizes(), &desk_cfg(Stage::Pretrain, 2, true)).unwrap();
    let af = run_autoft(pre.params, &tgt_train, &tgt_val, &desk_cfg(Stage::AutoFT, 2, true)).unwrap();
    let (_, _, routes) = score_autoft(&af.model, &tgt_test).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let run = RunDir::create(&tmp.path().join("r"), false).unwrap();
    run.write_route_dump(&routes).unwrap();
    let report = metrics::routing_fractions(&run.read_route_dump().unwrap()).unwrap();

    for units in [&report.embed, &report.cross, &report.deep] {
        for &p in units {
            let finetuned = 1.0 - p;
            assert_eq!(p + finetuned, 1.0, "fractions must sum to exactly 1");
            assert!((0.0..=1.0).contains(&p));
        }
    }
    println!("fine-tuned fraction by depth (qualitative, not gated):");
    for (unit, f) in report.finetuned_by_depth() {
        println!("  {unit}: {f:.4}");
    }
    println!("ACCEPTANCE 10 (routing report consistency): PASS");
}
