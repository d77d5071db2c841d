// throwaway pipeline probe
use cmtd::attacks::{batch_attack, AttackConfig, AttackKind, SolverConfig, TargetMode};
use cmtd::data::synth::synthetic_digits;
use cmtd::defence::*;
use cmtd::nn::*;
use std::time::Instant;

fn accuracy(model: &Model, images: &cmtd::tensor::Tensor, labels: &[u8]) -> f64 {
    let preds = model.predict(images).unwrap();
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn main() {
    let t0 = Instant::now();
    let train = synthetic_digits(300, 1, "train");
    let test = synthetic_digits(100, 2, "test");
    println!("[{:?}] data ready", t0.elapsed());

    // substitute (attacker side) and oracle (defender side), different seeds
    let mut substitute = build_model(&ModelSpec::desk(Variant::Plain), 11).unwrap();
    fit_cross_entropy(&mut substitute, &train.images, &train.labels, 8, OptimizerCfg::default(), 101).unwrap();
    println!("[{:?}] substitute acc {:.3}", t0.elapsed(), accuracy(&substitute, &test.images, &test.labels));

    let mut oracle = build_model(&ModelSpec::desk(Variant::Plain), 22).unwrap();
    fit_cross_entropy(&mut oracle, &train.images, &train.labels, 8, OptimizerCfg::default(), 202).unwrap();
    let oracle_benign = accuracy(&oracle, &test.images, &test.labels);
    println!("[{:?}] oracle acc {:.3}", t0.elapsed(), oracle_benign);

    // FGSM transfer: craft on substitute, replay on oracle
    let mut fgsm_cfg = AttackConfig::default_for(AttackKind::Fgsm);
    fgsm_cfg.epsilon = 0.1;
    let sub300 = cmtd::data::make_desk_subset(&test, 30, 5).unwrap();
    let fgsm_batch = batch_attack(&substitute, &sub300, &fgsm_cfg, 1, None).unwrap();
    println!(
        "[{:?}] fgsm on substitute: success rate {:.3}; oracle acc on batch {:.3}",
        t0.elapsed(),
        fgsm_batch.success_rate(),
        accuracy(&oracle, &fgsm_batch.perturbed, &fgsm_batch.true_labels)
    );

    // classmap from the oracle's own FGSM examples over the train split
    let train_sub = cmtd::data::make_desk_subset(&train, 100, 7).unwrap();
    let cm_batch = batch_attack(&oracle, &train_sub, &fgsm_cfg, 2, None).unwrap();
    let vul = estimate_vulnerability(&oracle, &cm_batch).unwrap();
    let classmap = encode_classmap(&vul, "fgsm", 0.1, oracle.arch_hash());
    println!("[{:?}] classmap pairs: {:?}", t0.elapsed(),
        (0..10).map(|c| classmap.robust_label(c)).collect::<Vec<_>>());

    // defended training
    for (name, variant, seed) in [("nolock", Variant::DefendedNolock, 33), ("locked", Variant::DefendedLocked, 44)] {
        let mut defended = build_model(&ModelSpec::desk(variant), seed).unwrap();
        let hist = multitask_train(
            &mut defended, &train.images, &train.labels, &classmap,
            &LossWeights::default(), 0.1, 8, OptimizerCfg::default(), 303,
        ).unwrap();
        let benign_acc = accuracy(&defended, &test.images, &test.labels);
        let verdicts = classify_or_reject(&defended, &classmap, &test.images).unwrap();
        let misdetect = rejection_rate(&verdicts);
        let fgsm_acc = accuracy(&defended, &fgsm_batch.perturbed, &fgsm_batch.true_labels);
        let adv_verdicts = classify_or_reject(&defended, &classmap, &fgsm_batch.perturbed).unwrap();
        println!(
            "[{:?}] {name}: train acc {:.3}, benign acc {:.3} (drop {:.1} pts), misdetect {:.4}, fgsm-batch acc {:.3}, fgsm rejection {:.3}",
            t0.elapsed(), hist.last().unwrap().accuracy, benign_acc,
            (oracle_benign - benign_acc) * 100.0, misdetect, fgsm_acc,
            rejection_rate(&adv_verdicts),
        );

        // combined C&W kappa=0, nontargeted, 30 examples
        let mut cw_cfg = AttackConfig::default_for(AttackKind::CwL2Combined);
        cw_cfg.kappa = 0.0;
        cw_cfg.max_iterations = 300;
        cw_cfg.solver = SolverConfig { c_search_steps: 4, patience: 50, ..Default::default() };
        cw_cfg.target_mode = TargetMode::Nontargeted;
        let small = cmtd::data::make_desk_subset(&test, 3, 9).unwrap();
        let combo = batch_attack(&defended, &small, &cw_cfg, 4, Some(&classmap)).unwrap();
        // validity: main label != true AND pair match (fresh pass)
        let mut valid = 0;
        for i in 0..combo.len() {
            let adv = combo.perturbed.slice_batch(i);
            let v = detect(&defended, &classmap, &adv).unwrap();
            if v.accepted && v.predicted != combo.true_labels[i] {
                valid += 1;
            }
        }
        println!(
            "[{:?}] {name}: combined cw k=0 exact-success rate {:.3}, detector-valid rate {:.3}",
            t0.elapsed(), combo.success_rate(), valid as f64 / combo.len() as f64
        );
    }
    println!("[{:?}] done", t0.elapsed());
}
