use lads_core::augnet::{cc_loss_for_output, lads_loss, train_augnet, AugBatch, AugTrainConfig, DomainPair};
use lads_core::store::Split;
use lads_core::synth::{generate_world, WorldConfig};

fn convergence_config() -> AugTrainConfig {
    AugTrainConfig {
        alpha: 0.5,
        lr: 0.01,
        batch_size: 64,
        weight_decay: 0.05,
        epochs: 200,
        temperature: 10.0,
        ..Default::default()
    }
}

#[test]
fn synthetic_world_training_converges() {
    let world = generate_world(&WorldConfig { noise_sigma: 0.05, ..Default::default() }).unwrap();
    let train = world.bundle.split(Split::Train).unwrap();
    let pairs = vec![DomainPair::new(0, 1); train.len()];
    let cfg = convergence_config();
    let (params, log) = train_augnet(train.rows(), train.class_labels(), &pairs, &world.bank, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 200);

    let batch = AugBatch::new(train.rows(), train.class_labels(), &pairs).unwrap();
    let loss = lads_loss(&params, &batch, &world.bank, &cfg).unwrap();
    let base_cc = (0..train.len())
        .map(|i| cc_loss_for_output(train.row(i), train.class_labels()[i], &world.bank, cfg.temperature).unwrap())
        .sum::<f64>()
        / train.len() as f64;

    assert!(loss.domain_alignment < 0.05, "L_DA {}", loss.domain_alignment);
    assert!(
        (loss.class_consistency - base_cc).abs() < 0.05,
        "L_CC {} vs untransformed {base_cc}",
        loss.class_consistency
    );
}

#[test]
fn identical_configs_train_identical_networks() {
    let world = generate_world(&WorldConfig { n_per_class_per_domain: 20, ..Default::default() }).unwrap();
    let train = world.bundle.split(Split::Train).unwrap();
    let pairs = vec![DomainPair::new(0, 1); train.len()];
    let cfg = AugTrainConfig { epochs: 5, seed: 9, ..convergence_config() };
    let run = || train_augnet(train.rows(), train.class_labels(), &pairs, &world.bank, &cfg).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    let bits = |p: &lads_core::augnet::AugNetParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(la, lb);

    let (c, _) = train_augnet(train.rows(), train.class_labels(), &pairs, &world.bank, &AugTrainConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}
