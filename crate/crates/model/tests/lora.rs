mod common;

use cmdrec_model::lora::is_adapter;
use cmdrec_model::train::Stepper;
use cmdrec_model::{inject_lora, BackboneConfig, ForwardOptions, LoraSpec, LoraTarget, Model, ModelError, Preset, TrainConfig};

#[test]
fn injection_is_bit_identical_to_base() {
    for p in Preset::ALL {
        let c = p.config(30);
        let mut model = Model::new(c.clone(), 4).unwrap();
        let batch = common::train_batch(2, &[9, 6], &c);
        let before = model.predict_scores(&batch).unwrap();
        let all = vec![LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo, LoraTarget::W1, LoraTarget::W2];
        inject_lora(&mut model, LoraSpec { targets: all, ..LoraSpec::default() }, 9).unwrap();
        let after = model.predict_scores(&batch).unwrap();
        assert!(before.iter().zip(&after).all(|(a, b)| a.bits_eq(b)), "{p}");
    }
}

#[test]
fn single_square_target_adds_rank_times_both_sides() {
    let c = BackboneConfig { n_layers: 1, ..Preset::Mistral.config(30) };
    let mut model = Model::new(c, 0).unwrap();
    let spec = LoraSpec { rank: 4, targets: vec![LoraTarget::Wq], train_head: false, ..LoraSpec::default() };
    let adapters = inject_lora(&mut model, spec, 0).unwrap();
    assert_eq!(adapters.len(), 1);
    assert_eq!((adapters[0].d_in, adapters[0].d_out), (64, 64));
    assert_eq!(model.params.trainable_count(), 512);
}

#[test]
fn trainable_count_matches_enumeration() {
    for p in Preset::ALL {
        for targets in [LoraTarget::ATTENTION.to_vec(), vec![LoraTarget::W1, LoraTarget::W2]] {
            let mut model = Model::new(p.config(30), 0).unwrap();
            let expected: usize = model
                .params
                .iter()
                .filter(|q| targets.iter().any(|t| t.matches(&q.name)))
                .map(|q| 3 * (q.value.rows + q.value.cols))
                .sum();
            let spec = LoraSpec { rank: 3, targets: targets.clone(), train_head: false, ..LoraSpec::default() };
            let adapters = inject_lora(&mut model, spec, 1).unwrap();
            assert_eq!(adapters.iter().map(|a| a.trainable).sum::<usize>(), expected);
            assert_eq!(model.params.trainable_count(), expected, "{p} {targets:?}");
        }
        let mut model = Model::new(p.config(30), 0).unwrap();
        let head = model.params.get("embed.item").unwrap().len();
        let adapters = inject_lora(&mut model, LoraSpec::default(), 1).unwrap();
        let lora: usize = adapters.iter().map(|a| a.trainable).sum();
        assert_eq!(model.params.trainable_count(), lora + head);
    }
}

#[test]
fn rank_must_stay_below_both_dimensions() {
    let mut model = Model::new(Preset::Mistral.config(30), 0).unwrap();
    // Key projection of the GQA preset is 64 x 16.
    let spec = LoraSpec { rank: 16, targets: vec![LoraTarget::Wk], ..LoraSpec::default() };
    assert!(matches!(inject_lora(&mut model, spec, 0), Err(ModelError::RankTooLarge { .. })));
    let spec = LoraSpec { rank: 15, targets: vec![LoraTarget::Wk], ..LoraSpec::default() };
    inject_lora(&mut model, spec, 0).unwrap();
}

#[test]
fn frozen_base_survives_training() {
    for p in [Preset::Mixtral, Preset::Bert] {
        let c = p.config(30);
        let mut model = Model::new(c.clone(), 0).unwrap();
        inject_lora(&mut model, LoraSpec::default(), 2).unwrap();
        let base = |m: &Model| m.params.checksum(|q| !is_adapter(&q.name) && q.name != "embed.item");
        let adapters = |m: &Model| m.params.checksum(|q| is_adapter(&q.name));
        let (base0, ad0) = (base(&model), adapters(&model));
        let mut stepper = Stepper::new(&model, &TrainConfig::default());
        for step in 0..100 {
            let batch = common::train_batch(step, &[12, 8, 5], &c);
            let (_, grads, _) = model.loss_and_grads(&batch, &ForwardOptions::train(step)).unwrap();
            stepper.step(&mut model, grads);
        }
        assert_eq!(base(&model), base0, "{p}");
        assert_ne!(adapters(&model), ad0, "{p}");
    }
}
