use defdr_core::attacks::{attack_success_rate, train_patch_lavan, PatchSpec, PatchTrainConfig, Placement};
use defdr_core::harness::{prepare_experiment, ExperimentConfig, DEFAULT_TARGET_CLASS};
use defdr_core::Prng;

#[test]
fn fixed_location_patch_reaches_its_target_on_held_out_images() {
    let cfg = ExperimentConfig::default();
    let data = prepare_experiment(&cfg).unwrap();
    let side = 8;
    let at = (cfg.image_side - side) / 2;
    let spec = PatchSpec { side, placement: Placement::Fixed { row: at, col: at }, target_class: DEFAULT_TARGET_CLASS };
    let images = data.train.take(cfg.attack.train_images);
    let patch = train_patch_lavan(&data.model, &images, spec, &PatchTrainConfig::default(), &mut Prng::new(7)).unwrap();
    let held_out = attack_success_rate(&data.model, &patch, &data.test, &mut Prng::new(8)).unwrap();
    assert!(held_out.targeted_success >= 0.6, "targeted success {}", held_out.targeted_success);
}
