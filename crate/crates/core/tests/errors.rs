use tryon_core::config::RunConfig;
use tryon_core::dcaa::{tokenize, MAX_TEXT_TOKENS};
use tryon_core::diffusion::derive_stage2_inputs;
use tryon_core::error::Error;
use tryon_core::stage1::{stage1_forward, Stage1Config, Stage1Model};
use tryon_core::synth::GeneratorSpec;
use tryon_core::tensor::Tensor;

#[test]
fn unknown_caption_words_are_reported() {
    assert!(matches!(tokenize("plain zebra top"), Err(Error::UnknownToken(w)) if w == "zebra"));
    let ids = tokenize("Striped long-sleeve top").unwrap();
    assert_eq!(ids[0], 0);
    assert_eq!(ids.len(), 5);
    let long = vec!["plain"; 20].join(" ");
    assert_eq!(tokenize(&long).unwrap().len(), MAX_TEXT_TOKENS);
}

#[test]
fn wrong_input_size_is_a_shape_error() {
    let cfg = RunConfig::default();
    let model = Stage1Model::new(Stage1Config::from_run(&cfg), 0).unwrap();
    let small = Tensor::zeros(&[3, 32, 24]);
    assert!(matches!(stage1_forward(&model, &small, &small, &small), Err(Error::Shape(_))));
}

#[test]
fn empty_coarse_mask_is_degenerate() {
    let z = Tensor::zeros(&[3, 16, 16]);
    assert!(matches!(derive_stage2_inputs(&z, &z, &z, 0.05), Err(Error::Degenerate(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    for (k, v) in [("batch_size", "0"), ("beta1", "1.5"), ("height", "30"), ("sample_steps", "100000")] {
        let mut cfg = RunConfig::default();
        cfg.set(k, v).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k}={v} accepted");
    }
    let spec = GeneratorSpec {
        height: 20,
        ..GeneratorSpec::default()
    };
    assert!(spec.validate().is_err());
}
