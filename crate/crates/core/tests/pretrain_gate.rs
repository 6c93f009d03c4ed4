//! Pretraining produces a genuine zero-shot classifier: the held-out
//! accuracy gate, checkpoint determinism, and text-feature non-degeneracy.

mod common;

use batclip_core::adapt::zero_shot_accuracy;
use batclip_core::data::gen_shapes;
use batclip_core::model::tokenizer::PromptTemplate;
use common::{pretrained, FIXTURE_CLASSES, FIXTURE_IMAGE_SIZE};

#[test]
fn holdout_zero_shot_accuracy_clears_the_gate() {
    let (model, prompt) = pretrained();
    let holdout = gen_shapes(40, FIXTURE_CLASSES, FIXTURE_IMAGE_SIZE, 3000).unwrap();
    let acc = zero_shot_accuracy(model, &holdout, prompt).unwrap();
    assert!(acc >= 85.0, "held-out zero-shot accuracy {acc:.1}% below the 85% gate");
}

#[test]
fn distinct_templates_give_distinct_features() {
    let (model, prompt) = pretrained();
    let alt = PromptTemplate::new("a blurry photo of a <CLS>.", prompt.class_names.clone()).unwrap();
    let base = model.encode_text_eval(prompt).unwrap();
    let blurry = model.encode_text_eval(&alt).unwrap();
    let d = model.arch.embed_dim;
    for c in 0..prompt.class_count() {
        let dist: f64 = base[c * d..(c + 1) * d]
            .iter()
            .zip(&blurry[c * d..(c + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0, "class {c}: template change did not move the text feature");
    }
}

#[test]
fn learned_temperature_is_sane() {
    let (model, _) = pretrained();
    assert!(model.tau > 0.0 && model.tau <= 1.0, "tau = {}", model.tau);
}
