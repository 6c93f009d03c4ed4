//! Shared pretrained-model fixture. Pretraining costs about a minute, so
//! the checkpoint is cached under the cargo tmp dir; every test binary in
//! the workspace resolves the same bytes (the pipeline is bit-deterministic
//! for the fixed seed, so a concurrent re-creation race is benign).

use batclip_core::data::gen_shapes;
use batclip_core::model::checkpoint::Checkpoint;
use batclip_core::model::pretrain::{pretrain_contrastive, PretrainConfig};
use batclip_core::model::tokenizer::{vocab_with_templates, PromptTemplate};
use batclip_core::model::{ArchConfig, DualEncoder};
use std::path::PathBuf;
use std::sync::OnceLock;

pub const FIXTURE_CLASSES: usize = 5;
pub const FIXTURE_IMAGE_SIZE: usize = 16;
pub const FIXTURE_TRAIN_PER_CLASS: usize = 120;
pub const FIXTURE_TRAIN_SEED: u64 = 1000;
pub const FIXTURE_MODEL_SEED: u64 = 7;
pub const FIXTURE_EPOCHS: usize = 45;

static MODEL: OnceLock<(DualEncoder, PromptTemplate)> = OnceLock::new();

pub fn fixture_prompt(class_names: &[String]) -> PromptTemplate {
    PromptTemplate::new("a photo of a <CLS>.", class_names.to_vec()).unwrap()
}

fn cache_path() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    dir.join(format!(
        "batclip_fixture_c{FIXTURE_CLASSES}_n{FIXTURE_TRAIN_PER_CLASS}_e{FIXTURE_EPOCHS}_s{FIXTURE_MODEL_SEED}.btc"
    ))
}

fn build_fixture() -> (DualEncoder, PromptTemplate) {
    let train = gen_shapes(
        FIXTURE_TRAIN_PER_CLASS,
        FIXTURE_CLASSES,
        FIXTURE_IMAGE_SIZE,
        FIXTURE_TRAIN_SEED,
    )
    .unwrap();
    let prompt = fixture_prompt(&train.class_names);
    let path = cache_path();
    if let Ok(ckpt) = Checkpoint::load(&path) {
        if let Ok(model) = ckpt.build_model() {
            return (model, prompt);
        }
    }
    let vocab = vocab_with_templates(&train.class_names);
    let mut model =
        DualEncoder::new(ArchConfig::default_arch(vocab), FIXTURE_MODEL_SEED).unwrap();
    let cfg = PretrainConfig {
        epochs: FIXTURE_EPOCHS,
        lr: 1e-3,
        batch_size: 64,
        weight_decay: 0.01,
        seed: FIXTURE_MODEL_SEED,
    };
    let (ckpt, _) = pretrain_contrastive(&mut model, &train, &prompt, &cfg).unwrap();
    let tmp = path.with_extension("btc.partial");
    ckpt.save(&tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    (model, prompt)
}

/// The pretrained default-architecture model plus its prompt.
pub fn pretrained() -> &'static (DualEncoder, PromptTemplate) {
    MODEL.get_or_init(build_fixture)
}

/// Path to the cached fixture checkpoint, creating it if needed.
pub fn pretrained_checkpoint_path() -> PathBuf {
    let _ = pretrained();
    cache_path()
}
