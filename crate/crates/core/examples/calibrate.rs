//! Calibration probe: pretraining gate and severity-table degradation
//! read-out. Not part of the test suite; run manually while tuning.

use batclip_core::adapt::zero_shot_accuracy;
use batclip_core::corrupt::{corrupt, CorruptionKind, CorruptionSpec};
use batclip_core::data::gen_shapes;
use batclip_core::model::pretrain::{pretrain_contrastive, PretrainConfig};
use batclip_core::model::tokenizer::{PromptTemplate, Vocab};
use batclip_core::model::{ArchConfig, DualEncoder};
use std::time::Instant;

fn main() {
    let classes = 5;
    let train = gen_shapes(120, classes, 16, 1000).unwrap();
    let holdout = gen_shapes(40, classes, 16, 2000).unwrap();
    let prompt = PromptTemplate::new("a photo of a <CLS>.", train.class_names.clone()).unwrap();
    let mut texts = vec![
        "a photo of a <CLS>.".to_string(),
        "a bad photo of a <CLS>.".to_string(),
        "a blurry photo of a <CLS>.".to_string(),
        "a noisy photo of a <CLS>.".to_string(),
    ];
    texts.extend(train.class_names.iter().cloned());
    let vocab = Vocab::build(&texts);
    let mut model = DualEncoder::new(ArchConfig::default_arch(vocab), 7).unwrap();

    let cfg = PretrainConfig { epochs: 45, lr: 1e-3, batch_size: 64, weight_decay: 0.01, seed: 7 };
    let t0 = Instant::now();
    let (_, log) = pretrain_contrastive(&mut model, &train, &prompt, &cfg).unwrap();
    let train_time = t0.elapsed();

    let t1 = Instant::now();
    let clean = zero_shot_accuracy(&model, &holdout, &prompt).unwrap();
    let eval_time = t1.elapsed();
    println!(
        "pretrain: {:.1}s   eval 200 imgs: {:.2}s   tau={:.4}",
        train_time.as_secs_f64(),
        eval_time.as_secs_f64(),
        model.tau
    );
    println!(
        "losses: first={:.4} mid={:.4} last={:.4}",
        log.epoch_losses[0],
        log.epoch_losses[log.epoch_losses.len() / 2],
        log.epoch_losses[log.epoch_losses.len() - 1]
    );
    println!("clean holdout zero-shot: {clean:.1}%");

    for kind in [
        CorruptionKind::GaussianNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::Brightness,
        CorruptionKind::Elastic,
        CorruptionKind::Pixelate,
        CorruptionKind::Jpeg,
    ] {
        let mut line = format!("{:14}", kind.name());
        for sev in 1..=5u8 {
            let spec = CorruptionSpec::new(kind, sev).unwrap();
            let corrupted = corrupt(&holdout, &spec, 42).unwrap();
            let acc = zero_shot_accuracy(&model, &corrupted, &prompt).unwrap();
            line.push_str(&format!(" s{sev}={acc:5.1}"));
        }
        println!("{line}");
    }
}
