//! TTA benchmark probe: the criterion-6 shapes run, printed per cell.
//! Not part of the test suite; run manually while tuning.

use batclip_core::adapt::{run_baseline, AdaptConfig, Method};
use batclip_core::corrupt::{make_task, CorruptionKind, CorruptionSpec};
use batclip_core::data::gen_shapes;
use batclip_core::model::pretrain::{pretrain_contrastive, PretrainConfig};
use batclip_core::model::tokenizer::{PromptTemplate, Vocab};
use batclip_core::model::{ArchConfig, DualEncoder};
use std::time::Instant;

fn main() {
    let classes = 5;
    let train = gen_shapes(120, classes, 16, 1000).unwrap();
    let test = gen_shapes(400, classes, 16, 2000).unwrap(); // 1000 images
    let prompt = PromptTemplate::new("a photo of a <CLS>.", train.class_names.clone()).unwrap();
    let mut texts = vec!["a photo of a <CLS>.".to_string()];
    texts.extend(train.class_names.iter().cloned());
    let vocab = Vocab::build(&texts);
    let mut model = DualEncoder::new(ArchConfig::default_arch(vocab), 7).unwrap();

    let t0 = Instant::now();
    let cfg = PretrainConfig { epochs: 45, lr: 1e-3, batch_size: 64, weight_decay: 0.01, seed: 7 };
    pretrain_contrastive(&mut model, &train, &prompt, &cfg).unwrap();
    println!("pretrain {:.0}s  tau={:.4}", t0.elapsed().as_secs_f64(), model.tau);

    let kinds = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
    ];

    // batch-size sweep at the pinned lr, all three seeds, vs entropy-only
    let t1 = Instant::now();
    for bs in [32usize] {
        let mut zs_total = 0.0;
        let mut tta_total = 0.0;
        let mut ent_total = 0.0;
        let mut cells = 0.0;
        for kind in kinds {
            for seed in [0u64, 1, 2] {
                let spec = CorruptionSpec::new(kind, 5).unwrap();
                let task = make_task(&test, &spec, bs, seed).unwrap();
                let cfg = AdaptConfig { batch_size: bs, seed, ..AdaptConfig::default() };
                let mut m = model.clone();
                let report =
                    run_baseline(&mut m, &task, &prompt, &Method::Batclip, &cfg, None).unwrap();
                let mut m2 = model.clone();
                let ent =
                    run_baseline(&mut m2, &task, &prompt, &Method::EntropyOnly, &cfg, None)
                        .unwrap();
                println!(
                    "bs={bs:3} seed{seed} {:14} batclip={:5.1} ent={:5.1} zs={:5.1}",
                    kind.name(),
                    report.summary.task_accuracy,
                    ent.summary.task_accuracy,
                    report.summary.zero_shot_accuracy,
                );
                zs_total += report.summary.zero_shot_accuracy;
                tta_total += report.summary.task_accuracy;
                ent_total += ent.summary.task_accuracy;
                cells += 1.0;
            }
        }
        println!(
            "bs={bs:3} MEAN batclip={:.2} ent={:.2} zs={:.2}  gain_zs={:+.2} gain_ent={:+.2}",
            tta_total / cells,
            ent_total / cells,
            zs_total / cells,
            (tta_total - zs_total) / cells,
            (tta_total - ent_total) / cells
        );
    }
    println!("sweep time {:.0}s", t1.elapsed().as_secs_f64());
}
