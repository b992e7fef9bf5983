use objseq::builder::{MarkerStyle, Task};
use objseq::decoding::{SampleMethod, SamplerConfig};
use objseq::metrics::F1Average;
use objseq::model::{train, ModelConfig, Stage, TrainConfig};
use objseq::pipeline::{evaluate_predictions, generate_dataset, infer_task, load_dataset};
use objseq::scene::GenConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let n_train: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let spe: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4096);

    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");
    generate_dataset(&train_dir, n_train, 1, &GenConfig::default(), 200).unwrap();
    generate_dataset(&test_dir, 300, 2, &GenConfig::default(), 200).unwrap();
    let ds = load_dataset(&train_dir).unwrap();
    let test = load_dataset(&test_dir).unwrap();
    let data = ds.train_data(MarkerStyle::OpenClose).unwrap();

    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        stage: Stage::Multitask,
        epochs,
        batch_size: 32,
        samples_per_epoch: spe,
        lr,
        task_prefix: true,
        decay_epochs: (epochs / 4).max(1),
        seed: 3,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (params, report) = train(&cfg, &model_cfg, &data, None).unwrap();
    println!(
        "trained {} steps in {:?}, loss curve {:?} final {:.4}",
        report.steps,
        t0.elapsed(),
        report.losses.iter().step_by(4).collect::<Vec<_>>(),
        report.final_loss
    );

    let sampler = SamplerConfig { method: SampleMethod::Argmax, constrained: false, max_steps: 64 };
    for task in [Task::Refexp, Task::PhraseGrounding, Task::GroundedCaptioning, Task::Captioning, Task::Vqa] {
        let t1 = Instant::now();
        let preds = infer_task(&params, &test, task, &sampler, 99, true).unwrap();
        let records = &test.records[&task];
        let rep = evaluate_predictions(task, records, &preds, &test.vocab_manifest, F1Average::Macro).unwrap();
        println!(
            "{:22} n={:4} acc={:?} f1_all={:?} f1_loc={:?} bleu={:?} vqa={:?} exact={:?} failrate={:.4} ({:?})",
            task.name(), rep.n,
            rep.acc_at_05.map(|v| (v * 1e4).round() / 1e4),
            rep.f1_all.map(|v| (v * 1e4).round() / 1e4),
            rep.f1_loc.map(|v| (v * 1e4).round() / 1e4),
            rep.bleu4.map(|v| (v * 1e4).round() / 1e4),
            rep.vqa_acc.map(|v| (v * 1e4).round() / 1e4),
            rep.exact_text_match.map(|v| (v * 1e4).round() / 1e4),
            rep.syntactic_failure_rate,
            t1.elapsed(),
        );
    }
}
