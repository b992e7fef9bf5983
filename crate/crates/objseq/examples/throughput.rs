use objseq::builder::MarkerStyle;
use objseq::model::{train, ModelConfig, Stage, TrainConfig};
use objseq::pipeline::{generate_dataset, load_dataset};
use objseq::scene::GenConfig;
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    generate_dataset(dir.path(), 500, 1, &GenConfig::default(), 200).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    println!("gen+load 500 scenes: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let data = ds.train_data(MarkerStyle::OpenClose).unwrap();
    println!("build train data: {:?}", t0.elapsed());
    for (t, p) in &data.by_task {
        println!("  {}: {} samples", t.name(), p.len());
    }
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        stage: Stage::Multitask,
        epochs: 1,
        decay_epochs: 0,
        batch_size: 32,
        samples_per_epoch: 640,
        task_prefix: true,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (params, report) = train(&cfg, &model_cfg, &data, None).unwrap();
    let dt = t0.elapsed();
    println!(
        "params {} | {} steps in {:?} => {:.0} ms/step, {:.1} samples/s, loss {:.4}",
        params.param_count(),
        report.steps,
        dt,
        dt.as_millis() as f64 / report.steps as f64,
        640.0 / dt.as_secs_f64(),
        report.final_loss
    );
}
