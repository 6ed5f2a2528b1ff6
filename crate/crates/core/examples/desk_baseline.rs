//! Runs the desk-scale teacher/student comparison and prints test accuracies.
//!
//! ```text
//! cargo run --release -p distill-core --example desk_baseline [-- key=value ...]
//! ```

use std::time::Instant;

use distill_core::experiment::{evaluate_model, load_datasets, train_student, train_teacher, TeacherLogits};
use distill_core::ExperimentConfig;

fn main() -> distill_core::Result<()> {
    env_logger::init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let base = ExperimentConfig::load(None, &overrides)?;
    let start = Instant::now();
    let data = load_datasets(&base.data)?;
    let (teacher, log) = train_teacher(&base, &data.train)?;
    let (report, _) = evaluate_model(&teacher, &data.test)?;
    let train_acc = evaluate_model(&teacher, &data.train)?.0.accuracy;
    println!(
        "teacher  params {:>6}  train acc {train_acc:.4}  test acc {:.4}  ({:.1}s)",
        teacher.parameter_count(),
        report.accuracy,
        log.seconds
    );
    let live = TeacherLogits::Live(&teacher);
    for seed in 0..3 {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let (kd, kd_log) = train_student(&cfg, &data.train, Some(&live), &cfg.distill, cfg.batch_size)?;
        let (hard, _) = train_student(&cfg, &data.train, None, &cfg.distill, cfg.batch_size)?;
        let kd_acc = evaluate_model(&kd, &data.test)?.0.accuracy;
        let hard_acc = evaluate_model(&hard, &data.test)?.0.accuracy;
        println!("seed {seed}  distilled {kd_acc:.4}  hard-label {hard_acc:.4}  ({:.1}s per student)", kd_log.seconds);
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
