//! Trains the toy policy on the synthetic copy task and prints the reward curve.
//!
//! cargo run --release -p mentra-core --example copy_task -- [steps] [lr] [seed]

use mentra_core::reward::ConclusionAgreementJudge;
use mentra_core::synthetic::CopyTask;
use mentra_core::trainer::{TrainSettings, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let task = CopyTask::new(4);
    let policy = task.policy();
    let sft = task.sft_examples(&policy).expect("expert text tokenizes");
    let judge = ConclusionAgreementJudge::default();
    let mut settings = TrainSettings::default();
    settings.trainer.total_steps = steps;
    settings.trainer.seed = seed;
    settings.optimizer.learning_rate = lr;

    let out = Trainer::new(settings, &policy, &judge, &sft, &task.tasks, None).run().expect("training runs");
    for (i, r) in out.log.records.iter().enumerate() {
        if r.step == 1 || r.step % 25 == 0 {
            println!(
                "step {:>5}  mu {:.4}  sft {:.5}  grpo {:+.5}  reward {:.3}  avg10 {:.3}",
                r.step,
                r.mu,
                r.sft_loss,
                r.grpo_loss,
                r.mean_reward,
                out.log.trailing_mean_reward(i, 10)
            );
        }
    }
}
