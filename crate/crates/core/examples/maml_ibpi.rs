//! MAML with interval bound losses and interpolated tasks, then a look at
//! one interpolated task in embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ibp_fewshot::episodes::sample_task;
use ibp_fewshot::harness::{evaluate, train, Objective, RunConfig};
use ibp_fewshot::ibpi::{make_interpolated_task, InterpolationMode, MixPlan};
use ibp_fewshot::learners::LearnerKind;

fn main() -> ibp_fewshot::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/few_task.toml"))?;
    cfg.sweep = None;
    cfg.learner = LearnerKind::Maml;
    cfg.objective = Objective::Ibpi;
    let splits = cfg.data.load()?;
    let out = train(&cfg, &splits)?;
    let last = out.records.last().unwrap();
    println!(
        "final eps {:.3}  losses ce {:.4} lb {:.4} ub {:.4}  weights {:.3} {:.3} {:.3}",
        last.epsilon, last.l_ce, last.l_lb, last.l_ub, last.w_ce, last.w_lb, last.w_ub
    );
    let acc = evaluate(&out.network, &cfg.eval_settings(), &splits.test, cfg.eval_task, 200, cfg.seed)?;
    println!("test accuracy {:.2}% ± {:.2}", 100.0 * acc.mean, 100.0 * acc.ci95);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let task = sample_task(&splits.train, cfg.train_task, &mut rng)?;
    let plan = MixPlan::sample(task.ways(), cfg.alpha, cfg.beta, cfg.shared_mix, &mut rng)?;
    let it = make_interpolated_task(&task, &out.network, cfg.epsilon, InterpolationMode::Ibpi, &plan, None)?;
    println!("interpolated support {:?}, query {:?}", it.support.shape(), it.query.shape());
    Ok(())
}
