//! Trains a prototypical network on a separable pool and evaluates it on
//! held-out classes.

use ibp_fewshot::harness::{evaluate, train, RunConfig};

fn main() -> ibp_fewshot::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/separable.toml"))?;
    cfg.steps = 500;
    let splits = cfg.data.load()?;
    let out = train(&cfg, &splits)?;
    for r in &out.records {
        println!("step {:>4}  loss {:.4}", r.step, r.total);
    }
    let acc = evaluate(&out.network, &cfg.eval_settings(), &splits.test, cfg.eval_task, 300, cfg.seed)?;
    println!("{}-way {}-shot accuracy {:.2}% ± {:.2}", cfg.eval_task.ways, cfg.eval_task.shots, 100.0 * acc.mean, 100.0 * acc.ci95);
    Ok(())
}
