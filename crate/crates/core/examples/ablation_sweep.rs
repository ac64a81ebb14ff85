//! A short sweep over the interpolation modes, written as one table per
//! comparison.

use ibp_fewshot::harness::{run_sweep, RunConfig};

fn main() -> ibp_fewshot::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/ablation.toml"))?;
    cfg.eval_tasks = 300;
    if let Some(s) = cfg.sweep.as_mut() {
        s.seeds.truncate(1);
    }
    let root = std::env::temp_dir().join("ablation-sweep-example");
    let _ = std::fs::remove_dir_all(&root);
    for s in run_sweep(&cfg, &root)? {
        println!("{:<20} acc {:.2}%  box width {:.4}", s.objective.name(), 100.0 * s.test_accuracy, s.mean_box_width);
    }
    println!("{}", std::fs::read_to_string(root.join("modes.csv"))?);
    Ok(())
}
