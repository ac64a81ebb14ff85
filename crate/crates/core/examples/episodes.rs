//! A synthetic class pool, one 5-way 1-shot task, and a file round trip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ibp_fewshot::episodes::{sample_task, synth_splits, Dataset, SynthSpec, TaskSpec};

fn main() -> ibp_fewshot::Result<()> {
    let spec = SynthSpec::new(20, 15, vec![1, 8, 8], 2.0, 1.0, 3);
    let [train, validation, test] = synth_splits(&spec, 12, 4, 4)?;
    for d in [&train, &validation, &test] {
        println!("{:?}: {} classes, {} instances", d.role(), d.num_classes(), d.num_instances());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let task = sample_task(&train, TaskSpec::new(5, 1, 3)?, &mut rng)?;
    println!("classes {:?}", task.classes);
    println!("support {:?} labels {:?}", task.support.x.shape(), task.support.labels);
    println!("query   {:?} labels {:?}", task.query.x.shape(), task.query.labels);

    let path = std::env::temp_dir().join("episodes-example.fsds");
    test.save(&path)?;
    let back = Dataset::load(&path)?;
    println!("round trip equal: {}", back == test);
    std::fs::remove_file(path)?;
    Ok(())
}
