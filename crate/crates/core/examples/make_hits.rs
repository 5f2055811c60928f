//! Build crowd task batches with hidden control questions, then grade two
//! simulated workers: one careful, one clicking at random.
//!
//! ```text
//! cargo run --example make_hits
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shaperank::dataset::{make_hits, validate_hit, Choice, ControlKey, Response, CONTROLS_PER_HIT, TASKS_PER_HIT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shapes: Vec<String> = (0..40).map(|i| format!("chair-{i:02}")).collect();
    let uglies: Vec<String> = (0..4).map(|i| format!("broken-{i}")).collect();
    let batches = make_hits(&shapes, &uglies, 3, 7)?;
    let key = ControlKey::new(uglies.iter().cloned());

    println!("{} batches of {TASKS_PER_HIT} tasks ({CONTROLS_PER_HIT} controls each)", batches.len());
    for task in batches[0].tasks.iter().take(6) {
        let tag = if task.is_control { "  <- control" } else { "" };
        println!("  {}: {} vs {}{tag}", task.pair_id, task.shape_a, task.shape_b);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (worker, careful) in [("careful", true), ("random", false)] {
        let batch = &batches[0];
        let responses: Vec<Response> = batch
            .tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let choice = match key.answer(task) {
                    Some(right) if careful => right,
                    _ => if rng.random_bool(0.5) { Choice::A } else { Choice::B },
                };
                Response {
                    hit_id: batch.hit_id.clone(),
                    pair: task.clone(),
                    worker_id: worker.into(),
                    choice,
                    elapsed_ms: 4500,
                    timestamp_ms: 4500 * (i as u64 + 1),
                }
            })
            .collect();
        println!("{worker} worker: {:?}", validate_hit(batch, &responses, &key)?);
    }
    Ok(())
}
