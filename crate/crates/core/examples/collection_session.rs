//! Drive the preference-collection service in-process: one worker answers a
//! whole batch, including a too-fast answer that gets bounced.
//!
//! ```text
//! cargo run --example collection_session
//! ```

use std::sync::Arc;

use shaperank::dataset::{make_hits, Choice, Demographics};
use shaperank::server::{AnswerOutcome, BatchFile, Collector, ManualClock, LOCKOUT_MS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shapes: Vec<String> = (0..20).map(|i| format!("lamp-{i:02}")).collect();
    let uglies = vec!["melted-lamp".to_string()];
    let batches = BatchFile {
        batches: make_hits(&shapes, &uglies, 2, 0)?,
        ugly_shapes: uglies,
    };
    let key = batches.control_key();
    let clock = Arc::new(ManualClock::new(0));
    let collector = Collector::new(batches, clock.clone());

    let demographics = Demographics {
        gender: Some("female".into()),
        age_group: Some("25-34".into()),
        region: None,
    };
    let (session, mut task) = collector.start_session("worker-7", Some(demographics))?;
    println!("{session}: first task {} ({} vs {})", task.pair_id, task.shape_a, task.shape_b);

    // Answering before the lockout elapses is refused and nothing is recorded.
    clock.advance(1000);
    if let AnswerOutcome::Retry { retry_after_ms } = collector.submit(&session, &task.pair_id, "A")? {
        println!("too fast: retry after {retry_after_ms} ms");
    }

    loop {
        clock.advance(LOCKOUT_MS);
        // Controls pit an ugly shape against a normal one; answer them right.
        let pair = &collector.batches()[0].tasks[task.index];
        let choice = key.answer(pair).unwrap_or(Choice::A);
        match collector.submit(&session, &task.pair_id, &choice.to_string())? {
            AnswerOutcome::Next(next) => task = next,
            AnswerOutcome::Finished(state) => {
                println!("session finished: {state:?}");
                break;
            }
            AnswerOutcome::Retry { .. } => unreachable!("lockout already elapsed"),
        }
    }
    println!("status: {:?}", collector.status(&session)?);
    let csv = collector.export_csv(true)?;
    println!("accepted log has {} rows; first lines:", csv.lines().count() - 1);
    for line in csv.lines().take(3) {
        println!("  {line}");
    }
    Ok(())
}
