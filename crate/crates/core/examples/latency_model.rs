//! Estimated load and forward time on a phone for Llama2-7b with each
//! built-in schedule, with and without recovery factors.
//!
//! ```text
//! cargo run --example latency_model -- [rank]
//! ```

use sharp::latency::{calibrate, format_table, savings_report, simulate_run, Calibration, ModelDescription};
use sharp::sharing::{ReplacementSchedule, ScheduleKind, TransformKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rank: usize = std::env::args().nth(1).map_or(Ok(8), |s| s.parse())?;
    let desc = ModelDescription::llama2_7b();
    let cost = calibrate(&desc, &Calibration::phone_llama2_7b())?;
    let none = ReplacementSchedule::empty(desc.n_layers);
    let base = simulate_run(&desc, &none, TransformKind::G0, 0, &cost)?;

    for kind in [ScheduleKind::Next, ScheduleKind::Back, ScheduleKind::More] {
        let s = ReplacementSchedule::build(kind, desc.n_layers)?;
        println!("{kind:?}: {} targets", s.target_count());
        let shared = simulate_run(&desc, &s, TransformKind::G0, 0, &cost)?;
        print!("{}", format_table("Llama2-7b", &base, "shared, r = 0", &shared)?);
        let with = simulate_run(&desc, &s, TransformKind::G0, rank, &cost)?;
        let sv = savings_report(&base, &with)?;
        println!(
            "with r = {rank}: load {:.1}%, forward {:.1}%, total {:.1}%, size {:.1}%\n",
            100.0 * sv.load_init,
            100.0 * sv.forward,
            100.0 * sv.total,
            100.0 * sv.model_size
        );
    }
    Ok(())
}
