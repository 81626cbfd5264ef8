//! Print every built-in schedule with its stored ratio and compression
//! ratio, at the 32-layer reference depth and at a toy depth.

use sharp::sharing::{audit, compression_ratio, matched_rank, ReplacementSchedule, ScheduleKind, TransformKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (d1, d2, r) = (4096, 11008, 400);
    for n in [32, 12] {
        println!("N = {n}");
        for kind in ScheduleKind::BUILT_IN {
            let s = ReplacementSchedule::build(kind, n)?;
            let a = audit(&s);
            let c = compression_ratio(&s, TransformKind::G0, r, d1, d2);
            println!(
                "  {:<6} tau={:>5.1}%  s={:>5.1}% (approx {:>5.1}%)  {}",
                kind.name(),
                100.0 * a.stored_ratio,
                100.0 * c.exact,
                100.0 * c.linearized,
                s
            );
            if let Some(note) = a.discrepancy {
                println!("         note: {note}");
            }
        }
    }
    println!("matched ranks from r0 = {r}:");
    for kind in TransformKind::ALL {
        println!("  {kind}: {}", matched_rank(kind, r, d1, d2));
    }
    Ok(())
}
