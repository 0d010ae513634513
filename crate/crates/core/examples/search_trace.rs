//! Walks one group through the bit-width search with a scripted
//! trajectory of mixing logits and prints every shift.
//!
//! `cargo run --example search_trace -- [patience] [b_min]`

use actcomp::quant::MPModuleState;
use actcomp::search::{AuditLog, PatienceMode, SearchState};

fn main() -> actcomp::error::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u32>().expect("integer argument"));
    let patience = args.next().unwrap_or(3);
    let b_min = args.next().unwrap_or(2);

    let mut m = MPModuleState::new(0, 0, &[6, 7, 8])?;
    let mut s = SearchState::new(&m, patience, b_min, PatienceMode::Consecutive)?;
    let mut log = AuditLog::default();
    // Mostly descending logits with an occasional break that resets patience.
    for step in 0..40 {
        let beta = if step % 7 == 6 { [0.0, 1.0, 0.5] } else { [1.5, 0.5, -0.5] };
        m.arch.value.data_mut().copy_from_slice(&beta);
        let shifted = s.observe(&mut m, step, &mut log);
        if shifted {
            println!("step {step:>2}: bits {:?} beta {:?}", m.bits, m.beta());
        }
        if s.frozen {
            println!("frozen at step {step} with bits {:?}", m.bits);
            break;
        }
    }
    println!("step,layer,group,old,new");
    for e in log.shifts() {
        println!("{e}");
    }
    Ok(())
}
