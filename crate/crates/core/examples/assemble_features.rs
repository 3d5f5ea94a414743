// Assembles the 101-channel input stack for one prediction time and
// prints the channel families.

use traffic_movie::movie_store::synth_movie;
use traffic_movie::{assemble, FeatureConfig, FeatureRequest, GridDims, MovieArchive, Result, Subtask};

pub fn run_example() -> Result<()> {
    let dims = GridDims::new(16, 16)?;
    let mut archive = MovieArchive::in_memory(dims);
    for day in 0..8 {
        let mut m = synth_movie(3, dims, day, 0.4);
        m.city = "moscow".into();
        archive.insert(m)?;
    }

    let req = FeatureRequest::new("moscow", 7, 96, Subtask::Speed);
    let stack = assemble(&archive, &req, &FeatureConfig::default())?;
    let [lags, smooth, stats, calendar] = stack.family_counts();
    println!("{} channels: {lags} lags, {smooth} smoothed, {stats} period stats, {calendar} calendar", stack.manifest.len());
    for d in stack.manifest.iter().take(4) {
        println!("  {d}");
    }
    println!("  ...");

    // too early in the day without the previous-day fallback
    let early = FeatureRequest::new("moscow", 7, 5, Subtask::Speed);
    match assemble(&archive, &early, &FeatureConfig::default()) {
        Err(e) => println!("t=5: {e}"),
        Ok(_) => unreachable!("five frames of history cannot fill twelve lags"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
