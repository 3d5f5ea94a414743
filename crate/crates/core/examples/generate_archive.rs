// Builds a small on-disk movie archive from the synthetic generator,
// reopens it and prints what is in it.

use traffic_movie::movie_store::{is_heading_code, synth_movie, Subtask};
use traffic_movie::{GridDims, MovieArchive, Result};

pub fn run_example() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("tmovie-generate-{}", std::process::id()));
    let dims = GridDims::new(24, 32)?;
    let movies: Vec<_> = (0..3)
        .map(|day| {
            let mut m = synth_movie(7, dims, day, 0.5);
            m.city = "berlin".into();
            m
        })
        .collect();
    MovieArchive::create(&dir, dims, &movies)?;

    let archive = MovieArchive::open(&dir)?;
    println!("{} movies of {dims} under {}", archive.len(), dir.display());
    for city in archive.cities() {
        for day in archive.days(&city)? {
            let movie = archive.movie(&city, day)?;
            let frame = movie.frame(144);
            let busy = frame.channel_bytes(Subtask::Volume).iter().filter(|&&v| v > 0).count();
            assert!(frame.channel_bytes(Subtask::Heading).iter().all(|&b| is_heading_code(b)));
            println!("  {city} day {day}: {} frames, {busy} busy pixels at noon", movie.frames().len());
        }
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
