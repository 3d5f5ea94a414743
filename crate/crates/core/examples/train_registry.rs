// Runs the three-phase registry training for one city at toy size, then
// predicts the next frames for the whole grid.

use traffic_movie::movie_store::{is_heading_code, synth_movie};
use traffic_movie::trainer::{predict_city, run_algorithm1, ModelRegistry, PhaseSchedule, TrainConfig};
use traffic_movie::{plan_layout, GridDims, MovieArchive, Result, Subtask};

pub fn run_example() -> Result<()> {
    let dims = GridDims::new(12, 12)?;
    let layout = plan_layout(dims, 8, 8)?;
    let mut archive = MovieArchive::in_memory(dims);
    for day in 0..3 {
        let mut m = synth_movie(21, dims, day, 0.3);
        m.city = "istanbul".into();
        archive.insert(m)?;
    }
    let cfg = TrainConfig { base_width: 2, depth: 1, horizon: 2, batch_size: 2, pool_size: 4, ..TrainConfig::default() };

    let dir = std::env::temp_dir().join(format!("tmovie-registry-{}", std::process::id()));
    let mut registry = ModelRegistry::create(&dir)?;
    let report = run_algorithm1(&archive, &mut registry, &["istanbul".to_string()], &layout, &PhaseSchedule::default(), &cfg)?;
    println!("{} checkpoints, {} phase runs", report.checkpoints.len(), report.phases.len());
    for (key, loss) in report.final_loss.iter().take(5) {
        println!("  {key}: {loss:.4}");
    }

    let registry = ModelRegistry::open(&dir)?;
    let frames = predict_city(&registry, &archive, "istanbul", 2, 100, &layout, &cfg.features)?;
    for (k, f) in frames.iter().enumerate() {
        let heading = f.channel_bytes(Subtask::Heading);
        assert!(heading.iter().all(|&b| is_heading_code(b)));
        let vol = f.channel_bytes(Subtask::Volume);
        println!("t+{}: mean volume byte {:.1}", k + 1, vol.iter().map(|&v| f64::from(v)).sum::<f64>() / vol.len() as f64);
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
