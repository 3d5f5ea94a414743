// One extra epoch on the days most like the target day, before forecasting
// it.

use traffic_movie::movie_store::synth_movie;
use traffic_movie::trainer::{online_finetune, DaySimilarityFeatures, OnlineFinetune, SimilarityWeights, TrainConfig};
use traffic_movie::{GridDims, MovieArchive, Rect, Result, Subtask, UNetModel};

pub fn run_example() -> Result<()> {
    let dims = GridDims::new(8, 8)?;
    let mut archive = MovieArchive::in_memory(dims);
    for day in 10..16 {
        let mut m = synth_movie(5, dims, day, 0.3);
        m.city = "berlin".into();
        archive.insert(m)?;
    }
    let cfg = TrainConfig { depth: 2, base_width: 4, horizon: 3, batch_size: 2, ..TrainConfig::default() };
    let mut model = UNetModel::new(cfg.net_config(Subtask::Volume, (8, 8)), 3)?;

    let job = OnlineFinetune {
        city: "berlin".into(),
        rect: Rect::new(0, 0, 8, 8),
        subtask: Subtask::Volume,
        target: DaySimilarityFeatures::day(15),
        candidates: (10..15).map(DaySimilarityFeatures::day).collect(),
        weights: SimilarityWeights::default(),
        k: 2,
        lr: 0.05,
        samples_per_day: 4,
        validation_times: vec![60, 120, 240],
        seed: 1,
    };
    let report = online_finetune(&mut model, &archive, &job, &cfg)?;
    println!("trained on days {:?}", report.days_used);
    println!("target-day loss {:.4} -> {:.4}", report.before, report.after);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
