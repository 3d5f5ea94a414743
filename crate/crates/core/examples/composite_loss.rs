// The weighted composite objective and the per-channel MSE report.

use traffic_movie::losses_metrics::{composite_loss, per_channel_mse_report, LossWeights};
use traffic_movie::movie_store::synth_movie;
use traffic_movie::{GridDims, Plane, Result, Tensor3};

pub fn run_example() -> Result<()> {
    let logits = Tensor3::from_vec(5, 2, 2, (0..20).map(|i| (i % 5) as f64 * 0.5).collect())?;
    let classes = [4, 4, 0, 2];
    let truth = Plane::from_vec(2, 2, vec![0.2, 0.0, 0.5, 1.0])?;
    let pred = Plane::from_vec(2, 2, vec![0.25, 0.1, 0.4, 0.9])?;
    let w = LossWeights { heading: 1.0, volume: 0.5, speed: 2.0 };
    let c = composite_loss(&logits, &classes, &pred, &truth, &pred, &truth, &w)?;
    println!("CE {:.4}  MAPE(vol) {:.4}  MAPE(speed) {:.4}", c.ce_heading, c.mape_volume, c.mape_speed);
    println!("composite {:.4} = {:?}", c.total, c.weighted_terms(&w));

    let dims = GridDims::new(8, 8)?;
    let a = synth_movie(1, dims, 0, 0.3);
    let b = synth_movie(2, dims, 0, 0.3);
    let report = per_channel_mse_report(&a.frames()[..12], &b.frames()[..12])?;
    print!("{}", report.to_text());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
