// Compares backprop gradients with central differences for a small U-Net
// of each head.

use traffic_movie::losses_metrics::LossWeights;
use traffic_movie::movie_store::HEADING_CODES;
use traffic_movie::neuralnet::{compute_mask, grad_check, OutputLoss};
use traffic_movie::{HeadKind, NetConfig, Result, Subtask, Tensor3, UNetModel};

pub fn run_example() -> Result<()> {
    let input = Tensor3::from_vec(4, 8, 8, (0..256).map(|i| ((i * 7) % 11) as f64 / 10.0).collect())?;
    let mask = compute_mask(&input);
    let weights = LossWeights::default();
    for subtask in Subtask::ALL {
        let head = if subtask == Subtask::Heading { HeadKind::Heading } else { HeadKind::Regression };
        let cfg = NetConfig { in_channels: 4, base_width: 2, depth: 2, head, horizon: 2, tile: (8, 8) };
        let model = UNetModel::new(cfg, 1)?;
        let target: Vec<u8> = (0..2 * 64)
            .map(|i| if head == HeadKind::Heading { HEADING_CODES[i % 5] } else { (i * 13 % 256) as u8 })
            .collect();
        let loss = OutputLoss::composite_share(subtask, &weights, &target)?;
        let err = grad_check(&model, &input, &mask, &loss, 1e-5)?;
        println!("{subtask:<8} max relative error {err:.2e}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
