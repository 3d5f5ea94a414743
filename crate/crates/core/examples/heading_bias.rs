// Mean predicted heading byte per true heading code. A regression head
// trained for MSE drifts toward the middle of the code range; the table
// makes that visible.

use traffic_movie::losses_metrics::heading_bias_report;
use traffic_movie::Result;

pub fn run_example() -> Result<()> {
    let truth = vec![vec![0, 0, 0, 1, 85, 170, 255, 255]];
    let classifier = vec![vec![0, 0, 0, 1, 85, 170, 255, 255]];
    let regressor = vec![vec![3, 0, 12, 30, 90, 140, 180, 201]];
    println!("classification head:\n{}", heading_bias_report(&classifier, &truth)?);
    println!("regression head:\n{}", heading_bias_report(&regressor, &truth)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
