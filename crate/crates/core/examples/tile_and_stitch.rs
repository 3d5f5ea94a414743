// Crops the full grid into the five overlapping 299x299 tiles and stitches
// them back.

use traffic_movie::tiling::{plan_layout, stitch, Crop};
use traffic_movie::{GridDims, Plane, Result};

pub fn run_example() -> Result<()> {
    let dims = GridDims::new(436, 495)?;
    let layout = plan_layout(dims, 299, 299)?;
    for (i, r) in layout.rects.iter().enumerate() {
        println!("tile {i}: rows {}..{}, cols {}..{}", r.y0, r.y0 + r.h, r.x0, r.x0 + r.w);
    }
    let cov = layout.coverage();
    println!("coverage between {} and {}", cov.iter().min().unwrap(), cov.iter().max().unwrap());

    let data = (0..dims.pixels()).map(|i| ((i * 31) % 256) as f64).collect();
    let plane = Plane::from_vec(dims.height, dims.width, data)?;
    let tiles = layout.rects.iter().map(|r| plane.crop(r)).collect::<Result<Vec<_>>>()?;
    let back = stitch(&tiles, &layout)?;
    assert_eq!(back, plane);
    println!("stitch(crop(plane)) == plane");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
