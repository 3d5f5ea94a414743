//! Five-tile region cropping: four corners plus a centre tile over the city
//! grid, exact crops, and stitching with overlap averaging.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::movie_store::{class_to_heading_value, GridDims, HEADING_CLASSES};
use crate::tensor::{Plane, Tensor3};

pub const TILE_COUNT: usize = 5;
pub const DEFAULT_TILE: usize = 299;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Rect { y0, x0, h, w }
    }

    pub fn fits(&self, dims: GridDims) -> bool {
        self.h > 0 && self.w > 0 && self.y0 + self.h <= dims.height && self.x0 + self.w <= dims.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&y) && (self.x0..self.x0 + self.w).contains(&x)
    }
}

/// Tile rectangles over a grid. Index order for the default plan:
/// top-left, top-right, bottom-left, bottom-right, centre.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub dims: GridDims,
    pub tile: (usize, usize),
    pub rects: Vec<Rect>,
}

pub fn plan_layout(dims: GridDims, tile_h: usize, tile_w: usize) -> Result<TileLayout> {
    if tile_h == 0 || tile_w == 0 || tile_h > dims.height || tile_w > dims.width {
        return Err(Error::InvalidConfig(format!(
            "tile {tile_h}x{tile_w} does not fit grid {dims}"
        )));
    }
    if 2 * tile_h < dims.height || 2 * tile_w < dims.width {
        return Err(Error::Coverage(format!(
            "corner tiles {tile_h}x{tile_w} leave a gap in grid {dims}"
        )));
    }
    let (dy, dx) = (dims.height - tile_h, dims.width - tile_w);
    let rects = [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)]
        .into_iter()
        .map(|(y0, x0)| Rect::new(y0, x0, tile_h, tile_w))
        .collect();
    Ok(TileLayout {
        dims,
        tile: (tile_h, tile_w),
        rects,
    })
}

impl TileLayout {
    /// The paper-scale plan: 436×495 grid, 299×299 tiles.
    pub fn standard() -> Self {
        plan_layout(GridDims::default(), DEFAULT_TILE, DEFAULT_TILE).expect("default layout is valid")
    }

    /// Arbitrary rectangles; each must fit and together they must cover the
    /// grid.
    pub fn from_rects(dims: GridDims, rects: Vec<Rect>) -> Result<Self> {
        let first = *rects
            .first()
            .ok_or_else(|| Error::InvalidConfig("layout needs at least one rect".into()))?;
        if let Some(r) = rects.iter().find(|r| !r.fits(dims)) {
            return Err(Error::Bounds(format!("{r:?} outside grid {dims}")));
        }
        let layout = TileLayout {
            dims,
            tile: (first.h, first.w),
            rects,
        };
        if layout.coverage().iter().any(|&c| c == 0) {
            return Err(Error::Coverage("rects leave uncovered pixels".into()));
        }
        Ok(layout)
    }

    /// How many rects cover each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.dims.pixels()];
        for r in &self.rects {
            for y in r.y0..r.y0 + r.h {
                for c in &mut count[y * self.dims.width + r.x0..y * self.dims.width + r.x0 + r.w] {
                    *c += 1;
                }
            }
        }
        count
    }

    pub fn to_text(&self) -> String {
        self.rects
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{i}\t{}\t{}\t{}\t{}\n", r.y0, r.x0, r.h, r.w))
            .collect()
    }

    pub fn parse(text: &str, dims: GridDims) -> Result<Self> {
        let mut rects = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::Format(format!("bad layout line {line:?}"));
            let v: Vec<usize> = line
                .split('\t')
                .map(|s| s.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match v.as_slice() {
                &[i, y0, x0, h, w] if i == n => rects.push(Rect::new(y0, x0, h, w)),
                _ => return Err(bad()),
            }
        }
        TileLayout::from_rects(dims, rects)
    }
}

impl fmt::Display for TileLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for Rect {
    type Err = Error;

    /// `y0,x0,h,w`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::InvalidInput(format!("bad rect {s:?}"))))
            .collect::<Result<_>>()?;
        match v.as_slice() {
            &[y0, x0, h, w] => Ok(Rect::new(y0, x0, h, w)),
            _ => Err(Error::InvalidInput(format!("rect needs 4 numbers, got {s:?}"))),
        }
    }
}

/// Exact sub-array copies.
pub trait Crop: Sized {
    fn crop(&self, rect: &Rect) -> Result<Self>;
}

fn check_bounds(rect: &Rect, height: usize, width: usize) -> Result<()> {
    if rect.fits(GridDims { height, width }) {
        Ok(())
    } else {
        Err(Error::Bounds(format!("{rect:?} outside {height}x{width}")))
    }
}

impl Crop for Plane {
    fn crop(&self, rect: &Rect) -> Result<Self> {
        check_bounds(rect, self.height, self.width)?;
        let mut data = Vec::with_capacity(rect.h * rect.w);
        for y in rect.y0..rect.y0 + rect.h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + rect.x0..row + rect.x0 + rect.w]);
        }
        Ok(Plane {
            height: rect.h,
            width: rect.w,
            data,
        })
    }
}

impl Crop for Tensor3 {
    fn crop(&self, rect: &Rect) -> Result<Self> {
        check_bounds(rect, self.height, self.width)?;
        let mut data = Vec::with_capacity(self.channels * rect.h * rect.w);
        for c in 0..self.channels {
            for y in rect.y0..rect.y0 + rect.h {
                let row = self.idx(c, y, 0);
                data.extend_from_slice(&self.data[row + rect.x0..row + rect.x0 + rect.w]);
            }
        }
        Ok(Tensor3 {
            channels: self.channels,
            height: rect.h,
            width: rect.w,
            data,
        })
    }
}

/// Crops a byte plane (row-major) to `rect`.
pub fn crop_bytes(data: &[u8], dims: GridDims, rect: &Rect) -> Result<Vec<u8>> {
    check_bounds(rect, dims.height, dims.width)?;
    let mut out = Vec::with_capacity(rect.h * rect.w);
    for y in rect.y0..rect.y0 + rect.h {
        let row = y * dims.width;
        out.extend_from_slice(&data[row + rect.x0..row + rect.x0 + rect.w]);
    }
    Ok(out)
}

/// Running per-pixel means and cover counts. The mean is updated
/// incrementally, so a pixel covered only by equal values keeps that value
/// bit-for-bit.
#[derive(Debug, Clone)]
pub struct StitchAccumulator {
    dims: GridDims,
    depth: usize,
    mean: Vec<f64>,
    count: Vec<u32>,
}

impl StitchAccumulator {
    /// `depth` values per pixel (1 for planes, 5 for class probabilities).
    pub fn new(dims: GridDims, depth: usize) -> Self {
        StitchAccumulator {
            dims,
            depth,
            mean: vec![0.0; dims.pixels() * depth],
            count: vec![0; dims.pixels()],
        }
    }

    pub fn add(&mut self, tile: &Tensor3, rect: &Rect) -> Result<()> {
        if tile.channels != self.depth || tile.height != rect.h || tile.width != rect.w {
            return Err(Error::InvalidInput(format!(
                "tile {:?} does not match rect {rect:?} with depth {}",
                tile.shape(),
                self.depth
            )));
        }
        check_bounds(rect, self.dims.height, self.dims.width)?;
        for y in 0..rect.h {
            for x in 0..rect.w {
                let p = (rect.y0 + y) * self.dims.width + rect.x0 + x;
                self.count[p] += 1;
                let k = f64::from(self.count[p]);
                for c in 0..self.depth {
                    let m = &mut self.mean[c * self.dims.pixels() + p];
                    *m += (tile.get(c, y, x) - *m) / k;
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u32] {
        &self.count
    }

    /// Per-pixel means, `depth × H × W`.
    pub fn finish(self) -> Result<Tensor3> {
        if let Some(p) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::Coverage(format!(
                "pixel ({}, {}) not covered by any tile",
                p / self.dims.width,
                p % self.dims.width
            )));
        }
        Tensor3::from_vec(self.depth, self.dims.height, self.dims.width, self.mean)
    }
}

fn check_tile_count(got: usize, layout: &TileLayout) -> Result<()> {
    if got != layout.rects.len() {
        return Err(Error::InvalidInput(format!(
            "{got} tiles for a layout of {} rects",
            layout.rects.len()
        )));
    }
    Ok(())
}

/// Each output pixel is the mean of all tiles covering it.
pub fn stitch(tiles: &[Plane], layout: &TileLayout) -> Result<Plane> {
    check_tile_count(tiles.len(), layout)?;
    let mut acc = StitchAccumulator::new(layout.dims, 1);
    for (tile, rect) in tiles.iter().zip(&layout.rects) {
        let t = Tensor3 {
            channels: 1,
            height: tile.height,
            width: tile.width,
            data: tile.data.clone(),
        };
        acc.add(&t, rect)?;
    }
    Ok(acc.finish()?.plane(0))
}

/// Averages 5-class probability tiles over covering tiles, then takes the
/// argmax (lowest class on ties) and maps it to the heading byte.
pub fn stitch_heading(tiles: &[Tensor3], layout: &TileLayout) -> Result<Vec<u8>> {
    check_tile_count(tiles.len(), layout)?;
    if tiles.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("non-finite class probability".into()));
    }
    let mut acc = StitchAccumulator::new(layout.dims, HEADING_CLASSES);
    for (tile, rect) in tiles.iter().zip(&layout.rects) {
        acc.add(tile, rect)?;
    }
    let mean = acc.finish()?;
    (0..layout.dims.pixels())
        .map(|p| {
            let mut best = 0;
            for c in 1..HEADING_CLASSES {
                if mean.data[c * mean.plane_len() + p] > mean.data[best * mean.plane_len() + p] {
                    best = c;
                }
            }
            class_to_heading_value(best as u8)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn standard_layout() {
        let layout = TileLayout::standard();
        let origins: Vec<(usize, usize)> = layout.rects.iter().map(|r| (r.y0, r.x0)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 196), (137, 0), (137, 196), (68, 98)]);
        let cov = layout.coverage();
        // the centre tile sits on top of the block where all four corners meet
        assert!(cov.iter().all(|&c| (1..=5).contains(&c)));
        assert_eq!(cov[200 * 495 + 250], 5);
        assert_eq!(cov[0], 1);
    }

    #[test]
    fn degenerate_and_bad_layouts() {
        let dims = GridDims::new(299, 299).unwrap();
        let l = plan_layout(dims, 299, 299).unwrap();
        assert!(l.rects.iter().all(|r| *r == Rect::new(0, 0, 299, 299)));
        assert!(matches!(plan_layout(GridDims::default(), 100, 100), Err(Error::Coverage(_))));
        assert!(matches!(plan_layout(GridDims::new(10, 10).unwrap(), 11, 5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn layout_text_roundtrip() {
        let l = plan_layout(GridDims::new(16, 20).unwrap(), 12, 12).unwrap();
        assert_eq!(TileLayout::parse(&l.to_text(), l.dims).unwrap(), l);
        assert!(TileLayout::parse("0\t1\t2\n", l.dims).is_err());
    }

    #[test]
    fn crop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_plane(&mut rng, 10, 10);
        assert_eq!(p.crop(&Rect::new(0, 0, 10, 10)).unwrap(), p);
        let c = Plane::filled(10, 10, 2.5).crop(&Rect::new(3, 1, 4, 6)).unwrap();
        assert!(c.data.iter().all(|&v| v == 2.5));
        let r = Rect::new(2, 3, 4, 4);
        let got = p.crop(&r).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(got.get(y, x), p.get(y + 2, x + 3));
            }
        }
        assert!(matches!(p.crop(&Rect::new(8, 0, 4, 4)), Err(Error::Bounds(_))));

        let t = Tensor3::from_planes(&[p.clone(), random_plane(&mut rng, 10, 10)]).unwrap();
        let tc = t.crop(&r).unwrap();
        assert_eq!(tc.plane(0), got);
        assert_eq!(tc.plane(1), t.plane(1).crop(&r).unwrap());
    }

    #[test]
    fn stitch_examples() {
        let l = plan_layout(GridDims::new(16, 20).unwrap(), 12, 12).unwrap();
        let tiles: Vec<Plane> = l.rects.iter().map(|r| Plane::filled(r.h, r.w, 7.0)).collect();
        assert!(stitch(&tiles, &l).unwrap().data.iter().all(|&v| v == 7.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_plane(&mut rng, 16, 20);
        let tiles: Vec<Plane> = l.rects.iter().map(|r| x.crop(r).unwrap()).collect();
        assert_eq!(stitch(&tiles, &l).unwrap(), x);

        // two tiles overlapping on a single pixel
        let dims = GridDims::new(1, 3).unwrap();
        let custom = TileLayout::from_rects(dims, vec![Rect::new(0, 0, 1, 2), Rect::new(0, 1, 1, 2)]).unwrap();
        let out = stitch(&[Plane::filled(1, 2, 0.0), Plane::filled(1, 2, 255.0)], &custom).unwrap();
        assert_eq!(out.data, vec![0.0, 127.5, 255.0]);

        assert!(stitch(&tiles[..4], &l).is_err());
        let mut wrong = tiles.clone();
        wrong[2] = Plane::zeros(3, 3);
        assert!(matches!(stitch(&wrong, &l), Err(Error::InvalidInput(_))));
    }

    fn one_hot(class: usize, h: usize, w: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(5, h, w);
        t.channel_mut(class).fill(1.0);
        t
    }

    #[test]
    fn stitch_heading_examples() {
        let l = plan_layout(GridDims::new(16, 20).unwrap(), 12, 12).unwrap();
        let tiles: Vec<Tensor3> = l.rects.iter().map(|r| one_hot(2, r.h, r.w)).collect();
        assert!(stitch_heading(&tiles, &l).unwrap().iter().all(|&b| b == 85));

        let dims = GridDims::new(1, 3).unwrap();
        let custom = TileLayout::from_rects(dims, vec![Rect::new(0, 0, 1, 2), Rect::new(0, 1, 1, 2)]).unwrap();
        let out = stitch_heading(&[one_hot(1, 1, 2), one_hot(3, 1, 2)], &custom).unwrap();
        assert_eq!(out, vec![1, 1, 170]);

        // random probabilities against a per-pixel brute-force oracle
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tiles: Vec<Tensor3> = l
            .rects
            .iter()
            .map(|r| Tensor3::from_vec(5, r.h, r.w, (0..5 * r.h * r.w).map(|_| rng.gen::<f64>()).collect()).unwrap())
            .collect();
        let got = stitch_heading(&tiles, &l).unwrap();
        for y in 0..16 {
            for x in 0..20 {
                let mut mean = [0.0; 5];
                let mut n = 0.0;
                for (t, r) in tiles.iter().zip(&l.rects) {
                    if r.contains(y, x) {
                        n += 1.0;
                        for (c, m) in mean.iter_mut().enumerate() {
                            *m += t.get(c, y - r.y0, x - r.x0);
                        }
                    }
                }
                let mut best = 0;
                for c in 1..5 {
                    if mean[c] / n > mean[best] / n {
                        best = c;
                    }
                }
                assert_eq!(got[y * 20 + x], crate::movie_store::HEADING_CODES[best]);
            }
        }
    }
}
