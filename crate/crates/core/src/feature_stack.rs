//! The 101-channel model input for one prediction request.
//!
//! Channel layout (each family is subtask-minor, i.e. volume, speed,
//! heading for every slot):
//!
//! | channels  | family      | content                                         |
//! |-----------|-------------|-------------------------------------------------|
//! | 0..=35    | lag         | frames T-1 .. T-12 of day D                     |
//! | 36..=83   | periodic    | days D-14, D-7..D-1, D+1..D+7, D+14 smoothed at T |
//! | 84..=98   | statistic   | five recency-window averages on day D           |
//! | 99        | calendar    | 30-day block average at T, target subtask       |
//! | 100       | calendar    | 7-day block average at T, target subtask        |
//!
//! Every channel is described by a [`ChannelDescriptor`]; re-deriving a
//! channel from its descriptor reproduces it exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::movie_store::{GridDims, Movie, MovieArchive, Subtask, TensorFile, FRAMES_PER_DAY};
use crate::tensor::{Plane, Tensor3};

pub const LAG_COUNT: usize = 12;
pub const PERIODIC_OFFSETS: [i32; 16] = [-14, -7, -6, -5, -4, -3, -2, -1, 1, 2, 3, 4, 5, 6, 7, 14];
pub const STAT_PERIODS: usize = 5;
pub const FEATURE_CHANNELS: usize = 101;
pub const LAG_CHANNELS: usize = LAG_COUNT * 3;
pub const PERIODIC_CHANNELS: usize = PERIODIC_OFFSETS.len() * 3;
pub const STAT_CHANNELS: usize = STAT_PERIODS * 3;
pub const CALENDAR_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothingConfig {
    pub window: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { window: 13 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "smoothing window must be odd and >= 1, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Assembly options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeatureConfig {
    pub smoothing: SmoothingConfig,
    /// When `T < 12`, take the missing lags from the end of day `D - 1`
    /// instead of failing.
    pub previous_day_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRequest {
    pub city: String,
    pub day: u32,
    pub time: usize,
    pub subtask: Subtask,
    pub horizon: usize,
}

impl FeatureRequest {
    pub fn new(city: impl Into<String>, day: u32, time: usize, subtask: Subtask) -> Self {
        FeatureRequest {
            city: city.into(),
            day,
            time,
            subtask,
            horizon: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time >= FRAMES_PER_DAY {
            return Err(Error::InvalidInput(format!("time index {} >= {FRAMES_PER_DAY}", self.time)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// The five recency windows, all ending at `T - 1` on the predicted day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatPeriod {
    Hour = 0,
    ThreeHours = 1,
    SixHours = 2,
    HalfDay = 3,
    DaySoFar = 4,
}

impl StatPeriod {
    pub const ALL: [StatPeriod; 5] = [
        StatPeriod::Hour,
        StatPeriod::ThreeHours,
        StatPeriod::SixHours,
        StatPeriod::HalfDay,
        StatPeriod::DaySoFar,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        StatPeriod::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown period id {id}")))
    }

    /// Frames covered before clipping to `[0, T-1]`; `None` means from the
    /// start of the day.
    pub fn length(self) -> Option<usize> {
        match self {
            StatPeriod::Hour => Some(12),
            StatPeriod::ThreeHours => Some(36),
            StatPeriod::SixHours => Some(72),
            StatPeriod::HalfDay => Some(144),
            StatPeriod::DaySoFar => None,
        }
    }

    /// Half-open frame range `[start, T)`.
    pub fn range(self, time: usize) -> std::ops::Range<usize> {
        let start = self.length().map_or(0, |len| time.saturating_sub(len));
        start..time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalendarSpan {
    Month,
    Week,
}

impl CalendarSpan {
    pub fn block_len(self) -> u32 {
        match self {
            CalendarSpan::Month => 30,
            CalendarSpan::Week => 7,
        }
    }
}

/// Provenance of one feature channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSource {
    /// Raw frame `frame` of day `D + day_offset`.
    Lag { lag: usize, day_offset: i32, frame: usize },
    /// Smoothed plane at T of day `D + resolved`; `None` when no day of the
    /// right sign exists and the channel is zero-filled.
    Periodic { requested: i32, resolved: Option<i32>, window: usize },
    Statistic { period: StatPeriod },
    Calendar { span: CalendarSpan },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelDescriptor {
    pub index: usize,
    pub source: ChannelSource,
    pub subtask: Subtask,
}

impl ChannelDescriptor {
    pub fn family(&self) -> &'static str {
        match self.source {
            ChannelSource::Lag { .. } => "lag",
            ChannelSource::Periodic { resolved: Some(r), requested, .. } if r != requested => "periodic_sub",
            ChannelSource::Periodic { resolved: None, .. } => "periodic_zero",
            ChannelSource::Periodic { .. } => "periodic",
            ChannelSource::Statistic { .. } => "statistic",
            ChannelSource::Calendar { span: CalendarSpan::Month } => "month",
            ChannelSource::Calendar { span: CalendarSpan::Week } => "week",
        }
    }

    fn day_offset_text(&self) -> String {
        match &self.source {
            ChannelSource::Lag { day_offset, .. } => day_offset.to_string(),
            ChannelSource::Periodic { resolved: Some(r), .. } => r.to_string(),
            ChannelSource::Periodic { resolved: None, .. } => "none".into(),
            ChannelSource::Statistic { .. } | ChannelSource::Calendar { .. } => "0".into(),
        }
    }

    fn time_ref_text(&self) -> String {
        match &self.source {
            ChannelSource::Lag { lag, frame, .. } => format!("T-{lag}@{frame}"),
            ChannelSource::Periodic { requested, window, .. } => format!("T~{window}@{requested}"),
            ChannelSource::Statistic { period } => match period.length() {
                Some(len) => format!("[T-{len},T-1]"),
                None => "[0,T-1]".into(),
            },
            ChannelSource::Calendar { .. } => "T".into(),
        }
    }
}

impl fmt::Display for ChannelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.index,
            self.family(),
            self.day_offset_text(),
            self.time_ref_text(),
            self.subtask
        )
    }
}

impl FromStr for ChannelDescriptor {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad manifest line {line:?}"));
        let cols: Vec<&str> = line.split('\t').collect();
        let [index, family, day_offset, time_ref, subtask] = cols.as_slice() else {
            return Err(bad());
        };
        let index: usize = index.parse().map_err(|_| bad())?;
        let subtask: Subtask = subtask.parse()?;
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad());
        let source = match *family {
            "lag" => {
                let (lag, frame) = time_ref
                    .strip_prefix("T-")
                    .and_then(|s| s.split_once('@'))
                    .ok_or_else(bad)?;
                ChannelSource::Lag {
                    lag: int(lag)? as usize,
                    day_offset: int(day_offset)? as i32,
                    frame: int(frame)? as usize,
                }
            }
            "periodic" | "periodic_sub" | "periodic_zero" => {
                let (window, requested) = time_ref
                    .strip_prefix("T~")
                    .and_then(|s| s.split_once('@'))
                    .ok_or_else(bad)?;
                let resolved = match *day_offset {
                    "none" => None,
                    v => Some(int(v)? as i32),
                };
                ChannelSource::Periodic {
                    requested: int(requested)? as i32,
                    resolved,
                    window: int(window)? as usize,
                }
            }
            "statistic" => {
                let period = StatPeriod::ALL
                    .into_iter()
                    .find(|p| {
                        ChannelDescriptor {
                            index,
                            source: ChannelSource::Statistic { period: *p },
                            subtask,
                        }
                        .time_ref_text()
                            == *time_ref
                    })
                    .ok_or_else(bad)?;
                ChannelSource::Statistic { period }
            }
            "month" => ChannelSource::Calendar { span: CalendarSpan::Month },
            "week" => ChannelSource::Calendar { span: CalendarSpan::Week },
            _ => return Err(bad()),
        };
        Ok(ChannelDescriptor { index, source, subtask })
    }
}

/// 101 channels of values in `[0, 1]` plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub channels: Tensor3,
    pub manifest: Vec<ChannelDescriptor>,
}

impl FeatureStack {
    pub fn dims(&self) -> GridDims {
        GridDims {
            height: self.channels.height,
            width: self.channels.width,
        }
    }

    /// Channel counts per family: lag, periodic, statistic, calendar.
    pub fn family_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for d in &self.manifest {
            let slot = match d.source {
                ChannelSource::Lag { .. } => 0,
                ChannelSource::Periodic { .. } => 1,
                ChannelSource::Statistic { .. } => 2,
                ChannelSource::Calendar { .. } => 3,
            };
            counts[slot] += 1;
        }
        counts
    }

    pub fn manifest_text(&self) -> String {
        self.manifest.iter().map(|d| format!("{d}\n")).collect()
    }

    /// Writes the stack as a one-frame, 101-channel movie-format file
    /// (values quantized to bytes) plus the manifest sidecar.
    pub fn write(&self, stack_path: &Path, manifest_path: &Path) -> Result<()> {
        let (c, h, w) = self.channels.shape();
        let mut payload = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    payload.push(crate::movie_store::real_to_byte(self.channels.get(ch, y, x) * 255.0));
                }
            }
        }
        TensorFile::new(1, h, w, c, payload)?.write(stack_path)?;
        std::fs::write(manifest_path, self.manifest_text()).map_err(|e| Error::io(manifest_path, e))
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ChannelDescriptor>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Reads a quantized stack file back into channel-first reals.
pub fn read_stack_file(path: &Path) -> Result<Tensor3> {
    let file = TensorFile::read(path)?;
    if file.frames != 1 {
        return Err(Error::Format(format!("a stack file holds one frame, found {}", file.frames)));
    }
    let (c, h, w) = (file.channels, file.height, file.width);
    let mut t = Tensor3::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = t.idx(ch, y, x);
                t.data[i] = f64::from(file.payload[(y * w + x) * c + ch]) / 255.0;
            }
        }
    }
    Ok(t)
}

fn byte_plane(movie: &Movie, t: usize, subtask: Subtask) -> Plane {
    let dims = movie.dims();
    let data = movie
        .frame(t)
        .channel_bytes(subtask)
        .into_iter()
        .map(|b| f64::from(b) / 255.0)
        .collect();
    Plane {
        height: dims.height,
        width: dims.width,
        data,
    }
}

/// Mean of raw byte planes over `frames`, scaled to `[0, 1]`. An empty
/// range yields zeros.
fn mean_over_frames(movie: &Movie, frames: std::ops::Range<usize>, subtask: Subtask) -> Plane {
    let dims = movie.dims();
    let mut sums = vec![0u64; dims.pixels()];
    let count = frames.len();
    for t in frames {
        for (s, b) in sums.iter_mut().zip(movie.frame(t).channel_bytes(subtask)) {
            *s += u64::from(b);
        }
    }
    let data = if count == 0 {
        vec![0.0; dims.pixels()]
    } else {
        sums.into_iter()
            .map(|s| s as f64 / (count as f64 * 255.0))
            .collect()
    };
    Plane {
        height: dims.height,
        width: dims.width,
        data,
    }
}

/// Mean of the subtask plane over `window` frames centred at `time`,
/// clipped to the day; clipped edges average only in-range frames.
pub fn moving_window_smooth(movie: &Movie, subtask: Subtask, time: usize, window: usize) -> Result<Plane> {
    SmoothingConfig { window }.validate()?;
    if time >= FRAMES_PER_DAY {
        return Err(Error::InvalidInput(format!("time index {time} >= {FRAMES_PER_DAY}")));
    }
    let half = (window - 1) / 2;
    let lo = time.saturating_sub(half);
    let hi = (time + half).min(FRAMES_PER_DAY - 1);
    Ok(mean_over_frames(movie, lo..hi + 1, subtask))
}

pub fn period_average(movie: &Movie, subtask: Subtask, time: usize, period: StatPeriod) -> Result<Plane> {
    if time >= FRAMES_PER_DAY {
        return Err(Error::InvalidInput(format!("time index {time} >= {FRAMES_PER_DAY}")));
    }
    Ok(mean_over_frames(movie, period.range(time), subtask))
}

/// Mean of frame `time` over the other archive days in `day`'s 30- or
/// 7-day block, or over every other day of the city when the block has none.
/// Falls back to day `day` itself only when the city holds nothing else.
pub fn calendar_average(
    archive: &MovieArchive,
    city: &str,
    day: u32,
    time: usize,
    subtask: Subtask,
    span: CalendarSpan,
) -> Result<Plane> {
    let days = archive.days(city)?;
    if days.is_empty() {
        return Err(Error::NotFound(format!("no days for city {city:?}")));
    }
    let block = day / span.block_len();
    let mut chosen: Vec<u32> = days
        .iter()
        .copied()
        .filter(|&d| d != day && d / span.block_len() == block)
        .collect();
    if chosen.is_empty() {
        chosen = days.iter().copied().filter(|&d| d != day).collect();
    }
    if chosen.is_empty() {
        chosen = days;
    }
    let dims = archive.dims();
    let mut sums = vec![0u64; dims.pixels()];
    for &d in &chosen {
        let movie = archive.movie(city, d)?;
        for (s, b) in sums.iter_mut().zip(movie.frame(time).channel_bytes(subtask)) {
            *s += u64::from(b);
        }
    }
    let n = chosen.len() as f64 * 255.0;
    Ok(Plane {
        height: dims.height,
        width: dims.width,
        data: sums.into_iter().map(|s| s as f64 / n).collect(),
    })
}

/// Nearest existing day on the same side of `day` as `offset`.
fn resolve_periodic_day(days: &[u32], day: u32, offset: i32) -> Option<i32> {
    let target = i64::from(day) + i64::from(offset);
    days.iter()
        .map(|&d| i64::from(d) - i64::from(day))
        .filter(|&o| o != 0 && (o < 0) == (offset < 0))
        .min_by_key(|&o| ((i64::from(day) + o - target).abs(), o.abs()))
        .map(|o| o as i32)
}

fn day_with_offset(day: u32, offset: i32) -> Option<u32> {
    u32::try_from(i64::from(day) + i64::from(offset)).ok()
}

/// Builds the manifest for a request without touching pixel data.
pub fn plan_manifest(archive: &MovieArchive, req: &FeatureRequest, cfg: &FeatureConfig) -> Result<Vec<ChannelDescriptor>> {
    req.validate()?;
    cfg.smoothing.validate()?;
    let days = archive.days(&req.city)?;
    if !days.contains(&req.day) {
        return Err(Error::NotFound(format!("day {} of city {:?}", req.day, req.city)));
    }
    let mut manifest = Vec::with_capacity(FEATURE_CHANNELS);
    let mut push = |source: ChannelSource, subtask: Subtask| {
        let index = manifest.len();
        manifest.push(ChannelDescriptor { index, source, subtask });
    };

    for lag in 1..=LAG_COUNT {
        let (day_offset, frame) = if lag <= req.time {
            (0, req.time - lag)
        } else {
            let prev_ok = cfg.previous_day_fallback
                && req.day > 0
                && days.contains(&(req.day - 1));
            if !prev_ok {
                return Err(Error::InsufficientHistory(format!(
                    "time index {} leaves fewer than {LAG_COUNT} lag frames on day {}",
                    req.time, req.day
                )));
            }
            (-1, FRAMES_PER_DAY + req.time - lag)
        };
        for s in Subtask::ALL {
            push(ChannelSource::Lag { lag, day_offset, frame }, s);
        }
    }
    for &requested in &PERIODIC_OFFSETS {
        let exact = day_with_offset(req.day, requested).filter(|d| days.contains(d));
        let resolved = match exact {
            Some(_) => Some(requested),
            None => resolve_periodic_day(&days, req.day, requested),
        };
        for s in Subtask::ALL {
            push(
                ChannelSource::Periodic {
                    requested,
                    resolved,
                    window: cfg.smoothing.window,
                },
                s,
            );
        }
    }
    for period in StatPeriod::ALL {
        for s in Subtask::ALL {
            push(ChannelSource::Statistic { period }, s);
        }
    }
    push(ChannelSource::Calendar { span: CalendarSpan::Month }, req.subtask);
    push(ChannelSource::Calendar { span: CalendarSpan::Week }, req.subtask);
    Ok(manifest)
}

/// Computes one channel from its descriptor.
pub fn derive_channel(archive: &MovieArchive, req: &FeatureRequest, desc: &ChannelDescriptor) -> Result<Plane> {
    let dims = archive.dims();
    let movie_at = |offset: i32| {
        let day = day_with_offset(req.day, offset)
            .ok_or_else(|| Error::NotFound(format!("day {} {offset:+}", req.day)))?;
        archive.movie(&req.city, day)
    };
    match &desc.source {
        ChannelSource::Lag { day_offset, frame, .. } => Ok(byte_plane(&*movie_at(*day_offset)?, *frame, desc.subtask)),
        ChannelSource::Periodic { resolved: Some(o), window, .. } => {
            moving_window_smooth(&*movie_at(*o)?, desc.subtask, req.time, *window)
        }
        ChannelSource::Periodic { resolved: None, .. } => Ok(Plane::zeros(dims.height, dims.width)),
        ChannelSource::Statistic { period } => period_average(&*movie_at(0)?, desc.subtask, req.time, *period),
        ChannelSource::Calendar { span } => calendar_average(archive, &req.city, req.day, req.time, desc.subtask, *span),
    }
}

pub fn assemble(archive: &MovieArchive, req: &FeatureRequest, cfg: &FeatureConfig) -> Result<FeatureStack> {
    let manifest = plan_manifest(archive, req, cfg)?;
    let planes = manifest
        .iter()
        .map(|d| derive_channel(archive, req, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack {
        channels: Tensor3::from_planes(&planes)?,
        manifest,
    })
}

/// Rebuilds a stack purely from a manifest.
pub fn rederive(archive: &MovieArchive, req: &FeatureRequest, manifest: &[ChannelDescriptor]) -> Result<Tensor3> {
    let planes = manifest
        .iter()
        .map(|d| derive_channel(archive, req, d))
        .collect::<Result<Vec<_>>>()?;
    Tensor3::from_planes(&planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::movie_store::synth_movie;

    fn archive_of(days: &[u32], dims: GridDims, seed: u64) -> MovieArchive {
        let mut a = MovieArchive::in_memory(dims);
        for &d in days {
            let mut m = synth_movie(seed, dims, d, 0.3);
            m.city = "c".into();
            a.insert(m).unwrap();
        }
        a
    }

    /// Window mean computed from an explicit frame list.
    fn oracle_mean(movie: &Movie, subtask: Subtask, frames: &[usize]) -> Vec<f64> {
        let dims = movie.dims();
        let mut out = vec![0.0; dims.pixels()];
        if frames.is_empty() {
            return out;
        }
        for (p, o) in out.iter_mut().enumerate() {
            let (y, x) = (p / dims.width, p % dims.width);
            let mut s = 0.0;
            for &t in frames {
                s += f64::from(movie.frame(t).value(y, x, subtask));
            }
            *o = s / frames.len() as f64 / 255.0;
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn smoothing_examples() {
        let m = synth_movie(3, GridDims::new(5, 6).unwrap(), 2, 0.2);
        let w1 = moving_window_smooth(&m, Subtask::Speed, 40, 1).unwrap();
        assert_eq!(w1.data, oracle_mean(&m, Subtask::Speed, &[40]));
        let t0 = moving_window_smooth(&m, Subtask::Volume, 0, 13).unwrap();
        assert_close(&t0.data, &oracle_mean(&m, Subtask::Volume, &[0, 1, 2, 3, 4, 5, 6]), 1e-12);
        for t in [0usize, 6, 144, 281, 287] {
            let lo = t.saturating_sub(6);
            let hi = (t + 6).min(287);
            let frames: Vec<usize> = (lo..=hi).collect();
            let got = moving_window_smooth(&m, Subtask::Heading, t, 13).unwrap();
            assert_close(&got.data, &oracle_mean(&m, Subtask::Heading, &frames), 1e-12);
        }
        assert!(matches!(moving_window_smooth(&m, Subtask::Volume, 3, 4), Err(Error::InvalidConfig(_))));

        let c = Movie::constant("x", 0, GridDims::new(2, 2).unwrap(), 255, 255, 255).unwrap();
        assert!(moving_window_smooth(&c, Subtask::Speed, 100, 13).unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn period_examples() {
        let c = Movie::constant("x", 0, GridDims::new(2, 3).unwrap(), 51, 102, 170).unwrap();
        let p = period_average(&c, Subtask::Speed, 50, StatPeriod::Hour).unwrap();
        assert!(p.data.iter().all(|&v| v == 102.0 / 255.0));
        let empty = period_average(&c, Subtask::Speed, 0, StatPeriod::DaySoFar).unwrap();
        assert!(empty.data.iter().all(|&v| v == 0.0));

        let m = synth_movie(8, GridDims::new(4, 4).unwrap(), 1, 0.1);
        let got = period_average(&m, Subtask::Volume, 20, StatPeriod::ThreeHours).unwrap();
        let frames: Vec<usize> = (0..20).collect();
        assert_close(&got.data, &oracle_mean(&m, Subtask::Volume, &frames), 1e-12);
        let got = period_average(&m, Subtask::Volume, 200, StatPeriod::SixHours).unwrap();
        let frames: Vec<usize> = (128..200).collect();
        assert_close(&got.data, &oracle_mean(&m, Subtask::Volume, &frames), 1e-12);
        assert!(StatPeriod::from_id(5).is_err());
    }

    #[test]
    fn calendar_examples() {
        let dims = GridDims::new(3, 3).unwrap();
        let mut a = MovieArchive::in_memory(dims);
        for d in 0..4 {
            a.insert(Movie::constant("c", d, dims, 40, 40, 85).unwrap()).unwrap();
        }
        let p = calendar_average(&a, "c", 1, 10, Subtask::Heading, CalendarSpan::Week).unwrap();
        assert!(p.data.iter().all(|&v| v == 85.0 / 255.0));

        // single other day in the week block
        let a = archive_of(&[7, 8, 30], dims, 4);
        let got = calendar_average(&a, "c", 8, 99, Subtask::Volume, CalendarSpan::Week).unwrap();
        assert_eq!(got.data, oracle_mean(&a.movie("c", 7).unwrap(), Subtask::Volume, &[99]));

        // three-day block mean
        let a = archive_of(&[14, 15, 16, 17, 40], dims, 4);
        let got = calendar_average(&a, "c", 17, 50, Subtask::Speed, CalendarSpan::Week).unwrap();
        let mut expected = vec![0.0; 9];
        for d in [14, 15, 16] {
            let m = a.movie("c", d).unwrap();
            for (e, b) in expected.iter_mut().zip(m.frame(50).channel_bytes(Subtask::Speed)) {
                *e += f64::from(b) / 255.0 / 3.0;
            }
        }
        assert_close(&got.data, &expected, 1e-12);

        // block with no other day falls back to all other days
        let got = calendar_average(&a, "c", 40, 50, Subtask::Speed, CalendarSpan::Week).unwrap();
        let mut expected = vec![0.0; 9];
        for d in [14, 15, 16, 17] {
            let m = a.movie("c", d).unwrap();
            for (e, b) in expected.iter_mut().zip(m.frame(50).channel_bytes(Subtask::Speed)) {
                *e += f64::from(b) / 255.0 / 4.0;
            }
        }
        assert_close(&got.data, &expected, 1e-12);
    }

    #[test]
    fn assemble_layout_and_manifest() {
        let dims = GridDims::new(6, 7).unwrap();
        let days: Vec<u32> = (0..30).collect();
        let a = archive_of(&days, dims, 1);
        let req = FeatureRequest::new("c", 15, 100, Subtask::Speed);
        let stack = assemble(&a, &req, &FeatureConfig::default()).unwrap();
        assert_eq!(stack.channels.channels, FEATURE_CHANNELS);
        assert_eq!(stack.manifest.len(), FEATURE_CHANNELS);
        assert_eq!(stack.family_counts(), [36, 48, 15, 2]);
        assert!(stack.channels.data.iter().all(|v| (0.0..=1.0).contains(v)));

        // channel 0: lag 1 volume; channel 5: lag 2 heading
        let m = a.movie("c", 15).unwrap();
        assert_eq!(stack.channels.channel(0), oracle_mean(&m, Subtask::Volume, &[99]).as_slice());
        assert_eq!(stack.channels.channel(5), oracle_mean(&m, Subtask::Heading, &[98]).as_slice());
        // periodic D-7 (slot 1) volume, window mean of frames [94, 106]
        let prev = a.movie("c", 8).unwrap();
        let frames: Vec<usize> = (94..=106).collect();
        assert_close(stack.channels.channel(36 + 3), &oracle_mean(&prev, Subtask::Volume, &frames), 1e-12);
        assert_eq!(stack.manifest[99].subtask, Subtask::Speed);
        assert_eq!(stack.manifest[100].source, ChannelSource::Calendar { span: CalendarSpan::Week });

        let text = stack.manifest_text();
        assert_eq!(text.lines().count(), 101);
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed, stack.manifest);
        assert_eq!(rederive(&a, &req, &parsed).unwrap(), stack.channels);
    }

    #[test]
    fn constant_archive_gives_constant_channels() {
        let dims = GridDims::new(3, 4).unwrap();
        let mut a = MovieArchive::in_memory(dims);
        for d in 0..20 {
            a.insert(Movie::constant("c", d, dims, 85, 85, 85).unwrap()).unwrap();
        }
        for t in [12, 150, 287] {
            let stack = assemble(&a, &FeatureRequest::new("c", 10, t, Subtask::Heading), &FeatureConfig::default()).unwrap();
            assert!(stack.channels.data.iter().all(|&v| v == 85.0 / 255.0), "t={t}");
        }
    }

    #[test]
    fn missing_periodic_days_are_substituted_or_zeroed() {
        let dims = GridDims::new(2, 2).unwrap();
        let a = archive_of(&[3, 4, 5, 6], dims, 2);
        let stack = assemble(&a, &FeatureRequest::new("c", 3, 50, Subtask::Volume), &FeatureConfig::default()).unwrap();
        // no day before 3: all negative offsets zero-filled
        for d in &stack.manifest[36..36 + 24] {
            assert!(matches!(d.source, ChannelSource::Periodic { resolved: None, .. }));
        }
        assert!(stack.channels.data[36 * 4..60 * 4].iter().all(|&v| v == 0.0));
        // +4..+7 missing: nearest positive day is +3
        let slot_plus7 = &stack.manifest[36 + 14 * 3];
        assert_eq!(slot_plus7.source, ChannelSource::Periodic { requested: 7, resolved: Some(3), window: 13 });
        assert_eq!(slot_plus7.family(), "periodic_sub");
        let parsed = parse_manifest(&stack.manifest_text()).unwrap();
        assert_eq!(
            rederive(&a, &FeatureRequest::new("c", 3, 50, Subtask::Volume), &parsed).unwrap(),
            stack.channels
        );
    }

    #[test]
    fn insufficient_history() {
        let dims = GridDims::new(2, 2).unwrap();
        let a = archive_of(&[0, 1], dims, 2);
        let req = FeatureRequest::new("c", 1, 5, Subtask::Volume);
        assert!(matches!(
            assemble(&a, &req, &FeatureConfig::default()),
            Err(Error::InsufficientHistory(_))
        ));
        let cfg = FeatureConfig {
            previous_day_fallback: true,
            ..Default::default()
        };
        let stack = assemble(&a, &req, &cfg).unwrap();
        // lag 6 of T=5 is frame 287 of day 0
        assert_eq!(stack.manifest[15].source, ChannelSource::Lag { lag: 6, day_offset: -1, frame: 287 });
        let day0 = a.movie("c", 0).unwrap();
        assert_eq!(stack.channels.channel(15), oracle_mean(&day0, Subtask::Volume, &[287]).as_slice());
        // day 0 has no previous day
        assert!(matches!(
            assemble(&a, &FeatureRequest::new("c", 0, 5, Subtask::Volume), &cfg),
            Err(Error::InsufficientHistory(_))
        ));
        assert!(matches!(
            assemble(&a, &FeatureRequest::new("z", 1, 50, Subtask::Volume), &cfg),
            Err(Error::NotFound(_))
        ));
    }
}
