//! Grid-movie data model: frames of (volume, speed, heading) bytes, the
//! heading codec, min-max scaling, the `T4CM` binary format, a seeded
//! synthetic generator and an on-disk archive of city-days.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Frames per day: one every five minutes.
pub const FRAMES_PER_DAY: usize = 288;
/// Channels per movie pixel.
pub const MOVIE_CHANNELS: usize = 3;
/// Legal heading bytes indexed by class: missing, NW, NE, SW, SE.
pub const HEADING_CODES: [u8; 5] = [0, 1, 85, 170, 255];
pub const HEADING_CLASSES: usize = 5;

pub const MOVIE_MAGIC: &[u8; 4] = b"T4CM";
pub const MOVIE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const ARCHIVE_INDEX: &str = "archive.idx";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dims must be positive, got {height}x{width}"
            )));
        }
        Ok(GridDims { height, width })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl Default for GridDims {
    fn default() -> Self {
        GridDims {
            height: 436,
            width: 495,
        }
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl FromStr for GridDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidInput(format!("expected HxW, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("bad dimension {v:?}")))
        };
        GridDims::new(parse(h)?, parse(w)?)
    }
}

/// One of the three per-pixel prediction targets. The discriminant is the
/// channel index inside a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subtask {
    Volume = 0,
    Speed = 1,
    Heading = 2,
}

impl Subtask {
    pub const ALL: [Subtask; 3] = [Subtask::Volume, Subtask::Speed, Subtask::Heading];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Volume => "volume",
            Subtask::Speed => "speed",
            Subtask::Heading => "heading",
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "volume" | "flow" => Ok(Subtask::Volume),
            "speed" => Ok(Subtask::Speed),
            "heading" | "direction" => Ok(Subtask::Heading),
            other => Err(Error::InvalidInput(format!("unknown subtask {other:?}"))),
        }
    }
}

/// Bins probe headings (degrees) into quadrants and returns the byte code of
/// the majority bin, or 0 when there are no probes.
///
/// Bins are `(lo, hi]`: NE `(0, 90]`, SE `(90, 180]`, SW `(180, 270]`,
/// NW `(270, 359]` plus exactly 0. Ties go to the lower class index.
pub fn encode_heading(probe_headings: &[f64]) -> Result<u8> {
    let mut counts = [0usize; HEADING_CLASSES];
    for &deg in probe_headings {
        counts[heading_bin(deg)?] += 1;
    }
    if probe_headings.is_empty() {
        return Ok(HEADING_CODES[0]);
    }
    let mut best = 1;
    for class in 2..HEADING_CLASSES {
        if counts[class] > counts[best] {
            best = class;
        }
    }
    Ok(HEADING_CODES[best])
}

fn heading_bin(deg: f64) -> Result<usize> {
    if !(0.0..=359.0).contains(&deg) {
        return Err(Error::InvalidInput(format!(
            "heading {deg} outside [0, 359] degrees"
        )));
    }
    Ok(if deg == 0.0 || deg > 270.0 {
        1
    } else if deg <= 90.0 {
        2
    } else if deg <= 180.0 {
        4
    } else {
        3
    })
}

pub fn heading_value_to_class(value: u8) -> Result<u8> {
    match value {
        0 => Ok(0),
        1 => Ok(1),
        85 => Ok(2),
        170 => Ok(3),
        255 => Ok(4),
        other => Err(Error::InvalidHeading(other)),
    }
}

pub fn class_to_heading_value(class: u8) -> Result<u8> {
    HEADING_CODES
        .get(class as usize)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("heading class {class} outside [0, 4]")))
}

pub fn is_heading_code(value: u8) -> bool {
    HEADING_CODES.contains(&value)
}

/// Clamps `raw` into `[lo, hi]` and maps it linearly onto `0..=255`,
/// rounding half away from zero.
pub fn minmax_scale(raw: f64, lo: f64, hi: f64) -> Result<u8> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    Ok(real_to_byte(255.0 * (raw.clamp(lo, hi) - lo) / (hi - lo)))
}

/// The single real → byte rule used throughout: clamp then round half away
/// from zero.
pub fn real_to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

/// One five-minute snapshot: `height × width × 3` bytes, channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    dims: GridDims,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(dims: GridDims, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != dims.pixels() * MOVIE_CHANNELS {
            return Err(Error::InvalidInput(format!(
                "frame {dims} needs {} bytes, got {}",
                dims.pixels() * MOVIE_CHANNELS,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .chunks_exact(MOVIE_CHANNELS)
            .map(|px| px[Subtask::Heading.channel()])
            .find(|&h| !is_heading_code(h))
        {
            return Err(Error::InvalidHeading(bad));
        }
        Ok(Frame { dims, pixels })
    }

    pub fn zeros(dims: GridDims) -> Self {
        Frame {
            dims,
            pixels: vec![0; dims.pixels() * MOVIE_CHANNELS],
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize, subtask: Subtask) -> u8 {
        self.pixels[(y * self.dims.width + x) * MOVIE_CHANNELS + subtask.channel()]
    }

    /// The subtask channel as a byte plane in row-major order.
    pub fn channel_bytes(&self, subtask: Subtask) -> Vec<u8> {
        self.pixels
            .chunks_exact(MOVIE_CHANNELS)
            .map(|px| px[subtask.channel()])
            .collect()
    }
}

/// One city-day of exactly [`FRAMES_PER_DAY`] frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Movie {
    pub city: String,
    pub day: u32,
    frames: Vec<Frame>,
}

impl Movie {
    pub fn new(city: impl Into<String>, day: u32, frames: Vec<Frame>) -> Result<Self> {
        if frames.len() != FRAMES_PER_DAY {
            return Err(Error::InvalidInput(format!(
                "a movie holds exactly {FRAMES_PER_DAY} frames, got {}",
                frames.len()
            )));
        }
        let dims = frames[0].dims();
        if frames.iter().any(|f| f.dims() != dims) {
            return Err(Error::InvalidInput("frames disagree on grid dims".into()));
        }
        Ok(Movie {
            city: city.into(),
            day,
            frames,
        })
    }

    pub fn constant(city: impl Into<String>, day: u32, dims: GridDims, vol: u8, spd: u8, heading: u8) -> Result<Self> {
        let px = [vol, spd, heading];
        let pixels: Vec<u8> = px.iter().copied().cycle().take(dims.pixels() * 3).collect();
        let frame = Frame::new(dims, pixels)?;
        Movie::new(city, day, vec![frame; FRAMES_PER_DAY])
    }

    pub fn dims(&self) -> GridDims {
        self.frames[0].dims()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }
}

/// Raw contents of a `T4CM` file: any frame count and channel count.
/// Movies, feature stacks and predictions all share this container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFile {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub payload: Vec<u8>,
}

impl TensorFile {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, payload: Vec<u8>) -> Result<Self> {
        for (name, v) in [("frames", frames), ("height", height), ("width", width), ("channels", channels)] {
            if v > u16::MAX as usize {
                return Err(Error::Format(format!("{name} {v} does not fit the u16 header")));
            }
        }
        if payload.len() != frames * height * width * channels {
            return Err(Error::InvalidInput(format!(
                "payload of {} bytes does not match {frames}x{height}x{width}x{channels}",
                payload.len()
            )));
        }
        Ok(TensorFile {
            frames,
            height,
            width,
            channels,
            payload,
        })
    }

    pub fn dims(&self) -> GridDims {
        GridDims {
            height: self.height,
            width: self.width,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame_bytes(&self, f: usize) -> &[u8] {
        let n = self.frame_len();
        &self.payload[f * n..(f + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MOVIE_MAGIC);
        for v in [
            MOVIE_VERSION,
            self.frames as u16,
            self.height as u16,
            self.width as u16,
            self.channels as u16,
            0,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let expected = header.frames * header.height * header.width * header.channels;
        let found = bytes.len() - HEADER_LEN;
        if found < expected {
            return Err(Error::Truncated { expected, found });
        }
        if found > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                found - expected
            )));
        }
        Ok(TensorFile {
            payload: bytes[HEADER_LEN..].to_vec(),
            ..header
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorFile::from_bytes(&bytes)
    }

    /// Splits frame `f` into one frame, validating heading codes when the
    /// file carries movie-shaped (3-channel) frames.
    pub fn to_frame(&self, f: usize) -> Result<Frame> {
        if self.channels != MOVIE_CHANNELS {
            return Err(Error::Format(format!(
                "frames need {MOVIE_CHANNELS} channels, file has {}",
                self.channels
            )));
        }
        Frame::new(self.dims(), self.frame_bytes(f).to_vec())
    }

    pub fn to_frames(&self) -> Result<Vec<Frame>> {
        (0..self.frames).map(|f| self.to_frame(f)).collect()
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let dims = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("no frames to write".into()))?
            .dims();
        let mut payload = Vec::with_capacity(frames.len() * dims.pixels() * MOVIE_CHANNELS);
        for f in frames {
            if f.dims() != dims {
                return Err(Error::InvalidInput("frames disagree on grid dims".into()));
            }
            payload.extend_from_slice(f.pixels());
        }
        TensorFile::new(frames.len(), dims.height, dims.width, MOVIE_CHANNELS, payload)
    }
}

fn parse_header(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MOVIE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    if field(0) != MOVIE_VERSION as usize {
        return Err(Error::Format(format!("unsupported version {}", field(0))));
    }
    if field(5) != 0 {
        return Err(Error::Format("reserved header field must be zero".into()));
    }
    let (frames, height, width, channels) = (field(1), field(2), field(3), field(4));
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Format(format!(
            "degenerate dims {height}x{width} with {channels} channels"
        )));
    }
    Ok(TensorFile {
        frames,
        height,
        width,
        channels,
        payload: Vec::new(),
    })
}

fn read_header(path: &Path) -> Result<TensorFile> {
    use std::io::Read;
    let mut buf = [0u8; HEADER_LEN];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut got = 0;
    while got < HEADER_LEN {
        let n = f.read(&mut buf[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    parse_header(&buf[..got])
}

pub fn write_movie(movie: &Movie, path: &Path) -> Result<()> {
    TensorFile::from_frames(movie.frames())?.write(path)
}

/// Reads a movie; city and day are taken from the archive layout
/// `<city>/<day>.t4cm` when the path follows it.
pub fn read_movie(path: &Path) -> Result<Movie> {
    let city = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let day = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    read_movie_as(path, &city, day)
}

pub fn read_movie_as(path: &Path, city: &str, day: u32) -> Result<Movie> {
    let file = TensorFile::read(path)?;
    if file.frames != FRAMES_PER_DAY || file.channels != MOVIE_CHANNELS {
        return Err(Error::Format(format!(
            "{}: a movie needs {FRAMES_PER_DAY} frames of {MOVIE_CHANNELS} channels, found {} of {}",
            path.display(),
            file.frames,
            file.channels
        )));
    }
    Movie::new(city, day, file.to_frames()?)
}

/// Deterministic synthetic city-day.
///
/// A seed-level permutation fixes which `round(sparsity · pixels)` pixels are
/// off-road (zero in every frame). Road pixels follow a two-peak daily
/// profile with weekday/weekend scaling and seeded noise, always non-zero in
/// volume and speed, with a per-pixel dominant heading.
pub fn synth_movie(seed: u64, dims: GridDims, day: u32, sparsity: f64) -> Movie {
    let sparsity = sparsity.clamp(0.0, 1.0);
    let n = dims.pixels();
    let mut layout_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut layout_rng);
    let off_count = (sparsity * n as f64).round() as usize;
    let mut on_road = vec![true; n];
    for &p in &order[..off_count] {
        on_road[p] = false;
    }

    struct Road {
        base_volume: f64,
        free_speed: f64,
        heading: u8,
        shift: f64,
    }
    let roads: Vec<Road> = (0..n)
        .map(|_| Road {
            base_volume: layout_rng.gen_range(40.0..200.0),
            free_speed: layout_rng.gen_range(120.0..240.0),
            heading: layout_rng.gen_range(1..5u8),
            shift: layout_rng.gen_range(-1.0..1.0),
        })
        .collect();

    let mut day_rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(day) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let weekday = if day % 7 < 5 { 1.0 } else { 0.7 };
    let frames = (0..FRAMES_PER_DAY)
        .map(|t| {
            let mut pixels = vec![0u8; n * MOVIE_CHANNELS];
            for (p, road) in roads.iter().enumerate() {
                if !on_road[p] {
                    continue;
                }
                let hour = t as f64 / 12.0 + road.shift;
                let profile = 0.2
                    + 0.8 * ((-((hour - 8.0) / 2.0).powi(2)).exp() + (-((hour - 17.5) / 2.5).powi(2)).exp()).min(1.0);
                let load = profile * weekday;
                let volume = road.base_volume * load + day_rng.gen_range(-8.0..8.0);
                let speed = road.free_speed * (1.0 - 0.5 * load) + day_rng.gen_range(-8.0..8.0);
                let heading = if day_rng.gen_bool(0.7) {
                    road.heading
                } else {
                    day_rng.gen_range(1..5u8)
                };
                let px = &mut pixels[p * MOVIE_CHANNELS..(p + 1) * MOVIE_CHANNELS];
                px[0] = real_to_byte(volume).max(1);
                px[1] = real_to_byte(speed).max(1);
                px[2] = HEADING_CODES[heading as usize];
            }
            Frame { dims, pixels }
        })
        .collect();
    Movie {
        city: String::new(),
        day,
        frames,
    }
}

pub fn movie_path(root: &Path, city: &str, day: u32) -> PathBuf {
    root.join(city).join(format!("{day}.t4cm"))
}

/// Collection of city-days sharing one grid, backed by files under
/// `<root>/<city>/<day>.t4cm` or held in memory. Movies are loaded lazily
/// and cached; the archive is safe to share between threads.
#[derive(Debug)]
pub struct MovieArchive {
    root: Option<PathBuf>,
    dims: GridDims,
    index: BTreeMap<String, BTreeMap<u32, Option<PathBuf>>>,
    cache: RwLock<HashMap<(String, u32), Arc<Movie>>>,
}

impl MovieArchive {
    pub fn in_memory(dims: GridDims) -> Self {
        MovieArchive {
            root: None,
            dims,
            index: BTreeMap::new(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    /// Adds a movie held in memory.
    pub fn insert(&mut self, movie: Movie) -> Result<()> {
        if movie.dims() != self.dims {
            return Err(Error::InvalidInput(format!(
                "movie dims {} differ from archive dims {}",
                movie.dims(),
                self.dims
            )));
        }
        let days = self.index.entry(movie.city.clone()).or_default();
        if days.contains_key(&movie.day) {
            return Err(Error::InvalidInput(format!(
                "duplicate day {} for city {}",
                movie.day, movie.city
            )));
        }
        days.insert(movie.day, None);
        self.cache
            .get_mut()
            .expect("archive cache poisoned")
            .insert((movie.city.clone(), movie.day), Arc::new(movie));
        Ok(())
    }

    /// Writes `movies` under `root` together with the archive index.
    pub fn create(root: &Path, dims: GridDims, movies: &[Movie]) -> Result<MovieArchive> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut archive = MovieArchive {
            root: Some(root.to_path_buf()),
            dims,
            index: BTreeMap::new(),
            cache: RwLock::new(HashMap::new()),
        };
        for m in movies {
            if m.dims() != dims {
                return Err(Error::InvalidInput(format!("movie dims {} differ from {dims}", m.dims())));
            }
            let path = movie_path(root, &m.city, m.day);
            write_movie(m, &path)?;
            let days = archive.index.entry(m.city.clone()).or_default();
            if days.insert(m.day, Some(path)).is_some() {
                return Err(Error::InvalidInput(format!("duplicate day {} for city {}", m.day, m.city)));
            }
        }
        archive.write_index()?;
        Ok(archive)
    }

    /// Writes one more movie into a directory-backed archive and updates the
    /// index; the movie is not kept in memory.
    pub fn append(&mut self, movie: &Movie) -> Result<()> {
        let Some(root) = self.root.clone() else {
            return Err(Error::State("append needs an archive opened on a directory".into()));
        };
        if movie.dims() != self.dims {
            return Err(Error::InvalidInput(format!("movie dims {} differ from {}", movie.dims(), self.dims)));
        }
        if self.contains(&movie.city, movie.day) {
            return Err(Error::InvalidInput(format!("duplicate day {} for city {}", movie.day, movie.city)));
        }
        let path = movie_path(&root, &movie.city, movie.day);
        write_movie(movie, &path)?;
        self.index.entry(movie.city.clone()).or_default().insert(movie.day, Some(path));
        self.write_index()
    }

    fn write_index(&self) -> Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        let mut text = format!("dims\t{}\t{}\n", self.dims.height, self.dims.width);
        for (city, days) in &self.index {
            for day in days.keys() {
                text.push_str(&format!("{city}\t{day}\t{city}/{day}.t4cm\n"));
            }
        }
        let path = root.join(ARCHIVE_INDEX);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Opens an archive directory, via its index file when present and by
    /// scanning `<city>/<day>.t4cm` otherwise.
    pub fn open(root: &Path) -> Result<MovieArchive> {
        if !root.is_dir() {
            return Err(Error::NotFound(format!("archive root {}", root.display())));
        }
        let mut index: BTreeMap<String, BTreeMap<u32, Option<PathBuf>>> = BTreeMap::new();
        let mut dims = None;
        let index_path = root.join(ARCHIVE_INDEX);
        if index_path.is_file() {
            let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let cols: Vec<&str> = line.split('\t').collect();
                let bad = || Error::Format(format!("bad index line {line:?}"));
                match cols.as_slice() {
                    ["dims", h, w] => {
                        dims = Some(GridDims::new(h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)?)
                    }
                    [city, day, rel] => {
                        let day: u32 = day.parse().map_err(|_| bad())?;
                        index.entry(city.to_string()).or_default().insert(day, Some(root.join(rel)));
                    }
                    _ => return Err(bad()),
                }
            }
        } else {
            for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
                let entry = entry.map_err(|e| Error::io(root, e))?;
                if !entry.path().is_dir() {
                    continue;
                }
                let city = entry.file_name().to_string_lossy().into_owned();
                for file in fs::read_dir(entry.path()).map_err(|e| Error::io(entry.path(), e))? {
                    let path = file.map_err(|e| Error::io(entry.path(), e))?.path();
                    if path.extension().and_then(|e| e.to_str()) != Some("t4cm") {
                        continue;
                    }
                    if let Some(day) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                        index.entry(city.clone()).or_default().insert(day, Some(path));
                    }
                }
            }
        }
        for days in index.values() {
            for path in days.values().flatten() {
                let header = read_header(path)?;
                let d = header.dims();
                match dims {
                    None => dims = Some(d),
                    Some(expected) if expected != d => {
                        return Err(Error::Format(format!(
                            "{} has dims {d}, archive has {expected}",
                            path.display()
                        )))
                    }
                    _ => {}
                }
            }
        }
        let dims = dims.ok_or_else(|| Error::Format(format!("{}: empty archive without index", root.display())))?;
        Ok(MovieArchive {
            root: Some(root.to_path_buf()),
            dims,
            index,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn cities(&self) -> Vec<String> {
        self.index.keys().cloned().collect()
    }

    pub fn has_city(&self, city: &str) -> bool {
        self.index.contains_key(city)
    }

    /// Days held for `city` in ascending order.
    pub fn days(&self, city: &str) -> Result<Vec<u32>> {
        self.index
            .get(city)
            .map(|d| d.keys().copied().collect())
            .ok_or_else(|| Error::NotFound(format!("city {city:?}")))
    }

    pub fn contains(&self, city: &str, day: u32) -> bool {
        self.index.get(city).is_some_and(|d| d.contains_key(&day))
    }

    pub fn len(&self) -> usize {
        self.index.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn movie(&self, city: &str, day: u32) -> Result<Arc<Movie>> {
        let key = (city.to_string(), day);
        if let Some(m) = self.cache.read().expect("archive cache poisoned").get(&key) {
            return Ok(Arc::clone(m));
        }
        let path = self
            .index
            .get(city)
            .ok_or_else(|| Error::NotFound(format!("city {city:?}")))?
            .get(&day)
            .ok_or_else(|| Error::NotFound(format!("day {day} of city {city:?}")))?
            .clone()
            .ok_or_else(|| Error::State(format!("in-memory movie {city}/{day} evicted")))?;
        let movie = Arc::new(read_movie_as(&path, city, day)?);
        if movie.dims() != self.dims {
            return Err(Error::Format(format!("{} has dims {}", path.display(), movie.dims())));
        }
        self.cache
            .write()
            .expect("archive cache poisoned")
            .insert(key, Arc::clone(&movie));
        Ok(movie)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_bin(deg: f64) -> usize {
        // Direct reading of the quadrant table, written independently.
        let d = deg as i64;
        let frac = deg.fract() != 0.0;
        match (d, frac) {
            (0, false) => 1,
            (1..=89, _) | (0, true) | (90, false) => 2,
            (90..=179, _) | (180, false) => 4,
            (180..=269, _) | (270, false) => 3,
            _ => 1,
        }
    }

    #[test]
    fn heading_examples() {
        assert_eq!(encode_heading(&[45.0]).unwrap(), 85);
        assert_eq!(encode_heading(&[]).unwrap(), 0);
        assert_eq!(encode_heading(&[10.0, 20.0, 100.0]).unwrap(), 85);
        assert!(encode_heading(&[360.0]).is_err());
        assert!(encode_heading(&[-1.0]).is_err());
    }

    #[test]
    fn heading_boundaries() {
        assert_eq!(encode_heading(&[0.0]).unwrap(), 1);
        assert_eq!(encode_heading(&[90.0]).unwrap(), 85);
        assert_eq!(encode_heading(&[90.5]).unwrap(), 255);
        assert_eq!(encode_heading(&[180.0]).unwrap(), 255);
        assert_eq!(encode_heading(&[270.0]).unwrap(), 170);
        assert_eq!(encode_heading(&[359.0]).unwrap(), 1);
    }

    #[test]
    fn heading_tie_goes_to_lower_class() {
        // NW (1) vs SE (4): tie
        assert_eq!(encode_heading(&[300.0, 120.0]).unwrap(), 1);
        // NE (2) vs SW (3): tie
        assert_eq!(encode_heading(&[200.0, 45.0]).unwrap(), 85);
    }

    #[test]
    fn encode_matches_bin_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let len = rng.gen_range(0..12);
            let probes: Vec<f64> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0..=359) as f64
                    } else {
                        rng.gen_range(0.0..=359.0)
                    }
                })
                .collect();
            let mut counts = [0; 5];
            for &p in &probes {
                counts[brute_force_bin(p)] += 1;
            }
            let expected = if probes.is_empty() {
                0
            } else {
                let max = *counts[1..].iter().max().unwrap();
                HEADING_CODES[(1..5).find(|&c| counts[c] == max).unwrap()]
            };
            assert_eq!(encode_heading(&probes).unwrap(), expected, "{probes:?}");
        }
    }

    #[test]
    fn codec_examples() {
        assert_eq!(heading_value_to_class(170).unwrap(), 3);
        assert_eq!(heading_value_to_class(0).unwrap(), 0);
        assert!(matches!(heading_value_to_class(86), Err(Error::InvalidHeading(86))));
        assert_eq!(class_to_heading_value(2).unwrap(), 85);
        assert_eq!(class_to_heading_value(0).unwrap(), 0);
        assert!(class_to_heading_value(5).is_err());
        for c in 0..5 {
            assert_eq!(heading_value_to_class(class_to_heading_value(c).unwrap()).unwrap(), c);
        }
        for v in 0..=255u8 {
            if let Ok(c) = heading_value_to_class(v) {
                assert_eq!(class_to_heading_value(c).unwrap(), v);
            }
        }
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(3.0, 3.0, 9.0).unwrap(), 0);
        assert_eq!(minmax_scale(9.0, 3.0, 9.0).unwrap(), 255);
        assert_eq!(minmax_scale(0.5, 0.0, 1.0).unwrap(), 128);
        assert_eq!(minmax_scale(-4.0, 0.0, 1.0).unwrap(), 0);
        assert_eq!(minmax_scale(7.0, 0.0, 1.0).unwrap(), 255);
        assert!(matches!(minmax_scale(0.5, 1.0, 1.0), Err(Error::InvalidRange { .. })));
    }

    #[test]
    fn movie_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c/3.t4cm");
        let mut movie = synth_movie(5, GridDims::new(4, 4).unwrap(), 3, 0.25);
        movie.city = "c".into();
        write_movie(&movie, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 288 * 4 * 4 * 3);
        assert_eq!(read_movie(&path).unwrap(), movie);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(TensorFile::from_bytes(&bad), Err(Error::Format(_))));

        let short = &bytes[..bytes.len() - 4 * 4 * 3];
        assert!(matches!(TensorFile::from_bytes(short), Err(Error::Truncated { .. })));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(TensorFile::from_bytes(&version), Err(Error::Format(_))));

        let mut heading = bytes;
        heading[16 + 2] = 86;
        assert!(matches!(
            TensorFile::from_bytes(&heading).unwrap().to_frames(),
            Err(Error::InvalidHeading(86))
        ));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let file = TensorFile::new(1, 2, 3, 101, vec![7; 606]).unwrap();
        let b = file.to_bytes();
        assert_eq!(&b[..16], &[b'T', b'4', b'C', b'M', 1, 0, 1, 0, 2, 0, 3, 0, 101, 0, 0, 0]);
    }

    #[test]
    fn synth_is_deterministic_and_sparse() {
        let dims = GridDims::new(10, 10).unwrap();
        assert_eq!(synth_movie(1, dims, 4, 0.3), synth_movie(1, dims, 4, 0.3));
        assert_ne!(synth_movie(1, dims, 4, 0.3), synth_movie(1, dims, 5, 0.3));

        let empty = synth_movie(9, dims, 0, 1.0);
        assert!(empty.frames().iter().all(|f| f.pixels().iter().all(|&b| b == 0)));

        let half = synth_movie(9, dims, 0, 0.5);
        for f in half.frames() {
            let zero_pixels = f.pixels().chunks_exact(3).filter(|px| px.iter().all(|&b| b == 0)).count();
            assert_eq!(zero_pixels, 50);
            assert!(f.channel_bytes(Subtask::Heading).iter().all(|&h| is_heading_code(h)));
        }
        // off-road mask is shared across days of one seed
        let other_day = synth_movie(9, dims, 17, 0.5);
        let zeros = |m: &Movie| -> Vec<bool> {
            m.frame(0).pixels().chunks_exact(3).map(|px| px[0] == 0).collect()
        };
        assert_eq!(zeros(&half), zeros(&other_day));
    }

    #[test]
    fn archive_create_open() {
        let dir = tempfile::tempdir().unwrap();
        let dims = GridDims::new(3, 5).unwrap();
        let movies: Vec<Movie> = (0..3)
            .map(|d| {
                let mut m = synth_movie(2, dims, d, 0.2);
                m.city = "berlin".into();
                m
            })
            .collect();
        MovieArchive::create(dir.path(), dims, &movies).unwrap();
        let archive = MovieArchive::open(dir.path()).unwrap();
        assert_eq!(archive.dims(), dims);
        assert_eq!(archive.days("berlin").unwrap(), vec![0, 1, 2]);
        assert_eq!(*archive.movie("berlin", 1).unwrap(), movies[1]);
        assert!(matches!(archive.movie("berlin", 7), Err(Error::NotFound(_))));
        assert!(matches!(archive.days("moscow"), Err(Error::NotFound(_))));

        let empty_dir = tempfile::tempdir().unwrap();
        MovieArchive::create(empty_dir.path(), dims, &[]).unwrap();
        let empty = MovieArchive::open(empty_dir.path()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.dims(), dims);
    }

    #[test]
    fn in_memory_archive_rejects_duplicates() {
        let dims = GridDims::new(2, 2).unwrap();
        let mut archive = MovieArchive::in_memory(dims);
        let mut m = synth_movie(0, dims, 0, 0.0);
        m.city = "a".into();
        archive.insert(m.clone()).unwrap();
        assert!(archive.insert(m).is_err());
        let wrong = synth_movie(0, GridDims::new(3, 3).unwrap(), 1, 0.0);
        assert!(archive.insert(wrong).is_err());
    }
}
