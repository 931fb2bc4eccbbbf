//! Market-style dataset layout, PPM/PGM codecs, bilinear resizing and a
//! deterministic synthetic person-view generator.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, Tensor, TENSOR_MAGIC};

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";
pub const INDEX_FILE: &str = "index.tsv";

/// Parse `<id>_c<cam>s<seq>_...` into `(identity, camera)`. Identity `-1`
/// marks junk images.
pub fn parse_market_filename(name: &str) -> Result<(i64, u32)> {
    let bad = || Error::Parse(format!("malformed dataset file name: {name}"));
    let stem = Path::new(name).file_name().and_then(|s| s.to_str()).ok_or_else(bad)?;
    let (id_part, rest) = stem.split_once('_').ok_or_else(bad)?;
    let identity: i64 = id_part.parse().map_err(|_| bad())?;
    if identity < -1 {
        return Err(bad());
    }
    let rest = rest.strip_prefix('c').ok_or_else(bad)?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() || !rest[digits.len()..].starts_with('s') {
        return Err(bad());
    }
    let camera: u32 = digits.parse().map_err(|_| bad())?;
    Ok((identity, camera))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_DIR,
            Split::Query => QUERY_DIR,
            Split::Gallery => GALLERY_DIR,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::Parse(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.path.display(), e.identity, e.camera, e.split));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Parse(format!("index line {}: {line:?}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            entries.push(IndexEntry {
                path: PathBuf::from(fields[0]),
                identity: fields[1].parse().map_err(|_| bad())?,
                camera: fields[2].parse().map_err(|_| bad())?,
                split: fields[3].parse()?,
            });
        }
        Ok(DatasetIndex { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Build an index from the three split directories under `root`. Entries
    /// are ordered by split, then file name.
    pub fn scan(root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for split in [Split::Train, Split::Query, Split::Gallery] {
            let dir = root.join(split.dir_name());
            if !dir.is_dir() {
                continue;
            }
            let mut names: Vec<String> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| is_image_name(n))
                .collect();
            names.sort();
            for name in names {
                let (identity, camera) = parse_market_filename(&name)?;
                entries.push(IndexEntry {
                    path: Path::new(split.dir_name()).join(&name),
                    identity,
                    camera,
                    split,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::usage(format!("no images found under {}", root.display())));
        }
        Ok(DatasetIndex { entries })
    }

    /// Use the cached index file if present, otherwise scan.
    pub fn open(root: &Path) -> Result<Self> {
        let cached = root.join(INDEX_FILE);
        if cached.is_file() {
            Self::read(&cached)
        } else {
            Self::scan(root)
        }
    }
}

fn is_image_name(name: &str) -> bool {
    name.ends_with(".ppm") || name.ends_with(".gamt")
}

/// Images of one split with their metadata.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    /// `[N, 3, H, W]`
    pub images: Tensor,
    pub identities: Vec<i64>,
    pub cameras: Vec<u32>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

pub fn load_split(root: &Path, index: &DatasetIndex, split: Split, height: usize, width: usize) -> Result<LabeledSet> {
    let mut images = Vec::new();
    let mut identities = Vec::new();
    let mut cameras = Vec::new();
    for e in index.split(split) {
        images.push(load_image(&root.join(&e.path), height, width)?);
        identities.push(e.identity);
        cameras.push(e.camera);
    }
    if images.is_empty() {
        return Err(Error::usage(format!("split {split} is empty")));
    }
    Ok(LabeledSet { images: Tensor::stack(&images)?, identities, cameras })
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    if tok.is_empty() {
        return Err(Error::format("truncated netpbm header"));
    }
    String::from_utf8(tok).map_err(|_| Error::format("non-ascii netpbm header"))
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let m = read_token(&mut r)?;
    if m != magic {
        return Err(Error::format(format!("{}: expected {magic} file, found {m:?}", path.display())));
    }
    let num = |r: &mut BufReader<fs::File>| -> Result<usize> {
        read_token(r)?.parse().map_err(|_| Error::format("bad netpbm header number"))
    };
    let w = num(&mut r)?;
    let h = num(&mut r)?;
    let maxval = num(&mut r)?;
    if w == 0 || h == 0 || maxval != 255 {
        return Err(Error::format(format!("{}: only 8-bit non-empty images are supported", path.display())));
    }
    let mut pixels = vec![0u8; w * h * channels];
    r.read_exact(&mut pixels).map_err(|_| Error::format(format!("{}: truncated pixel data", path.display())))?;
    Ok((w, h, pixels))
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Binary graymap (P5), 8 bits per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height || pixels.is_empty() {
        return Err(Error::usage("pgm pixel count does not match extents"));
    }
    write_netpbm(path, "P5", width, height, pixels)
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// Write a `[3,H,W]` image with values in `[0,1]` as a binary pixmap (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape(format!("ppm export needs [3,H,W], got {:?}", image.shape())));
    };
    let d = image.data();
    let mut px = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            px.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_netpbm(path, "P6", w, h, &px)
}

/// Read a binary pixmap as `[3,H,W]` in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, px) = read_netpbm(path, "P6", 3)?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = px[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Load a PPM or native tensor file and resize it to `height x width`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let mut head = [0u8; 4];
    let n = fs::File::open(path)?.read(&mut head)?;
    let image = if n >= 2 && &head[..2] == b"P6" {
        read_ppm(path)?
    } else if n == 4 && &head == TENSOR_MAGIC {
        let t = read_tensor(&mut BufReader::new(fs::File::open(path)?))?;
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::shape(format!("{}: tensor image must be [3,H,W]", path.display())));
        }
        t
    } else {
        return Err(Error::format(format!(
            "{}: unsupported image format (supported: binary PPM P6, GAMT tensor)",
            path.display()
        )));
    };
    resize_bilinear(&image, height, width)
}

/// Bilinear resize of a `[C,H,W]` image using pixel-centre alignment.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("resize needs [C,H,W], got {:?}", image.shape())));
    };
    if height == 0 || width == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let src = image.data();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let mut out = vec![0.0; c * height * width];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * height + oy) * width + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// How identities are divided between the training and evaluation splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// First half of the identities train, the rest are query/gallery.
    Disjoint,
    /// Every identity appears everywhere: per identity and camera, the first
    /// view is a query, the second a gallery item, the rest train.
    Shared,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(SplitMode::Disjoint),
            "shared" => Ok(SplitMode::Shared),
            _ => Err(Error::config(format!("split mode must be disjoint or shared, got {s:?}"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Disjoint => "disjoint",
            SplitMode::Shared => "shared",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub num_cameras: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Strength of the per-camera colour cast, 0 disables it.
    pub camera_tint: f64,
    /// Maximum per-camera translation in pixels.
    pub camera_shift: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 16,
            views_per_identity: 24,
            height: 32,
            width: 16,
            num_cameras: 4,
            noise: 0.03,
            camera_tint: 0.35,
            camera_shift: 2,
            split_mode: SplitMode::Disjoint,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("synthetic set needs at least 2 identities"));
        }
        if self.views_per_identity < 2 {
            return Err(Error::config("synthetic set needs at least 2 views per identity"));
        }
        if self.num_cameras < 2 || self.views_per_identity < self.num_cameras {
            return Err(Error::config("each identity must appear under at least 2 cameras"));
        }
        if self.height < 4 || self.width < 2 {
            return Err(Error::config("synthetic images must be at least 4x2"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..1.0).contains(&self.camera_tint) {
            return Err(Error::config("noise must be >= 0 and camera tint in [0,1)"));
        }
        if self.split_mode == SplitMode::Shared && self.views_per_identity < 3 * self.num_cameras {
            return Err(Error::config("shared split needs at least 3 views per camera"));
        }
        Ok(())
    }
}

const BANDS: usize = 4;
const COLUMNS: usize = 2;

/// Identity appearance: one RGB colour per body block (4 bands x 2 columns).
pub fn identity_pattern(spec: &SynthSpec, identity: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0000 ^ (identity as u64).wrapping_mul(0x9e37_79b9));
    let colors: Vec<[f64; 3]> =
        (0..BANDS * COLUMNS).map(|_| [0, 1, 2].map(|_| rng.random_range(0.1..0.9))).collect();
    let (h, w) = (spec.height, spec.width);
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let block = (y * BANDS / h) * COLUMNS + x * COLUMNS / w;
        colors[block][c]
    })
}

struct CameraLook {
    gain: [f64; 3],
    offset: f64,
    dx: i64,
    dy: i64,
}

fn camera_look(spec: &SynthSpec, camera: usize) -> CameraLook {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xca_0000 ^ (camera as u64 + 1).wrapping_mul(0x85eb_ca6b));
    let t = spec.camera_tint;
    let s = spec.camera_shift as i64;
    CameraLook {
        gain: [0, 1, 2].map(|_| 1.0 + rng.random_range(-t..=t)),
        offset: rng.random_range(-t..=t) * 0.3,
        dx: rng.random_range(-s..=s),
        dy: rng.random_range(-s..=s),
    }
}

/// One view of `identity` under `camera`.
pub fn render_view(spec: &SynthSpec, pattern: &Tensor, camera: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let look = camera_look(spec, camera);
    let (h, w) = (spec.height as i64, spec.width as i64);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let p = pattern.data();
    Tensor::from_fn(&[3, spec.height, spec.width], |i| {
        let c = i / (spec.height * spec.width);
        let y = ((i / spec.width) % spec.height) as i64;
        let x = (i % spec.width) as i64;
        let sy = (y - look.dy).clamp(0, h - 1);
        let sx = (x - look.dx).clamp(0, w - 1);
        let base = p[(c as i64 * h * w + sy * w + sx) as usize];
        let noise = if spec.noise > 0.0 { normal.sample(rng) } else { 0.0 };
        (base * look.gain[c] + look.offset + noise).clamp(0.0, 1.0)
    })
}

fn synth_split(spec: &SynthSpec, identity: usize, camera: usize, nth_in_camera: usize) -> Split {
    match spec.split_mode {
        SplitMode::Shared => match nth_in_camera {
            0 => Split::Query,
            1 => Split::Gallery,
            _ => Split::Train,
        },
        SplitMode::Disjoint => {
            if identity < spec.num_identities / 2 {
                Split::Train
            } else if nth_in_camera == 0 {
                let _ = camera;
                Split::Query
            } else {
                Split::Gallery
            }
        }
    }
}

/// Render the synthetic set into Market-style split directories under
/// `out_dir` and cache its index. Views are spread round-robin over cameras.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path, overwrite: bool) -> Result<DatasetIndex> {
    spec.validate()?;
    if out_dir.exists() && fs::read_dir(out_dir)?.next().is_some() && !overwrite {
        return Err(Error::usage(format!(
            "output directory {} is not empty (pass the overwrite flag to replace it)",
            out_dir.display()
        )));
    }
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = out_dir.join(split.dir_name());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
    }
    let mut entries = Vec::new();
    for identity in 0..spec.num_identities {
        let pattern = identity_pattern(spec, identity);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(identity as u64));
        for view in 0..spec.views_per_identity {
            let camera = view % spec.num_cameras;
            let nth = view / spec.num_cameras;
            let image = render_view(spec, &pattern, camera, &mut rng);
            let split = synth_split(spec, identity, camera, nth);
            let name = format!("{:04}_c{}s1_{:06}_00.ppm", identity + 1, camera + 1, view);
            let rel = Path::new(split.dir_name()).join(&name);
            write_ppm(&out_dir.join(&rel), &image)?;
            entries.push(IndexEntry { path: rel, identity: identity as i64 + 1, camera: camera as u32 + 1, split });
        }
    }
    entries.sort_by(|a, b| (a.split, &a.path).cmp(&(b.split, &b.path)));
    let index = DatasetIndex { entries };
    index.write(&out_dir.join(INDEX_FILE))?;
    Ok(index)
}
