//! Seeded synthetic attribute corpus, on-disk dataset format, augmentation,
//! and label statistics.
//!
//! Each attribute owns a fixed canonical region of the frame; a positive
//! sample renders one glyph inside that region with randomized shape, size,
//! and color. Distractor glyphs of the same appearance family land anywhere
//! outside the canonical regions, so spatial position is the only reliable
//! cue. Backgrounds are dark vertical gradients (max channel < 118) while
//! glyphs are bright (max channel > 160), which keeps a pixel-threshold
//! oracle exact for noise-free labels.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::AttributeStats;
use crate::rng;
use crate::tensor::Tensor;

const SALT_SAMPLE: u64 = 0x73616d706c65; // per-index generation stream

/// Brightness floor (u8) separating glyph pixels from any background pixel.
pub const GLYPH_LUMA_THRESHOLD: u8 = 140;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Disjoint global index ranges keep the per-sample streams of the three
    /// splits from ever overlapping.
    fn index_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
            Split::Test => 1 << 33,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Normalized rectangle in [0,1]² image coordinates (y grows downward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl Rect {
    fn area(&self) -> f64 {
        (self.y1 - self.y0).max(0.0) * (self.x1 - self.x0).max(0.0)
    }

    fn intersection(&self, other: &Rect) -> f64 {
        let y = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let x = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        y * x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Disc,
    Ring,
    Block,
    Triangle,
    Cross,
    Diamond,
    Bar,
    Checker,
}

const ALL_SHAPES: [GlyphShape; 8] = [
    GlyphShape::Disc,
    GlyphShape::Ring,
    GlyphShape::Block,
    GlyphShape::Triangle,
    GlyphShape::Cross,
    GlyphShape::Diamond,
    GlyphShape::Bar,
    GlyphShape::Checker,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub region: Rect,
    pub shapes: Vec<GlyphShape>,
    pub positive_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub attributes: Vec<AttributeSpec>,
    /// Positional jitter radius of the glyph center, normalized units.
    pub jitter: f64,
    /// Expected number of distractor glyphs per image.
    pub clutter_density: f64,
    /// Glyph half-extent range as a fraction of the region's smaller extent.
    pub size_range: (f64, f64),
    /// Symmetric label-flip rate ρ, applied to the train split only.
    pub label_noise: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

fn attr(name: &str, region: Rect, shapes: &[GlyphShape], positive_rate: f64) -> AttributeSpec {
    AttributeSpec {
        name: name.to_string(),
        region,
        shapes: shapes.to_vec(),
        positive_rate,
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        use GlyphShape::*;
        let r = |y0, x0, y1, x1| Rect { y0, x0, y1, x1 };
        SyntheticSpec {
            height: 64,
            width: 48,
            attributes: vec![
                attr("hat", r(0.00, 0.25, 0.15, 0.75), &[Block, Disc, Triangle], 0.55),
                attr("glasses", r(0.17, 0.25, 0.28, 0.75), &[Bar, Ring], 0.40),
                attr("scarf", r(0.30, 0.30, 0.40, 0.70), &[Bar, Checker], 0.35),
                attr("logo", r(0.42, 0.30, 0.58, 0.70), &[Diamond, Cross, Ring], 0.60),
                attr("belt", r(0.60, 0.25, 0.70, 0.75), &[Bar, Block], 0.30),
                attr("bag", r(0.30, 0.02, 0.72, 0.22), &[Block, Diamond], 0.25),
                attr("gloves", r(0.45, 0.78, 0.65, 0.98), &[Disc, Cross], 0.45),
                attr("boots", r(0.84, 0.10, 1.00, 0.90), &[Block, Triangle, Checker], 0.50),
            ],
            jitter: 0.03,
            clutter_density: 10.0,
            size_range: (0.55, 0.95),
            label_noise: 0.0,
            seed: 0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
        }
    }
}

impl SyntheticSpec {
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Regions must stay inside the frame and pairwise overlap is capped at
    /// 20% of the smaller region.
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InfeasibleSpec(format!(
                "image extents {}x{} too small",
                self.height, self.width
            )));
        }
        if self.attributes.is_empty() {
            return Err(Error::InfeasibleSpec("no attributes defined".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InfeasibleSpec(format!(
                "label noise {} outside [0, 0.5)",
                self.label_noise
            )));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return Err(Error::InfeasibleSpec("bad glyph size range".into()));
        }
        for a in &self.attributes {
            let r = &a.region;
            if !(0.0..=1.0).contains(&r.y0)
                || !(0.0..=1.0).contains(&r.y1)
                || !(0.0..=1.0).contains(&r.x0)
                || !(0.0..=1.0).contains(&r.x1)
                || r.y0 >= r.y1
                || r.x0 >= r.x1
            {
                return Err(Error::InfeasibleSpec(format!(
                    "region of '{}' is degenerate or out of bounds",
                    a.name
                )));
            }
            if a.shapes.is_empty() {
                return Err(Error::InfeasibleSpec(format!("'{}' has no shapes", a.name)));
            }
            if !(0.0..=1.0).contains(&a.positive_rate) {
                return Err(Error::InfeasibleSpec(format!(
                    "positive rate of '{}' outside [0,1]",
                    a.name
                )));
            }
        }
        for i in 0..self.attributes.len() {
            for j in i + 1..self.attributes.len() {
                let (a, b) = (&self.attributes[i], &self.attributes[j]);
                let inter = a.region.intersection(&b.region);
                let cap = 0.2 * a.region.area().min(b.region.area());
                if inter > cap {
                    return Err(Error::InfeasibleSpec(format!(
                        "regions of '{}' and '{}' overlap beyond tolerance",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One image with its (possibly noise-flipped) labels. Pixels are stored
/// channel-major (c,y,x) as 8-bit values; the float image is pixel/255.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// Pre-noise labels, for diagnostics only.
    pub clean_labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub attr_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_names.len()
    }

    /// (n, M) label tensor for the given sample indices.
    pub fn labels_tensor(&self, indices: &[usize]) -> Tensor {
        let m = self.num_attributes();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend(self.samples[i].labels.iter().map(|&v| v as f64));
        }
        Tensor::new(vec![indices.len(), m], data).expect("labels shape")
    }

    /// (n, 3, h, w) image tensor in [0,1] for the given sample indices.
    pub fn images_tensor(&self, indices: &[usize]) -> Tensor {
        let plane = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend(self.samples[i].pixels.iter().map(|&v| v as f64 / 255.0));
        }
        Tensor::new(vec![indices.len(), 3, self.height, self.width], data).expect("images shape")
    }
}

// ---- rendering -----------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

struct Canvas<'a> {
    pixels: &'a mut [u8],
    height: usize,
    width: usize,
}

impl Canvas<'_> {
    fn put(&mut self, y: i64, x: i64, rgb: [u8; 3]) {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            return;
        }
        let plane = self.height * self.width;
        let off = y as usize * self.width + x as usize;
        self.pixels[off] = rgb[0];
        self.pixels[plane + off] = rgb[1];
        self.pixels[2 * plane + off] = rgb[2];
    }

    fn draw_glyph(&mut self, shape: GlyphShape, cy: i64, cx: i64, r: i64, rgb: [u8; 3]) {
        let r = r.max(1);
        let arm = (r / 3).max(1);
        for dy in -r..=r {
            for dx in -r..=r {
                let inside = match shape {
                    GlyphShape::Disc => dy * dy + dx * dx <= r * r,
                    GlyphShape::Ring => {
                        let d2 = dy * dy + dx * dx;
                        let inner = (r - arm).max(1);
                        d2 <= r * r && d2 >= inner * inner
                    }
                    GlyphShape::Block => true,
                    GlyphShape::Triangle => dx.abs() * 2 <= dy + r,
                    GlyphShape::Cross => dy.abs() <= arm || dx.abs() <= arm,
                    GlyphShape::Diamond => dy.abs() + dx.abs() <= r,
                    GlyphShape::Bar => dy.abs() <= arm,
                    GlyphShape::Checker => ((dy + r) / arm + (dx + r) / arm) % 2 == 0,
                };
                if inside {
                    self.put(cy + dy, cx + dx, rgb);
                }
            }
        }
    }
}

fn bright_color(r: &mut ChaCha8Rng) -> [u8; 3] {
    let h = r.gen_range(0.0..1.0);
    let s = r.gen_range(0.55..1.0);
    let v = r.gen_range(0.65..1.0);
    hsv_to_rgb(h, s, v)
}

/// Render one sample; a pure function of (spec, split, index).
fn render_sample(spec: &SyntheticSpec, split: Split, index: u64) -> Sample {
    let global = split.index_base() + index;
    let mut r = rng::stream(spec.seed, SALT_SAMPLE.wrapping_add(rng::splitmix64(global)));
    let (h, w) = (spec.height, spec.width);

    // 1. clean labels
    let clean: Vec<u8> = spec
        .attributes
        .iter()
        .map(|a| u8::from(r.gen_bool(a.positive_rate)))
        .collect();

    // 2. dark gradient background
    let top = hsv_to_rgb(r.gen_range(0.0..1.0), r.gen_range(0.1..0.4), r.gen_range(0.05..0.25));
    let bottom = hsv_to_rgb(r.gen_range(0.0..1.0), r.gen_range(0.1..0.4), r.gen_range(0.25..0.45));
    let mut pixels = vec![0u8; 3 * h * w];
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let row: [u8; 3] = std::array::from_fn(|c| {
            (top[c] as f64 + t * (bottom[c] as f64 - top[c] as f64)).round() as u8
        });
        for x in 0..w {
            for c in 0..3 {
                pixels[c * h * w + y * w + x] = row[c];
            }
        }
    }
    let mut canvas = Canvas {
        pixels: &mut pixels,
        height: h,
        width: w,
    };

    // 3. attribute glyphs, fully inside their canonical regions
    for (ai, a) in spec.attributes.iter().enumerate() {
        if clean[ai] == 0 {
            continue;
        }
        let ry0 = a.region.y0 * (h as f64);
        let ry1 = a.region.y1 * (h as f64);
        let rx0 = a.region.x0 * (w as f64);
        let rx1 = a.region.x1 * (w as f64);
        let min_ext = (ry1 - ry0).min(rx1 - rx0);
        let half = (r.gen_range(spec.size_range.0..=spec.size_range.1) * min_ext / 2.0)
            .floor()
            .max(1.0);
        let jit = spec.jitter * (h.min(w) as f64);
        let cy = (ry0 + ry1) / 2.0 + r.gen_range(-jit..=jit);
        let cx = (rx0 + rx1) / 2.0 + r.gen_range(-jit..=jit);
        // clamp so the glyph bounding box stays inside the region
        let cy = cy.clamp(ry0 + half, (ry1 - half).max(ry0 + half));
        let cx = cx.clamp(rx0 + half, (rx1 - half).max(rx0 + half));
        let shape = a.shapes[r.gen_range(0..a.shapes.len())];
        let color = bright_color(&mut r);
        canvas.draw_glyph(shape, cy.round() as i64, cx.round() as i64, half as i64, color);
    }

    // 4. distractor clutter, never intersecting any canonical region
    let clutter = poisson_count(&mut r, spec.clutter_density);
    let typical = 0.5 * (spec.size_range.0 + spec.size_range.1);
    for _ in 0..clutter {
        let half = (r.gen_range(0.04..0.10) * typical * (h.min(w)) as f64 * 2.0)
            .floor()
            .max(1.0) as i64;
        let shape = ALL_SHAPES[r.gen_range(0..ALL_SHAPES.len())];
        let color = bright_color(&mut r);
        // rejection-sample a center whose bounding box avoids all regions
        for _try in 0..50 {
            let cy = r.gen_range(0.0..h as f64);
            let cx = r.gen_range(0.0..w as f64);
            let box_r = Rect {
                y0: (cy - half as f64) / h as f64,
                x0: (cx - half as f64) / w as f64,
                y1: (cy + half as f64) / h as f64,
                x1: (cx + half as f64) / w as f64,
            };
            if spec
                .attributes
                .iter()
                .all(|a| a.region.intersection(&box_r) == 0.0)
            {
                canvas.draw_glyph(shape, cy.round() as i64, cx.round() as i64, half, color);
                break;
            }
        }
    }

    // 5. symmetric label noise on the train split
    let mut labels = clean.clone();
    if split == Split::Train && spec.label_noise > 0.0 {
        for l in labels.iter_mut() {
            if r.gen_bool(spec.label_noise) {
                *l ^= 1;
            }
        }
    }

    Sample {
        pixels,
        labels,
        clean_labels: clean,
    }
}

fn poisson_count(r: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut product = r.gen_range(0.0..1.0f64);
    let mut count = 0usize;
    while product > limit && count < 1000 {
        count += 1;
        product *= r.gen_range(0.0..1.0f64);
    }
    count
}

/// Deterministic dataset for (spec, split): sample i is a pure function of
/// (spec, split, i).
pub fn generate(spec: &SyntheticSpec, n: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InfeasibleSpec("dataset size must be at least 1".into()));
    }
    let samples: Vec<Sample> = (0..n as u64)
        .map(|i| render_sample(spec, split, i))
        .collect();
    Ok(Dataset {
        attr_names: spec.attributes.iter().map(|a| a.name.clone()).collect(),
        height: spec.height,
        width: spec.width,
        samples,
    })
}

// ---- on-disk format ----------------------------------------------------------------

fn write_ppm(path: &Path, pixels: &[u8], height: usize, width: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 3 * height * width);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", width, height).as_bytes());
    let plane = height * width;
    for i in 0..plane {
        buf.push(pixels[i]);
        buf.push(pixels[plane + i]);
        buf.push(pixels[2 * plane + i]);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < raw.len() && (raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            while pos < raw.len() && (raw[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !(raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                file: path.display().to_string(),
                detail: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::Format {
            file: path.display().to_string(),
            detail: format!("expected P6, found '{magic}'"),
        });
    }
    let width: usize = token()?.parse().map_err(|_| Error::Format {
        file: path.display().to_string(),
        detail: "bad width".into(),
    })?;
    let height: usize = token()?.parse().map_err(|_| Error::Format {
        file: path.display().to_string(),
        detail: "bad height".into(),
    })?;
    let maxval: usize = token()?.parse().map_err(|_| Error::Format {
        file: path.display().to_string(),
        detail: "bad maxval".into(),
    })?;
    if maxval != 255 {
        return Err(Error::Format {
            file: path.display().to_string(),
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * width * height;
    if raw.len() < pos + need {
        return Err(Error::Format {
            file: path.display().to_string(),
            detail: "pixel payload truncated".into(),
        });
    }
    let body = &raw[pos..pos + need];
    let plane = height * width;
    let mut pixels = vec![0u8; 3 * plane];
    for i in 0..plane {
        pixels[i] = body[3 * i];
        pixels[plane + i] = body[3 * i + 1];
        pixels[2 * plane + i] = body[3 * i + 2];
    }
    Ok((pixels, height, width))
}

/// Write `images/img_NNNNNN.ppm` plus `labels.csv` into `dir`.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)
        .map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    let csv_path = dir.join("labels.csv");
    let file = std::fs::File::create(&csv_path)
        .map_err(|e| Error::io(format!("creating {}", csv_path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "filename,{}", ds.attr_names.join(","))
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("img_{i:06}.ppm");
        write_ppm(&images.join(&name), &s.pixels, ds.height, ds.width)?;
        let labels: Vec<String> = s.labels.iter().map(|l| l.to_string()).collect();
        writeln!(w, "{name},{}", labels.join(","))
            .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("flushing {}", csv_path.display()), e))
}

/// Load a dataset directory written by [`export_dataset`]: rows of
/// `labels.csv` matched to `images/<filename>`, labels strictly 0/1.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let csv_path = dir.join("labels.csv");
    let file = std::fs::File::open(&csv_path)
        .map_err(|e| Error::io(format!("opening {}", csv_path.display()), e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, Ok(line))) => line,
        Some((_, Err(e))) => return Err(Error::io(format!("reading {}", csv_path.display()), e)),
        None => {
            return Err(Error::Parse {
                file: csv_path.display().to_string(),
                line: 1,
                detail: "empty file, expected a header row".into(),
            })
        }
    };
    let mut cols = header.split(',');
    if cols.next() != Some("filename") {
        return Err(Error::Parse {
            file: csv_path.display().to_string(),
            line: 1,
            detail: "header must start with 'filename'".into(),
        });
    }
    let attr_names: Vec<String> = cols.map(str::to_string).collect();
    if attr_names.is_empty() {
        return Err(Error::Parse {
            file: csv_path.display().to_string(),
            line: 1,
            detail: "header defines no attributes".into(),
        });
    }

    let mut samples = Vec::new();
    let mut extents: Option<(usize, usize)> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", csv_path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let filename = parts.next().unwrap_or_default();
        let mut labels = Vec::with_capacity(attr_names.len());
        for (ai, cell) in parts.enumerate() {
            match cell.trim() {
                "0" => labels.push(0u8),
                "1" => labels.push(1u8),
                other => {
                    return Err(Error::Parse {
                        file: csv_path.display().to_string(),
                        line: line_no,
                        detail: format!(
                            "label '{other}' in column '{}' is not 0/1",
                            attr_names.get(ai).map(String::as_str).unwrap_or("?")
                        ),
                    })
                }
            }
        }
        if labels.len() != attr_names.len() {
            return Err(Error::Parse {
                file: csv_path.display().to_string(),
                line: line_no,
                detail: format!(
                    "expected {} labels, found {}",
                    attr_names.len(),
                    labels.len()
                ),
            });
        }
        let img_path = dir.join("images").join(filename);
        let (pixels, h, w) = read_ppm(&img_path)?;
        match extents {
            None => extents = Some((h, w)),
            Some(e) if e != (h, w) => {
                return Err(Error::Format {
                    file: img_path.display().to_string(),
                    detail: format!("extents {h}x{w} differ from {eh}x{ew}", eh = e.0, ew = e.1),
                })
            }
            _ => {}
        }
        samples.push(Sample {
            pixels,
            clean_labels: labels.clone(),
            labels,
        });
    }
    let (height, width) = extents.ok_or_else(|| Error::Parse {
        file: csv_path.display().to_string(),
        line: 1,
        detail: "no data rows".into(),
    })?;
    Ok(Dataset {
        attr_names,
        height,
        width,
        samples,
    })
}

/// Read a full corpus layout: spec.json echo plus train/val/test subdirectories.
pub fn export_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let spec_json = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Config(format!("serializing spec: {e}")))?;
    std::fs::write(dir.join("spec.json"), spec_json)
        .map_err(|e| Error::io(format!("writing {}", dir.join("spec.json").display()), e))?;
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        let ds = generate(spec, n, split)?;
        let sub = dir.join(split.to_string());
        std::fs::create_dir_all(&sub)
            .map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
        export_dataset(&ds, &sub)?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    load_dataset(&dir.join(split.to_string()))
}

// ---- augmentation ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub pad: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_prob: 0.5,
            pad: 4,
        }
    }
}

/// Mirror the image horizontally (labels unchanged).
pub fn flip_horizontal(pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = vec![0u8; pixels.len()];
    for c in 0..3 {
        for y in 0..height {
            for x in 0..width {
                out[c * plane + y * width + x] = pixels[c * plane + y * width + (width - 1 - x)];
            }
        }
    }
    out
}

/// Zero-pad by `pad` on every side, then crop back to the original extents
/// with the window's top-left at (dy, dx) in the padded frame. (pad, pad)
/// reproduces the original image.
pub fn pad_crop(
    pixels: &[u8],
    height: usize,
    width: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<u8> {
    let plane = height * width;
    let mut out = vec![0u8; pixels.len()];
    for c in 0..3 {
        for y in 0..height {
            let sy = y as i64 + dy as i64 - pad as i64;
            if sy < 0 || sy >= height as i64 {
                continue;
            }
            for x in 0..width {
                let sx = x as i64 + dx as i64 - pad as i64;
                if sx < 0 || sx >= width as i64 {
                    continue;
                }
                out[c * plane + y * width + x] =
                    pixels[c * plane + sy as usize * width + sx as usize];
            }
        }
    }
    out
}

/// Training augmentation: random mirror, zero pad, random crop. Draw order
/// is fixed (flip, dy, dx) so a step-indexed stream is reproducible.
pub fn augment(sample: &Sample, cfg: &AugmentationConfig, h: usize, w: usize, r: &mut ChaCha8Rng) -> Sample {
    let flip = r.gen_bool(cfg.flip_prob);
    let dy = r.gen_range(0..=2 * cfg.pad);
    let dx = r.gen_range(0..=2 * cfg.pad);
    let mut pixels = if flip {
        flip_horizontal(&sample.pixels, h, w)
    } else {
        sample.pixels.clone()
    };
    if cfg.pad > 0 {
        pixels = pad_crop(&pixels, h, w, cfg.pad, dy, dx);
    }
    Sample {
        pixels,
        labels: sample.labels.clone(),
        clean_labels: sample.clean_labels.clone(),
    }
}

// ---- statistics --------------------------------------------------------------------------

/// r_j = column mean of the training labels.
pub fn positive_ratios(train: &Dataset) -> Result<AttributeStats> {
    if train.is_empty() {
        return Err(Error::Config("positive_ratios on empty training split".into()));
    }
    let m = train.num_attributes();
    let mut sums = vec![0.0f64; m];
    for s in &train.samples {
        for (acc, &l) in sums.iter_mut().zip(&s.labels) {
            *acc += l as f64;
        }
    }
    let n = train.len() as f64;
    Ok(AttributeStats::new(sums.into_iter().map(|s| s / n).collect()))
}

/// Pixel-space label oracle: an attribute is present iff any pixel in its
/// canonical region is brighter than the glyph threshold. Exact for ρ = 0.
pub fn region_brightness_oracle(spec: &SyntheticSpec, sample: &Sample) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    spec.attributes
        .iter()
        .map(|a| {
            let y0 = (a.region.y0 * h as f64).floor() as usize;
            let y1 = ((a.region.y1 * h as f64).ceil() as usize).min(h);
            let x0 = (a.region.x0 * w as f64).floor() as usize;
            let x1 = ((a.region.x1 * w as f64).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let off = y * w + x;
                    let bright = sample.pixels[off]
                        .max(sample.pixels[plane + off])
                        .max(sample.pixels[2 * plane + off]);
                    if bright >= GLYPH_LUMA_THRESHOLD {
                        return 1;
                    }
                }
            }
            0
        })
        .collect()
}
