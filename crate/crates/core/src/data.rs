//! Synthetic images with known per-patch complexity, netpbm raster I/O,
//! dataset manifests and deterministic splits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autoencoder::Image;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

/// Patch complexity tiers, ordered from simplest to most complex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Complexity {
    Flat = 0,
    Smooth = 1,
    Texture = 2,
    Noise = 3,
}

impl Complexity {
    pub const ALL: [Complexity; 4] = [Complexity::Flat, Complexity::Smooth, Complexity::Texture, Complexity::Noise];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    /// Row-major grid of `(height/p) x (width/p)` labels.
    pub patch_complexity: Vec<Complexity>,
    pub patch: usize,
}

impl LabeledImage {
    pub fn grid(&self) -> (usize, usize) {
        (self.image.height / self.patch, self.image.width / self.patch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    pub seed: u64,
    pub recipe: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.items.iter().map(|i| &i.image)
    }
}

/// Fractions of flat, smooth, texture and noise patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mix(pub [f64; 4]);

impl Mix {
    pub const UNIFORM: Mix = Mix([0.25; 4]);

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::arg(format!("mix fractions must lie in [0, 1], got {:?}", self.0)));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("mix fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut StreamRng) -> Complexity {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (f, c) in self.0.iter().zip(Complexity::ALL) {
            acc += f;
            if u < acc {
                return c;
            }
        }
        // Rounding can leave u just above the final cumulative sum.
        *Complexity::ALL.iter().rev().zip(self.0.iter().rev()).find(|(_, f)| **f > 0.0).unwrap().0
    }
}

fn fill_patch(kind: Complexity, p: usize, rng: &mut StreamRng) -> Vec<f64> {
    let centre = (p as f64 - 1.0) / 2.0;
    match kind {
        Complexity::Flat => vec![rng.gen_range(0.0..1.0); p * p],
        Complexity::Smooth => {
            let base = rng.gen_range(0.25..0.75);
            let amp = rng.gen_range(0.1..0.3);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            let span = (p as f64 - 1.0).max(1.0);
            (0..p * p)
                .map(|i| {
                    let (y, x) = ((i / p) as f64 - centre, (i % p) as f64 - centre);
                    base + amp * (x * c + y * s) / span
                })
                .collect()
        }
        Complexity::Texture => {
            let amp = rng.gen_range(0.25..0.45);
            let top = (p / 2).max(1);
            let fx = rng.gen_range(1..=top) as f64;
            let fy = rng.gen_range(1..=top) as f64;
            let (px, py) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
            let w = std::f64::consts::TAU / p as f64;
            (0..p * p)
                .map(|i| {
                    let (y, x) = ((i / p) as f64, (i % p) as f64);
                    0.5 + amp * (w * fx * x + px).sin() * (w * fy * y + py).sin()
                })
                .collect()
        }
        Complexity::Noise => (0..p * p).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

/// Generates `n` grayscale `size x size` images. Item `i` draws from the
/// stream keyed by `seed ^ i`, so items are independent of generation order.
pub fn gen_synthetic(n: usize, size: usize, p: usize, mix: Mix, seed: u64) -> Result<Dataset> {
    mix.validate()?;
    if p == 0 || size == 0 || !size.is_multiple_of(p) {
        return Err(Error::arg(format!("image size {size} is not divisible by patch size {p}")));
    }
    let g = size / p;
    let items = (0..n)
        .map(|i| {
            let mut rng = stream(seed ^ i as u64, crate::rng::DATA);
            let mut pixels = vec![0.0; size * size];
            let mut labels = Vec::with_capacity(g * g);
            for py in 0..g {
                for px in 0..g {
                    let kind = mix.sample(&mut rng);
                    labels.push(kind);
                    let patch = fill_patch(kind, p, &mut rng);
                    for y in 0..p {
                        let start = (py * p + y) * size + px * p;
                        pixels[start..start + p].copy_from_slice(&patch[y * p..(y + 1) * p]);
                    }
                }
            }
            Ok(LabeledImage {
                image: Image::new(size, size, 1, pixels)?,
                patch_complexity: labels,
                patch: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        items,
        seed,
        recipe: format!("synthetic n={n} size={size} patch={p} mix={:?}", mix.0),
    })
}

/// Deterministic shuffled split; the train side gets `round(n * train_frac)` items.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::arg(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream(seed, "split"));
    let cut = ((ds.len() as f64) * train_frac).round() as usize;
    let pick = |idx: &[usize], tag: &str| Dataset {
        items: idx.iter().map(|&i| ds.items[i].clone()).collect(),
        seed: ds.seed,
        recipe: format!("{} [{tag}]", ds.recipe),
    };
    Ok((pick(&order[..cut], "train"), pick(&order[cut..], "val")))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b == b'#' {
                while self.data.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.data.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { offset: start, message: format!("{what} out of range") })
    }
}

/// Decodes binary PGM (P5) or PPM (P6); samples are scaled by `maxval`.
pub fn decode_netpbm(data: &[u8]) -> Result<Image> {
    let mut cur = Cursor { data, pos: 0 };
    let channels = match data.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("expected magic P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if !data.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected a single whitespace byte after maxval"));
    }
    cur.pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let count = width * height * channels;
    let body = &data[cur.pos..];
    if body.len() < count * bytes_per {
        return Err(Error::Parse {
            offset: cur.pos + body.len(),
            message: format!("truncated raster: need {} bytes, found {}", count * bytes_per, body.len()),
        });
    }
    let scale = maxval as f64;
    let pixels = (0..count)
        .map(|i| {
            let v = if bytes_per == 2 {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
            } else {
                body[i] as f64
            };
            v / scale
        })
        .collect();
    Image::new(height, width, channels, pixels)
}

/// Encodes as 8-bit P5 (one channel) or P6 (three channels), rounding half up.
pub fn encode_netpbm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::arg(format!("netpbm export supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&data)
}

pub fn save_raster(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_netpbm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes every item as `item_NNNNN.pgm` plus a label CSV, and a
/// `manifest.txt` of `path,label_grid_csv_path` lines (paths relative to `dir`).
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, item) in ds.items.iter().enumerate() {
        let img_name = format!("item_{i:05}.pgm");
        let lbl_name = format!("item_{i:05}.labels.csv");
        save_raster(&item.image, dir.join(&img_name))?;
        let (gh, gw) = item.grid();
        let mut csv = String::new();
        for r in 0..gh {
            let row: Vec<String> = item.patch_complexity[r * gw..(r + 1) * gw].iter().map(|c| c.label().to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        let lbl_path = dir.join(&lbl_name);
        fs::write(&lbl_path, csv).map_err(|e| Error::io(&lbl_path, e))?;
        manifest.push_str(&format!("{img_name},{lbl_name}\n"));
    }
    let path = dir.join("manifest.txt");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest written by [`write_dataset`] (or by hand). Relative paths
/// resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>, patch: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let here = offset;
        offset += line.len() + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, lbl) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse { offset: here, message: format!("expected `path,labels` in `{line}`") })?;
        let image = load_raster(base.join(img.trim()))?;
        let lbl_path = base.join(lbl.trim());
        let lbl_text = fs::read_to_string(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
        let labels = lbl_text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u8>().ok().and_then(Complexity::from_label))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Parse { offset: here, message: format!("bad label in {}", lbl_path.display()) })?;
        if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
            return Err(Error::arg(format!("{img}: dimensions not divisible by patch {patch}")));
        }
        if labels.len() != (image.height / patch) * (image.width / patch) {
            return Err(Error::shape(format!("{}: label grid does not match image", lbl_path.display())));
        }
        items.push(LabeledImage { image, patch_complexity: labels, patch });
    }
    Ok(Dataset { items, seed: 0, recipe: format!("manifest {}", path.display()) })
}

/// Population variance of every patch, grouped by label.
pub fn patch_variance_by_label(ds: &Dataset) -> [Vec<f64>; 4] {
    let mut out: [Vec<f64>; 4] = Default::default();
    for item in &ds.items {
        let p = item.patch;
        let Ok(patches) = crate::autoencoder::patchify(&item.image, p) else { continue };
        for (row, label) in patches.row_iter().zip(&item.patch_complexity) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            out[label.label() as usize].push(var);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_mix_has_constant_patches() {
        let ds = gen_synthetic(3, 16, 4, Mix([1.0, 0.0, 0.0, 0.0]), 1).unwrap();
        let v = patch_variance_by_label(&ds);
        assert_eq!(v[0].len(), 3 * 16);
        assert!(v[0].iter().all(|&x| x < 1e-24));
    }

    #[test]
    fn noise_mix_labels() {
        let ds = gen_synthetic(2, 8, 4, Mix([0.0, 0.0, 0.0, 1.0]), 1).unwrap();
        assert!(ds.items.iter().flat_map(|i| &i.patch_complexity).all(|&c| c == Complexity::Noise));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(4, 16, 4, Mix::UNIFORM, 11).unwrap();
        let b = gen_synthetic(4, 16, 4, Mix::UNIFORM, 11).unwrap();
        assert_eq!(a, b);
        let bytes = |d: &Dataset| d.images().map(|i| encode_netpbm(i).unwrap()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(a, gen_synthetic(4, 16, 4, Mix::UNIFORM, 12).unwrap());
    }

    #[test]
    fn invalid_mix_and_sizes() {
        assert!(gen_synthetic(1, 16, 4, Mix([0.5, 0.5, 0.5, 0.0]), 0).is_err());
        assert!(gen_synthetic(1, 16, 4, Mix([-0.5, 0.5, 0.5, 0.5]), 0).is_err());
        assert!(gen_synthetic(1, 15, 4, Mix::UNIFORM, 0).is_err());
    }

    #[test]
    fn complexity_ordering_holds() {
        let ds = gen_synthetic(40, 32, 4, Mix::UNIFORM, 3).unwrap();
        let v = patch_variance_by_label(&ds);
        let means: Vec<f64> = v
            .iter()
            .map(|xs| {
                assert!(xs.len() >= 100, "only {} patches in a class", xs.len());
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2] && means[2] <= means[3], "{means:?}");
    }

    #[test]
    fn pgm_header_parses() {
        let mut data = b"P5\n32 32\n255\n".to_vec();
        data.extend((0..1024).map(|i| (i % 256) as u8));
        let img = decode_netpbm(&data).unwrap();
        assert_eq!((img.height, img.width, img.channels), (32, 32, 1));
        assert_eq!(img.pixels[255], 1.0);
    }

    #[test]
    fn sixteen_bit_samples_scale_by_maxval() {
        let mut data = b"P5 1 1 65535\n".to_vec();
        data.extend(128u16.to_be_bytes());
        let img = decode_netpbm(&data).unwrap();
        assert_eq!(img.pixels[0], 128.0 / 65535.0);
    }

    #[test]
    fn comments_and_ppm() {
        let mut data = b"P6\n# a comment\n2 1\n255\n".to_vec();
        data.extend([255, 0, 0, 0, 0, 255]);
        let img = decode_netpbm(&data).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.pixels, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(encode_netpbm(&img).unwrap(), b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff".to_vec());
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(decode_netpbm(b"P3\n1 1\n255\n0"), Err(Error::Parse { offset: 0, .. })));
        let err = decode_netpbm(b"P5\n4 4\n255\n\x00\x01").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 13, .. }), "{err}");
        assert!(matches!(decode_netpbm(b"P5\nx 4\n255\n"), Err(Error::Parse { offset: 3, .. })));
    }

    #[test]
    fn save_load_round_trip_within_quantization() {
        let ds = gen_synthetic(1, 16, 4, Mix::UNIFORM, 5).unwrap();
        let img = &ds.items[0].image;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        save_raster(img, &path).unwrap();
        let back = load_raster(&path).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
        assert_eq!(fs::read(&path).unwrap(), encode_netpbm(img).unwrap());
        let missing = load_raster(dir.path().join("nope.pgm")).unwrap_err();
        assert!(missing.to_string().contains("nope.pgm"));
    }

    #[test]
    fn rounding_is_half_up() {
        let img = Image::new(1, 2, 1, vec![0.5 / 255.0, 127.5 / 255.0]).unwrap();
        let bytes = encode_netpbm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[1, 128]);
    }

    #[test]
    fn splits() {
        let ds = gen_synthetic(10, 8, 4, Mix::UNIFORM, 0).unwrap();
        let (tr, va) = split(&ds, 0.8, 4).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<_> = tr.items.iter().chain(&va.items).map(|i| i.image.pixels.clone()).collect();
        let mut orig: Vec<_> = ds.items.iter().map(|i| i.image.pixels.clone()).collect();
        let key = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
        assert_eq!(split(&ds, 0.8, 4).unwrap(), (tr, va));
        assert!(split(&ds, 1.0, 4).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let ds = gen_synthetic(3, 8, 4, Mix::UNIFORM, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = read_manifest(&manifest, 4).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(a.patch_complexity, b.patch_complexity);
            assert!(a.image.pixels.iter().zip(&b.image.pixels).all(|(x, y)| (x - y).abs() <= 1.0 / 510.0 + 1e-15));
        }
    }
}
