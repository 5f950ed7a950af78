//! Synthetic attribution dataset: face-like base clips, decoder-family
//! fingerprints, compression tiers, splits and an on-disk manifest.

mod codec;
mod family;
mod image;
mod io;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{contract_err, FameError, Result};
use crate::tensor::{Scalar, Tensor};

pub use codec::{compress_plane, dct8x8, idct8x8, quant_table, Compression};
pub use family::{DecoderFamily, Dfaker, DflH128, Faceswap, FamilyRegistry, Iae, Lightweight};
pub use image::{box_blur3, resize_area, resize_bilinear, upsample_nearest, upsample_transposed};
pub use io::{decode_pixmap, encode_pgm, encode_ppm, read_pixmap, write_bytes, Pixmap};

pub const CHANNELS: usize = 3;

/// `frames × CHANNELS × size × size` pixels in `[0, 1]` plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub size: usize,
    pub data: Vec<f64>,
    pub label: usize,
    pub family: Option<usize>,
    pub compression: Compression,
    pub seed: u64,
}

impl Clip {
    fn plane_len(&self) -> usize {
        self.size * self.size
    }

    pub fn plane(&self, t: usize, c: usize) -> &[f64] {
        let n = self.plane_len();
        let at = (t * CHANNELS + c) * n;
        &self.data[at..at + n]
    }

    pub fn frame_planes(&self, t: usize) -> Vec<Vec<f64>> {
        (0..CHANNELS).map(|c| self.plane(t, c).to_vec()).collect()
    }

    fn set_frame(&mut self, t: usize, planes: &[Vec<f64>]) {
        let n = self.plane_len();
        for (c, p) in planes.iter().enumerate() {
            let at = (t * CHANNELS + c) * n;
            self.data[at..at + n].copy_from_slice(p);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            &[self.frames, CHANNELS, self.size, self.size],
            self.data.iter().map(|&v| S::of(v)).collect(),
        )
        .expect("clip dimensions are positive")
    }
}

/// Renders a skin-toned face-like scene (two dark ellipses, a mouth bar and
/// a few faint blobs) with a small random-walk affine jitter per frame.
pub fn make_base_clip(rng: &mut ChaCha8Rng, frames: usize, size: usize) -> Result<Clip> {
    if size < 16 || frames == 0 {
        return Err(contract_err!("base clip needs size >= 16 and T >= 1, got {size} and {frames}"));
    }
    let skin = [
        0.82 + rng.random_range(-0.06..0.06),
        0.62 + rng.random_range(-0.06..0.06),
        0.52 + rng.random_range(-0.06..0.06),
    ];
    let gradient = rng.random_range(0.1..0.3);
    let blobs: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.25),
                rng.random_range(-0.08..0.08),
            ]
        })
        .collect();
    let eye_dx = rng.random_range(0.12..0.18);
    let eye_y = rng.random_range(0.35..0.45);
    let (eye_rx, eye_ry) = (rng.random_range(0.06..0.09), rng.random_range(0.035..0.05));
    let eye_dark = rng.random_range(0.35..0.55);
    let (mouth_rx, mouth_y) = (rng.random_range(0.12..0.2), rng.random_range(0.65..0.75));
    let (mouth_ry, mouth_dark) = (rng.random_range(0.025..0.04), rng.random_range(0.25..0.45));

    let scene = |u: f64, v: f64, c: usize| -> f64 {
        let mut base = skin[c] * (1.0 - gradient * (v - 0.5));
        for &[bx, by, s, a] in &blobs {
            base += a * (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * s * s)).exp();
        }
        let eye = |ex: f64| (-((u - ex) / eye_rx).powi(2) - ((v - eye_y) / eye_ry).powi(2)).exp();
        let dark = eye_dark * (eye(0.5 - eye_dx) + eye(0.5 + eye_dx))
            + mouth_dark * (-((u - 0.5) / mouth_rx).powi(4) - ((v - mouth_y) / mouth_ry).powi(2)).exp();
        (base * (1.0 - dark)).clamp(0.0, 1.0)
    };

    let n = size;
    let mut data = Vec::with_capacity(frames * CHANNELS * n * n);
    let (mut tx, mut ty, mut rot) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..frames {
        let scale = 1.0 + rng.random_range(-0.01..0.01);
        let (sin, cos) = rot.sin_cos();
        for c in 0..CHANNELS {
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = ((x as f64 + 0.5) / n as f64 - 0.5 - tx, (y as f64 + 0.5) / n as f64 - 0.5 - ty);
                    let u = (cos * px + sin * py) / scale + 0.5;
                    let v = (-sin * px + cos * py) / scale + 0.5;
                    data.push(scene(u, v, c));
                }
            }
        }
        tx = (tx + rng.random_range(-0.008..0.008)).clamp(-0.04, 0.04);
        ty = (ty + rng.random_range(-0.008..0.008)).clamp(-0.04, 0.04);
        rot = (rot + rng.random_range(-0.01..0.01)).clamp(-0.05, 0.05);
    }
    Ok(Clip { frames, size, data, label: 0, family: None, compression: Compression::None, seed: 0 })
}

impl FamilyRegistry {
    /// `(1 - strength) · clip + strength · decode(clip)`, frame by frame.
    pub fn apply(&self, clip: &Clip, family: usize, strength: f64) -> Result<Clip> {
        let f = self.get(family)?;
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(contract_err!("strength must be in (0, 1], got {strength}"));
        }
        let mut out = clip.clone();
        for t in 0..clip.frames {
            let planes = clip.frame_planes(t);
            let decoded = f.decode(&planes, clip.size);
            let blended: Vec<Vec<f64>> = planes
                .iter()
                .zip(&decoded)
                .map(|(p, d)| {
                    p.iter()
                        .zip(d)
                        .map(|(&a, &b)| ((1.0 - strength) * a + strength * b).clamp(0.0, 1.0))
                        .collect()
                })
                .collect();
            out.set_frame(t, &blended);
        }
        out.family = Some(family);
        Ok(out)
    }
}

pub fn apply_decoder_family(clip: &Clip, family: usize, strength: f64) -> Result<Clip> {
    FamilyRegistry::default().apply(clip, family, strength)
}

pub fn apply_compression(clip: &Clip, level: Compression) -> Clip {
    let mut out = clip.clone();
    out.compression = level;
    if let Some(q) = level.quality() {
        for t in 0..clip.frames {
            let planes: Vec<Vec<f64>> =
                clip.frame_planes(t).iter().map(|p| compress_plane(p, clip.size, q)).collect();
            out.set_frame(t, &planes);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(FameError::Data(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub size: usize,
    /// Fractions of clips per class at `none`, `hq`, `lq`.
    pub mix: [f64; 3],
    pub train_fraction: f64,
    pub strength: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 5,
            per_class: 20,
            frames: 10,
            size: 32,
            mix: [1.0, 0.0, 0.0],
            train_fraction: 0.8,
            strength: 1.0,
            seed: 0,
        }
    }
}

const STREAM_TIERS: u64 = 1;
const STREAM_SPLIT: u64 = 2;

impl DatasetSpec {
    /// Single-line `key=value` form; embedded in manifests and hashed.
    pub fn canonical(&self) -> String {
        let [a, b, c] = self.mix;
        format!(
            "classes={} per_class={} frames={} size={} mix={a},{b},{c} train={} strength={} seed={}",
            self.classes, self.per_class, self.frames, self.size, self.train_fraction, self.strength, self.seed
        )
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut spec = DatasetSpec::default();
        let bad = |m: String| FameError::Data(format!("dataset spec: {m}"));
        for item in text.split_whitespace() {
            let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {item:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{k}: bad number {v:?}")));
            let int = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{k}: bad integer {v:?}")));
            match k {
                "classes" => spec.classes = int(v)? as usize,
                "per_class" => spec.per_class = int(v)? as usize,
                "frames" => spec.frames = int(v)? as usize,
                "size" => spec.size = int(v)? as usize,
                "train" => spec.train_fraction = num(v)?,
                "strength" => spec.strength = num(v)?,
                "seed" => spec.seed = int(v)?,
                "mix" => {
                    let parts: Vec<f64> = v.split(',').map(num).collect::<Result<_>>()?;
                    spec.mix = parts.try_into().map_err(|_| bad("mix needs three fractions".into()))?;
                }
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        Ok(spec)
    }

    /// First 16 hex digits of SHA-256 over [`Self::canonical`].
    pub fn config_hash(&self) -> String {
        config_hash(&self.canonical())
    }

    pub fn train_count(&self) -> usize {
        (self.train_fraction * self.per_class as f64).round() as usize
    }

    pub fn validate(&self, families: usize) -> Result<()> {
        let err = |m: String| Err(FameError::Config(m));
        if self.classes == 0 || self.classes > families {
            return err(format!("classes must be in 1..={families}, got {}", self.classes));
        }
        if self.frames == 0 || self.size < 16 {
            return err(format!("need frames >= 1 and size >= 16, got {} and {}", self.frames, self.size));
        }
        if self.mix.iter().any(|&m| !(0.0..=1.0).contains(&m)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err(format!("compression mix {:?} must be fractions summing to 1", self.mix));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err(format!("train fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return err(format!("strength must be in (0, 1], got {}", self.strength));
        }
        let n_train = self.train_count();
        if n_train == 0 || n_train >= self.per_class {
            return err(format!(
                "{} clips per class with train fraction {} leaves a split empty",
                self.per_class, self.train_fraction
            ));
        }
        Ok(())
    }
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    /// Clip directory relative to the dataset root.
    pub dir: String,
    pub label: usize,
    pub family: usize,
    pub compression: Compression,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub records: Vec<ClipRecord>,
}

/// Splits `n` items into integer counts proportional to `fractions`
/// (largest remainder, ties to the earlier entry).
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Records for every clip of `spec`; clip content follows from each record.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<DatasetManifest> {
    let registry = FamilyRegistry::default();
    spec.validate(registry.len())?;
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tiers_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    tiers_rng.set_stream(STREAM_TIERS);
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    split_rng.set_stream(STREAM_SPLIT);

    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for k in 0..spec.classes {
        let clip_seeds: Vec<u64> = (0..spec.per_class).map(|_| seeds.random()).collect();
        let mut tiers: Vec<Compression> = apportion(spec.per_class, &spec.mix)
            .into_iter()
            .zip(Compression::ALL)
            .flat_map(|(count, c)| std::iter::repeat_n(c, count))
            .collect();
        tiers.shuffle(&mut tiers_rng);
        let mut order: Vec<usize> = (0..spec.per_class).collect();
        order.shuffle(&mut split_rng);
        let mut split = vec![Split::Test; spec.per_class];
        for &i in &order[..spec.train_count()] {
            split[i] = Split::Train;
        }
        for i in 0..spec.per_class {
            let id = format!("c{k}_{i:04}");
            records.push(ClipRecord {
                dir: format!("clips/{id}"),
                id,
                label: k,
                family: k,
                compression: tiers[i],
                split: split[i],
                seed: clip_seeds[i],
            });
        }
    }
    Ok(DatasetManifest { spec: spec.clone(), records })
}

/// Regenerates a clip from its record.
pub fn render_clip(spec: &DatasetSpec, record: &ClipRecord, registry: &FamilyRegistry) -> Result<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(record.seed);
    let base = make_base_clip(&mut rng, spec.frames, spec.size)?;
    let mut clip = apply_compression(&registry.apply(&base, record.family, spec.strength)?, record.compression);
    clip.label = record.label;
    clip.seed = record.seed;
    Ok(clip)
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.ppm")
}

pub fn write_clip(dir: &Path, clip: &Clip) -> Result<()> {
    for t in 0..clip.frames {
        let bytes = encode_ppm([clip.plane(t, 0), clip.plane(t, 1), clip.plane(t, 2)], clip.size, clip.size);
        write_bytes(&dir.join(frame_file(t)), &bytes)?;
    }
    Ok(())
}

/// Reads `frame_000.ppm, frame_001.ppm, ...` until the first missing file.
pub fn read_clip_dir(dir: &Path) -> Result<Clip> {
    let mut data = Vec::new();
    let mut size = None;
    let mut frames = 0;
    loop {
        let path = dir.join(frame_file(frames));
        if !path.exists() {
            break;
        }
        let img = read_pixmap(&path)?;
        if img.planes.len() != CHANNELS || img.width != img.height || size.is_some_and(|s| s != img.width) {
            return Err(FameError::Data(format!("{}: expected square RGB frames of equal size", path.display())));
        }
        size = Some(img.width);
        data.extend(img.planes.into_iter().flatten());
        frames += 1;
    }
    let size = size.ok_or_else(|| FameError::Data(format!("no frames in {}", dir.display())))?;
    Ok(Clip { frames, size, data, label: 0, family: None, compression: Compression::None, seed: 0 })
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "# fame-manifest v1";

impl DatasetManifest {
    pub fn config_hash(&self) -> String {
        self.spec.config_hash()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Renders every clip of `split` in memory.
    pub fn render_split(&self, split: Split) -> Result<Vec<Clip>> {
        let registry = FamilyRegistry::default();
        self.split(split).map(|r| render_clip(&self.spec, r, &registry)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let registry = FamilyRegistry::default();
        let mut out = format!(
            "{MANIFEST_MAGIC}\n# seed={}\tconfig={}\n# spec {}\n# id\tdir\tlabel\tfamily\tcompression\tsplit\tseed\n",
            self.spec.seed,
            self.config_hash(),
            self.spec.canonical()
        );
        for r in &self.records {
            let family = registry.get(r.family).map(|f| f.name().to_string()).unwrap_or_else(|_| r.family.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id, r.dir, r.label, family, r.compression, r.split, r.seed
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let registry = FamilyRegistry::default();
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(MANIFEST_MAGIC) {
            return Err(FameError::Data("manifest: missing header".into()));
        }
        let mut spec = None;
        let mut hash = None;
        let mut records = Vec::new();
        for (i, line) in lines {
            let bad = |m: &str| FameError::Data(format!("manifest line {}: {m}", i + 1));
            if let Some(rest) = line.strip_prefix("# spec ") {
                spec = Some(DatasetSpec::parse_canonical(rest)?);
                continue;
            }
            if let Some(rest) = line.strip_prefix("# seed=") {
                hash = rest.split_once("\tconfig=").map(|(_, h)| h.to_string());
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 tab-separated fields"));
            }
            let family = registry
                .find(f[3])
                .or_else(|| f[3].parse().ok())
                .ok_or_else(|| bad("unknown family"))?;
            records.push(ClipRecord {
                id: f[0].to_string(),
                dir: f[1].to_string(),
                label: f[2].parse().map_err(|_| bad("bad label"))?,
                family,
                compression: Compression::parse(f[4])?,
                split: Split::parse(f[5])?,
                seed: f[6].parse().map_err(|_| bad("bad seed"))?,
            });
        }
        let spec = spec.ok_or_else(|| FameError::Data("manifest: missing spec line".into()))?;
        if hash.as_deref() != Some(spec.config_hash().as_str()) {
            return Err(FameError::Data("manifest: config hash does not match spec".into()));
        }
        if let Some(r) = records.iter().find(|r| r.label >= spec.classes) {
            return Err(FameError::Data(format!("manifest: label {} of {} exceeds class count", r.label, r.id)));
        }
        Ok(DatasetManifest { spec, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FameError::io(path, e))?;
        Self::parse(&text)
    }

    /// Writes every clip and `manifest.tsv` under `root`.
    pub fn materialize(&self, root: &Path) -> Result<()> {
        let registry = FamilyRegistry::default();
        for r in &self.records {
            write_clip(&root.join(&r.dir), &render_clip(&self.spec, r, &registry)?)?;
        }
        write_bytes(&root.join(MANIFEST_FILE), self.to_tsv().as_bytes())
    }

    /// Reads a materialized clip and attaches its record's metadata.
    pub fn load_clip(&self, root: &Path, record: &ClipRecord) -> Result<Clip> {
        let mut clip = read_clip_dir(&root.join(&record.dir))?;
        if clip.frames != self.spec.frames || clip.size != self.spec.size {
            return Err(FameError::Data(format!(
                "clip {} is {}x{}px, manifest says {}x{}px",
                record.id, clip.frames, clip.size, self.spec.frames, self.spec.size
            )));
        }
        clip.label = record.label;
        clip.family = Some(record.family);
        clip.compression = record.compression;
        clip.seed = record.seed;
        Ok(clip)
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<Clip>> {
        self.split(split).map(|r| self.load_clip(root, r)).collect()
    }
}
