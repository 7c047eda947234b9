//! Procedural talking-face stand-in: each identity is a seeded background and
//! face, and the mouth opening of frame `t` follows a scalar driving signal.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::imageio;

pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;
/// First masked row of the source image.
pub const MASK_ROW: usize = SIZE / 2;
pub const WINDOW: usize = 9;
pub const REFERENCES: usize = 5;
/// Minimum sequence length accepted by [`make_sample`].
pub const MIN_FRAMES: usize = 16;

/// Color of the open mouth; the oracle keys on its red-minus-green response.
const MOUTH_COLOR: [f64; 3] = [0.85, 0.1, 0.15];

fn identity_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn phases(seed: u64) -> (f64, f64) {
    let mut rng = identity_rng(seed, 1);
    (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI))
}

/// Driving signal `a(t) = 0.5 + 0.25·sin(2πt/17 + φ1) + 0.15·sin(2πt/5 + φ2)`.
pub fn signal(t: usize, seed: u64) -> f64 {
    let (p1, p2) = phases(seed);
    let t = t as f64;
    0.5 + 0.25 * (2.0 * PI * t / 17.0 + p1).sin() + 0.15 * (2.0 * PI * t / 5.0 + p2).sin()
}

/// Mouth height in pixels for signal value `a`.
pub fn mouth_height(a: f64) -> usize {
    (2.0 + 10.0 * a).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub head_center: (f64, f64),
    pub head_axes: (f64, f64),
    pub skin: [f64; 3],
    pub eye_row: usize,
    pub eye_offset: usize,
    /// Row and column of the mouth center.
    pub mouth_center: (usize, usize),
    pub mouth_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub seed: u64,
    pub background: Tensor,
    pub face: FaceParams,
}

impl Identity {
    pub fn new(seed: u64) -> Self {
        let mut rng = identity_rng(seed, 0);
        // 4×4 control grid per channel, bilinearly upsampled.
        let grid: Vec<f64> = (0..CHANNELS * 16).map(|_| rng.gen_range(0.1..0.6)).collect();
        let mut bg = Vec::with_capacity(CHANNELS * SIZE * SIZE);
        for c in 0..CHANNELS {
            for i in 0..SIZE {
                for j in 0..SIZE {
                    let y = i as f64 / (SIZE - 1) as f64 * 3.0;
                    let x = j as f64 / (SIZE - 1) as f64 * 3.0;
                    let (y0, x0) = ((y as usize).min(2), (x as usize).min(2));
                    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                    let at = |r: usize, k: usize| grid[c * 16 + r * 4 + k];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                    bg.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        let background = Tensor::new(&[CHANNELS, SIZE, SIZE], bg).expect("background shape");
        let face = FaceParams {
            head_center: (rng.gen_range(15.0..17.0), rng.gen_range(14.5..17.5)),
            head_axes: (rng.gen_range(13.0..14.5), rng.gen_range(10.0..12.5)),
            skin: [rng.gen_range(0.75..0.95), rng.gen_range(0.55..0.7), rng.gen_range(0.4..0.6)],
            eye_row: rng.gen_range(9..=12),
            eye_offset: rng.gen_range(4..=6),
            mouth_center: (rng.gen_range(22..=24), rng.gen_range(15..=17)),
            mouth_width: rng.gen_range(8..=12),
        };
        Identity { seed, background, face }
    }

    /// Columns of the mouth, `[start, end)`.
    pub fn mouth_columns(&self) -> (usize, usize) {
        let (_, col) = self.face.mouth_center;
        let start = col - self.face.mouth_width / 2;
        (start, start + self.face.mouth_width)
    }

    /// Rows of a mouth of height `h`, `[start, end)`.
    pub fn mouth_rows(&self, h: usize) -> (usize, usize) {
        let (row, _) = self.face.mouth_center;
        let start = row - h / 2;
        (start, start + h)
    }
}

/// Render identity `id` with mouth opening driven by `a`.
pub fn render_frame(id: &Identity, a: f64) -> Tensor {
    let mut img = id.background.clone();
    let f = &id.face;
    let plane = SIZE * SIZE;
    let d = img.data_mut();
    for i in 0..SIZE {
        for j in 0..SIZE {
            let dy = (i as f64 - f.head_center.0) / f.head_axes.0;
            let dx = (j as f64 - f.head_center.1) / f.head_axes.1;
            if dx * dx + dy * dy <= 1.0 {
                for c in 0..CHANNELS {
                    d[c * plane + i * SIZE + j] = f.skin[c];
                }
            }
        }
    }
    let (_, mc) = f.mouth_center;
    for col in [mc - f.eye_offset, mc + f.eye_offset] {
        for i in f.eye_row..f.eye_row + 2 {
            for j in col..col + 2 {
                for c in 0..CHANNELS {
                    d[c * plane + i * SIZE + j] = 0.1;
                }
            }
        }
    }
    let (r0, r1) = id.mouth_rows(mouth_height(a));
    let (c0, c1) = id.mouth_columns();
    for i in r0..r1 {
        for j in c0..c1 {
            for c in 0..CHANNELS {
                d[c * plane + i * SIZE + j] = MOUTH_COLOR[c];
            }
        }
    }
    img
}

/// Count rows of the lower half whose mean red-minus-green response over the
/// central mouth columns exceeds 0.5.
pub fn oracle_mouth_opening(img: &Tensor, id: &Identity) -> f64 {
    let (c0, c1) = id.mouth_columns();
    let (c0, c1) = (c0 + 2, c1 - 2);
    let plane = SIZE * SIZE;
    let d = img.data();
    let rows = (MASK_ROW..SIZE)
        .filter(|&i| {
            let band: f64 = (c0..c1).map(|j| d[i * SIZE + j] - d[plane + i * SIZE + j]).sum();
            band / (c1 - c0) as f64 > 0.5
        })
        .count();
    rows as f64
}

/// Lower half `[C, H/2, W]` of an image, the sync network's visual input.
pub fn mouth_crop(img: &Tensor) -> Tensor {
    let half = (SIZE - MASK_ROW) * SIZE;
    let data = (0..CHANNELS)
        .flat_map(|c| img.data()[c * SIZE * SIZE + MASK_ROW * SIZE..][..half].iter().copied())
        .collect();
    Tensor::new(&[CHANNELS, SIZE - MASK_ROW, SIZE], data).expect("crop shape")
}

/// Copy of `img` with rows `MASK_ROW..` zeroed.
pub fn mask_lower_half(img: &Tensor) -> Tensor {
    let mut out = img.clone();
    let plane = SIZE * SIZE;
    for c in 0..CHANNELS {
        out.data_mut()[c * plane + MASK_ROW * SIZE..(c + 1) * plane].fill(0.0);
    }
    out
}

/// One identity's rendered frames and their signal values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub identity: Identity,
    pub signal: Vec<f64>,
    pub frames: Vec<Tensor>,
}

impl Sequence {
    pub fn render(identity: Identity, len: usize) -> Self {
        let signal: Vec<f64> = (0..len).map(|t| signal(t, identity.seed)).collect();
        let frames = signal.iter().map(|&a| render_frame(&identity, a)).collect();
        Sequence { identity, signal, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[a(t−4) .. a(t+4)]`, clamped at the sequence ends.
    pub fn window(&self, t: usize) -> Tensor {
        let last = self.len() as isize - 1;
        let half = (WINDOW / 2) as isize;
        let w = (-half..=half).map(|k| self.signal[(t as isize + k).clamp(0, last) as usize]).collect();
        Tensor::from_vec(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub truth: Tensor,
    pub source: Tensor,
    pub references: Vec<Tensor>,
    pub signal_window: Tensor,
    pub frame_index: usize,
    pub reference_indices: Vec<usize>,
}

/// Build the inpainting sample for frame `t` with five random same-identity references.
pub fn make_sample(seq: &Sequence, t: usize, rng: &mut impl Rng) -> Result<FrameSample> {
    if seq.len() < MIN_FRAMES {
        return Err(Error::Domain(format!("sequence has {} frames, need at least {MIN_FRAMES}", seq.len())));
    }
    if t >= seq.len() {
        return Err(Error::Range { index: t, len: seq.len() });
    }
    let reference_indices: Vec<usize> = index::sample(rng, seq.len() - 1, REFERENCES)
        .into_iter()
        .map(|i| if i >= t { i + 1 } else { i })
        .collect();
    let truth = seq.frames[t].clone();
    Ok(FrameSample {
        source: mask_lower_half(&truth),
        references: reference_indices.iter().map(|&i| seq.frames[i].clone()).collect(),
        signal_window: seq.window(t),
        frame_index: t,
        reference_indices,
        truth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_identities: usize,
    pub train_frames: usize,
    pub test_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 7, train_identities: 4, train_frames: 256, test_frames: 64 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_identities == 0 {
            return Err(Error::config("data.train_identities", "must be at least 1"));
        }
        if self.train_frames < MIN_FRAMES {
            return Err(Error::config("data.train_frames", format!("must be at least {MIN_FRAMES}")));
        }
        if self.test_frames < MIN_FRAMES {
            return Err(Error::config("data.test_frames", format!("must be at least {MIN_FRAMES}")));
        }
        Ok(())
    }
}

/// Training identities plus one held-out identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub test: Sequence,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seeds: Vec<u64> = Vec::new();
        while seeds.len() < cfg.train_identities + 1 {
            let s = rng.gen();
            if !seeds.contains(&s) {
                seeds.push(s);
            }
        }
        let test_seed = seeds.pop().expect("held-out seed");
        let train = seeds.into_iter().map(|s| Sequence::render(Identity::new(s), cfg.train_frames)).collect();
        let test = Sequence::render(Identity::new(test_seed), cfg.test_frames);
        Ok(Dataset { train, test })
    }

    fn sequences(&self) -> impl Iterator<Item = (&'static str, &Sequence)> {
        self.train.iter().map(|s| ("train", s)).chain(std::iter::once(("test", &self.test)))
    }

    /// Write `index.csv` (frame_index, identity_seed, a, split) and one PPM per frame.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        let mut csv = String::from("frame_index,identity_seed,a,split\n");
        for (split, seq) in self.sequences() {
            for (t, (frame, a)) in seq.frames.iter().zip(&seq.signal).enumerate() {
                csv.push_str(&format!("{t},{},{a:?},{split}\n", seq.identity.seed));
                imageio::write_ppm(&dir.join(frame_file(seq.identity.seed, t)), frame)?;
            }
        }
        fs::write(dir.join("index.csv"), csv)?;
        Ok(())
    }

    /// Read a directory written by [`Dataset::dump`]. Frames come back 8-bit quantized.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("index.csv"))?;
        let mut lines = text.lines();
        if lines.next() != Some("frame_index,identity_seed,a,split") {
            return Err(Error::Parse("index.csv: unexpected header".into()));
        }
        let mut order: Vec<(u64, String)> = Vec::new();
        let mut rows: HashMap<u64, Vec<(usize, f64)>> = HashMap::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Parse(format!("index.csv line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [t, seed, a, split] = f[..] else { return Err(bad()) };
            let t: usize = t.parse().map_err(|_| bad())?;
            let seed: u64 = seed.parse().map_err(|_| bad())?;
            let a: f64 = a.parse().map_err(|_| bad())?;
            if !rows.contains_key(&seed) {
                order.push((seed, split.to_string()));
            }
            rows.entry(seed).or_default().push((t, a));
        }
        let mut train = Vec::new();
        let mut test = None;
        for (seed, split) in order {
            let mut entries = rows.remove(&seed).unwrap_or_default();
            entries.sort_by_key(|e| e.0);
            if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
                return Err(Error::Parse(format!("identity {seed}: frame indices not contiguous")));
            }
            let frames = entries
                .iter()
                .map(|&(t, _)| imageio::read_ppm(&dir.join(frame_file(seed, t))))
                .collect::<Result<_>>()?;
            let seq = Sequence { identity: Identity::new(seed), signal: entries.iter().map(|e| e.1).collect(), frames };
            match split.as_str() {
                "train" => train.push(seq),
                "test" if test.is_none() => test = Some(seq),
                other => return Err(Error::Parse(format!("identity {seed}: unexpected split `{other}`"))),
            }
        }
        let test = test.ok_or_else(|| Error::Parse("index.csv has no test identity".into()))?;
        Ok(Dataset { train, test })
    }
}

fn frame_file(seed: u64, t: usize) -> String {
    format!("frames/{seed}_{t:04}.ppm")
}
