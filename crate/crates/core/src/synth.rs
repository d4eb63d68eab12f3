//! Seeded generator of multi-agent clips.
//!
//! Interaction family: agents come in same-archetype pairs. One key pair
//! walks straight at each other during one half of the clip while every
//! other agent keeps a random heading at the same speed. The group label
//! encodes the key pair's archetype (the pattern) and the half, so it needs
//! both who-relates-to-whom and when.
//!
//! Majority family: the group label is the modal archetype.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::mix_seed;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSTT";
pub const FORMAT_VERSION: u32 = 1;

/// Per-frame step length of every agent, in unit-square coordinates.
pub const SPEED: f64 = 0.07;
/// Positions and velocities are scaled by these before entering the features.
const POSITION_GAIN: f64 = 4.0;
const VELOCITY_GAIN: f64 = 8.0;
/// Distance at which an approaching pair stops.
const CONTACT_GAP: f64 = 0.12;
/// Features that are not archetype codes: x, y, vx, vy.
const KINEMATIC_DIMS: usize = 4;
const BOX_HALF_WIDTH: f64 = 0.03;
const BOX_HALF_HEIGHT: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Majority,
    Interaction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub individuals: usize,
    pub input_dim: usize,
    pub group_classes: usize,
    pub action_classes: usize,
    pub noise_sigma: f64,
    pub family: TaskFamily,
    pub scene_channels: usize,
    pub scene_size: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub const DEFAULT_NOISE: f64 = 0.05;

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.individuals < 2 {
            return bad(format!("individuals must be >= 2, got {}", self.individuals));
        }
        if self.input_dim <= KINEMATIC_DIMS {
            return bad(format!("input_dim must be > {KINEMATIC_DIMS}, got {}", self.input_dim));
        }
        if self.action_classes < 2 || self.action_classes > 2 * (self.input_dim - KINEMATIC_DIMS) {
            return bad(format!(
                "action_classes must be in 2..={} for input_dim {}, got {}",
                2 * (self.input_dim - KINEMATIC_DIMS),
                self.input_dim,
                self.action_classes
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.scene_channels == 0 || self.scene_size == 0 {
            return bad("scene grid dimensions must be >= 1".into());
        }
        match self.family {
            TaskFamily::Interaction => {
                if self.group_classes < 2 || self.group_classes % 2 != 0 {
                    return bad(format!(
                        "interaction family needs an even group_classes >= 2, got {}",
                        self.group_classes
                    ));
                }
                if self.patterns() > self.action_classes {
                    return bad(format!(
                        "interaction family needs group_classes / 2 <= action_classes, got {} / 2 > {}",
                        self.group_classes, self.action_classes
                    ));
                }
            }
            TaskFamily::Majority => {
                if self.group_classes < self.action_classes {
                    return bad(format!(
                        "majority family needs group_classes >= action_classes, got {} < {}",
                        self.group_classes, self.action_classes
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of pairing patterns of the interaction family.
    pub fn patterns(&self) -> usize {
        self.group_classes / 2
    }

    /// First frame of the second half.
    pub fn half_split(&self) -> usize {
        self.frames.div_ceil(2)
    }

    /// Archetype codes `[A_cls, input_dim - 4]`: signed unit axes, so any
    /// two codes are at least `sqrt(2)` apart.
    pub fn archetype_codes(&self) -> Tensor {
        let width = self.input_dim - KINEMATIC_DIMS;
        Tensor::from_fn(&[self.action_classes, width], |idx| {
            let (a, k) = (idx / width, idx % width);
            match (a % width == k, (a / width) % 2) {
                (false, _) => 0.0,
                (true, 0) => 1.0,
                (true, _) => -1.0,
            }
        })
    }
}

/// The latent draw a clip was rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub archetypes: Vec<usize>,
    /// Interaction family only.
    pub key_pair: Option<(usize, usize)>,
    pub half: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub seed: u64,
    /// `[T, N, D_in]`
    pub individuals: Tensor,
    /// `[T, C_g, H, W]`
    pub scene: Tensor,
    /// `[T, N, 4]` as `(x0, y0, x1, y1)` in `[0, 1]`.
    pub boxes: Tensor,
    /// Noise-free centres `[T, N, 2]`.
    pub positions: Tensor,
    pub group_label: usize,
    pub action_labels: Vec<usize>,
    pub script: Script,
}

/// Reflect `v` into `[0, 1]`.
fn reflect(mut v: f64) -> f64 {
    loop {
        if v < 0.0 {
            v = -v;
        } else if v > 1.0 {
            v = 2.0 - v;
        } else {
            return v;
        }
    }
}

fn random_heading(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [SPEED * a.cos(), SPEED * a.sin()]
}

/// Random walk with persistent heading, reflected at the borders; `v[t]` is
/// the step taken from frame `t` to `t + 1` (the last frame repeats the
/// previous step).
fn wander(rng: &mut ChaCha8Rng, start: [f64; 2], frames: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut pos = vec![start];
    let mut vel = Vec::with_capacity(frames);
    let mut h = random_heading(rng);
    for t in 0..frames {
        if t > 0 && rng.random_bool(0.3) {
            h = random_heading(rng);
        }
        if t + 1 < frames {
            let p = pos[t];
            let mut next = [p[0] + h[0], p[1] + h[1]];
            for d in 0..2 {
                if next[d] < 0.0 || next[d] > 1.0 {
                    h[d] = -h[d];
                    next[d] = reflect(next[d]);
                }
            }
            pos.push(next);
        }
        vel.push(h);
    }
    (pos, vel)
}

/// Pair trajectories: the two agents close in along a common axis over the
/// steps `lo..hi` and wander elsewhere.
fn approach(rng: &mut ChaCha8Rng, frames: usize, lo: usize, hi: usize) -> [(Vec<[f64; 2]>, Vec<[f64; 2]>); 2] {
    let last = hi.min(frames - 1);
    let reach = CONTACT_GAP + SPEED * (last - lo).max(1) as f64;
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let u = [a.cos(), a.sin()];
    let slack = (0.5 - reach - 0.02).max(0.0);
    let m = [
        rng.random_range(0.5 - slack..=0.5 + slack),
        rng.random_range(0.5 - slack..=0.5 + slack),
    ];
    [1.0, -1.0].map(|sign| {
        let dir = [sign * u[0], sign * u[1]];
        let mut pos = vec![[0.0; 2]; frames];
        let mut vel = vec![[0.0; 2]; frames];
        for (t, p) in pos.iter_mut().enumerate().take(last + 1).skip(lo) {
            let left = reach - SPEED * (t - lo) as f64;
            *p = [m[0] + dir[0] * left, m[1] + dir[1] * left];
        }
        for v in vel.iter_mut().take(hi.min(frames)).skip(lo) {
            *v = [-dir[0] * SPEED, -dir[1] * SPEED];
        }
        if lo > 0 {
            let (back, bvel) = wander(rng, pos[lo], lo + 1);
            for s in 1..=lo {
                pos[lo - s] = back[s];
                vel[lo - s] = [-bvel[s - 1][0], -bvel[s - 1][1]];
            }
        }
        if hi < frames {
            let (fwd, fvel) = wander(rng, pos[last], frames - last);
            for s in 1..frames - last {
                pos[last + s] = fwd[s];
            }
            for s in 0..frames - last {
                vel[last + s] = fvel[s];
            }
        }
        (pos, vel)
    })
}

fn draw_archetypes(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Option<(usize, usize)>, usize) {
    let n = cfg.individuals;
    match cfg.family {
        TaskFamily::Interaction => {
            let pattern = rng.random_range(0..cfg.patterns());
            let pairs = n / 2;
            // Remaining archetypes shuffled; reused cyclically if pairs outnumber them.
            let mut rest: Vec<usize> = (0..cfg.action_classes).filter(|&a| a != pattern).collect();
            rest.shuffle(rng);
            let mut pair_types = vec![pattern];
            pair_types.extend((0..pairs - 1).map(|k| rest[k % rest.len()]));
            let mut slots: Vec<usize> = (0..n).collect();
            slots.shuffle(rng);
            let mut archetypes = vec![0; n];
            for (k, &ty) in pair_types.iter().enumerate() {
                archetypes[slots[2 * k]] = ty;
                archetypes[slots[2 * k + 1]] = ty;
            }
            if n % 2 == 1 {
                archetypes[slots[n - 1]] = rest[(pairs - 1) % rest.len()];
            }
            let key = (slots[0].min(slots[1]), slots[0].max(slots[1]));
            (archetypes, Some(key), pattern)
        }
        TaskFamily::Majority => {
            let mode = rng.random_range(0..cfg.action_classes);
            let lead = n / 2 + 1;
            let mut archetypes = vec![mode; lead];
            archetypes.extend((lead..n).map(|_| rng.random_range(0..cfg.action_classes)));
            archetypes.shuffle(rng);
            (archetypes, None, mode)
        }
    }
}

/// Modal value; ties go to the lowest value.
pub fn modal(values: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &v in values {
        counts[v] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

pub fn generate_clip(cfg: &GeneratorConfig, index: usize) -> SyntheticSample {
    let seed = mix_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, n) = (cfg.frames, cfg.individuals);
    let (archetypes, key_pair, pattern) = draw_archetypes(cfg, &mut rng);

    let mut tracks: Vec<(Vec<[f64; 2]>, Vec<[f64; 2]>)> = Vec::with_capacity(n);
    let mut half = None;
    let mut key_tracks = None;
    if key_pair.is_some() {
        let h = rng.random_range(0..2usize);
        let split = cfg.half_split();
        let (lo, hi) = if h == 0 { (0, split) } else { (split, t_len) };
        key_tracks = Some(approach(&mut rng, t_len, lo, hi));
        half = Some(h);
    }
    let mut key_iter = key_tracks.map(|k| k.into_iter());
    for i in 0..n {
        let is_key = key_pair.is_some_and(|(a, b)| i == a || i == b);
        if is_key {
            tracks.push(key_iter.as_mut().and_then(|k| k.next()).expect("two key tracks"));
        } else {
            let start = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            tracks.push(wander(&mut rng, start, t_len));
        }
    }

    let codes = cfg.archetype_codes();
    let width = cfg.input_dim - KINEMATIC_DIMS;
    let mut features = Vec::with_capacity(t_len * n * cfg.input_dim);
    let mut positions = Vec::with_capacity(t_len * n * 2);
    let mut boxes = Vec::with_capacity(t_len * n * 4);
    for t in 0..t_len {
        for i in 0..n {
            let p = tracks[i].0[t];
            let v = tracks[i].1[t];
            positions.extend_from_slice(&p);
            boxes.extend_from_slice(&[
                (p[0] - BOX_HALF_WIDTH).clamp(0.0, 1.0),
                (p[1] - BOX_HALF_HEIGHT).clamp(0.0, 1.0),
                (p[0] + BOX_HALF_WIDTH).clamp(0.0, 1.0),
                (p[1] + BOX_HALF_HEIGHT).clamp(0.0, 1.0),
            ]);
            let code = &codes.data()[archetypes[i] * width..(archetypes[i] + 1) * width];
            let clean = [p[0] * POSITION_GAIN, p[1] * POSITION_GAIN, v[0] * VELOCITY_GAIN, v[1] * VELOCITY_GAIN]
                .into_iter()
                .chain(code.iter().copied());
            for x in clean {
                let e: f64 = rng.sample(StandardNormal);
                features.push(x + cfg.noise_sigma * e);
            }
        }
    }
    let individuals = Tensor::new(&[t_len, n, cfg.input_dim], features).expect("feature shape");
    let scene = rasterize(cfg, &individuals, &positions);
    let group_label = match (cfg.family, half) {
        (TaskFamily::Interaction, Some(h)) => 2 * pattern + h,
        _ => modal(&archetypes, cfg.action_classes),
    };
    SyntheticSample {
        index,
        seed,
        individuals,
        scene,
        boxes: Tensor::new(&[t_len, n, 4], boxes).expect("box shape"),
        positions: Tensor::new(&[t_len, n, 2], positions).expect("position shape"),
        group_label,
        action_labels: archetypes.clone(),
        script: Script {
            archetypes,
            key_pair,
            half,
        },
    }
}

/// Gaussian splat of every agent on an `S x S` grid; channel `c` carries
/// feature `c mod D_in`.
fn rasterize(cfg: &GeneratorConfig, individuals: &Tensor, positions: &[f64]) -> Tensor {
    let (t_len, n, d) = (cfg.frames, cfg.individuals, cfg.input_dim);
    let (c_g, s) = (cfg.scene_channels, cfg.scene_size);
    let sigma2 = 2.0 * (0.75 / s as f64).powi(2);
    let feats = individuals.data();
    let mut grid = vec![0.0; t_len * c_g * s * s];
    for t in 0..t_len {
        for i in 0..n {
            let (x, y) = (positions[(t * n + i) * 2], positions[(t * n + i) * 2 + 1]);
            let row = &feats[(t * n + i) * d..(t * n + i + 1) * d];
            for gy in 0..s {
                for gx in 0..s {
                    let cx = (gx as f64 + 0.5) / s as f64;
                    let cy = (gy as f64 + 0.5) / s as f64;
                    let w = (-((x - cx).powi(2) + (y - cy).powi(2)) / sigma2).exp();
                    for c in 0..c_g {
                        grid[((t * c_g + c) * s + gy) * s + gx] += w * row[c % d];
                    }
                }
            }
        }
    }
    Tensor::new(&[t_len, c_g, s, s], grid).expect("scene shape")
}

/// Which half of the split a clip index belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn of(index: usize) -> Split {
        if index % 2 == 0 {
            Split::Train
        } else {
            Split::Val
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split '{other}', expected train or val"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn generate(cfg: &GeneratorConfig, clips: usize) -> Result<Self> {
        cfg.validate()?;
        if clips < 2 {
            return Err(Error::Config(format!("need at least 2 clips, got {clips}")));
        }
        Ok(Dataset {
            config: cfg.clone(),
            samples: (0..clips).map(|i| generate_clip(cfg, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Clips whose index parity matches `split`.
    pub fn split(&self, split: Split) -> Vec<&SyntheticSample> {
        self.samples.iter().filter(|s| Split::of(s.index) == split).collect()
    }

    /// Little-endian binary container; see [`read_binary`].
    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, c.frames as u32, c.individuals as u32, c.input_dim as u32, c.group_classes as u32, c.action_classes as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.samples {
            for t in [&s.individuals, &s.boxes, &s.scene] {
                for &x in t.data() {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
            w.write_all(&(s.group_label as u16).to_le_bytes())?;
            for &a in &s.action_labels {
                w.write_all(&(a as u16).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn metadata(&self) -> Metadata {
        let c = &self.config;
        Metadata {
            format: "CSTT".into(),
            version: FORMAT_VERSION,
            clips: self.samples.len(),
            frames: c.frames,
            individuals: c.individuals,
            input_dim: c.input_dim,
            group_classes: c.group_classes,
            action_classes: c.action_classes,
            scene_channels: c.scene_channels,
            scene_size: c.scene_size,
            family: c.family,
            noise_sigma: c.noise_sigma,
            seed: c.seed,
            record: vec![
                format!("individuals f32 [{}, {}, {}]", c.frames, c.individuals, c.input_dim),
                format!("boxes f32 [{}, {}, 4]", c.frames, c.individuals),
                format!("scene f32 [{}, {}, {}, {}]", c.frames, c.scene_channels, c.scene_size, c.scene_size),
                "group_label u16".into(),
                format!("action_labels u16 [{}]", c.individuals),
            ],
            split: "even index = train, odd index = val".into(),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(format!("{stem}.bin"));
        let file = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.metadata()).expect("metadata serializes");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// JSON sidecar of a binary dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format: String,
    pub version: u32,
    pub clips: usize,
    pub frames: usize,
    pub individuals: usize,
    pub input_dim: usize,
    pub group_classes: usize,
    pub action_classes: usize,
    pub scene_channels: usize,
    pub scene_size: usize,
    pub family: TaskFamily,
    pub noise_sigma: f64,
    pub seed: u64,
    pub record: Vec<String>,
    pub split: String,
}

/// Decoded record of the binary format (features narrowed to f32).
#[derive(Clone, Debug, PartialEq)]
pub struct StoredClip {
    pub individuals: Vec<f32>,
    pub boxes: Vec<f32>,
    pub scene: Vec<f32>,
    pub group_label: u16,
    pub action_labels: Vec<u16>,
}

/// Parse a binary dataset given its sidecar.
pub fn read_binary(r: &mut impl Read, meta: &Metadata) -> Result<Vec<StoredClip>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated dataset: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"CSTT\"")));
    }
    let mut header = [0u32; 6];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(fmt)?;
        *h = u32::from_le_bytes(b);
    }
    let expect = [
        FORMAT_VERSION,
        meta.frames as u32,
        meta.individuals as u32,
        meta.input_dim as u32,
        meta.group_classes as u32,
        meta.action_classes as u32,
    ];
    if header != expect {
        return Err(Error::Format(format!("header {header:?} disagrees with sidecar {expect:?}")));
    }
    let (t, n) = (meta.frames, meta.individuals);
    let read_f32 = |r: &mut dyn Read, count: usize| -> Result<Vec<f32>> {
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf).map_err(fmt)?;
        Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    };
    let mut clips = Vec::with_capacity(meta.clips);
    for _ in 0..meta.clips {
        let individuals = read_f32(r, t * n * meta.input_dim)?;
        let boxes = read_f32(r, t * n * 4)?;
        let scene = read_f32(r, t * meta.scene_channels * meta.scene_size * meta.scene_size)?;
        let mut buf = vec![0u8; 2 * (n + 1)];
        r.read_exact(&mut buf).map_err(fmt)?;
        let labels: Vec<u16> = buf.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        clips.push(StoredClip {
            individuals,
            boxes,
            scene,
            group_label: labels[0],
            action_labels: labels[1..].to_vec(),
        });
    }
    Ok(clips)
}

/// Clips stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, N, D_in]`
    pub individuals: Tensor,
    /// `[B, T, C_g, H, W]`
    pub scene: Tensor,
    pub group_labels: Vec<usize>,
    /// `B * N`, clip-major.
    pub action_labels: Vec<usize>,
}

impl Batch {
    pub fn stack(samples: &[&SyntheticSample]) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("cannot batch zero clips".into()))?;
        let (is, ss) = (first.individuals.shape().to_vec(), first.scene.shape().to_vec());
        let mut ind = Vec::with_capacity(samples.len() * first.individuals.numel());
        let mut scene = Vec::with_capacity(samples.len() * first.scene.numel());
        let mut group_labels = Vec::with_capacity(samples.len());
        let mut action_labels = Vec::new();
        for s in samples {
            if s.individuals.shape() != is.as_slice() || s.scene.shape() != ss.as_slice() {
                return Err(Error::shape("Batch::stack", &is, s.individuals.shape()));
            }
            ind.extend_from_slice(s.individuals.data());
            scene.extend_from_slice(s.scene.data());
            group_labels.push(s.group_label);
            action_labels.extend_from_slice(&s.action_labels);
        }
        let b = samples.len();
        Ok(Batch {
            individuals: Tensor::new(&[&[b][..], &is].concat(), ind)?,
            scene: Tensor::new(&[&[b][..], &ss].concat(), scene)?,
            group_labels,
            action_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.group_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_labels.is_empty()
    }
}
