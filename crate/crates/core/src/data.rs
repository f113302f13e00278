//! Synthetic concept data with a spurious background factor.
//!
//! Each sample has binary concepts `c`, a concept-relevant latent
//! `r = R c + noise`, a concept-irrelevant latent `z` that equals a class
//! anchor with probability `rho` (otherwise standard normal), and features
//! `x = A r + B z + eps`. Labels are the binary number spelled by the first
//! `ceil(log2 M)` concepts, reduced mod `M`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Standard deviation of the noise added to `R c`.
pub const CONCEPT_NOISE: f64 = 0.2;
/// Length of the class anchors that `z` snaps to on spurious samples.
pub const ANCHOR_SCALE: f64 = 3.0;

const MAGIC: &str = "RECEMDATA v1";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub dim_r: usize,
    pub dim_z: usize,
    pub rho: f64,
    pub noise_sigma: f64,
    /// Probability that each of the first `K/4` concept pairs shares one coin.
    pub pair_correlation: f64,
    /// Drop the last label-relevant concept from the annotations.
    pub incomplete: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 16,
            num_classes: 8,
            input_dim: 64,
            dim_r: 32,
            dim_z: 16,
            rho: 0.9,
            noise_sigma: 0.05,
            pair_correlation: 0.3,
            incomplete: false,
            n_train: 4000,
            n_val: 1000,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.num_classes == 0 {
            return Err(Error::config("num_concepts and num_classes must be positive"));
        }
        if self.label_bits() > self.num_concepts {
            return Err(Error::config(format!(
                "{} classes need {} label concepts but only {} exist",
                self.num_classes,
                self.label_bits(),
                self.num_concepts
            )));
        }
        if self.dim_r == 0 || self.dim_z == 0 {
            return Err(Error::config("dim_r and dim_z must be positive"));
        }
        if self.input_dim < self.dim_r + self.dim_z {
            return Err(Error::config("input_dim must be at least dim_r + dim_z"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pair_correlation) {
            return Err(Error::config("pair_correlation must lie in [0, 1]"));
        }
        if self.incomplete && (self.label_bits() == 0 || self.num_concepts < 2) {
            return Err(Error::config("incomplete mode needs a label concept to drop and one to keep"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("split sizes must be positive"));
        }
        Ok(())
    }

    /// Number of concepts that spell the label.
    pub fn label_bits(&self) -> usize {
        let mut bits = 0;
        while (1usize << bits) < self.num_classes {
            bits += 1;
        }
        bits
    }

    /// Concepts visible to models.
    pub fn observed_concepts(&self) -> usize {
        self.num_concepts - self.incomplete as usize
    }

    /// Concept index hidden in incomplete mode.
    pub fn dropped_concept(&self) -> Option<usize> {
        self.incomplete.then(|| self.label_bits() - 1)
    }

    pub fn label_rule(&self, concepts: &[u8]) -> usize {
        let v = concepts[..self.label_bits()]
            .iter()
            .fold(0usize, |acc, &c| (acc << 1) | c as usize);
        v % self.num_classes
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_concepts", self.num_concepts.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("dim_r", self.dim_r.to_string()),
            ("dim_z", self.dim_z.to_string()),
            ("rho", format!("{:?}", self.rho)),
            ("noise_sigma", format!("{:?}", self.noise_sigma)),
            ("pair_correlation", format!("{:?}", self.pair_correlation)),
            ("incomplete", self.incomplete.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Short hex digest of every field.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize()[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftKind {
    InDistribution,
    RandomShift,
    FixedShift,
    ZeroShift,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::InDistribution,
        ShiftKind::RandomShift,
        ShiftKind::FixedShift,
        ShiftKind::ZeroShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::InDistribution => "in_distribution",
            ShiftKind::RandomShift => "random",
            ShiftKind::FixedShift => "fixed",
            ShiftKind::ZeroShift => "zero",
        }
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_distribution" | "none" | "id" => Ok(ShiftKind::InDistribution),
            "random" => Ok(ShiftKind::RandomShift),
            "fixed" => Ok(ShiftKind::FixedShift),
            "zero" => Ok(ShiftKind::ZeroShift),
            other => Err(Error::config(format!("unknown shift `{other}`"))),
        }
    }
}

/// Latent factors kept so that features can be rebuilt under a shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    /// `[N, dim_r]`
    pub r: Tensor,
    /// `[N, dim_z]`
    pub z: Tensor,
    /// `[N, input_dim]`, already scaled by `noise_sigma`.
    pub eps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynDataset {
    pub spec: SyntheticSpec,
    pub split: Split,
    /// `[N, input_dim]`
    pub features: Tensor,
    /// Observed concepts, `N x observed_concepts` row-major.
    pub concepts: Vec<u8>,
    labels: Vec<usize>,
    pub latents: Option<Latents>,
}

/// Fixed random matrices of a spec.
#[derive(Clone, Debug)]
pub struct Mixing {
    /// `[dim_r, K]`
    pub r_map: Tensor,
    /// `[input_dim, dim_r]`
    pub a: Tensor,
    /// `[input_dim, dim_z]`
    pub b: Tensor,
    /// `[M, dim_z]`
    pub anchors: Tensor,
}

fn gauss(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_matrix(r: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * gauss(r))
        .collect();
    Tensor::new(&[rows, cols], data).expect("finite")
}

impl Mixing {
    pub fn from_spec(spec: &SyntheticSpec) -> Self {
        let mut r = rng::stream(spec.seed, "mixing");
        let r_map = normal_matrix(&mut r, spec.dim_r, spec.num_concepts, 1.0 / (spec.num_concepts as f64).sqrt());
        let a = normal_matrix(&mut r, spec.input_dim, spec.dim_r, 1.0 / (spec.dim_r as f64).sqrt());
        let b = normal_matrix(&mut r, spec.input_dim, spec.dim_z, 1.0 / (spec.dim_z as f64).sqrt());
        let (m, dz) = (spec.num_classes, spec.dim_z);
        let mut anchors = vec![0.0; m * dz];
        if m <= dz {
            for c in 0..m {
                anchors[c * dz + c] = ANCHOR_SCALE;
            }
        } else {
            for row in anchors.chunks_mut(dz) {
                for v in row.iter_mut() {
                    *v = gauss(&mut r);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v *= ANCHOR_SCALE / norm);
            }
        }
        Self {
            r_map,
            a,
            b,
            anchors: Tensor::new(&[m, dz], anchors).expect("finite"),
        }
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        self.anchors.row(class)
    }

    /// `x = A r + B z + eps`, accumulated in a fixed order.
    fn features(&self, r: &[f64], z: &[f64], eps: &[f64]) -> Vec<f64> {
        (0..eps.len())
            .map(|j| {
                let ar: f64 = self.a.row(j).iter().zip(r).map(|(w, v)| w * v).sum();
                let bz: f64 = self.b.row(j).iter().zip(z).map(|(w, v)| w * v).sum();
                ar + bz + eps[j]
            })
            .collect()
    }
}

struct Sample {
    concepts: Vec<u8>,
    r: Vec<f64>,
    z: Vec<f64>,
    eps: Vec<f64>,
}

fn draw_sample(spec: &SyntheticSpec, mix: &Mixing, r: &mut Rng) -> Sample {
    let k = spec.num_concepts;
    let mut concepts: Vec<u8> = (0..k).map(|_| r.random_bool(0.5) as u8).collect();
    for j in 0..k / 4 {
        if r.random_bool(spec.pair_correlation) {
            concepts[2 * j + 1] = concepts[2 * j];
        }
    }
    let latent_r: Vec<f64> = (0..spec.dim_r)
        .map(|i| {
            let signal: f64 = mix.r_map.row(i).iter().zip(&concepts).map(|(w, &c)| w * c as f64).sum();
            signal + CONCEPT_NOISE * gauss(r)
        })
        .collect();
    let label = spec.label_rule(&concepts);
    let z = if r.random_bool(spec.rho) {
        mix.anchor(label).to_vec()
    } else {
        (0..spec.dim_z).map(|_| gauss(r)).collect()
    };
    let eps = (0..spec.input_dim)
        .map(|_| spec.noise_sigma * gauss(r))
        .collect();
    Sample {
        concepts,
        r: latent_r,
        z,
        eps,
    }
}

fn build_split(spec: &SyntheticSpec, mix: &Mixing, split: Split, n: usize) -> SynDataset {
    let ko = spec.observed_concepts();
    let mut features = Vec::with_capacity(n * spec.input_dim);
    let mut concepts = Vec::with_capacity(n * ko);
    let mut labels = Vec::with_capacity(n);
    let (mut rs, mut zs, mut es) = (Vec::new(), Vec::new(), Vec::new());
    let tag = format!("sample-{}", split.as_str());
    for i in 0..n {
        let mut r = rng::indexed_stream(spec.seed, &tag, i as u64);
        let s = draw_sample(spec, mix, &mut r);
        features.extend(mix.features(&s.r, &s.z, &s.eps));
        labels.push(spec.label_rule(&s.concepts));
        let dropped = spec.dropped_concept();
        concepts.extend(
            s.concepts
                .iter()
                .enumerate()
                .filter(|(c, _)| Some(*c) != dropped)
                .map(|(_, &v)| v),
        );
        rs.extend(s.r);
        zs.extend(s.z);
        es.extend(s.eps);
    }
    SynDataset {
        spec: spec.clone(),
        split,
        features: Tensor::new(&[n, spec.input_dim], features).expect("finite"),
        concepts,
        labels,
        latents: Some(Latents {
            r: Tensor::new(&[n, spec.dim_r], rs).expect("finite"),
            z: Tensor::new(&[n, spec.dim_z], zs).expect("finite"),
            eps: Tensor::new(&[n, spec.input_dim], es).expect("finite"),
        }),
    }
}

/// Train, validation and test splits; a pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<(SynDataset, SynDataset, SynDataset)> {
    spec.validate()?;
    let mix = Mixing::from_spec(spec);
    Ok((
        build_split(spec, &mix, Split::Train, spec.n_train),
        build_split(spec, &mix, Split::Val, spec.n_val),
        build_split(spec, &mix, Split::Test, spec.n_test),
    ))
}

/// A seeded permutation of `0..m` with no fixed point (`m >= 2`).
pub fn derangement(m: usize, seed: u64) -> Result<Vec<usize>> {
    if m < 2 {
        return Err(Error::invalid("a derangement needs at least two classes"));
    }
    let mut r = rng::stream(seed, "derangement");
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Rebuilds features with the background latent replaced according to `kind`.
/// Concepts, labels, `r` and `eps` are unchanged.
pub fn apply_shift(ds: &SynDataset, kind: ShiftKind, seed: u64) -> Result<SynDataset> {
    if kind == ShiftKind::InDistribution {
        return Ok(ds.clone());
    }
    let lat = ds
        .latents
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset carries no latents to shift"))?;
    let spec = &ds.spec;
    let mix = Mixing::from_spec(spec);
    let n = ds.len();
    let dz = spec.dim_z;
    let perm = match kind {
        ShiftKind::FixedShift => Some(derangement(spec.num_classes, seed)?),
        _ => None,
    };
    let mut z = Vec::with_capacity(n * dz);
    for i in 0..n {
        match kind {
            ShiftKind::RandomShift => {
                let mut r = rng::indexed_stream(seed, "shift-random", i as u64);
                z.extend((0..dz).map(|_| gauss(&mut r)));
            }
            ShiftKind::FixedShift => {
                let to = perm.as_ref().expect("derangement")[ds.labels[i]];
                z.extend_from_slice(mix.anchor(to));
            }
            ShiftKind::ZeroShift => z.extend(std::iter::repeat_n(0.0, dz)),
            ShiftKind::InDistribution => unreachable!(),
        }
    }
    let mut features = Vec::with_capacity(n * spec.input_dim);
    for i in 0..n {
        features.extend(mix.features(lat.r.row(i), &z[i * dz..(i + 1) * dz], lat.eps.row(i)));
    }
    Ok(SynDataset {
        features: Tensor::new(&[n, spec.input_dim], features)?,
        latents: Some(Latents {
            r: lat.r.clone(),
            z: Tensor::new(&[n, dz], z)?,
            eps: lat.eps.clone(),
        }),
        ..ds.clone()
    })
}

impl SynDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.spec.observed_concepts()
    }

    /// Labels for evaluation. Training code goes through [`TrainingView`].
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn concept_row(&self, i: usize) -> &[u8] {
        let k = self.num_concepts();
        &self.concepts[i * k..(i + 1) * k]
    }

    pub fn select_concepts(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().flat_map(|&i| self.concept_row(i).iter().copied()).collect()
    }

    /// SHA-256 of the serialized dataset, hex.
    pub fn hash(&self) -> String {
        let bytes = self.to_bytes();
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in self.spec.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "split={}", self.split.as_str());
        let _ = writeln!(out, "rows={}", self.len());
        let _ = writeln!(out, "latents={}", self.latents.is_some() as u8);
        out.push_str("end_header\n");
        let mut bytes = out.into_bytes();
        for v in self.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.concepts);
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u32).to_le_bytes());
        }
        if let Some(lat) = &self.latents {
            for t in [&lat.r, &lat.z, &lat.eps] {
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const END: &[u8] = b"end_header\n";
        let end = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| Error::format("dataset header is not terminated"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format("dataset header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::format(format!("expected `{MAGIC}` header")));
        }
        let mut kv = std::collections::HashMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("malformed header line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        fn field<T: std::str::FromStr>(kv: &std::collections::HashMap<String, String>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::format(format!("missing header field `{k}`")))?
                .parse()
                .map_err(|_| Error::format(format!("bad value for header field `{k}`")))
        }
        let spec = SyntheticSpec {
            num_concepts: field(&kv, "num_concepts")?,
            num_classes: field(&kv, "num_classes")?,
            input_dim: field(&kv, "input_dim")?,
            dim_r: field(&kv, "dim_r")?,
            dim_z: field(&kv, "dim_z")?,
            rho: field(&kv, "rho")?,
            noise_sigma: field(&kv, "noise_sigma")?,
            pair_correlation: field(&kv, "pair_correlation")?,
            incomplete: field(&kv, "incomplete")?,
            n_train: field(&kv, "n_train")?,
            n_val: field(&kv, "n_val")?,
            n_test: field(&kv, "n_test")?,
            seed: field(&kv, "seed")?,
        };
        spec.validate().map_err(|e| Error::format(format!("invalid spec in header: {e}")))?;
        let split = Split::parse(&field::<String>(&kv, "split")?)?;
        let n: usize = field(&kv, "rows")?;
        let has_latents: u8 = field(&kv, "latents")?;
        if n == 0 {
            return Err(Error::format("dataset has no rows"));
        }
        let ko = spec.observed_concepts();
        let mut expected = n * (spec.input_dim * 8 + ko + 4);
        if has_latents == 1 {
            expected += n * (spec.dim_r + spec.dim_z + spec.input_dim) * 8;
        }
        let body = &bytes[end + END.len()..];
        if body.len() != expected {
            return Err(Error::format(format!(
                "dataset body has {} bytes, expected {expected} (truncated or corrupt)",
                body.len()
            )));
        }
        let mut cur = 0;
        let mut f64s = |count: usize| -> Result<Vec<f64>> {
            let out: Vec<f64> = body[cur..cur + 8 * count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cur += 8 * count;
            Ok(out)
        };
        let features = Tensor::new(&[n, spec.input_dim], f64s(n * spec.input_dim)?)?;
        let mut off = n * spec.input_dim * 8;
        let concepts = body[off..off + n * ko].to_vec();
        if concepts.iter().any(|&c| c > 1) {
            return Err(Error::format("concept block holds non-binary values"));
        }
        off += n * ko;
        let labels: Vec<usize> = body[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        if labels.iter().any(|&l| l >= spec.num_classes) {
            return Err(Error::format("label out of range"));
        }
        off += 4 * n;
        let latents = if has_latents == 1 {
            let mut take = |cols: usize| -> Result<Tensor> {
                let data = body[off..off + 8 * n * cols]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                off += 8 * n * cols;
                Ok(Tensor::new(&[n, cols], data)?)
            };
            Some(Latents {
                r: take(spec.dim_r)?,
                z: take(spec.dim_z)?,
                eps: take(spec.input_dim)?,
            })
        } else {
            None
        };
        Ok(Self {
            spec,
            split,
            features,
            concepts,
            labels,
            latents,
        })
    }
}

/// Read access to a non-test split for training and model selection.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    ds: &'a SynDataset,
}

impl<'a> TrainingView<'a> {
    /// Fails for the test split so no training code can read test labels.
    pub fn new(ds: &'a SynDataset) -> Result<Self> {
        if ds.split == Split::Test {
            return Err(Error::invalid("test-split labels are not available during training"));
        }
        Ok(Self { ds })
    }

    pub fn dataset(&self) -> &'a SynDataset {
        self.ds
    }

    pub fn labels(&self) -> &'a [usize] {
        &self.ds.labels
    }

    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }
}

#[cfg(test)]
mod tests;
