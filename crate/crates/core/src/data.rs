//! Synthetic aligned-embedding datasets and their binary file format.
//!
//! Each record carries one unit-norm embedding per modality, all derived from
//! a shared per-record factor so that modalities of the same observation agree
//! on both species-level and instance-level content. A fixed random nonlinear
//! map per modality keeps the reconstruction task from being solvable by a
//! single linear layer.
//!
//! File format (little-endian, no padding):
//! magic `PM3E`, u16 version = 1, u8 modality_count, modality_count x u32
//! embedding dims, u32 species_count, u64 record_count, then per record:
//! u32 species_id, f32 lat, f32 lon, then per modality `dim` f32 values.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Cursor;
use std::path::Path;

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::streams::stream_rng;

pub const DATASET_MAGIC: [u8; 4] = *b"PM3E";
pub const DATASET_VERSION: u16 = 1;

/// One observation: per-modality unit-norm embeddings plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub species_id: u32,
    pub lat: f64,
    pub lon: f64,
    /// One vector per modality, in modality order.
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Embedding dimension per modality.
    pub dims: Vec<usize>,
    pub species_count: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn modality_count(&self) -> usize {
        self.dims.len()
    }
}

/// Index of the coordinate-driven modality under `diversity_gradient`
/// (the conventional modality order is image, satellite, location, audio,
/// text, env).
pub const LOCATION_MODALITY: usize = 2;

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

struct ModalityMaps {
    /// Per modality: d_in x factor_dim.
    weights: Vec<Vec<f64>>,
    /// Random Fourier frequencies for the coordinate modality: factor_dim x 2.
    rff_freq: Vec<f64>,
    /// Phases, factor_dim.
    rff_phase: Vec<f64>,
}

fn build_maps(cfg: &SynthConfig) -> ModalityMaps {
    let mut rng = stream_rng(cfg.map_seed, "modality-maps");
    let k = cfg.latent_factor_dim;
    // Keeps the pre-tanh activations around unit scale for the default
    // factor spread, so the nonlinearity bends without saturating away the
    // per-record detail.
    let scale = 1.0 / (2.0 * k as f64).sqrt();
    let weights = (0..cfg.modality_count)
        .map(|_| {
            (0..cfg.d_in * k)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect();
    // Drawn unconditionally so the modality maps do not depend on the
    // diversity_gradient flag.
    let rff_freq = (0..2 * k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 6.0)
        .collect();
    let rff_phase = (0..k)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    ModalityMaps {
        weights,
        rff_freq,
        rff_phase,
    }
}

fn apply_map(w: &[f64], factor: &[f64], d_in: usize) -> Vec<f64> {
    let k = factor.len();
    (0..d_in)
        .map(|d| {
            let row = &w[d * k..(d + 1) * k];
            let s: f64 = row.iter().zip(factor).map(|(a, b)| a * b).sum();
            s.tanh()
        })
        .collect()
}

/// Coordinate featurization for the location modality: random Fourier
/// features of the normalized (lat, lon).
fn coordinate_factor(maps: &ModalityMaps, cfg: &SynthConfig, lat: f64, lon: f64) -> Vec<f64> {
    let u = (lat - cfg.lat_min) / (cfg.lat_max - cfg.lat_min);
    let v = (lon - cfg.lon_min) / (cfg.lon_max - cfg.lon_min);
    let k = maps.rff_phase.len();
    (0..k)
        .map(|i| (maps.rff_freq[2 * i] * u + maps.rff_freq[2 * i + 1] * v + maps.rff_phase[i]).cos())
        .collect()
}

/// Generates a dataset. Same config and seed give a bit-identical dataset.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    if cfg.modality_count < 2 {
        return Err(Error::InvalidArgument("modality_count must be >= 2".into()));
    }
    if cfg.records < cfg.species_count {
        return Err(Error::InvalidArgument(format!(
            "records ({}) < species_count ({}): every class must appear",
            cfg.records, cfg.species_count
        )));
    }
    if cfg.noise_std.len() != cfg.modality_count {
        return Err(Error::InvalidArgument(format!(
            "noise_std has {} entries for {} modalities",
            cfg.noise_std.len(),
            cfg.modality_count
        )));
    }
    if cfg.noise_std.iter().any(|s| *s < 0.0) {
        return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
    }

    let maps = build_maps(cfg);
    let mut rng = stream_rng(seed, "synthdata");
    let k = cfg.latent_factor_dim;

    let species_factors: Vec<Vec<f64>> = (0..cfg.species_count)
        .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let mut records = Vec::with_capacity(cfg.records);
    for r in 0..cfg.records {
        let lat = rng.gen_range(cfg.lat_min..cfg.lat_max);
        let lon = rng.gen_range(cfg.lon_min..cfg.lon_max);
        // First pass guarantees every species appears at least once.
        let species = if r < cfg.species_count {
            r as u32
        } else if cfg.diversity_gradient {
            // Species pool widens with longitude, so the entropy of the local
            // species distribution rises monotonically from west to east.
            let u = (lon - cfg.lon_min) / (cfg.lon_max - cfg.lon_min);
            let pool = ((u * cfg.species_count as f64).ceil() as usize)
                .clamp(1, cfg.species_count);
            rng.gen_range(0..pool) as u32
        } else {
            rng.gen_range(0..cfg.species_count) as u32
        };

        let factor: Vec<f64> = species_factors[species as usize]
            .iter()
            .map(|c| c + cfg.record_jitter_std * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut embeddings = Vec::with_capacity(cfg.modality_count);
        for m in 0..cfg.modality_count {
            let base = if cfg.diversity_gradient && m == LOCATION_MODALITY {
                coordinate_factor(&maps, cfg, lat, lon)
            } else {
                factor.clone()
            };
            let mut e = apply_map(&maps.weights[m], &base, cfg.d_in);
            let std = cfg.noise_std[m];
            if std > 0.0 {
                for x in e.iter_mut() {
                    *x += std * rng.sample::<f64, _>(StandardNormal);
                }
            } else {
                // Keep the draw count independent of the noise level so
                // turning noise off does not shift later samples.
                for _ in 0..cfg.d_in {
                    let _: f64 = rng.sample(StandardNormal);
                }
            }
            normalize(&mut e);
            embeddings.push(e);
        }
        records.push(EmbeddingRecord {
            species_id: species,
            lat,
            lon,
            embeddings,
        });
    }

    Ok(Dataset {
        dims: vec![cfg.d_in; cfg.modality_count],
        species_count: cfg.species_count,
        records,
    })
}

/// Deterministic stratified split into (train, val, test).
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| *f <= 0.0) {
        return Err(Error::InvalidArgument("fractions must be positive".into()));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("fractions must sum to 1".into()));
    }

    let mut rng = stream_rng(seed, "split");
    let mut by_species: Vec<Vec<usize>> = vec![Vec::new(); dataset.species_count.max(1)];
    for (i, r) in dataset.records.iter().enumerate() {
        let s = r.species_id as usize;
        if s >= by_species.len() {
            by_species.resize(s + 1, Vec::new());
        }
        by_species[s].push(i);
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(), Vec::new(), Vec::new()];
    // Carried fractional quota per split. Rounding errors flow from one
    // species to the next, so the global totals land within one record of
    // fraction * N (exactly on it when that product is an integer), while
    // balanced class counts still split exactly per species.
    let mut carry = [0.0f64; 3];
    for idxs in by_species.iter_mut() {
        if idxs.is_empty() {
            continue;
        }
        // Fisher-Yates with a fixed order of draws.
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        let n = idxs.len();
        let mut counts = [0usize; 3];
        let mut rema: Vec<(usize, f64)> = Vec::with_capacity(3);
        let mut used = 0;
        for (j, f) in fr.iter().enumerate() {
            let want = f * n as f64 + carry[j];
            counts[j] = want.floor().max(0.0) as usize;
            used += counts[j];
            rema.push((j, want - counts[j] as f64));
        }
        rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let leftover = n - used;
        for (rank, &(j, rem)) in rema.iter().enumerate() {
            carry[j] = if rank < leftover {
                counts[j] += 1;
                rem - 1.0
            } else {
                rem
            };
        }
        let mut offset = 0;
        for (j, &c) in counts.iter().enumerate() {
            assigned[j].extend_from_slice(&idxs[offset..offset + c]);
            offset += c;
        }
    }

    if assigned.iter().any(|a| a.is_empty()) {
        return Err(Error::InvalidArgument(
            "split would leave an empty partition".into(),
        ));
    }

    let build = |mut idxs: Vec<usize>| {
        idxs.sort_unstable();
        Dataset {
            dims: dataset.dims.clone(),
            species_count: dataset.species_count,
            records: idxs.iter().map(|&i| dataset.records[i].clone()).collect(),
        }
    };
    let mut parts = assigned.into_iter();
    Ok((
        build(parts.next().unwrap()),
        build(parts.next().unwrap()),
        build(parts.next().unwrap()),
    ))
}

pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.write_u16::<LittleEndian>(DATASET_VERSION).unwrap();
    out.write_u8(dataset.dims.len() as u8).unwrap();
    for &d in &dataset.dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    out.write_u32::<LittleEndian>(dataset.species_count as u32)
        .unwrap();
    out.write_u64::<LittleEndian>(dataset.records.len() as u64)
        .unwrap();
    for r in &dataset.records {
        out.write_u32::<LittleEndian>(r.species_id).unwrap();
        out.write_f32::<LittleEndian>(r.lat as f32).unwrap();
        out.write_f32::<LittleEndian>(r.lon as f32).unwrap();
        for e in &r.embeddings {
            for &v in e {
                out.write_f32::<LittleEndian>(v as f32).unwrap();
            }
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur
        .read_u16::<LittleEndian>()
        .map_err(|_| truncation(bytes.len(), 7))?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let modality_count = cur.read_u8().map_err(|_| truncation(bytes.len(), 7))? as usize;
    let mut dims = Vec::with_capacity(modality_count);
    for _ in 0..modality_count {
        dims.push(
            cur.read_u32::<LittleEndian>()
                .map_err(|_| truncation(bytes.len(), 7 + 4 * modality_count as u64))?
                as usize,
        );
    }
    let species_count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| truncation(bytes.len(), 0))? as usize;
    let record_count = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| truncation(bytes.len(), 0))?;

    let header = 4 + 2 + 1 + 4 * modality_count as u64 + 4 + 8;
    let per_record = 4 + 4 + 4 + 4 * dims.iter().sum::<usize>() as u64;
    let expected = header + record_count * per_record;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }

    let mut records = Vec::with_capacity(record_count as usize);
    for _ in 0..record_count {
        let species_id = cur.read_u32::<LittleEndian>()?;
        let lat = cur.read_f32::<LittleEndian>()? as f64;
        let lon = cur.read_f32::<LittleEndian>()? as f64;
        let mut embeddings = Vec::with_capacity(modality_count);
        for &d in &dims {
            let mut e = Vec::with_capacity(d);
            for _ in 0..d {
                e.push(cur.read_f32::<LittleEndian>()? as f64);
            }
            embeddings.push(e);
        }
        records.push(EmbeddingRecord {
            species_id,
            lat,
            lon,
            embeddings,
        });
    }
    Ok(Dataset {
        dims,
        species_count,
        records,
    })
}

fn truncation(actual: usize, expected_min: u64) -> Error {
    Error::Truncated {
        expected: expected_min,
        actual: actual as u64,
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
