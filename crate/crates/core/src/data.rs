//! Seeded synthetic datasets and the dataset file format.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`, so a seed names the same dataset on every platform.
//! Redraws after a degenerate sample switch to the next ChaCha stream.
//!
//! File format: comma-separated text with header `y,x1,...,xd`, one point per
//! row, label first, every real written with 17 significant digits.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Dataset;
use crate::margin::separability_witness;

pub const PLANAR_ANCHORS: [[f64; 2]; 3] = [[1.0 / 6.0, 0.5], [0.5, 1.0 / 6.0], [1.0 / 3.0, 1.0 / 3.0]];
pub const PLANAR_SAMPLES: usize = 12;
pub const PLANAR_MEAN: [f64; 2] = [0.5, 0.5];
/// Per-coordinate variance of the planar samples.
pub const PLANAR_VARIANCE: f64 = 0.15;

pub const SPARSE_POINTS: usize = 15;
pub const SPARSE_DIM: usize = 100;
pub const SPARSE_MAX_SUPPORT: usize = 10;
pub const SPARSE_LOW: f64 = -2.0;
pub const SPARSE_HIGH: f64 = 4.0;

pub const MAX_REDRAWS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorSpec {
    Planar2d { seed: u64 },
    SparseHighdim { seed: u64 },
    CustomFile { path: String },
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            GeneratorSpec::Planar2d { seed } => Ok(gen_planar2d(*seed)),
            GeneratorSpec::SparseHighdim { seed } => Ok(gen_sparse_highdim(*seed)),
            GeneratorSpec::CustomFile { path } => load_dataset(path),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws until `draw` yields a separable dataset, at most `MAX_REDRAWS` times.
fn separable_draw(name: &str, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> Dataset) -> Dataset {
    let mut data = draw(&mut rng_for(seed, 0));
    for attempt in 1..=MAX_REDRAWS {
        if separability_witness(&data).is_some() {
            return data;
        }
        info!("{name} seed {seed}: sample {} not separable, redrawing", attempt - 1);
        data = draw(&mut rng_for(seed, attempt));
    }
    if separability_witness(&data).is_none() {
        warn!("{name} seed {seed}: still not separable after {MAX_REDRAWS} redraws");
    }
    data
}

fn draw_planar(rng: &mut ChaCha8Rng) -> Dataset {
    let normal = Normal::new(0.0, PLANAR_VARIANCE.sqrt()).expect("valid std-dev");
    let mut rows: Vec<Vec<f64>> = PLANAR_ANCHORS.iter().map(|a| a.to_vec()).collect();
    for _ in 0..PLANAR_SAMPLES {
        let x = PLANAR_MEAN[0] + normal.sample(rng);
        let y = PLANAR_MEAN[1] + normal.sample(rng);
        rows.push(vec![x, y]);
    }
    Dataset::positive(rows).expect("finite by construction")
}

/// Fifteen points in the plane: three fixed anchors on the line `x + y = 2/3`
/// followed by twelve draws from `N((1/2, 1/2), 0.15 I)`. Labels are absorbed,
/// so every label is `+1`.
pub fn gen_planar2d(seed: u64) -> Dataset {
    separable_draw("planar2d", seed, draw_planar)
}

/// The [`gen_planar2d`] problem written as `(+-x_i, +-1)` pairs with random
/// signs, for scatter plots. `y_i x_i` is unchanged.
pub fn gen_planar2d_presentation(seed: u64) -> Dataset {
    let base = gen_planar2d(seed);
    let mut rng = rng_for(seed, u64::MAX);
    let mut rows = Vec::with_capacity(base.n());
    let mut labels = Vec::with_capacity(base.n());
    for x in base.rows() {
        if rng.random_bool(0.5) {
            rows.push(x.to_vec());
            labels.push(1.0);
        } else {
            rows.push(x.iter().map(|v| -v).collect());
            labels.push(-1.0);
        }
    }
    Dataset::new(rows, labels).expect("valid by construction")
}

fn draw_sparse(rng: &mut ChaCha8Rng) -> Dataset {
    let support = Uniform::new_inclusive(1, SPARSE_MAX_SUPPORT).expect("valid range");
    let value = Uniform::new(SPARSE_LOW, SPARSE_HIGH).expect("valid range");
    let rows = (0..SPARSE_POINTS)
        .map(|_| {
            let k = support.sample(rng);
            let mut row = vec![0.0; SPARSE_DIM];
            for j in index::sample(rng, SPARSE_DIM, k) {
                let mut v = value.sample(rng);
                while v == 0.0 {
                    v = value.sample(rng);
                }
                row[j] = v;
            }
            row
        })
        .collect();
    Dataset::positive(rows).expect("finite by construction")
}

/// Fifteen sparse points in `R^100`. Each has a support of size uniform in
/// `{1..10}` (indices without replacement) with entries uniform on `(-2, 4)`.
pub fn gen_sparse_highdim(seed: u64) -> Dataset {
    separable_draw("sparse_highdim", seed, draw_sparse)
}

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    let mut header = String::from("y");
    for j in 1..=data.d() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(out, "{header}")?;
    for (x, y) in data.rows().zip(data.labels()) {
        let mut line = if *y > 0.0 { "1".to_string() } else { "-1".to_string() };
        for v in x {
            line.push(',');
            line.push_str(&format_real(*v));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let d = loop {
        match lines.next() {
            None => return Err(Error::Parse { line: 1, message: "empty dataset file".into() }),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let cols: Vec<&str> = line.trim().split(',').map(str::trim).collect();
                let ok = cols.len() >= 2
                    && cols[0] == "y"
                    && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("x{}", j + 1));
                if !ok {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected header y,x1,...,xd, got {line:?}"),
                    });
                }
                break cols.len() - 1;
            }
        }
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if cols.len() != d + 1 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} fields, got {}", d + 1, cols.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("bad number {s:?}"),
            })
        };
        let y = parse(cols[0])?;
        if y != 1.0 && y != -1.0 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("label {y} is not +1 or -1"),
            });
        }
        labels.push(y);
        rows.push(cols[1..].iter().map(|c| parse(c)).collect::<Result<Vec<_>>>()?);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, message: "dataset has no rows".into() });
    }
    Dataset::new(rows, labels)
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(data, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = fs::File::open(path)?;
    read_dataset(BufReader::new(f))
}
