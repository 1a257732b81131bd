//! Dataset ingestion, storage formats, noise injection, splitting, and
//! synthetic structured-image generation.
//!
//! Two interchangeable on-disk formats are supported: a plain CSV (one row
//! per sample, last column the integer label) and a binary format with
//! magic `FGRD` that round-trips bit-exactly.

use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::RngState;

const BIN_MAGIC: &[u8; 4] = b"FGRD";
const BIN_VERSION: u32 = 1;

/// Labeled sample matrix with grid geometry metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DenseMatrix,
    y: Vec<u32>,
    geometry: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: Vec<u32>, classes: usize, geometry: Vec<usize>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one sample".into(),
            ));
        }
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if classes == 0 {
            return Err(Error::InvalidArgument(
                "class count must be positive".into(),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        let geometry = if geometry.is_empty() {
            vec![x.cols()]
        } else {
            geometry
        };
        if geometry.iter().product::<usize>() != x.cols() {
            return Err(Error::DimensionMismatch(format!(
                "geometry {:?} does not cover p={}",
                geometry,
                x.cols()
            )));
        }
        Ok(Dataset {
            x,
            y,
            geometry,
            classes,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn geometry(&self) -> &[usize] {
        &self.geometry
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn labels(&self) -> &[u32] {
        &self.y
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn label(&self, i: usize) -> u32 {
        self.y[i]
    }

    /// Row subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut x = DenseMatrix::zeros(indices.len(), self.p());
        let mut y = Vec::with_capacity(indices.len());
        for (out, &i) in indices.iter().enumerate() {
            x.row_mut(out).copy_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        Dataset {
            x,
            y,
            geometry: self.geometry.clone(),
            classes: self.classes,
        }
    }

    /// Replaces the geometry metadata (the feature count must not change).
    pub fn with_geometry(mut self, geometry: Vec<usize>) -> Result<Self> {
        if geometry.iter().product::<usize>() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "geometry {:?} does not cover p={}",
                geometry,
                self.p()
            )));
        }
        self.geometry = geometry;
        Ok(self)
    }

    /// Per-feature standardization to zero mean, unit variance (constant
    /// features are left centered).
    pub fn standardized(&self) -> Dataset {
        let n = self.n();
        let p = self.p();
        let mut mean = vec![0.0; p];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(self.x.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; p];
        for i in 0..n {
            for j in 0..p {
                let d = self.x[(i, j)] - mean[j];
                var[j] += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0 / (v / n as f64).sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut x = self.x.clone();
        for i in 0..n {
            let row = x.row_mut(i);
            for j in 0..p {
                row[j] = (row[j] - mean[j]) * scale[j];
            }
        }
        Dataset {
            x,
            y: self.y.clone(),
            geometry: self.geometry.clone(),
            classes: self.classes,
        }
    }
}

/// Loader options shared by the CSV and binary readers.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Declared class count; inferred as `max label + 1` when absent.
    pub classes: Option<usize>,
    /// Grid geometry; defaults to 1-D `[p]` for CSV, stored value for binary.
    pub geometry: Option<Vec<usize>>,
    /// Standardize features after load (off by default).
    pub standardize: bool,
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_with(path, &LoadOptions::default())
}

pub fn load_csv_with(path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::parse(
                path,
                format!("line {}: need features and a label", lineno + 1),
            ));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::parse(
                    path,
                    format!(
                        "line {}: ragged row ({} fields, expected {w})",
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
            _ => {}
        }
        for field in &fields[..fields.len() - 1] {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(
                    path,
                    format!("line {}: non-numeric feature {field:?}", lineno + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    format!("line {}: non-finite feature", lineno + 1),
                ));
            }
            values.push(v);
        }
        let label_field = fields[fields.len() - 1].trim();
        let label_value: f64 = label_field.parse().map_err(|_| {
            Error::parse(
                path,
                format!("line {}: non-numeric label {label_field:?}", lineno + 1),
            )
        })?;
        if label_value.fract() != 0.0 || label_value < 0.0 || label_value > u32::MAX as f64 {
            return Err(Error::parse(
                path,
                format!(
                    "line {}: label {label_field:?} is not a small nonnegative integer",
                    lineno + 1
                ),
            ));
        }
        labels.push(label_value as u32);
    }
    let width = width.ok_or_else(|| Error::parse(path, "no data rows"))?;
    let p = width - 1;
    let n = labels.len();
    let x = DenseMatrix::from_vec(n, p, values)?;
    finish_load(path, x, labels, options)
}

fn finish_load(
    path: &Path,
    x: DenseMatrix,
    labels: Vec<u32>,
    options: &LoadOptions,
) -> Result<Dataset> {
    let inferred = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let classes = options.classes.unwrap_or(inferred);
    if inferred > classes {
        return Err(Error::parse(
            path,
            format!(
                "label {} out of range for declared l={classes}",
                inferred - 1
            ),
        ));
    }
    let geometry = options.geometry.clone().unwrap_or_default();
    let ds = Dataset::new(x, labels, classes, geometry)?;
    Ok(if options.standardize {
        ds.standardized()
    } else {
        ds
    })
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..ds.n() {
        let mut line = String::new();
        for v in ds.sample(i) {
            // Shortest round-trip formatting keeps CSV and binary loads identical.
            line.push_str(&format!("{v}"));
            line.push(',');
        }
        line.push_str(&format!("{}", ds.label(i)));
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_bin(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(BIN_MAGIC).map_err(io)?;
    w.write_all(&BIN_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.n() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.p() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.classes() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(ds.geometry().len() as u32).to_le_bytes())
        .map_err(io)?;
    for &dim in ds.geometry() {
        w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
    }
    for v in ds.x().data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for &label in ds.labels() {
        w.write_all(&label.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_bin(path: &Path) -> Result<Dataset> {
    load_bin_with(path, &LoadOptions::default())
}

pub fn load_bin_with(path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::parse(path, "truncated header"))?;
    if &magic != BIN_MAGIC {
        return Err(Error::parse(
            path,
            format!("bad magic {magic:?}, expected FGRD"),
        ));
    }
    let version = read_u32(&mut r, path)?;
    if version != BIN_VERSION {
        return Err(Error::parse(path, format!("unsupported version {version}")));
    }
    let n = read_u64(&mut r, path)? as usize;
    let p = read_u64(&mut r, path)? as usize;
    let classes = read_u32(&mut r, path)? as usize;
    let rank = read_u32(&mut r, path)? as usize;
    if rank > 3 {
        return Err(Error::parse(
            path,
            format!("geometry rank {rank} out of range"),
        ));
    }
    let mut geometry = Vec::with_capacity(rank);
    for _ in 0..rank {
        geometry.push(read_u64(&mut r, path)? as usize);
    }
    let mut values = vec![
        0.0f64;
        n.checked_mul(p)
            .ok_or_else(|| Error::parse(path, "n*p overflow"))?
    ];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::parse(path, "truncated feature block"))?;
        *v = f64::from_le_bytes(buf);
    }
    let mut labels = Vec::with_capacity(n);
    let mut lbuf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut lbuf)
            .map_err(|_| Error::parse(path, "truncated label block"))?;
        labels.push(u32::from_le_bytes(lbuf));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::parse(path, "non-finite feature value"));
    }
    let x = DenseMatrix::from_vec(n, p, values)?;
    let mut merged = options.clone();
    merged.classes = Some(options.classes.unwrap_or(classes));
    if merged.geometry.is_none() {
        merged.geometry = Some(geometry);
    }
    finish_load(path, x, labels, &merged)
}

/// Additive zero-mean Gaussian noise description.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// `X' = X + N(0, sigma^2)` i.i.d., no clamping.
pub fn add_noise(ds: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    if spec.sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma {} must be >= 0",
            spec.sigma
        )));
    }
    if spec.sigma == 0.0 {
        return Ok(ds.clone());
    }
    let mut rng = RngState::new(spec.seed);
    let mut x = ds.x().clone();
    for v in x.data_mut() {
        *v += spec.sigma * rng.normal();
    }
    Dataset::new(
        x,
        ds.labels().to_vec(),
        ds.classes(),
        ds.geometry().to_vec(),
    )
}

/// Stratified train/test split. Test sizes are allocated per class by
/// largest remainder so the overall fraction is met while class proportions
/// stay within one sample.
pub fn split(ds: &Dataset, test_fraction: f64, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let classes = ds.classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..ds.n() {
        per_class[ds.label(i) as usize].push(i);
    }
    for (c, members) in per_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} sample(s), need at least 2 to split",
                members.len()
            )));
        }
    }
    let total_test = (test_fraction * ds.n() as f64).round() as usize;
    let total_test = total_test.clamp(1, ds.n() - 1);

    // Largest-remainder allocation, capped to keep one training sample per class.
    let mut base: Vec<usize> = Vec::with_capacity(classes);
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(classes);
    for (c, members) in per_class.iter().enumerate() {
        let exact = test_fraction * members.len() as f64;
        let b = (exact.floor() as usize).min(members.len() - 1);
        base.push(b);
        remainders.push((exact - b as f64, c));
    }
    let mut assigned: usize = base.iter().sum();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut cursor = 0;
    while assigned < total_test && cursor < remainders.len() {
        let c = remainders[cursor].1;
        if base[c] + 1 <= per_class[c].len() - 1 {
            base[c] += 1;
            assigned += 1;
        }
        cursor += 1;
    }

    let mut test_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (c, members) in per_class.iter().enumerate() {
        let mut shuffled = members.clone();
        rng.shuffle(&mut shuffled);
        let (test, train) = shuffled.split_at(base[c]);
        test_idx.extend_from_slice(test);
        train_idx.extend_from_slice(train);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}

/// Weight of the class-specific blob field in a prototype; the rest is the
/// scaffold shared by every class. Small enough that classes are subtle
/// (the high-dimensional small-sample regime), large enough to dominate the
/// intra-class jitter.
const CLASS_FIELD_WEIGHT: f64 = 0.25;

fn blob_field(
    h: usize,
    w: usize,
    blobs: usize,
    sigma_lo: f64,
    sigma_hi: f64,
    rng: &mut RngState,
) -> Vec<f64> {
    let mut img = vec![0.0f64; h * w];
    for _ in 0..blobs {
        let amp = rng.uniform_in(0.3, 1.0);
        let cx = rng.uniform_in(0.0, w as f64);
        let cy = rng.uniform_in(0.0, h as f64);
        let sigma = rng.uniform_in(sigma_lo, sigma_hi);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                img[y * w + x] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in img.iter_mut() {
        *v = (*v - lo) / span;
    }
    img
}

/// Synthetic structured-image dataset: every class shares one smooth base
/// image (as face photographs share the face layout) and adds its own
/// piecewise-smooth field of 5 to 15 random Gaussian blobs, plus small
/// intra-class jitter. Prototype values land in `[0, 1]` and neighboring
/// pixels are strongly correlated, which is the structure the grouping
/// regularizer exploits.
pub fn synth_faces(
    classes: usize,
    per_class: usize,
    dims: (usize, usize),
    rng: &mut RngState,
) -> Result<Dataset> {
    let (h, w) = dims;
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "dims {h}x{w} too small, need at least 8x8"
        )));
    }
    if classes == 0 || per_class < 2 {
        return Err(Error::InvalidArgument(
            "need at least one class and two samples per class".into(),
        ));
    }
    let p = h * w;
    let min_side = h.min(w) as f64;
    let base = blob_field(h, w, 8, min_side / 8.0, min_side / 3.0, rng);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let blobs = 5 + rng.index(11); // 5..=15
        let field = blob_field(h, w, blobs, min_side / 16.0, min_side / 6.0, rng);
        let img: Vec<f64> = base
            .iter()
            .zip(&field)
            .map(|(b, f)| (1.0 - CLASS_FIELD_WEIGHT) * b + CLASS_FIELD_WEIGHT * f)
            .collect();
        prototypes.push(img);
    }

    const INTRA_CLASS_SIGMA: f64 = 0.05;
    let n = classes * per_class;
    let mut x = DenseMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for c in 0..classes {
        for s in 0..per_class {
            let row = x.row_mut(c * per_class + s);
            for (out, proto) in row.iter_mut().zip(&prototypes[c]) {
                *out = proto + INTRA_CLASS_SIGMA * rng.normal();
            }
            y.push(c as u32);
        }
    }
    Dataset::new(x, y, classes, vec![h, w])
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::parse(path, "truncated file"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::parse(path, "truncated file"))?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_small_example() {
        let f = write_temp("1,2,3,0\n4,5,6,1\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.classes()), (2, 3, 2));
        assert_eq!(ds.sample(0), &[1.0, 2.0, 3.0]);
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.geometry(), &[3]);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        assert!(load_csv(write_temp("1,2,0\n3,1\n").path()).is_err()); // ragged
        assert!(load_csv(write_temp("1,x,0\n").path()).is_err()); // non-numeric
        assert!(load_csv(write_temp("1,2,1.5\n").path()).is_err()); // fractional label
        assert!(load_csv(write_temp("1,inf,0\n").path()).is_err()); // non-finite
        assert!(load_csv(write_temp("").path()).is_err()); // empty
    }

    #[test]
    fn declared_class_count_is_validated() {
        let f = write_temp("1,2,7\n3,4,0\n");
        let opts = LoadOptions {
            classes: Some(5),
            ..Default::default()
        };
        assert!(load_csv_with(f.path(), &opts).is_err());
        let opts = LoadOptions {
            classes: Some(8),
            ..Default::default()
        };
        assert_eq!(load_csv_with(f.path(), &opts).unwrap().classes(), 8);
    }

    #[test]
    fn bin_roundtrip_is_bitwise() {
        let mut rng = RngState::new(4);
        let ds = synth_faces(3, 2, (8, 9), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_bin(&ds, &path).unwrap();
        let back = load_bin(&path).unwrap();
        assert_eq!(back.geometry(), &[8, 9]);
        assert_eq!(back.labels(), ds.labels());
        let same = ds
            .x()
            .data()
            .iter()
            .zip(back.x().data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn csv_and_bin_loads_agree() {
        let mut rng = RngState::new(6);
        let ds = synth_faces(2, 3, (8, 8), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("ds.csv");
        let bin = dir.path().join("ds.bin");
        save_csv(&ds, &csv).unwrap();
        save_bin(&ds, &bin).unwrap();
        let from_csv = load_csv(&csv).unwrap();
        let from_bin = load_bin(&bin).unwrap();
        assert_eq!(from_csv.x(), from_bin.x());
        assert_eq!(from_csv.labels(), from_bin.labels());
    }

    #[test]
    fn bin_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_bin(&path).is_err());

        let mut rng = RngState::new(4);
        let ds = synth_faces(2, 2, (8, 8), &mut rng).unwrap();
        let good = dir.path().join("good.bin");
        save_bin(&ds, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_bin(&cut).is_err());
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let mut rng = RngState::new(1);
        let ds = synth_faces(2, 2, (8, 8), &mut rng).unwrap();
        let out = add_noise(
            &ds,
            &NoiseSpec {
                sigma: 0.0,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn noise_matches_requested_sigma() {
        let x = DenseMatrix::zeros(200, 500);
        let ds = Dataset::new(x, vec![0; 200], 1, vec![]).unwrap();
        let noisy = add_noise(
            &ds,
            &NoiseSpec {
                sigma: 0.5,
                seed: 9,
            },
        )
        .unwrap();
        let n = (200 * 500) as f64;
        let mean: f64 = noisy.x().data().iter().sum::<f64>() / n;
        let var: f64 = noisy
            .x()
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!((var.sqrt() - 0.5).abs() < 0.01, "std {}", var.sqrt());

        let other = add_noise(
            &ds,
            &NoiseSpec {
                sigma: 0.5,
                seed: 10,
            },
        )
        .unwrap();
        assert_ne!(noisy.x().data()[0], other.x().data()[0]);
        let again = add_noise(
            &ds,
            &NoiseSpec {
                sigma: 0.5,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(noisy, again);
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let mut rng = RngState::new(2);
        let ds = synth_faces(40, 10, (8, 8), &mut rng).unwrap();
        let mut srng = RngState::new(5);
        let (train, test) = split(&ds, 0.33, &mut srng).unwrap();
        assert_eq!(train.n() + test.n(), 400);
        assert_eq!(test.n(), 132);
        let mut per_class = vec![0usize; 40];
        for i in 0..test.n() {
            per_class[test.label(i) as usize] += 1;
        }
        assert!(per_class.iter().all(|&c| c >= 3 && c <= 4));

        let mut srng2 = RngState::new(5);
        let (train2, test2) = split(&ds, 0.33, &mut srng2).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_fractions() {
        let x = DenseMatrix::from_vec(3, 2, vec![0.0; 6]).unwrap();
        let ds = Dataset::new(x, vec![0, 0, 1], 2, vec![]).unwrap();
        let mut rng = RngState::new(0);
        assert!(split(&ds, 0.5, &mut rng).is_err());
        let mut rng = RngState::new(0);
        let ok = Dataset::new(
            DenseMatrix::from_vec(4, 2, vec![0.0; 8]).unwrap(),
            vec![0, 0, 1, 1],
            2,
            vec![],
        )
        .unwrap();
        assert!(split(&ok, 0.0, &mut rng).is_err());
        assert!(split(&ok, 1.0, &mut rng).is_err());
    }

    #[test]
    fn synth_shapes_and_labels() {
        let mut rng = RngState::new(0);
        let ds = synth_faces(5, 4, (8, 10), &mut rng).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.classes()), (20, 80, 5));
        assert_eq!(ds.geometry(), &[8, 10]);
        assert_eq!(ds.label(0), 0);
        assert_eq!(ds.label(19), 4);

        let mut rng = RngState::new(0);
        let single = synth_faces(1, 3, (8, 8), &mut rng).unwrap();
        assert!(single.labels().iter().all(|&c| c == 0));

        let mut rng = RngState::new(0);
        assert!(synth_faces(2, 2, (4, 64), &mut rng).is_err());
        assert!(synth_faces(2, 1, (8, 8), &mut rng).is_err());
    }

    #[test]
    fn synth_prototypes_are_spatially_correlated() {
        let mut rng = RngState::new(12);
        let (h, w) = (16, 16);
        let ds = synth_faces(6, 4, (h, w), &mut rng).unwrap();
        // Class-mean images stand in for the prototypes.
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for c in 0..6 {
            let mut mean = vec![0.0; h * w];
            for s in 0..4 {
                for (m, v) in mean.iter_mut().zip(ds.sample(c * 4 + s)) {
                    *m += v / 4.0;
                }
            }
            for y in 0..h {
                for x in 0..w - 1 {
                    pairs.push((mean[y * w + x], mean[y * w + x + 1]));
                }
            }
        }
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (a, b) in &pairs {
            cov += (a - mx) * (b - my);
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
        }
        let r = cov / (vx.sqrt() * vy.sqrt());
        assert!(r >= 0.5, "neighbor correlation {r}");
    }

    #[test]
    fn synth_classes_are_separable_noise_free() {
        use crate::glm::{
            evaluate, train, GlmFamily, GlmModel, Optimizer, Regularizer, TrainConfig,
        };
        let mut rng = RngState::new(40);
        let ds = synth_faces(6, 4, (12, 12), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            minibatch: ds.n(), // full batch
            learning_rate: 1.0,
            optimizer: Optimizer::Sgd,
            regularizer: Regularizer::None,
            seed: 0,
            eval_every: 0,
        };
        let model = GlmModel::zeros(ds.classes(), ds.p(), GlmFamily::Logistic);
        let (model, _) = train(model, &ds, None, &cfg).unwrap();
        let acc = evaluate(&model, &ds).unwrap();
        assert!(acc >= 0.99, "noise-free train accuracy {acc}");
    }

    #[test]
    fn bin_header_layout_is_pinned() {
        let x = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ds = Dataset::new(x, vec![0, 1], 2, vec![3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_bin(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FGRD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2); // n
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3); // p
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2); // classes
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1); // rank
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 3); // dim
        let first = f64::from_le_bytes(bytes[40..48].try_into().unwrap());
        assert_eq!(first, 1.0);
        // 6 features then 2 u32 labels.
        assert_eq!(bytes.len(), 40 + 6 * 8 + 2 * 4);
        assert_eq!(
            u32::from_le_bytes(bytes[40 + 48..40 + 52].try_into().unwrap()),
            0
        );
        assert_eq!(
            u32::from_le_bytes(bytes[40 + 52..40 + 56].try_into().unwrap()),
            1
        );
    }
}
