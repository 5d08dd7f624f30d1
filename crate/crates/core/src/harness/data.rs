//! Labelled datasets: the bundled synthetic Gaussian mixture, CSV
//! (label first, features after) and IDX image/label pairs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{HarnessError, Result};
use crate::numeric::{PrecisionMode, Rng, Tensor};

/// Features `[samples, dim]` in f64 plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    /// `(height, width, channels)` when the rows are flattened NHWC images.
    image: Option<[usize; 3]>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if rows != labels.len() {
            return Err(HarnessError::Config(format!("{rows} feature rows but {} labels", labels.len())));
        }
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(HarnessError::LabelOutOfRange { label: label as i64, record, classes });
        }
        Ok(Self { features: features.to_precision(PrecisionMode::F64), labels, classes, image: None })
    }

    pub fn with_image(mut self, shape: [usize; 3]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.dim() {
            return Err(HarnessError::ShapeChain(format!("image {shape:?} does not match {} features", self.dim())));
        }
        self.image = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self) -> Option<[usize; 3]> {
        self.image
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Dataset {
            features: Tensor::from_raw(vec![indices.len(), d], data, PrecisionMode::F64),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image: self.image,
        }
    }

    /// Multiply every feature by `factor`.
    pub fn scaled(&self, factor: f64) -> Dataset {
        Dataset { features: self.features.scale(factor), ..self.clone() }
    }

    /// A minibatch quantized to `precision`.
    pub fn batch(&self, indices: &[usize], precision: PrecisionMode) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        (sub.features.to_precision(precision), sub.labels)
    }
}

/// Parameters of the synthetic Gaussian mixture: every class owns
/// `clusters_per_class` unit-variance clusters whose centers lie at distance
/// `separation` from the origin in random directions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub clusters_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { samples: 3072, features: 16, classes: 2, clusters_per_class: 4, separation: 3.0, seed: 20_180_101 }
    }
}

/// Draw the mixture and standardize every feature to zero mean and unit
/// variance. Labels cycle through the classes so they stay balanced.
pub fn synthetic_mixture(spec: &MixtureSpec) -> Result<Dataset> {
    if spec.samples == 0 || spec.features == 0 || spec.classes < 2 || spec.clusters_per_class == 0 {
        return Err(HarnessError::Config(format!("degenerate mixture {spec:?}")));
    }
    let d = spec.features;
    let mut rng = Rng::new(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes * spec.clusters_per_class)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.iter().map(|x| spec.separation * x / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.samples * d);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let cluster = label * spec.clusters_per_class + rng.index(spec.clusters_per_class);
        data.extend(centers[cluster].iter().map(|c| c + rng.normal()));
        labels.push(label);
    }
    for j in 0..d {
        let n = spec.samples as f64;
        let mean = (0..spec.samples).map(|i| data[i * d + j]).sum::<f64>() / n;
        let var = (0..spec.samples).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..spec.samples {
            data[i * d + j] = (data[i * d + j] - mean) / sd;
        }
    }
    Dataset::new(Tensor::from_f64(vec![spec.samples, d], data)?, labels, spec.classes)
}

fn csv_error(err: csv::Error) -> HarnessError {
    let offset = err.position().map(|p| p.byte()).unwrap_or(0);
    HarnessError::Parse { offset, message: err.to_string() }
}

/// Read `label,f1,f2,...` rows. A first row starting with the literal
/// `label` is a header. Without `classes`, the class count is the largest
/// label plus one.
pub fn read_csv<R: Read>(input: R, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    for (record_index, row) in reader.records().enumerate() {
        let row = row.map_err(csv_error)?;
        let offset = row.position().map(|p| p.byte()).unwrap_or(0);
        if record_index == 0 && row.get(0) == Some("label") {
            continue;
        }
        if row.len() < 2 {
            return Err(HarnessError::Parse { offset, message: "need a label and at least one feature".into() });
        }
        match width {
            None => width = Some(row.len() - 1),
            Some(w) if w != row.len() - 1 => {
                return Err(HarnessError::Parse {
                    offset,
                    message: format!("expected {w} features, found {}", row.len() - 1),
                })
            }
            _ => {}
        }
        let label: i64 = row[0]
            .parse()
            .map_err(|_| HarnessError::Parse { offset, message: format!("invalid label {:?}", &row[0]) })?;
        for field in row.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| HarnessError::Parse { offset, message: format!("invalid feature {field:?}") })?;
            if !v.is_finite() {
                return Err(HarnessError::Parse { offset, message: format!("non-finite feature {field:?}") });
            }
            data.push(v);
        }
        raw_labels.push(label);
    }
    let dim = width.ok_or_else(|| HarnessError::Parse { offset: 0, message: "no data rows".into() })?;
    let max_label = raw_labels.iter().copied().max().unwrap_or(0);
    let classes = classes.unwrap_or((max_label.max(0) + 1).max(2) as usize);
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (record, &label) in raw_labels.iter().enumerate() {
        if label < 0 || label as usize >= classes {
            return Err(HarnessError::LabelOutOfRange { label, record, classes });
        }
        labels.push(label as usize);
    }
    Dataset::new(Tensor::from_f64(vec![labels.len(), dim], data)?, labels, classes)
}

/// Write a header and one `label,features...` row per sample. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut record = vec![dataset.labels[i].to_string()];
        record.extend(dataset.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(HarnessError::Parse { offset: offset as u64, message: "truncated header".into() })
}

fn idx_header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(HarnessError::Parse {
            offset: 0,
            message: format!("bad magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    (0..dims).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect()
}

fn idx_payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    match bytes.len().cmp(&(start + len)) {
        std::cmp::Ordering::Less => Err(HarnessError::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated payload: expected {len} bytes after offset {start}"),
        }),
        std::cmp::Ordering::Greater => {
            Err(HarnessError::Parse { offset: (start + len) as u64, message: "trailing bytes after payload".into() })
        }
        std::cmp::Ordering::Equal => Ok(&bytes[start..]),
    }
}

/// Decode an unsigned-byte IDX image file and its label file. Pixels are
/// mapped to `value / 255`.
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset> {
    let dims = idx_header(images, IDX_IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = idx_payload(images, 16, count * rows * cols)?;
    let label_dims = idx_header(labels, IDX_LABELS_MAGIC, 1)?;
    if label_dims[0] != count {
        return Err(HarnessError::Parse { offset: 4, message: format!("{} labels for {count} images", label_dims[0]) });
    }
    let raw = idx_payload(labels, 8, count)?;
    let mut out = Vec::with_capacity(count);
    for (record, &l) in raw.iter().enumerate() {
        if l as usize >= classes {
            return Err(HarnessError::LabelOutOfRange { label: l as i64, record, classes });
        }
        out.push(l as usize);
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::from_f64(vec![count, rows * cols], data)?, out, classes)?.with_image([rows, cols, 1])
}

/// Encode a single-channel image dataset whose features are all of the
/// form `k / 255`.
pub fn write_idx<W: Write, V: Write>(dataset: &Dataset, mut images: W, mut labels: V) -> Result<()> {
    let [rows, cols, channels] =
        dataset.image.ok_or_else(|| HarnessError::Config("IDX output needs an image shape".into()))?;
    if channels != 1 {
        return Err(HarnessError::Config("IDX output supports one channel".into()));
    }
    let mut pixels = Vec::with_capacity(dataset.features.len());
    for &v in dataset.features.data() {
        let k = (v * 255.0).round();
        if !(0.0..=255.0).contains(&k) || k / 255.0 != v {
            return Err(HarnessError::Config(format!("feature {v} is not a byte pixel")));
        }
        pixels.push(k as u8);
    }
    images.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [dataset.len(), rows, cols] {
        images.write_all(&(d as u32).to_be_bytes())?;
    }
    images.write_all(&pixels)?;
    labels.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    labels.write_all(&(dataset.len() as u32).to_be_bytes())?;
    if let Some(&l) = dataset.labels.iter().find(|&&l| l > 255) {
        return Err(HarnessError::Config(format!("label {l} does not fit in a byte")));
    }
    labels.write_all(&dataset.labels.iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    Ok(())
}

const SPLIT_STREAM: u64 = 0x5917;

/// Seeded shuffle, then the first `round(len * train_fraction)` rows train
/// and the rest validate. Both parts keep ascending row order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(HarnessError::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(HarnessError::Config(format!("split of {n} rows at {train_fraction} leaves an empty part")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, SPLIT_STREAM).shuffle(&mut order);
    let (mut train, mut val) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(MixtureSpec),
    Csv { path: PathBuf, classes: Option<usize> },
    Idx { images: PathBuf, labels: PathBuf, classes: usize },
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_source(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(spec) => synthetic_mixture(spec),
        DataSource::Csv { path, classes } => read_csv(&read_file(path)?[..], *classes),
        DataSource::Idx { images, labels, classes } => parse_idx(&read_file(images)?, &read_file(labels)?, *classes),
    }
}

/// Load a source and split it into `(train, validation)`.
pub fn load_dataset(source: &DataSource, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    split(&load_source(source)?, train_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_row_csv_splits_in_half() {
        let text = "0,1.0,2.0\n1,3.0,4.0\n0,5.0,6.0\n1,7.5,-8.0\n";
        let ds = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (4, 2, 2));
        let (train, val) = split(&ds, 0.5, 1).unwrap();
        assert_eq!((train.len(), val.len()), (2, 2));
    }

    #[test]
    fn csv_errors_carry_offsets() {
        match read_csv("0,1.0\n1,abc\n".as_bytes(), None) {
            Err(HarnessError::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_csv("0,1.0\n3,2.0\n".as_bytes(), Some(2)),
            Err(HarnessError::LabelOutOfRange { label: 3, record: 1, .. })
        ));
        assert!(matches!(read_csv("-1,1.0\n".as_bytes(), None), Err(HarnessError::LabelOutOfRange { .. })));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ds = synthetic_mixture(&MixtureSpec { samples: 50, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..], Some(2)).unwrap(), ds);
    }

    #[test]
    fn idx_magic_and_round_trip() {
        let pixels: Vec<f64> = (0..2 * 6).map(|i| (i * 20) as f64 / 255.0).collect();
        let ds = Dataset::new(Tensor::from_f64(vec![2, 6], pixels).unwrap(), vec![3, 7], 10)
            .unwrap()
            .with_image([2, 3, 1])
            .unwrap();
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        write_idx(&ds, &mut images, &mut labels).unwrap();
        assert_eq!(parse_idx(&images, &labels, 10).unwrap(), ds);

        let mut bad = images.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx(&bad, &labels, 10), Err(HarnessError::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&images[..images.len() - 1], &labels, 10), Err(HarnessError::Parse { .. })));
        assert!(matches!(parse_idx(&images, &labels, 5), Err(HarnessError::LabelOutOfRange { label: 7, .. })));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let ds = synthetic_mixture(&MixtureSpec { samples: 101, ..Default::default() }).unwrap();
        let (a, b) = split(&ds, 0.7, 9).unwrap();
        assert_eq!(a.len() + b.len(), 101);
        let mut rows: Vec<Vec<u64>> = a
            .features()
            .data()
            .chunks(ds.dim())
            .chain(b.features().data().chunks(ds.dim()))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 101);
        assert_eq!(split(&ds, 0.7, 9).unwrap(), (a, b));
        assert!(split(&ds, 1.0, 9).is_err());
    }

    #[test]
    fn mixture_is_standardized_and_balanced() {
        let ds = synthetic_mixture(&MixtureSpec::default()).unwrap();
        let d = ds.dim();
        for j in 0..d {
            let col: Vec<f64> = (0..ds.len()).map(|i| ds.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), ds.len() / 2);
    }
}
