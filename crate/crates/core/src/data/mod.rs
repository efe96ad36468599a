//! Datasets: directory loading, deterministic splits and synthetic data.

mod pnm;
mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pgm, write_pnm};
pub use synth::{generate_deepfake_style, generate_synthetic, MAX_SYNTH_CLASSES};

use crate::config::{DatasetSource, ExperimentConfig, SplitFractions, SynthFamily, TaskKind};
use crate::error::{Error, Result};
use crate::patch::ImageTensor;
use crate::rng::RngKey;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Attributes(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1 x 1 x 3 x H x W`, values in `[0, 1]`.
    pub image: ImageTensor,
    pub label: Label,
    pub path: Option<PathBuf>,
}

/// Labelled images sharing one resolution. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Classes, or attributes for a multi-attribute task.
    pub num_classes: usize,
    pub task: TaskKind,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, task: TaskKind) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dims = first.image.dims();
            for s in &samples {
                if s.image.dims() != dims || dims[0] != 1 || dims[2] != 3 {
                    return Err(Error::InconsistentDims(format!(
                        "sample dims {:?} vs {dims:?} (need 1 x 1 x 3 x H x W)",
                        s.image.dims()
                    )));
                }
                match (&s.label, task) {
                    (Label::Class(c), TaskKind::Multiclass) if *c >= num_classes => {
                        return Err(Error::LabelOutOfRange {
                            label: *c,
                            classes: num_classes,
                        })
                    }
                    (Label::Class(_), TaskKind::Multiclass) => {}
                    (Label::Attributes(a), TaskKind::MultiAttribute) if a.len() == num_classes => {}
                    _ => {
                        return Err(Error::InconsistentDims(format!(
                            "label {:?} does not fit a {task:?} task with {num_classes} outputs",
                            s.label
                        )))
                    }
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image side lengths `(height, width)`, if any sample exists.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height, s.image.width))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            task: self.task,
        }
    }

    /// Stacks the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(ImageTensor, Vec<Label>)> {
        let images = ImageTensor::stack(indices.iter().map(|&i| &self.samples[i].image))?;
        let labels = indices.iter().map(|&i| self.samples[i].label.clone()).collect();
        Ok((images, labels))
    }

    /// Writes every sample as `NNNNN.ppm` plus `labels.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = match self.task {
            TaskKind::Multiclass => "filename,label\n".to_string(),
            TaskKind::MultiAttribute => {
                let attrs: Vec<String> = (0..self.num_classes).map(|i| format!("attr_{i}")).collect();
                format!("filename,{}\n", attrs.join(","))
            }
        };
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("{i:05}.ppm");
            write_pnm(&dir.join(&name), &s.image)?;
            let label = match &s.label {
                Label::Class(c) => c.to_string(),
                Label::Attributes(a) => a
                    .iter()
                    .map(|&b| if b { "1" } else { "0" })
                    .collect::<Vec<_>>()
                    .join(","),
            };
            csv.push_str(&format!("{name},{label}\n"));
        }
        let path = dir.join("labels.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide with
/// input corners.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out <= 1 || inp <= 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let x0 = (x.floor() as usize).min(inp - 1);
        let x1 = (x0 + 1).min(inp - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = ImageTensor::zeros(img.batch, img.frames, img.channels, height, width);
    for b in 0..img.batch {
        for t in 0..img.frames {
            for c in 0..img.channels {
                let src = img.plane(b, t, c);
                let dst = out.plane_mut(b, t, c);
                for r in 0..height {
                    let (r0, r1, fr) = coord(r, height, img.height);
                    for col in 0..width {
                        let (c0, c1, fc) = coord(col, width, img.width);
                        let at = |y: usize, x: usize| src[y * img.width + x];
                        let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                        let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                        dst[r * width + col] = top * (1.0 - fr) + bottom * fr;
                    }
                }
            }
        }
    }
    out
}

#[cfg(feature = "png")]
fn decode_png(path: &Path, bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageTensor::zeros(1, 1, 3, h, w);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out.plane_mut(0, 0, c)[i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(not(feature = "png"))]
fn decode_png(path: &Path, _bytes: &[u8]) -> Result<ImageTensor> {
    Err(Error::UnsupportedFormat {
        path: path.to_path_buf(),
        msg: "PNG support requires the `png` feature".into(),
    })
}

/// Reads a netpbm or PNG file as a `1 x 1 x C x H x W` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else {
        decode_pnm(path, &bytes)
    }
}

/// Three-channel image at `size x size`: grayscale is replicated.
fn load_rgb(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = read_image(path)?;
    let img = if img.channels == 1 {
        let mut rgb = ImageTensor::zeros(1, 1, 3, img.height, img.width);
        for c in 0..3 {
            rgb.plane_mut(0, 0, c).copy_from_slice(img.plane(0, 0, 0));
        }
        rgb
    } else {
        img
    };
    Ok(resize_bilinear(&img, size, size))
}

fn parse_labels(path: &Path, text: &str, num_classes: usize) -> Result<(TaskKind, Vec<(String, Label)>)> {
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| csv_err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let task = match cols[..] {
        ["filename", "label"] => TaskKind::Multiclass,
        ["filename", ref attrs @ ..]
            if !attrs.is_empty()
                && attrs.iter().enumerate().all(|(i, a)| *a == format!("attr_{i}")) =>
        {
            if attrs.len() != num_classes {
                return Err(csv_err(
                    1,
                    format!("{} attribute columns, expected {num_classes}", attrs.len()),
                ));
            }
            TaskKind::MultiAttribute
        }
        _ => {
            return Err(csv_err(
                1,
                "header must be `filename,label` or `filename,attr_0,...`".into(),
            ))
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(csv_err(
                line_no,
                format!("{} fields, expected {}", fields.len(), cols.len()),
            ));
        }
        let label = match task {
            TaskKind::Multiclass => {
                let c: usize = fields[1]
                    .parse()
                    .map_err(|_| csv_err(line_no, format!("bad label `{}`", fields[1])))?;
                if c >= num_classes {
                    return Err(csv_err(
                        line_no,
                        format!("label {c} out of range for {num_classes} classes"),
                    ));
                }
                Label::Class(c)
            }
            TaskKind::MultiAttribute => Label::Attributes(
                fields[1..]
                    .iter()
                    .map(|f| match *f {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(csv_err(line_no, format!("bad attribute bit `{other}`"))),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        rows.push((fields[0].to_string(), label));
    }
    Ok((task, rows))
}

/// Loads images listed in a labels CSV, resized to `size x size`. The header
/// (`filename,label` or `filename,attr_0,...`) selects the task kind.
pub fn load_dataset(root: &Path, labels: &Path, num_classes: usize, size: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
    let (task, rows) = parse_labels(labels, &text, num_classes)?;
    let samples = rows
        .into_par_iter()
        .map(|(name, label)| {
            let path = root.join(name);
            Ok(Sample {
                image: load_rgb(&path, size)?,
                label,
                path: Some(path),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, num_classes, task)
}

/// Builds the dataset an experiment config describes.
pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            family: SynthFamily::Textures,
            per_class,
            classes,
        } => generate_synthetic(*per_class, *classes, cfg.image_size, cfg.seed),
        DatasetSource::Synthetic {
            family: SynthFamily::Deepfake,
            per_class,
            ..
        } => generate_deepfake_style(*per_class, cfg.image_size, cfg.seed),
        DatasetSource::Directory { root, labels } => {
            load_dataset(root, labels, cfg.num_classes, cfg.image_size)
        }
    }
}

/// Train/val/test partition as index lists into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle then contiguous slicing. Train and test must be nonempty;
/// validation may be empty.
pub fn split(n: usize, fractions: SplitFractions, seed: u64) -> Result<Split> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(
            "split fractions must be in [0, 1] and sum to 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngKey::new(seed).stream("split").rng());
    let n_train = ((fractions.train * n as f64).round() as usize).min(n);
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    if order.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    Ok(Split {
        train: order,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let s = split(100, SplitFractions::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = [&s.train[..], &s.val[..], &s.test[..]].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split(100, SplitFractions::default(), 3).unwrap());
        assert_ne!(s, split(100, SplitFractions::default(), 4).unwrap());
    }

    #[test]
    fn empty_test_split_rejected() {
        let f = SplitFractions {
            train: 0.5,
            val: 0.5,
            test: 0.0,
        };
        assert!(matches!(split(10, f, 0), Err(Error::EmptySplit("test"))));
    }

    #[test]
    fn resize_preserves_corners_and_constants() {
        let img = ImageTensor::from_values([1, 1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let big = resize_bilinear(&img, 3, 3);
        let p = big.plane(0, 0, 0);
        assert_eq!((p[0], p[2], p[6], p[8]), (0.0, 1.0, 0.5, 0.25));
        assert_eq!(p[1], 0.5);
        assert_eq!(p[4], (0.0 + 1.0 + 0.5 + 0.25) / 4.0);
        let flat = ImageTensor::from_values([1, 1, 1, 5, 7], vec![0.3; 35]).unwrap();
        assert!(resize_bilinear(&flat, 4, 4).values.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let p = Path::new("labels.csv");
        let err = parse_labels(p, "filename,label\na.ppm,1\nb.ppm,9\n", 8).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let err = parse_labels(p, "filename,label\na.ppm\n", 8).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 2, .. }));
        let (task, rows) = parse_labels(p, "filename,attr_0,attr_1\na.ppm,1,0\n", 2).unwrap();
        assert_eq!(task, TaskKind::MultiAttribute);
        assert_eq!(rows[0].1, Label::Attributes(vec![true, false]));
    }
}
