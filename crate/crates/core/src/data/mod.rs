//! Dataset ingestion: IDX files, PNG folders and manifests, preprocessing to
//! square grayscale images in `[0, 1]`, and the synthetic spline corpus.

mod idx;
mod image;
mod synthetic;

pub use idx::{encode_idx, load_idx, parse_idx, IdxArray, IdxError, IdxFileError, IMAGES_MAGIC, LABELS_MAGIC};
pub use image::{load_png_gray, preprocess, resize_bilinear, PngError};
pub use synthetic::{make_synthetic, planted_shape, StrokeStyle, SyntheticData, SyntheticSpec, PLANTED_SHAPES};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Side length every image is resampled to.
pub const IMAGE_SIZE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train or test)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Idx(#[from] IdxFileError),
    #[error(transparent)]
    Png(#[from] PngError),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("dataset {0} not found")]
    Missing(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Preprocessed images of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub split: Split,
    pub size: usize,
    /// Row-major `size x size` images in `[0, 1]`.
    pub images: Vec<Vec<f32>>,
    pub labels: Option<Vec<u32>>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Index permutation fixed by `seed`.
    pub fn shuffled(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    pub fn subset(&self, idx: &[usize]) -> ImageDataset {
        ImageDataset {
            name: self.name.clone(),
            split: self.split,
            size: self.size,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Writes every image as a PNG under `dir/images` plus `dir/manifest.tsv`.
    pub fn save_png_folder(&self, dir: &Path) -> Result<(), DataError> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        let mut manifest = String::new();
        for (i, img) in self.images.iter().enumerate() {
            let rel = format!("images/{i:06}.png");
            let path = dir.join(&rel);
            crate::renderer::save_png(&path, img, self.size, self.size).map_err(io_err(&path))?;
            let label = self.labels.as_ref().map_or(0, |l| l[i]);
            manifest.push_str(&format!("{rel}\t{label}\n"));
        }
        let mpath = dir.join("manifest.tsv");
        fs::write(&mpath, manifest).map_err(io_err(&mpath))
    }
}

/// Runs `f` over `items` on up to `workers` threads, keeping order.
fn par_map<I: Sync, O: Send, E: Send>(
    items: &[I],
    workers: usize,
    f: impl Fn(&I) -> Result<O, E> + Sync,
) -> Result<Vec<O>, E> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<O>, E>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>, E>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Images (and optional labels) from IDX files. `transpose` swaps rows and
/// columns of each image, as EMNIST stores them column-major.
pub fn load_idx_dataset(
    name: &str,
    split: Split,
    images: &Path,
    labels: Option<&Path>,
    invert: bool,
    transpose: bool,
) -> Result<ImageDataset, DataError> {
    let arr = load_idx(images)?;
    if arr.dims.len() != 3 {
        return Err(DataError::Invalid(format!("{}: expected an image file", images.display())));
    }
    let (n, h, w) = (arr.dims[0], arr.dims[1], arr.dims[2]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut raw = arr.data[i * h * w..(i + 1) * h * w].to_vec();
        if transpose {
            raw = (0..h * w).map(|k| raw[(k % w) * w + k / w]).collect();
        }
        out.push(preprocess(&raw, h, w, IMAGE_SIZE, invert));
    }
    let labels = match labels {
        Some(p) => {
            let l = load_idx(p)?;
            if l.dims.len() != 1 || l.dims[0] != n {
                return Err(DataError::Invalid(format!(
                    "{}: {} labels for {n} images",
                    p.display(),
                    l.dims.first().copied().unwrap_or(0)
                )));
            }
            Some(l.data.iter().map(|&v| v as u32).collect())
        }
        None => None,
    };
    Ok(ImageDataset {
        name: name.into(),
        split,
        size: IMAGE_SIZE,
        images: out,
        labels,
    })
}

/// Parses `path<TAB>label` lines; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, u32)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| DataError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            msg: msg.into(),
        };
        let (p, l) = line.split_once('\t').ok_or_else(|| bad("expected path<TAB>label"))?;
        let label = l.trim().parse().map_err(|_| bad("label is not a non-negative integer"))?;
        out.push((base.join(p), label));
    }
    Ok(out)
}

fn load_pngs(paths: &[PathBuf], invert: bool, workers: usize) -> Result<Vec<Vec<f32>>, DataError> {
    par_map(paths, workers, |p| {
        let (g, h, w) = load_png_gray(p)?;
        Ok(preprocess(&g, h, w, IMAGE_SIZE, invert))
    })
}

pub fn load_manifest(name: &str, split: Split, path: &Path, invert: bool, workers: usize) -> Result<ImageDataset, DataError> {
    let entries = read_manifest(path)?;
    let paths: Vec<PathBuf> = entries.iter().map(|(p, _)| p.clone()).collect();
    Ok(ImageDataset {
        name: name.into(),
        split,
        size: IMAGE_SIZE,
        images: load_pngs(&paths, invert, workers)?,
        labels: Some(entries.iter().map(|(_, l)| *l).collect()),
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// A directory of PNGs. Sub-directories are classes, labelled by their
/// sorted position (nested alphabet/character folders are flattened into
/// one class per leaf folder). Loose PNGs get no labels.
pub fn load_png_folder(name: &str, split: Split, dir: &Path, invert: bool, workers: usize) -> Result<ImageDataset, DataError> {
    let mut classes: Vec<Vec<PathBuf>> = Vec::new();
    let mut loose = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = sorted_entries(&d)?;
        let pngs: Vec<PathBuf> = entries.iter().filter(|p| is_png(p)).cloned().collect();
        if d == dir {
            loose = pngs;
        } else if !pngs.is_empty() {
            classes.push(pngs);
        }
        let mut subdirs: Vec<PathBuf> = entries.into_iter().filter(|p| p.is_dir()).collect();
        subdirs.reverse();
        stack.extend(subdirs);
    }
    let (paths, labels) = if classes.is_empty() {
        (loose, None)
    } else {
        let labels = classes
            .iter()
            .enumerate()
            .flat_map(|(c, v)| std::iter::repeat_n(c as u32, v.len()))
            .collect();
        (classes.concat(), Some(labels))
    };
    if paths.is_empty() {
        return Err(DataError::Invalid(format!("{}: no PNG images", dir.display())));
    }
    Ok(ImageDataset {
        name: name.into(),
        split,
        size: IMAGE_SIZE,
        images: load_pngs(&paths, invert, workers)?,
        labels,
    })
}

fn check_count(ds: &ImageDataset, expected: usize) {
    if ds.len() == expected {
        log::info!("{} {:?}: {} images", ds.name, ds.split, ds.len());
    } else {
        log::warn!("{} {:?}: {} images, full split has {expected}", ds.name, ds.split, ds.len());
    }
}

/// Loads a named dataset below `root`, or a dataset directory / manifest
/// given by path.
///
/// Layouts: `mnist/` and `kmnist/` hold `{train,t10k}-{images-idx3,labels-idx1}-ubyte`;
/// `emnist/` holds `emnist-balanced-{train,test}-...`; `omniglot/` and
/// `quickdraw/` hold `{train,test}.tsv` manifests or `{train,test}/` PNG
/// folders.
pub fn load_dataset(name: &str, root: Option<&Path>, split: Split, workers: usize) -> Result<ImageDataset, DataError> {
    let direct = Path::new(name);
    if direct.is_file() {
        return load_manifest(name, split, direct, false, workers);
    }
    if direct.is_dir() {
        let m = direct.join("manifest.tsv");
        return if m.is_file() {
            load_manifest(name, split, &m, false, workers)
        } else {
            load_png_folder(name, split, direct, false, workers)
        };
    }
    let root = root.ok_or_else(|| DataError::Missing(format!("{name} (no data root given)")))?;
    let base = root.join(name);
    let (tr, full) = match split {
        Split::Train => ("train", [60_000, 112_800]),
        Split::Test => ("t10k", [10_000, 18_800]),
    };
    let need = |p: PathBuf| if p.is_file() { Ok(p) } else { Err(DataError::Missing(p.display().to_string())) };
    match name {
        "mnist" | "kmnist" => {
            let imgs = need(base.join(format!("{tr}-images-idx3-ubyte")))?;
            let labs = base.join(format!("{tr}-labels-idx1-ubyte"));
            let ds = load_idx_dataset(name, split, &imgs, labs.is_file().then_some(labs.as_path()), false, false)?;
            check_count(&ds, full[0]);
            Ok(ds)
        }
        "emnist" => {
            let s = if split == Split::Train { "train" } else { "test" };
            let imgs = need(base.join(format!("emnist-balanced-{s}-images-idx3-ubyte")))?;
            let labs = base.join(format!("emnist-balanced-{s}-labels-idx1-ubyte"));
            let ds = load_idx_dataset(name, split, &imgs, labs.is_file().then_some(labs.as_path()), false, true)?;
            check_count(&ds, full[1]);
            Ok(ds)
        }
        "omniglot" | "quickdraw" => {
            let invert = name == "omniglot";
            let s = if split == Split::Train { "train" } else { "test" };
            let manifest = base.join(format!("{s}.tsv"));
            if manifest.is_file() {
                return load_manifest(name, split, &manifest, invert, workers);
            }
            let dir = base.join(s);
            if dir.is_dir() {
                return load_png_folder(name, split, &dir, invert, workers);
            }
            Err(DataError::Missing(format!("{} or {}", manifest.display(), dir.display())))
        }
        _ => Err(DataError::Missing(name.into())),
    }
}
