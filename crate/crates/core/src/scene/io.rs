//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<id>.pgm       16-bit binary PGM, big-endian samples
//! <dir>/train.csv, test.csv   image_id,x,y (one row per target)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scene, SceneKnobs};
use crate::error::{Error, Result};
use crate::nn::TensorF;

pub const MANIFEST_FORMAT: &str = "spire-dataset-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn annotation_file(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        }
    }
}

/// An image with its point annotations, as used for training and inference.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `1×H×W`, values in `[0, 1]`.
    pub image: TensorF,
    pub centroids: Vec<(f64, f64)>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub split: Split,
    pub file: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_targets: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub master_seed: u64,
    pub knobs: SceneKnobs,
    /// Effective run configuration echoed by the writer.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!("unknown manifest format {:?}", m.format)));
        }
        Ok(m)
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &ManifestImage> {
        self.images.iter().filter(move |i| i.split == split)
    }
}

pub fn write_pgm(path: &Path, image: &TensorF) -> Result<()> {
    let (h, w) = match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
        _ => return Err(Error::Shape(format!("cannot write {:?} as PGM", image.shape()))),
    };
    let mut buf = format!("P5\n{w} {h}\n65535\n").into_bytes();
    buf.reserve(2 * w * h);
    for &v in image.data() {
        let q = (65535.0 * v.clamp(0.0, 1.0) as f64).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary (P5) PGM into a `1×H×W` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<TensorF> {
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(corrupt("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(corrupt("bad header values"));
    }
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * bps {
        return Err(corrupt("pixel data length does not match header"));
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<f32> = if bps == 2 {
        body.chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 * scale) as f32)
            .collect()
    } else {
        body.iter().map(|&b| (b as f64 * scale) as f32).collect()
    };
    TensorF::from_vec(&[1, h, w], data)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    image_id: String,
    x: f64,
    y: f64,
}

/// Writes `image_id,x,y` rows with 6-decimal fixed point.
pub fn write_annotations<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a [(f64, f64)])>,
) -> Result<()> {
    let mut out = String::from("image_id,x,y\n");
    for (id, pts) in rows {
        for (x, y) in pts {
            out.push_str(&format!("{id},{x:.6},{y:.6}\n"));
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Groups annotation rows by image id, preserving file order within an image.
pub fn read_annotations(path: &Path) -> Result<HashMap<String, Vec<(f64, f64)>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "x", "y"] {
        return Err(Error::Data(format!(
            "{}: expected header image_id,x,y",
            path.display()
        )));
    }
    let mut out: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for row in rdr.deserialize() {
        let r: AnnotationRow = row?;
        out.entry(r.image_id).or_default().push((r.x, r.y));
    }
    Ok(out)
}

/// Writes scenes (with ids and splits) plus manifest under `dir`.
pub fn write_dataset(
    dir: &Path,
    scenes: &[(String, Split, Scene)],
    master_seed: u64,
    knobs: &SceneKnobs,
    config: BTreeMap<String, String>,
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    let mut images = Vec::with_capacity(scenes.len());
    for (id, split, scene) in scenes {
        let file = format!("images/{id}.pgm");
        write_pgm(&dir.join(&file), &scene.image)?;
        images.push(ManifestImage {
            id: id.clone(),
            split: *split,
            file,
            seed: scene.spec.seed,
            width: scene.spec.width,
            height: scene.spec.height,
            num_targets: scene.centroids.len(),
            noise_sigma: scene.spec.noise_sigma,
        });
    }
    for split in [Split::Train, Split::Test] {
        let rows = scenes
            .iter()
            .filter(|(_, s, _)| *s == split)
            .map(|(id, _, sc)| (id.as_str(), sc.centroids.as_slice()));
        write_annotations(&dir.join(split.annotation_file()), rows)?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        master_seed,
        knobs: knobs.clone(),
        config,
        images,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads every image and annotation listed in `<dir>/manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(&dir.join("manifest.json"))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for split in [Split::Train, Split::Test] {
        let path = dir.join(split.annotation_file());
        let mut ann = read_annotations(&path)?;
        for img in manifest.images_in(split) {
            let image = read_pgm(&dir.join(&img.file))?;
            if image.shape() != [1, img.height, img.width] {
                return Err(Error::Data(format!("{}: size differs from manifest", img.file)));
            }
            let centroids = ann.remove(&img.id).unwrap_or_default();
            if centroids.len() != img.num_targets {
                return Err(Error::Data(format!(
                    "image {}: manifest lists {} targets, annotations have {}",
                    img.id,
                    img.num_targets,
                    centroids.len()
                )));
            }
            let sample = Sample {
                id: img.id.clone(),
                image,
                centroids,
            };
            match split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        if let Some(id) = ann.keys().min() {
            return Err(Error::Data(format!(
                "{}: annotations reference image {id:?} missing from the manifest",
                path.display()
            )));
        }
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = TensorF::from_fn(&[1, 3, 5], |i| i as f32 / 14.0);
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n65535\n"));
        assert_eq!(bytes.len(), 13 + 30);
        // Last sample is 1.0 -> 0xFFFF big-endian.
        assert_eq!(&bytes[bytes.len() - 2..], &[0xFF, 0xFF]);
        let back = read_pgm(&p).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn pgm_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        fs::write(&p, b"P5\n4 4\n65535\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Corrupt(_))));
        fs::write(&p, b"P2\n1 1\n255\n7").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn annotations_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let pts = [(1.0, 2.5), (10.1234567, 3.0)];
        write_annotations(&p, [("img", &pts[..])]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "image_id,x,y\nimg,1.000000,2.500000\nimg,10.123457,3.000000\n");
        let back = read_annotations(&p).unwrap();
        assert_eq!(back["img"].len(), 2);
    }
}
