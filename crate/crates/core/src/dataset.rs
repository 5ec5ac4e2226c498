//! On-disk datasets and batch iteration.
//!
//! Layout under a root directory:
//!
//! ```text
//! manifest.txt      key=value header, blank line, one frame id per line
//! rgb/<id>.ppm
//! depth/<id>.pgm
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::image::Frame;
use crate::pnm::{self, DEFAULT_DEPTH_SCALE};
use crate::sampling::Normalization;
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split '{other}' (expected train, test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: Split,
    /// On-disk depth units per meter.
    pub depth_scale: f64,
    pub normalization: Normalization,
    pub ids: Vec<String>,
}

fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("rgb").join(format!("{id}.ppm"))
}

fn depth_path(root: &Path, id: &str) -> PathBuf {
    root.join("depth").join(format!("{id}.pgm"))
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let nums: Vec<f64> = v
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{key}: '{t}': {e}"))))
        .collect::<Result<_>>()?;
    nums.try_into()
        .map_err(|n: Vec<f64>| Error::Parse(format!("{key} needs 3 numbers, got {}", n.len())))
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, normalization: Normalization, ids: Vec<String>) -> Self {
        Manifest {
            root: root.into(),
            split,
            depth_scale: DEFAULT_DEPTH_SCALE,
            normalization,
            ids,
        }
    }

    pub fn to_text(&self) -> String {
        let n = &self.normalization;
        let mut s = format!(
            "split={}\ndepth_scale={}\nmean={} {} {}\nstd={} {} {}\n\n",
            self.split, self.depth_scale, n.mean[0], n.mean[1], n.mean[2], n.std[0], n.std[1], n.std[2]
        );
        for id in &self.ids {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut m = Manifest::new(root, Split::Train, Normalization::default(), Vec::new());
        let mut lines = text.lines();
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("manifest header line '{line}' is not key=value")))?;
            match k.trim() {
                "split" => m.split = v.trim().parse()?,
                "depth_scale" => {
                    m.depth_scale = v.trim().parse().map_err(|e| Error::Parse(format!("depth_scale: {e}")))?;
                }
                "mean" => m.normalization.mean = parse_triple("mean", v)?,
                "std" => m.normalization.std = parse_triple("std", v)?,
                other => return Err(Error::Parse(format!("unknown manifest key '{other}'"))),
            }
        }
        m.ids = lines.map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if !(m.depth_scale > 0.0) {
            return invalid(format!("depth_scale must be positive, got {}", m.depth_scale));
        }
        m.normalization.validate()?;
        Ok(m)
    }

    /// Reads `<root>/manifest.txt` and checks that every frame exists.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let m = Manifest::parse(root, &text)?;
        for id in &m.ids {
            for p in [rgb_path(root, id), depth_path(root, id)] {
                if !p.is_file() {
                    return Err(Error::MissingFrame {
                        id: id.clone(),
                        path: p.display().to_string(),
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }

    pub fn write_frame(&self, frame: &Frame) -> Result<()> {
        write_frame(&self.root, frame, self.depth_scale)
    }

    pub fn read_frame(&self, id: &str) -> Result<Frame> {
        read_frame(&self.root, id, self.depth_scale)
    }

    /// Loads every listed frame.
    pub fn load_all(&self) -> Result<InMemoryDataset> {
        let frames = self.ids.iter().map(|id| self.read_frame(id)).collect::<Result<_>>()?;
        Ok(InMemoryDataset::new(frames))
    }
}

pub fn write_frame(root: &Path, frame: &Frame, depth_scale: f64) -> Result<()> {
    fs::create_dir_all(root.join("rgb"))?;
    fs::create_dir_all(root.join("depth"))?;
    pnm::write_ppm(&rgb_path(root, &frame.id), &frame.rgb)?;
    pnm::write_depth_pgm(&depth_path(root, &frame.id), &frame.depth, depth_scale)
}

pub fn read_frame(root: &Path, id: &str, depth_scale: f64) -> Result<Frame> {
    let (rp, dp) = (rgb_path(root, id), depth_path(root, id));
    for p in [&rp, &dp] {
        if !p.is_file() {
            return Err(Error::MissingFrame {
                id: id.to_string(),
                path: p.display().to_string(),
            });
        }
    }
    Frame::new(id, pnm::read_ppm(&rp)?, pnm::read_depth_pgm(&dp, depth_scale)?)
}

/// Anything that can hand out frames by index.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn frame(&self, index: usize) -> Result<Frame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for Manifest {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        read_frame(&self.root, &self.ids[index], self.depth_scale)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InMemoryDataset {
    frames: Vec<Frame>,
}

impl InMemoryDataset {
    pub fn new(frames: Vec<Frame>) -> Self {
        InMemoryDataset { frames }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Splits off the last `count` frames.
    pub fn split_tail(mut self, count: usize) -> (InMemoryDataset, InMemoryDataset) {
        let at = self.frames.len().saturating_sub(count);
        let tail = self.frames.split_off(at);
        (self, InMemoryDataset::new(tail))
    }
}

impl FrameSource for InMemoryDataset {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.frames[index].id
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        Ok(self.frames[index].clone())
    }
}

/// Frame indices for each batch of one epoch: a seeded permutation cut into
/// chunks of `batch_size`; the last chunk may be short.
pub fn batch_order(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return invalid("batch_size must be at least 1");
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::stream(shuffle_seed, &[0x5a0ff1e, epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over the batches of one epoch, loading frames lazily.
pub struct Batches<'a, S: FrameSource + ?Sized> {
    source: &'a S,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl<S: FrameSource + ?Sized> Iterator for Batches<'_, S> {
    type Item = Result<Vec<Frame>>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        Some(idx.into_iter().map(|i| self.source.frame(i)).collect())
    }
}

pub fn iterate_batches<S: FrameSource + ?Sized>(
    source: &S,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<Batches<'_, S>> {
    Ok(Batches {
        source,
        order: batch_order(source.len(), batch_size, shuffle_seed, epoch)?.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    #[test]
    fn batch_sizes_and_coverage() {
        let b = batch_order(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batch_order(10, 4, 1, 0).unwrap());
        assert_ne!(b, batch_order(10, 4, 1, 1).unwrap());
        assert!(batch_order(3, 0, 0, 0).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest::new(
            "/x",
            Split::Test,
            Normalization {
                mean: [0.1, 0.2, 0.30000000000000004],
                std: [1.0, 2.0, 3.0],
            },
            vec!["a".into(), "b_2".into()],
        );
        assert_eq!(Manifest::parse("/x", &m.to_text()).unwrap(), m);
        assert!(Manifest::parse("/x", "split=dev\n\na\n").is_err());
        assert!(Manifest::parse("/x", "colour=1\n\n").is_err());
        assert!(Manifest::parse("/x", "mean=1 2\n\n").is_err());
    }

    #[test]
    fn disk_round_trip_and_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3).map(|s| generate_scene(s, 16, 20, 3).unwrap()).collect();
        let m = Manifest::new(dir.path(), Split::Train, Normalization::default(), frames.iter().map(|f| f.id.clone()).collect());
        for f in &frames {
            m.write_frame(f).unwrap();
        }
        m.save().unwrap();
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let back = loaded.frame(1).unwrap();
        let orig = &frames[1];
        for (a, b) in back.depth.as_slice().iter().zip(orig.depth.as_slice()) {
            assert!((a - b).abs() <= 0.0005 + 1e-12);
        }
        for (a, b) in back.rgb.as_slice().iter().zip(orig.rgb.as_slice()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let batches: Vec<_> = iterate_batches(&loaded, 2, 0, 0).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 2);

        fs::remove_file(dir.path().join("depth").join(format!("{}.pgm", frames[2].id))).unwrap();
        match Manifest::load(dir.path()) {
            Err(Error::MissingFrame { id, .. }) => assert_eq!(id, frames[2].id),
            other => panic!("expected missing frame, got {other:?}"),
        }
        let err = iterate_batches(&m, 3, 0, 0).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, Error::MissingFrame { .. }));
    }
}
